#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ipstor/channel.hpp"
#include "ipstor/pdu.hpp"
#include "ipstor/target.hpp"

namespace ipstor {

struct InitiatorConfig
{
    std::string initiator_name = "iqn.2025-01.ipstor:initiator";
    Endpoint portal{"192.168.2.1", 3260};
    std::optional<ChapCredentials> chap;
    ChannelOptions channel;
    std::uint32_t max_recv_data_segment = kDefaultMaxRecvDataSegment;

    /// Throws UsageError.
    void validate() const;
};

struct DiscoveredTarget
{
    std::string name;
    std::string address; // "host:port,tpgt"

    bool operator==(const DiscoveredTarget&) const = default;
};

/// Discovery session: login, SendTargets=All, logout. Throws TransportError
/// when the portal is unreachable and AuthFailure when CHAP fails.
std::vector<DiscoveredTarget> discover(Network& network, const InitiatorConfig& config);

/// A logged-in normal session. Synchronous: one command in flight at a time.
/// Single owner; overlapping calls from several threads throw UsageError.
class InitiatorSession
{
public:
    /// Throws AuthFailure on a CHAP failure and LoginRejected for any other
    /// login reject (e.g. unknown target name).
    static std::unique_ptr<InitiatorSession> login(Network& network, const InitiatorConfig& config,
                                                   const std::string& target_name);

    ~InitiatorSession();

    InitiatorSession(const InitiatorSession&) = delete;
    InitiatorSession& operator=(const InitiatorSession&) = delete;

    /// `data` must be a positive multiple of 512 bytes. Throws StorageError
    /// on a non-GOOD status.
    void write(std::uint32_t lun, std::uint32_t lba, ByteView data);

    Bytes read(std::uint32_t lun, std::uint32_t lba, std::uint32_t blocks);

    /// Seconds between sending the NOP-Out and receiving its NOP-In.
    double nop_ping(ByteView payload = {});

    /// A second call, or any command afterwards, throws UsageError.
    void logout();

    bool logged_in() const { return state_ == State::LoggedIn; }
    std::uint32_t max_data_segment() const { return max_data_segment_; }
    std::uint32_t next_cmd_sn() const { return cmd_sn_; }
    Channel& channel() { return *channel_; }

private:
    friend std::vector<DiscoveredTarget> discover(Network&, const InitiatorConfig&);

    enum class State { Connected, LoggedIn, LoggedOut };

    InitiatorSession(std::unique_ptr<Channel> channel, const InitiatorConfig& config);

    void do_login(const std::string& session_type, const std::string& target_name);
    TextKeys text_request(const TextKeys& keys);
    void do_logout();

    void send_pdu(const Pdu& pdu, const SendMeta& meta);
    Pdu receive_pdu();
    void check_stat_sn(const Bhs& bhs);
    Bhs request(Opcode op);
    void require_logged_in(const char* what) const;

    std::unique_ptr<Channel> channel_;
    InitiatorConfig config_;
    State state_ = State::Connected;
    Bytes rx_;
    std::uint32_t cmd_sn_ = 1;
    std::uint32_t exp_stat_sn_ = 0;
    bool stat_sn_synced_ = false;
    std::uint32_t next_itt_ = 1;
    std::uint32_t max_data_segment_ = kDefaultMaxRecvDataSegment;
    std::atomic<bool> busy_{false};
};

} // namespace ipstor
