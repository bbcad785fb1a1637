#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ipstor/channel.hpp"
#include "ipstor/pdu.hpp"
#include "ipstor/store.hpp"

namespace ipstor {

struct ChapCredentials
{
    std::string user;
    std::string secret;
};

inline constexpr std::size_t kChapChallengeSize = 16;

/// CHAP response: SHA-256(secret || challenge).
Bytes chap_response(std::string_view secret, ByteView challenge);

struct LunConfig
{
    std::uint32_t id = 0;
    std::uint64_t blocks = 0;
    std::optional<std::string> file; // in-memory when empty
};

struct TargetConfig
{
    std::string target_name = "iqn.2025-01.lab:disk0"; // empty: no targets to discover
    Endpoint listen{"0.0.0.0", 3260};
    std::vector<LunConfig> luns;
    std::optional<ChapCredentials> chap;
    std::uint32_t max_recv_data_segment = kDefaultMaxRecvDataSegment;

    /// Throws UsageError.
    void validate() const;

    /// `key = value` lines, '#' starts a comment. Keys: target_name, listen,
    /// lun.N.blocks, lun.N.file, chap.user, chap.secret,
    /// max_recv_data_segment. Throws UsageError.
    static TargetConfig parse(std::string_view text);
    static TargetConfig load(const std::filesystem::path& path);
};

enum class SessionPhase { AwaitingLogin, Discovery, FullFeature, LoggedOut };

const char* phase_name(SessionPhase phase);

/// Target half of one iSCSI session: a PDU-in, PDUs-out state machine with no
/// I/O of its own. Throws ProtocolError on anything that must drop the
/// connection.
class TargetSession
{
public:
    using RandomSource = std::function<void(std::uint8_t*, std::size_t)>;

    struct Outcome
    {
        std::vector<Pdu> responses;
        bool close = false;
    };

    TargetSession(const TargetConfig& config, std::map<std::uint32_t, std::shared_ptr<BlockStore>> luns,
                  std::string portal_address, RandomSource random);

    Outcome on_pdu(const Pdu& pdu);

    SessionPhase phase() const { return phase_; }
    std::uint32_t stat_sn() const { return stat_sn_; }
    std::uint32_t exp_cmd_sn() const { return exp_cmd_sn_; }
    std::uint32_t max_data_segment() const { return max_data_segment_; }
    const std::string& peer_name() const { return peer_name_; }

private:
    struct PendingWrite
    {
        std::uint64_t expected = 0;
        Bytes data;
        bool final_seen = false;
    };

    void handle_login(const Pdu& pdu, Outcome& out);
    void handle_data_out(const Pdu& pdu);
    void drain(Outcome& out);
    void execute(const Pdu& pdu, Outcome& out);
    void handle_text(const Pdu& pdu, Outcome& out);
    void handle_cmd(const Pdu& pdu, Outcome& out);
    void handle_nop(const Pdu& pdu, Outcome& out);
    void handle_logout(const Pdu& pdu, Outcome& out);

    Bhs response_header(Opcode op, const Bhs& request, bool status_bearing);
    Pdu check_condition(const Bhs& request, std::uint8_t sense_key, std::uint8_t asc);
    Pdu login_reject(const Bhs& request, std::uint8_t status_class, std::uint8_t detail);

    const TargetConfig& config_;
    std::map<std::uint32_t, std::shared_ptr<BlockStore>> luns_;
    std::string portal_address_;
    RandomSource random_;

    SessionPhase phase_ = SessionPhase::AwaitingLogin;
    std::uint32_t exp_cmd_sn_ = 0;
    std::uint32_t stat_sn_ = 1;
    std::uint32_t max_data_segment_ = kDefaultMaxRecvDataSegment;
    std::string peer_name_;
    SessionPhase login_goal_ = SessionPhase::FullFeature;
    std::optional<Bytes> chap_challenge_;
    std::uint8_t chap_id_ = 0;

    std::map<std::uint32_t, Pdu> held_;                // commands by cmd_sn
    std::map<std::uint32_t, PendingWrite> writes_;     // write data by task tag
};

/// The storage server: one TargetSession per accepted connection.
class Target
{
public:
    /// Creates the backing stores; throws StartupError.
    explicit Target(TargetConfig config);
    ~Target();

    Target(const Target&) = delete;
    Target& operator=(const Target&) = delete;

    /// Listens on config.listen; throws StartupError.
    void start(Network& network, ChannelOptions options);

    /// Stops accepting, closes every connection and flushes the stores.
    void stop();

    Endpoint bound() const;

    /// Connections that are logged in or logging in.
    std::size_t active_sessions() const;

    /// Connections accepted since start().
    std::size_t total_connections() const { return accepted_; }

    std::shared_ptr<BlockStore> store(std::uint32_t lun) const;
    const TargetConfig& config() const { return config_; }

private:
    struct Connection;

    void accept(std::unique_ptr<Channel> channel);
    void reap();

    TargetConfig config_;
    std::map<std::uint32_t, std::shared_ptr<BlockStore>> stores_;
    std::unique_ptr<Listener> listener_;
    TargetSession::RandomSource random_;

    mutable std::mutex mutex_;
    std::vector<std::unique_ptr<Connection>> connections_;
    std::atomic<std::size_t> accepted_{0};
};

} // namespace ipstor
