#pragma once

#include <chrono>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ipstor/bytes.hpp"
#include "ipstor/endpoint.hpp"
#include "ipstor/security.hpp"

namespace ipstor {

class Trace;

enum class Direction {
    InitiatorToTarget,
    TargetToInitiator,
};

/// Annotation for one application write. The frame that completes the write
/// carries `info`; the task tag is attached to its first or last frame.
struct SendMeta
{
    enum class TagOn { None, First, Last };

    std::string info;
    std::optional<std::uint32_t> task_tag;
    TagOn tag_on = TagOn::None;
    // Application payload byte range within the write, counted as goodput.
    std::size_t payload_begin = 0;
    std::size_t payload_end = std::numeric_limits<std::size_t>::max();
};

/// One packet on the link, plus the bookkeeping the simulated link and the
/// tracer need.
struct WirePacket
{
    Bytes bytes;
    std::uint32_t payload_len = 0;
    std::vector<std::size_t> seal_units; // plaintext sizes sealed before this packet can leave
    std::vector<std::size_t> open_units; // plaintext sizes opened once this packet arrives
    std::string protocol;
    std::string info;
    std::optional<std::uint32_t> task_tag;
};

class PacketSink
{
public:
    virtual ~PacketSink() = default;
    virtual void on_packet(Bytes packet) = 0;
    virtual void on_eof() = 0;
};

/// Carries wire packets between two endpoints. Implementations own timing
/// (virtual or wall clock) and frame capture.
class Link
{
public:
    virtual ~Link() = default;

    virtual void transmit(std::vector<WirePacket> packets) = 0;

    /// Half-close: the peer sees end-of-stream after the packets in flight.
    virtual void close() = 0;

    /// Pull mode: blocks until at least one inbound event was handled.
    /// Returns false when nothing further can arrive.
    virtual bool pump() = 0;

    virtual std::int64_t now_ns() const = 0;

    /// In push mode inbound packets are delivered without pump() calls.
    virtual void attach(PacketSink* sink, bool push) = 0;

    virtual Endpoint local() const = 0;
    virtual Endpoint remote() const = 0;
};

struct ChannelOptions
{
    SecurityMode mode = SecurityMode::Plain;
    LinkParams link;
    CryptoCostModel costs;
    Bytes psk;                       // 32 bytes, PacketLayer only
    std::optional<std::uint64_t> seed; // deterministic handshake randomness when set
    std::shared_ptr<Trace> trace;
    std::chrono::milliseconds receive_timeout{30000};
};

/// Reliable, ordered byte stream over a Link with the configured security
/// overlay. Bytes handed to send() on one side come out of receive() (or the
/// push receiver) on the other side unchanged in every mode.
class Channel final : private PacketSink
{
public:
    enum class Role { Initiator, Target };

    struct Receiver
    {
        std::function<void(ByteView)> on_data;
        // Null on orderly end-of-stream, the failure otherwise.
        std::function<void(std::exception_ptr)> on_close;
    };

    Channel(std::unique_ptr<Link> link, ChannelOptions options, Role role);
    ~Channel() override;

    Channel(const Channel&) = delete;
    Channel& operator=(const Channel&) = delete;

    /// Initiator side of the record-layer handshake; a no-op otherwise and
    /// once established. Runs in pull mode.
    void handshake();

    void send(ByteView data, const SendMeta& meta = {});

    /// Pull mode: blocks until bytes are available and returns all of them.
    /// Returns an empty buffer at end-of-stream; rethrows a stored failure.
    Bytes receive();

    /// Switches to push mode.
    void set_receiver(Receiver receiver);

    void close();

    bool is_open() const;
    bool established() const;
    std::int64_t now_ns() const;
    double now() const { return static_cast<double>(now_ns()) / 1e9; }
    SecurityMode mode() const { return options_.mode; }
    Role role() const { return role_; }
    Endpoint local() const { return link_->local(); }
    Endpoint remote() const { return link_->remote(); }

private:
    void on_packet(Bytes packet) override;
    void on_eof() override;

    void handle_packet(const Bytes& packet);
    void handle_record_stream(bool push_flag);
    void deliver(ByteView data);
    void fail(std::exception_ptr error);
    void send_handshake_message(const Bytes& message);

    std::vector<WirePacket> build_plain(ByteView data, const SendMeta& meta);
    std::vector<WirePacket> build_record(ByteView data, const SendMeta& meta);
    std::vector<WirePacket> build_esp(ByteView data, const SendMeta& meta);
    WirePacket tcp_packet(ByteView payload, std::uint8_t flags);

    std::unique_ptr<Link> link_;
    ChannelOptions options_;
    Role role_;
    Endpoint local_;
    Endpoint remote_;

    mutable std::recursive_mutex mutex_;

    // send side
    std::uint32_t tcp_seq_ = 0;
    std::uint16_t ip_id_ = 0;
    std::uint64_t record_send_seq_ = 0;
    std::uint32_t esp_send_seq_ = 0;
    std::optional<EspKeys> esp_send_;

    // receive side
    Bytes stream_;
    std::uint64_t record_recv_seq_ = 0;
    std::optional<EspKeys> esp_recv_;
    ReplayWindow replay_;

    std::unique_ptr<RecordHandshake> handshake_;
    std::size_t handshake_messages_ = 0;

    Bytes inbox_;
    std::optional<Receiver> receiver_;
    bool closed_ = false;
    bool peer_closed_ = false;
    std::exception_ptr error_;
};

class Listener
{
public:
    virtual ~Listener() = default;
    virtual Endpoint bound() const = 0;
    virtual void close() = 0;
};

using AcceptHandler = std::function<void(std::unique_ptr<Channel>)>;

/// Transport factory: the deterministic in-memory simulator or real TCP.
class Network
{
public:
    virtual ~Network() = default;

    /// Throws StartupError when the address cannot be bound.
    virtual std::unique_ptr<Listener> listen(const Endpoint& address, ChannelOptions options,
                                             AcceptHandler on_accept) = 0;

    /// Throws TransportError when nothing listens at `portal`.
    virtual std::unique_ptr<Channel> connect(const Endpoint& portal, ChannelOptions options) = 0;

    virtual bool deterministic() const = 0;
};

/// 32-byte pre-shared secret from $IPSTOR_PSK (hex), if set. Throws
/// UsageError when the variable is malformed.
std::optional<Bytes> psk_from_environment();

/// Fallback secret derived from a seed.
Bytes default_psk(std::uint64_t seed);

} // namespace ipstor
