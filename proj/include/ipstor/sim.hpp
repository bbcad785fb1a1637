#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <queue>
#include <string>
#include <vector>

#include "ipstor/channel.hpp"

namespace ipstor {

/// Single-threaded discrete-event loop over an integer nanosecond clock.
/// Events at equal times run in posting order.
class EventLoop
{
public:
    std::int64_t now() const { return now_; }

    void post(std::int64_t at, std::function<void()> fn);

    /// Runs the earliest event; false when the queue is empty.
    bool run_one();

    void run();

    bool idle() const { return queue_.empty(); }

private:
    struct Event
    {
        std::int64_t at;
        std::uint64_t seq;
        std::function<void()> fn;
    };
    struct Later
    {
        bool operator()(const Event& a, const Event& b) const
        {
            return a.at != b.at ? a.at > b.at : a.seq > b.seq;
        }
    };

    std::int64_t now_ = 0;
    std::uint64_t next_seq_ = 0;
    std::priority_queue<Event, std::vector<Event>, Later> queue_;
};

/// Test hook applied to every packet put on a simulated wire. Return the
/// packets to deliver instead: none drops it, two replays it.
using PacketFilter = std::function<std::vector<Bytes>(Bytes packet, Direction direction)>;

/// In-memory network on a virtual clock.
///
/// Timing per direction: a packet waits for the sender's crypto pipeline
/// (seal costs), then for the link to be free (wire_len * 8 / bandwidth),
/// travels one_way_delay, then waits for the receiver's crypto pipeline
/// (open costs) before delivery. Frames are captured at the initiator host:
/// outbound when they enter the wire, inbound when they arrive.
class SimNetwork final : public Network
{
public:
    explicit SimNetwork(std::string client_host = "192.168.2.2", std::uint16_t first_port = 50387);
    ~SimNetwork() override;

    std::unique_ptr<Listener> listen(const Endpoint& address, ChannelOptions options,
                                     AcceptHandler on_accept) override;
    std::unique_ptr<Channel> connect(const Endpoint& portal, ChannelOptions options) override;
    bool deterministic() const override { return true; }

    EventLoop& loop() { return loop_; }

    void set_filter(PacketFilter filter) { filter_ = std::move(filter); }
    const PacketFilter& filter() const { return filter_; }

    /// Runs queued events until none remain.
    void run() { loop_.run(); }

private:
    struct Entry
    {
        ChannelOptions options;
        AcceptHandler on_accept;
    };
    class SimListener;

    EventLoop loop_;
    std::string client_host_;
    std::uint16_t next_port_;
    std::map<Endpoint, std::shared_ptr<Entry>> listeners_;
    PacketFilter filter_;
};

} // namespace ipstor
