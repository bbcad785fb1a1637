#include "ipstor/sim.hpp"

#include <algorithm>
#include <cmath>

#include "ipstor/error.hpp"
#include "ipstor/trace.hpp"

namespace ipstor {

void EventLoop::post(std::int64_t at, std::function<void()> fn)
{
    queue_.push(Event{std::max(at, now_), next_seq_++, std::move(fn)});
}

bool EventLoop::run_one()
{
    if (queue_.empty())
        return false;
    Event ev = queue_.top();
    queue_.pop();
    now_ = std::max(now_, ev.at);
    ev.fn();
    return true;
}

void EventLoop::run()
{
    while (run_one()) {
    }
}

namespace {

// Index 0 is the initiator side, 1 the target side.
struct Wire
{
    struct Pipe
    {
        std::int64_t seal_free = 0;
        std::int64_t link_free = 0;
        std::int64_t open_free = 0;
        std::int64_t last_delivery = 0;
    };
    struct Side
    {
        PacketSink* sink = nullptr;
        CryptoCostModel costs;
        bool closed = false;
    };

    SimNetwork* net = nullptr;
    LinkParams link;
    std::shared_ptr<Trace> trace;
    Endpoint endpoints[2];
    Pipe pipes[2];
    Side sides[2];
};

class SimLink final : public Link
{
public:
    SimLink(std::shared_ptr<Wire> wire, int side) : wire_(std::move(wire)), side_(side) {}

    void transmit(std::vector<WirePacket> packets) override
    {
        Wire& w = *wire_;
        EventLoop& loop = w.net->loop();
        Wire::Pipe& pipe = w.pipes[side_];
        const Wire::Side& self = w.sides[side_];
        const Wire::Side& peer = w.sides[1 - side_];
        const Direction dir = side_ == 0 ? Direction::InitiatorToTarget : Direction::TargetToInitiator;
        const std::int64_t delay = std::llround(w.link.one_way_delay * 1e9);

        for (auto& pkt : packets) {
            std::int64_t seal = 0;
            for (auto unit : pkt.seal_units)
                seal += self.costs.cost_ns(unit);
            std::int64_t open = 0;
            for (auto unit : pkt.open_units)
                open += peer.costs.cost_ns(unit);

            const std::int64_t ready = std::max(loop.now(), pipe.seal_free) + seal;
            pipe.seal_free = ready;
            const std::int64_t tx_start = std::max(ready, pipe.link_free);
            std::int64_t serialization = 0;
            if (w.link.bandwidth)
                serialization = std::llround(static_cast<double>(pkt.bytes.size()) * 8.0 * 1e9 /
                                             *w.link.bandwidth);
            const std::int64_t tx_end = tx_start + serialization;
            pipe.link_free = tx_end;
            const std::int64_t arrival = tx_end + delay;
            const std::int64_t delivery = std::max(arrival, pipe.open_free) + open;
            pipe.open_free = delivery;
            pipe.last_delivery = delivery;

            if (w.trace) {
                TraceRecord rec;
                rec.time_ns = side_ == 0 ? tx_start : arrival;
                rec.src = w.endpoints[side_].to_string();
                rec.dst = w.endpoints[1 - side_].to_string();
                rec.protocol = pkt.protocol;
                rec.info = pkt.info;
                rec.wire_len = static_cast<std::uint32_t>(pkt.bytes.size());
                rec.payload_len = pkt.payload_len;
                rec.direction = dir;
                rec.task_tag = pkt.task_tag;
                w.trace->record_frame(std::move(rec));
            }

            std::vector<Bytes> copies;
            if (const auto& filter = w.net->filter())
                copies = filter(std::move(pkt.bytes), dir);
            else
                copies.push_back(std::move(pkt.bytes));
            for (auto& bytes : copies) {
                loop.post(delivery, [wire = wire_, to = 1 - side_, b = std::move(bytes)]() mutable {
                    if (auto* sink = wire->sides[to].sink)
                        sink->on_packet(std::move(b));
                });
            }
        }
    }

    void close() override
    {
        Wire& w = *wire_;
        if (w.sides[side_].closed)
            return;
        w.sides[side_].closed = true;
        EventLoop& loop = w.net->loop();
        const std::int64_t at = std::max<std::int64_t>(loop.now() + std::llround(w.link.one_way_delay * 1e9),
                                         w.pipes[side_].last_delivery);
        loop.post(at, [wire = wire_, to = 1 - side_] {
            if (auto* sink = wire->sides[to].sink)
                sink->on_eof();
        });
    }

    bool pump() override { return wire_->net->loop().run_one(); }

    std::int64_t now_ns() const override { return wire_->net->loop().now(); }

    void attach(PacketSink* sink, bool) override { wire_->sides[side_].sink = sink; }

    Endpoint local() const override { return wire_->endpoints[side_]; }
    Endpoint remote() const override { return wire_->endpoints[1 - side_]; }

private:
    std::shared_ptr<Wire> wire_;
    int side_;
};

} // namespace

class SimNetwork::SimListener final : public Listener
{
public:
    SimListener(SimNetwork* net, Endpoint address) : net_(net), address_(std::move(address)) {}
    ~SimListener() override { close(); }

    Endpoint bound() const override { return address_; }

    void close() override
    {
        if (net_) {
            net_->listeners_.erase(address_);
            net_ = nullptr;
        }
    }

private:
    SimNetwork* net_;
    Endpoint address_;
};

SimNetwork::SimNetwork(std::string client_host, std::uint16_t first_port)
    : client_host_(std::move(client_host)), next_port_(first_port)
{}

SimNetwork::~SimNetwork() = default;

std::unique_ptr<Listener> SimNetwork::listen(const Endpoint& address, ChannelOptions options,
                                             AcceptHandler on_accept)
{
    if (address.port == 0)
        throw StartupError("simulated listener needs an explicit port");
    if (listeners_.count(address))
        throw StartupError("address already in use: " + address.to_string());
    listeners_[address] = std::make_shared<Entry>(Entry{std::move(options), std::move(on_accept)});
    return std::make_unique<SimListener>(this, address);
}

std::unique_ptr<Channel> SimNetwork::connect(const Endpoint& portal, ChannelOptions options)
{
    auto it = listeners_.find(portal);
    if (it == listeners_.end())
        throw TransportError("connection refused: " + portal.to_string());
    auto entry = it->second;

    auto wire = std::make_shared<Wire>();
    wire->net = this;
    wire->link = options.link;
    wire->trace = options.trace ? options.trace : entry->options.trace;
    wire->endpoints[0] = Endpoint{client_host_, next_port_++};
    wire->endpoints[1] = portal;
    wire->sides[0].costs = options.costs;
    wire->sides[1].costs = entry->options.costs;

    auto client = std::make_unique<Channel>(std::make_unique<SimLink>(wire, 0), std::move(options),
                                            Channel::Role::Initiator);
    auto server = std::make_unique<Channel>(std::make_unique<SimLink>(wire, 1), entry->options,
                                            Channel::Role::Target);
    entry->on_accept(std::move(server));
    return client;
}

} // namespace ipstor
