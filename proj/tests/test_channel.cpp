#include <catch_amalgamated.hpp>

#include <condition_variable>
#include <mutex>
#include <numeric>

#include "ipstor/error.hpp"
#include "ipstor/security.hpp"
#include "ipstor/sim.hpp"
#include "ipstor/tcp.hpp"
#include "ipstor/trace.hpp"
#include "support.hpp"

using namespace ipstor;
using support::channel_options;
using support::ideal_link;

namespace {

const Endpoint kPortal{"192.168.2.1", 3260};

struct SimPair
{
    SimNetwork net;
    std::unique_ptr<Listener> listener;
    std::unique_ptr<Channel> server;
    std::unique_ptr<Channel> client;

    SimPair(const ChannelOptions& server_opts, const ChannelOptions& client_opts)
    {
        listener = net.listen(kPortal, server_opts, [this](std::unique_ptr<Channel> ch) { server = std::move(ch); });
        client = net.connect(kPortal, client_opts);
        REQUIRE(server);
    }

    explicit SimPair(const ChannelOptions& opts) : SimPair(opts, opts) {}
};

Bytes receive_exactly(Channel& ch, std::size_t n)
{
    Bytes out;
    while (out.size() < n) {
        Bytes chunk = ch.receive();
        if (chunk.empty())
            break;
        out.insert(out.end(), chunk.begin(), chunk.end());
    }
    return out;
}

// Independent recomputation of the overhead formulas, one packet at a time.
std::uint64_t wire_oracle(SecurityMode mode, std::uint64_t s)
{
    auto segments = [](std::uint64_t stream) {
        std::uint64_t total = 0;
        while (stream > 0) {
            const std::uint64_t take = std::min<std::uint64_t>(stream, 1460);
            total += take + 40;
            stream -= take;
        }
        return total;
    };
    switch (mode) {
    case SecurityMode::Plain: return segments(s);
    case SecurityMode::RecordLayer: {
        std::uint64_t stream = 0;
        for (std::uint64_t left = s; left > 0;) {
            const std::uint64_t take = std::min<std::uint64_t>(left, 16384);
            stream += 5 + take + 16;
            left -= take;
        }
        return segments(stream);
    }
    case SecurityMode::PacketLayer: {
        std::uint64_t total = 0;
        for (std::uint64_t left = s; left > 0;) {
            const std::uint64_t take = std::min<std::uint64_t>(left, 1418);
            std::uint64_t enc = 20 + take + 2;
            while (enc % 16 != 0)
                ++enc;
            total += 20 + 8 + 16 + enc + 16;
            left -= take;
        }
        return total;
    }
    }
    return 0;
}

std::uint64_t trace_wire_total(const Trace& trace)
{
    std::uint64_t total = 0;
    for (const auto& r : trace.snapshot())
        total += r.wire_len;
    return total;
}

RecordKeys test_record_keys()
{
    RecordKeys k;
    for (std::size_t i = 0; i < k.key.size(); ++i)
        k.key[i] = static_cast<std::uint8_t>(i * 7 + 1);
    for (std::size_t i = 0; i < k.iv.size(); ++i)
        k.iv[i] = static_cast<std::uint8_t>(0xA0 + i);
    return k;
}

Bytes inner_segment(std::size_t payload)
{
    Bytes seg(kTcpHeaderSize + payload, 0x5A);
    write_tcp_header(seg.data(), TcpHeader{50387, 3260, 1, 0, kTcpAck | kTcpPsh});
    return seg;
}

const std::array<std::uint8_t, 4> kSrcIp = {192, 168, 2, 2};
const std::array<std::uint8_t, 4> kDstIp = {192, 168, 2, 1};

} // namespace

TEST_CASE("packetize splits at mtu minus 40")
{
    CHECK(packetize({}, 1500).empty());

    const Bytes one(1460, 1);
    const auto p1 = packetize(one, 1500);
    REQUIRE(p1.size() == 1);
    CHECK(p1[0].wire_len == 1500);

    const Bytes two(1461, 2);
    const auto p2 = packetize(two, 1500);
    REQUIRE(p2.size() == 2);
    CHECK(p2[0].wire_len + p2[1].wire_len == 1541);

    support::Gen g(5);
    for (int i = 0; i < 200; ++i) {
        const Bytes data = g.bytes(g.below(20000));
        const std::uint32_t mtu = static_cast<std::uint32_t>(576 + g.below(9000));
        const auto pkts = packetize(data, mtu);
        const std::size_t seg = mtu - 40;
        REQUIRE(pkts.size() == (data.size() + seg - 1) / seg);
        Bytes joined;
        for (std::size_t j = 0; j < pkts.size(); ++j) {
            REQUIRE(pkts[j].payload.size() <= seg);
            REQUIRE(pkts[j].wire_len == pkts[j].payload.size() + 40);
            if (j > 0)
                REQUIRE(pkts[j].seq > pkts[j - 1].seq);
            joined.insert(joined.end(), pkts[j].payload.begin(), pkts[j].payload.end());
        }
        REQUIRE(joined == data);
    }
}

TEST_CASE("link parameter validation")
{
    LinkParams ok;
    CHECK_NOTHROW(ok.validate());
    LinkParams small_mtu;
    small_mtu.mtu = 575;
    CHECK_THROWS_AS(small_mtu.validate(), UsageError);
    LinkParams negative;
    negative.one_way_delay = -1;
    CHECK_THROWS_AS(negative.validate(), UsageError);
    LinkParams zero_bw;
    zero_bw.bandwidth = 0.0;
    CHECK_THROWS_AS(zero_bw.validate(), UsageError);
}

TEST_CASE("record sizes")
{
    const RecordKeys k = test_record_keys();
    CHECK(seal_record(Bytes(100, 1), k, 0).size() == 121);
    CHECK(seal_record(Bytes(16384, 1), k, 0).size() == 16405);
    CHECK_THROWS_AS(seal_record(Bytes(16385, 1), k, 0), std::invalid_argument);
    CHECK(record_stream_size(0) == 0);
    CHECK(record_stream_size(16385) == 16385 + 42);
}

TEST_CASE("record round trip and truncation")
{
    const RecordKeys k = test_record_keys();
    const Bytes plain = to_bytes("block storage over a record layer");
    const Bytes rec = seal_record(plain, k, 9);
    CHECK(rec[0] == 0x17);
    auto opened = open_record(rec, k, 9);
    REQUIRE(std::holds_alternative<OpenedRecord>(opened));
    CHECK(std::get<OpenedRecord>(opened).plaintext == plain);
    CHECK(std::get<OpenedRecord>(opened).consumed == rec.size());

    auto partial = open_record(ByteView(rec).first(rec.size() - 1), k, 9);
    REQUIRE(std::holds_alternative<Incomplete>(partial));
    CHECK(std::get<Incomplete>(partial).needed == rec.size());

    CHECK_THROWS_AS(open_record(rec, k, 10), IntegrityError);
}

TEST_CASE("every single-bit flip of a record is detected")
{
    const RecordKeys k = test_record_keys();
    const Bytes rec = seal_record(Bytes(64, 0x33), k, 0);
    for (std::size_t bit = 0; bit < rec.size() * 8; ++bit) {
        Bytes bad = rec;
        bad[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        bool rejected = false;
        try {
            auto r = open_record(bad, k, 0);
            // A longer declared length leaves the record truncated.
            rejected = std::holds_alternative<Incomplete>(r);
        } catch (const IntegrityError&) {
            rejected = true;
        }
        REQUIRE(rejected);
    }
}

TEST_CASE("ESP packet sizes")
{
    const Bytes psk = support::default_test_psk();
    const EspKeys keys = derive_esp_keys(psk, true);
    CHECK(seal_packet(inner_segment(100), keys, 1, kSrcIp, kDstIp).size() == 188);
    CHECK(seal_packet(inner_segment(1418), keys, 1, kSrcIp, kDstIp).size() == 1500);
    CHECK(esp_packet_size(100) == 188);
    CHECK(esp_packet_size(1418) == 1500);
    CHECK(esp_max_payload(1500) == 1418);
}

TEST_CASE("ESP open, tamper and replay")
{
    const Bytes psk = support::default_test_psk();
    const EspKeys tx = derive_esp_keys(psk, true);
    const EspKeys rx = derive_esp_keys(psk, true);
    const Bytes seg = inner_segment(300);

    ReplayWindow window;
    const Bytes p1 = seal_packet(seg, tx, 1, kSrcIp, kDstIp);
    const Bytes p2 = seal_packet(seg, tx, 2, kSrcIp, kDstIp);
    CHECK(esp_sequence(p2) == 2);
    CHECK(open_packet(p1, rx, window) == seg);
    CHECK(open_packet(p2, rx, window) == seg);
    CHECK_THROWS_AS(open_packet(p2, rx, window), ReplayError);
    CHECK_THROWS_AS(open_packet(p1, rx, window), ReplayError);

    support::Gen g(17);
    const Bytes p3 = seal_packet(seg, tx, 3, kSrcIp, kDstIp);
    for (int i = 0; i < 500; ++i) {
        Bytes bad = p3;
        const std::size_t bit = kIpHeaderSize * 8 + g.below((bad.size() - kIpHeaderSize) * 8);
        bad[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        ReplayWindow w;
        REQUIRE_THROWS_AS(open_packet(bad, rx, w), IntegrityError);
    }

    const EspKeys other = derive_esp_keys(support::default_test_psk(), false);
    ReplayWindow w2;
    CHECK_THROWS_AS(open_packet(p3, other, w2), IntegrityError);
}

TEST_CASE("wire byte fixtures")
{
    for (auto mode : {SecurityMode::Plain, SecurityMode::RecordLayer, SecurityMode::PacketLayer})
        CHECK(wire_bytes(mode, 0, 1500) == 0);
    CHECK(wire_bytes(SecurityMode::Plain, 16384, 1500) == 16864);
    CHECK(wire_bytes(SecurityMode::RecordLayer, 16384, 1500) == 16885);
    CHECK(wire_bytes(SecurityMode::PacketLayer, 16384, 1500) == 17376);
    CHECK(wire_bytes(SecurityMode::Plain, 100, 1500) == 140);
    CHECK(wire_bytes(SecurityMode::RecordLayer, 100, 1500) == 161);
    CHECK(wire_bytes(SecurityMode::PacketLayer, 100, 1500) == 188);
    CHECK(kHandshakeWireBytes == 480);
}

TEST_CASE("wire bytes agree with the per-packet oracle and keep their order")
{
    for (std::uint64_t s = 1; s <= 100000; ++s) {
        const auto plain = wire_bytes(SecurityMode::Plain, s, 1500);
        const auto record = wire_bytes(SecurityMode::RecordLayer, s, 1500);
        const auto packet = wire_bytes(SecurityMode::PacketLayer, s, 1500);
        REQUIRE(plain < record);
        REQUIRE(record < packet);
        if (s % 97 == 0 || s < 3000) {
            REQUIRE(plain == wire_oracle(SecurityMode::Plain, s));
            REQUIRE(record == wire_oracle(SecurityMode::RecordLayer, s));
            REQUIRE(packet == wire_oracle(SecurityMode::PacketLayer, s));
        }
    }
}

TEST_CASE("handshake derives matching keys")
{
    std::mt19937_64 rng(1);
    auto random = [&rng](std::uint8_t* out, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i)
            out[i] = static_cast<std::uint8_t>(rng());
    };
    RecordHandshake client(RecordHandshake::Role::Client, random);
    RecordHandshake server(RecordHandshake::Role::Server, random);
    const Bytes ch = client.start();
    CHECK(ch.size() == 64);
    auto sh = server.on_message(ch);
    REQUIRE(sh);
    CHECK(sh->size() == 128);
    auto cf = client.on_message(*sh);
    REQUIRE(cf);
    CHECK(cf->size() == 80);
    auto sf = server.on_message(*cf);
    REQUIRE(sf);
    CHECK(sf->size() == 48);
    CHECK(server.established());
    CHECK_FALSE(client.on_message(*sf));
    CHECK(client.established());
    CHECK(client.send_keys().key == server.recv_keys().key);
    CHECK(client.recv_keys().key == server.send_keys().key);
    CHECK(client.send_keys().key != client.recv_keys().key);
}

TEST_CASE("tampered handshake is refused")
{
    std::mt19937_64 rng(2);
    auto random = [&rng](std::uint8_t* out, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i)
            out[i] = static_cast<std::uint8_t>(rng());
    };
    RecordHandshake client(RecordHandshake::Role::Client, random);
    RecordHandshake server(RecordHandshake::Role::Server, random);
    auto sh = server.on_message(client.start());
    REQUIRE(sh);
    Bytes bad = *sh;
    bad.back() ^= 1;
    // The client only notices through the transcript, so the server refuses its Finished.
    auto cf = client.on_message(bad);
    REQUIRE(cf);
    CHECK_THROWS_AS(server.on_message(*cf), HandshakeError);

    RecordHandshake client2(RecordHandshake::Role::Client, random);
    client2.start();
    Bytes wrong_type = *sh;
    wrong_type[0] ^= 0x40;
    CHECK_THROWS_AS(client2.on_message(wrong_type), HandshakeError);
}

TEST_CASE("plain echo round trip is twice the one-way delay")
{
    SimPair pair(channel_options(SecurityMode::Plain, ideal_link(0.0005)));
    pair.server->set_receiver({[&](ByteView data) { pair.server->send(data); }, nullptr});
    pair.client->send(Bytes(48, 0));
    const Bytes echo = receive_exactly(*pair.client, 48);
    CHECK(echo.size() == 48);
    CHECK(pair.client->now_ns() == 1'000'000);
}

TEST_CASE("bandwidth delays a full packet")
{
    LinkParams link = ideal_link(0.0);
    link.bandwidth = 8e6;
    SimPair pair(channel_options(SecurityMode::Plain, link));
    std::int64_t arrival = -1;
    pair.server->set_receiver({[&](ByteView) { arrival = pair.server->now_ns(); }, nullptr});
    pair.client->send(Bytes(1460, 1));
    pair.net.run();
    CHECK(arrival == 1'500'000);
}

TEST_CASE("packet-layer costs are charged at sealer and opener")
{
    const CryptoCostModel costs{50e-6, 0.0};
    SimPair pair(channel_options(SecurityMode::PacketLayer, ideal_link(0.0), costs));
    std::int64_t arrival = -1;
    pair.server->set_receiver({[&](ByteView data) {
                                   arrival = pair.server->now_ns();
                                   pair.server->send(data);
                               },
                               nullptr});
    pair.client->send(Bytes(48, 0));
    receive_exactly(*pair.client, 48);
    CHECK(arrival == 100'000);
    CHECK(pair.client->now_ns() == 200'000);
}

TEST_CASE("record-layer handshake completes after two round trips")
{
    const double d = 0.003;
    auto trace = std::make_shared<Trace>();
    SimPair pair(channel_options(SecurityMode::RecordLayer, ideal_link(d), {}, trace));
    pair.client->handshake();
    CHECK(pair.client->established());
    CHECK(pair.client->now_ns() == 12'000'000);

    pair.client->send(to_bytes("hello"));
    Bytes got = receive_exactly(*pair.server, 5);
    CHECK(got == to_bytes("hello"));

    const auto rows = trace->snapshot();
    REQUIRE(rows.size() == 5);
    const std::int64_t expected_times[4] = {0, 6'000'000, 6'000'000, 12'000'000};
    for (int i = 0; i < 4; ++i) {
        CHECK(rows[i].protocol == "RECORD");
        CHECK(rows[i].time_ns == expected_times[i]);
    }
    CHECK(rows[0].info.find("Client Hello") != std::string::npos);
    CHECK(rows[4].time_ns == 12'000'000);
}

TEST_CASE("plain and packet modes emit no handshake frames")
{
    for (auto mode : {SecurityMode::Plain, SecurityMode::PacketLayer}) {
        auto trace = std::make_shared<Trace>();
        SimPair pair(channel_options(mode, ideal_link(0.001), {}, trace));
        pair.client->handshake();
        pair.net.run();
        CHECK(trace->size() == 0);
    }
}

TEST_CASE("mismatched pre-shared secrets fail the first packet")
{
    ChannelOptions server_opts = channel_options(SecurityMode::PacketLayer, ideal_link(0.001));
    ChannelOptions client_opts = server_opts;
    client_opts.psk = default_psk(999);
    SimPair pair(server_opts, client_opts);
    pair.client->send(to_bytes("data"));
    CHECK_THROWS_AS(pair.server->receive(), IntegrityError);
}

TEST_CASE("single-bit tamper on the wire aborts the secure channel")
{
    support::Gen g(23);
    for (auto mode : {SecurityMode::RecordLayer, SecurityMode::PacketLayer}) {
        for (int trial = 0; trial < 40; ++trial) {
            SimPair pair(channel_options(mode, ideal_link(0.0001)));
            pair.client->handshake();
            const Bytes data = g.bytes(1 + g.below(40000));
            const std::size_t packets = mode == SecurityMode::RecordLayer
                                            ? (record_stream_size(data.size()) + 1459) / 1460
                                            : (data.size() + 1417) / 1418;
            const std::size_t victim = g.below(packets);
            const std::size_t start = mode == SecurityMode::RecordLayer ? kPseudoHeaderSize : kIpHeaderSize;
            std::size_t seen = 0;
            pair.net.set_filter([&](Bytes p, Direction dir) {
                if (dir == Direction::InitiatorToTarget && seen++ == victim) {
                    const std::size_t bit = start * 8 + g.below((p.size() - start) * 8);
                    p[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
                }
                return std::vector<Bytes>{std::move(p)};
            });
            pair.client->send(data);
            REQUIRE_THROWS_AS(receive_exactly(*pair.server, data.size()), IntegrityError);
        }
    }
}

TEST_CASE("replayed ESP packet is rejected")
{
    SimPair pair(channel_options(SecurityMode::PacketLayer, ideal_link(0.0001)));
    bool replayed = false;
    pair.net.set_filter([&](Bytes p, Direction dir) {
        std::vector<Bytes> out{p};
        if (dir == Direction::InitiatorToTarget && !replayed) {
            replayed = true;
            out.push_back(std::move(p));
        }
        return out;
    });
    pair.client->send(to_bytes("once"));
    CHECK_THROWS_AS(receive_exactly(*pair.server, 8), ReplayError);
}

TEST_CASE("delivered bytes are identical in every mode")
{
    support::Gen g(31);
    std::vector<Bytes> chunks;
    Bytes whole;
    for (int i = 0; i < 30; ++i) {
        chunks.push_back(g.bytes(g.below(25000)));
        whole.insert(whole.end(), chunks.back().begin(), chunks.back().end());
    }
    for (auto mode : {SecurityMode::Plain, SecurityMode::RecordLayer, SecurityMode::PacketLayer}) {
        SimPair pair(channel_options(mode, ideal_link(0.0002)));
        Bytes got;
        pair.server->set_receiver({[&](ByteView d) { got.insert(got.end(), d.begin(), d.end()); }, nullptr});
        for (const auto& c : chunks)
            pair.client->send(c);
        pair.net.run();
        CHECK(got == whole);
    }
}

TEST_CASE("trace wire bytes match the overhead formula")
{
    for (std::uint64_t s : {100ull, 16384ull, 1048576ull}) {
        for (auto mode : {SecurityMode::Plain, SecurityMode::RecordLayer, SecurityMode::PacketLayer}) {
            auto trace = std::make_shared<Trace>();
            SimPair pair(channel_options(mode, ideal_link(0.001), {}, trace));
            Bytes data(s);
            std::iota(data.begin(), data.end(), std::uint8_t{0});
            pair.client->send(data);
            CHECK(receive_exactly(*pair.server, s) == data);
            const std::uint64_t extra = mode == SecurityMode::RecordLayer ? kHandshakeWireBytes : 0;
            CHECK(trace_wire_total(*trace) == wire_oracle(mode, s) + extra);
            CHECK(trace_wire_total(*trace) == wire_bytes(mode, s, 1500) + extra);
        }
    }
}

TEST_CASE("simulated timelines are reproducible")
{
    auto run = [] {
        auto trace = std::make_shared<Trace>();
        LinkParams link = ideal_link(0.0007);
        link.bandwidth = 1e8;
        SimPair pair(channel_options(SecurityMode::RecordLayer, link, CryptoCostModel::defaults(SecurityMode::RecordLayer),
                                     trace));
        pair.server->set_receiver({[&](ByteView d) { pair.server->send(d); }, nullptr});
        pair.client->send(Bytes(70000, 9));
        receive_exactly(*pair.client, 70000);
        return trace->snapshot();
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.size() > 50);
    CHECK(a == b);
}

TEST_CASE("orderly close reaches the peer")
{
    SimPair pair(channel_options(SecurityMode::Plain, ideal_link(0.001)));
    pair.client->send(to_bytes("bye"));
    pair.client->close();
    CHECK(receive_exactly(*pair.server, 3) == to_bytes("bye"));
    CHECK(pair.server->receive().empty());
    CHECK_FALSE(pair.client->is_open());
}

TEST_CASE("sim network address errors")
{
    SimNetwork net;
    const auto opts = channel_options(SecurityMode::Plain, ideal_link());
    CHECK_THROWS_AS(net.connect(kPortal, opts), TransportError);
    auto l = net.listen(kPortal, opts, [](std::unique_ptr<Channel>) {});
    CHECK_THROWS_AS(net.listen(kPortal, opts, [](std::unique_ptr<Channel>) {}), StartupError);
    CHECK_THROWS_AS(net.listen(Endpoint{"192.168.2.1", 0}, opts, [](std::unique_ptr<Channel>) {}), StartupError);
}

TEST_CASE("event loop orders by time then posting order")
{
    EventLoop loop;
    std::string order;
    loop.post(20, [&] { order += 'c'; });
    loop.post(10, [&] { order += 'a'; });
    loop.post(10, [&] { order += 'b'; });
    loop.run();
    CHECK(order == "abc");
    CHECK(loop.now() == 20);
    CHECK(loop.idle());
}

TEST_CASE("loopback TCP carries every mode unchanged")
{
    TcpNetwork net;
    for (auto mode : {SecurityMode::Plain, SecurityMode::RecordLayer, SecurityMode::PacketLayer}) {
        const auto opts = channel_options(mode, ideal_link());
        std::mutex m;
        std::condition_variable cv;
        std::unique_ptr<Channel> server;
        Bytes got;
        auto listener = net.listen(Endpoint{"127.0.0.1", 0}, opts, [&](std::unique_ptr<Channel> ch) {
            ch->set_receiver({[&](ByteView d) {
                                  std::lock_guard lock(m);
                                  got.insert(got.end(), d.begin(), d.end());
                                  cv.notify_all();
                              },
                              nullptr});
            std::lock_guard lock(m);
            server = std::move(ch);
        });
        auto client = net.connect(listener->bound(), opts);
        const Bytes data = support::Gen(8).bytes(100000);
        client->send(data);
        {
            std::unique_lock lock(m);
            REQUIRE(cv.wait_for(lock, std::chrono::seconds(10), [&] { return got.size() >= data.size(); }));
        }
        CHECK(got == data);
        server->send(to_bytes("ack"));
        CHECK(receive_exactly(*client, 3) == to_bytes("ack"));
        client->close();
        server->close();
        listener->close();
    }
}

TEST_CASE("TCP listener on a used port fails to start")
{
    TcpNetwork net;
    const auto opts = channel_options(SecurityMode::Plain, ideal_link());
    auto first = net.listen(Endpoint{"127.0.0.1", 0}, opts, [](std::unique_ptr<Channel>) {});
    CHECK_THROWS_AS(net.listen(first->bound(), opts, [](std::unique_ptr<Channel>) {}), StartupError);
    CHECK_THROWS_AS(net.listen(Endpoint{"203.0.113.7", 3260}, opts, [](std::unique_ptr<Channel>) {}),
                    StartupError);
}
