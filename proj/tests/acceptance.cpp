// Runs the eight acceptance criteria and prints one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "ipstor/bench.hpp"
#include "ipstor/cli.hpp"
#include "ipstor/error.hpp"
#include "ipstor/initiator.hpp"
#include "ipstor/pdu.hpp"
#include "ipstor/security.hpp"
#include "ipstor/sim.hpp"
#include "ipstor/tcp.hpp"
#include "ipstor/trace.hpp"
#include "support.hpp"

using namespace ipstor;
namespace fs = std::filesystem;

namespace {

struct Failed : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what)
{
    if (!ok)
        throw Failed(what);
}

template <typename E, typename F>
void expect_throws(F&& f, const std::string& what)
{
    try {
        f();
    } catch (const E&) {
        return;
    } catch (const std::exception& e) {
        throw Failed(what + ": threw " + e.what());
    }
    throw Failed(what + ": no exception");
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

void expect_within(Clock::time_point start, double limit, const std::string& what)
{
    const double took = seconds_since(start);
    expect(took < limit, fmt::format("{} took {:.2f} s, limit {} s", what, took, limit));
}

constexpr std::array kModes = {SecurityMode::Plain, SecurityMode::RecordLayer, SecurityMode::PacketLayer};

std::uint64_t bucket_bits(const ThroughputSeries& t)
{
    std::uint64_t bits = 0;
    for (const auto& b : t.buckets)
        bits += b.bits;
    return bits;
}

void expect_conservation(const std::vector<TraceRecord>& trace, const std::string& what)
{
    std::uint64_t payload = 0;
    for (const auto& r : trace)
        payload += r.payload_len;
    const auto series = throughput_series(trace, 0.1);
    expect(bucket_bits(series) == payload * 8, what + ": bucket bits differ from payload bits");
}

struct SimPair
{
    SimNetwork net;
    std::unique_ptr<Listener> listener;
    std::unique_ptr<Channel> server;
    std::unique_ptr<Channel> client;

    explicit SimPair(const ChannelOptions& opts)
    {
        const Endpoint portal{"192.168.2.1", 3260};
        listener = net.listen(portal, opts, [this](std::unique_ptr<Channel> ch) { server = std::move(ch); });
        client = net.connect(portal, opts);
    }
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

// 1
void codec_soundness()
{
    const auto start = Clock::now();
    support::Gen g(2024);
    for (int i = 0; i < 10000; ++i) {
        const Pdu p = support::random_pdu(g);
        const Bytes wire = encode_pdu(p);
        const auto r = decode_pdu(wire, kMaxDataSegmentLength);
        expect(std::holds_alternative<Decoded>(r), fmt::format("pdu {} did not decode", i));
        expect(std::get<Decoded>(r).pdu == p && std::get<Decoded>(r).consumed == wire.size(),
               fmt::format("pdu {} changed in a round trip", i));

        const Cdb c = support::random_cdb(g);
        expect(decode_cdb(encode_cdb(c)) == c, fmt::format("cdb {} changed in a round trip", i));

        const TextKeys t = support::random_text(g);
        expect(decode_text(encode_text(t)) == t, fmt::format("text {} changed in a round trip", i));
    }
    expect_within(start, 5.0, "codec round trips");
}

// 2
void end_to_end_integrity()
{
    const Bytes data = make_workload(4u << 20, 42);
    const auto blocks = static_cast<std::uint32_t>(data.size() / 512);
    for (auto mode : kModes) {
        const auto start = Clock::now();
        support::SimRig rig(mode, support::ideal_link(0.001), support::small_target(blocks),
                            CryptoCostModel::defaults(mode));
        auto s = rig.login();
        s->write(0, 0, data);
        expect(s->read(0, 0, blocks) == data, fmt::format("mem/{} read-back differs", mode_token(mode)));
        s->logout();
        rig.net.run();
        expect_conservation(rig.trace->snapshot(), fmt::format("mem/{}", mode_token(mode)));
        expect_within(start, 5.0, fmt::format("mem/{}", mode_token(mode)));
    }
    TcpNetwork net;
    for (auto mode : kModes) {
        const auto start = Clock::now();
        TargetConfig cfg = support::small_target(blocks);
        cfg.listen = Endpoint{"127.0.0.1", support::free_tcp_port()};
        Target target(cfg);
        const ChannelOptions opts = support::channel_options(mode, support::ideal_link());
        target.start(net, opts);
        InitiatorConfig ic;
        ic.portal = target.bound();
        ic.channel = opts;
        auto s = InitiatorSession::login(net, ic, cfg.target_name);
        s->write(0, 0, data);
        expect(s->read(0, 0, blocks) == data, fmt::format("tcp/{} read-back differs", mode_token(mode)));
        s->logout();
        target.stop();
        expect_within(start, 30.0, fmt::format("tcp/{}", mode_token(mode)));
    }
}

// 3
void wire_overhead()
{
    expect(wire_bytes(SecurityMode::Plain, 16384, 1500) == 16864, "plain fixture");
    expect(wire_bytes(SecurityMode::RecordLayer, 16384, 1500) == 16885, "record fixture");
    expect(wire_bytes(SecurityMode::PacketLayer, 16384, 1500) == 17376, "packet fixture");
    for (std::uint64_t s : {100ull, 16384ull, 1048576ull}) {
        for (auto mode : kModes) {
            auto trace = std::make_shared<Trace>();
            SimPair pair(support::channel_options(mode, support::ideal_link(0.001), {}, trace));
            Bytes data(s);
            std::iota(data.begin(), data.end(), std::uint8_t{0});
            pair.client->send(data);
            expect(receive_exactly(*pair.server, s) == data, "payload changed");
            std::uint64_t total = 0;
            for (const auto& r : trace->snapshot())
                total += r.wire_len;
            const std::uint64_t extra = mode == SecurityMode::RecordLayer ? kHandshakeWireBytes : 0;
            expect(total == wire_bytes(mode, s, 1500) + extra,
                   fmt::format("{} S={} traced {} expected {}", mode_token(mode), s, total,
                               wire_bytes(mode, s, 1500) + extra));
        }
    }
}

// 4
std::vector<RunReport> g_default_reports;

void qualitative_ordering()
{
    const auto start = Clock::now();
    ExperimentConfig cfg;
    cfg.modes = {kModes.begin(), kModes.end()};
    cfg.transport = Transport::Mem;
    g_default_reports = run_experiment(cfg);
    expect_within(start, 10.0, "default experiment");
    expect(g_default_reports.size() == 3, "expected three reports");
    const auto& p = g_default_reports[0].totals;
    const auto& r = g_default_reports[1].totals;
    const auto& k = g_default_reports[2].totals;
    for (const auto& rep : g_default_reports) {
        expect(rep.integrity_ok, fmt::format("{} integrity", mode_token(rep.mode)));
        expect(bucket_bits(rep.throughput) == rep.throughput.payload_bytes * 8,
               fmt::format("{} conservation", mode_token(rep.mode)));
    }
    expect(p.mean_rtt < r.mean_rtt && r.mean_rtt < k.mean_rtt,
           fmt::format("rtt order {} {} {}", p.mean_rtt, r.mean_rtt, k.mean_rtt));
    expect(p.mean_goodput > r.mean_goodput && r.mean_goodput > k.mean_goodput,
           fmt::format("goodput order {} {} {}", p.mean_goodput, r.mean_goodput, k.mean_goodput));
}

// 5
void analyzer_oracles()
{
    support::SimRig rig(SecurityMode::Plain, support::ideal_link(0.001));
    auto s = rig.login();
    rig.trace->clear();
    for (int i = 0; i < 10; ++i)
        expect(s->nop_ping() == 0.002, "initiator ping time");
    const auto trace = rig.trace->snapshot();
    const auto rtt = rtt_series(trace);
    expect(rtt.samples.size() == 10, fmt::format("{} samples", rtt.samples.size()));
    for (const auto& sample : rtt.samples)
        expect(sample.rtt == 0.002, fmt::format("sample {}", sample.rtt));
    expect_conservation(trace, "pings");

    s->write(0, 0, support::Gen(5).bytes(64 * 512));
    s->read(0, 0, 64);
    expect_conservation(rig.trace->snapshot(), "pings and I/O");
}

// 6
int run(const std::vector<std::string>& args)
{
    std::vector<const char*> argv{"ipstor"};
    for (const auto& a : args)
        argv.push_back(a.c_str());
    std::ostringstream out, err;
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

std::map<std::string, std::string> tree(const fs::path& root)
{
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file())
            continue;
        std::ifstream in(e.path(), std::ios::binary);
        files[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in), {}};
    }
    return files;
}

void determinism()
{
    const auto base = fs::temp_directory_path() / fmt::format("ipstor-acceptance-{}", ::getpid());
    fs::remove_all(base);
    const std::vector<std::string> args{"bench", "run", "--mode", "all", "--transport", "mem", "--seed", "42",
                                        "--size-mb", "2", "--pings", "20", "--out"};
    auto a = args, b = args;
    a.push_back((base / "a").string());
    b.push_back((base / "b").string());
    expect(run(a) == 0, "first run failed");
    expect(run(b) == 0, "second run failed");
    const auto ta = tree(base / "a");
    expect(!ta.empty(), "no output");
    expect(ta == tree(base / "b"), "output directories differ");
    fs::remove_all(base);
}

// 7
void security_behaviour()
{
    support::Gen g(77);
    for (auto mode : {SecurityMode::RecordLayer, SecurityMode::PacketLayer}) {
        for (int trial = 0; trial < 20; ++trial) {
            SimPair pair(support::channel_options(mode, support::ideal_link(0.0001)));
            pair.client->handshake();
            const Bytes data = g.bytes(1 + g.below(30000));
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
            expect_throws<IntegrityError>([&] { receive_exactly(*pair.server, data.size()); },
                                          fmt::format("{} tamper", mode_token(mode)));
        }
    }

    SimPair pair(support::channel_options(SecurityMode::PacketLayer, support::ideal_link(0.0001)));
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
    expect_throws<ReplayError>([&] { receive_exactly(*pair.server, 8); }, "replay");

    TargetConfig cfg = support::small_target();
    cfg.chap = ChapCredentials{"alice", "s3cret-s3cret"};
    support::SimRig rig(SecurityMode::Plain, support::ideal_link(0.0002), cfg);
    rig.initiator.chap = ChapCredentials{"alice", "wrong-secret"};
    expect_throws<AuthFailure>([&] { rig.login(); }, "wrong CHAP secret");
    rig.net.run();
    for (const auto& r : rig.trace->snapshot())
        expect(r.payload_len == 0, "data moved after a failed login");
    expect(rig.target->active_sessions() == 0, "session left open");
}

// 8
void report_fidelity()
{
    // Capture-listing row as printed with tab separators.
    const std::string listed = "158\t23.558580\t192.168.2.2\t192.168.2.1\tTCP\t50387 > iscsi-target [ACK]";
    TraceRecord r;
    r.frame_no = 158;
    r.time_ns = 23'558'580'000;
    r.src = "192.168.2.2:50387";
    r.dst = "192.168.2.1:3260";
    r.protocol = "TCP";
    r.info = format_tcp_info(50387, 3260, "ACK");
    r.wire_len = 40;
    std::string spaced = listed;
    std::replace(spaced.begin(), spaced.end(), '\t', ' ');
    expect(export_text(std::vector<TraceRecord>{r}) == spaced + "\n", "text export row");

    auto synthetic = [](SecurityMode mode, std::vector<std::pair<int, double>> rtt,
                        std::vector<std::pair<double, int>> tp) {
        RunReport rep;
        rep.mode = mode;
        for (auto [i, v] : rtt)
            rep.rtt.samples.push_back(RttSample{static_cast<std::uint64_t>(i), 0, v});
        for (auto [t, b] : tp)
            rep.throughput.buckets.push_back(ThroughputBucket{t, 0.1, static_cast<std::uint64_t>(b), 0});
        return rep;
    };
    const std::vector<RunReport> table{
        synthetic(SecurityMode::RecordLayer, {{1000, 0.01}, {3000, 0.005}, {5000, 0.07}, {10000, 0.02}},
                  {{25, 1000}, {70, 5000}, {90, 12000}, {190, 20000}}),
        synthetic(SecurityMode::PacketLayer, {{1000, 0.01}, {3000, 0.03}, {5000, 0.057}, {10000, 0.12}},
                  {{20, 1000}, {70, 50000}, {90, 100000}, {190, 300000}}),
    };
    const Comparison cmp = compare_runs(table);
    expect(cmp.text.find("Round trip time values (Sequence no, Time s)") != std::string::npos, "RTT column");
    expect(cmp.text.find("Throughput values (Time s, No of bits per 0.1 s)") != std::string::npos,
           "throughput column");
    const std::vector<std::string> expected_csv{
        "mode,row,rtt_sequence_no,rtt_s,throughput_time_s,throughput_bits",
        "ssl,1,1000,0.01,25,1000",       "ssl,2,3000,0.005,70,5000",
        "ssl,3,5000,0.07,90,12000",      "ssl,4,10000,0.02,190,20000",
        "ipsec,1,1000,0.01,20,1000",     "ipsec,2,3000,0.03,70,50000",
        "ipsec,3,5000,0.057,90,100000",  "ipsec,4,10000,0.12,190,300000",
    };
    std::vector<std::string> csv_lines;
    std::istringstream csv(cmp.csv);
    for (std::string line; std::getline(csv, line);)
        if (!line.empty() && line[0] != '#')
            csv_lines.push_back(line);
    expect(csv_lines == expected_csv, "comparison CSV rows:\n" + cmp.csv);

    std::vector<std::string> text_lines;
    std::istringstream text(cmp.text);
    for (std::string line; std::getline(text, line);)
        text_lines.push_back(line);
    const auto first_ssl = std::find_if(text_lines.begin(), text_lines.end(),
                                        [](const std::string& l) { return l.rfind("ssl ", 0) == 0; });
    expect(first_ssl != text_lines.end() && std::distance(first_ssl, text_lines.end()) >= 8, "mode rows");
    for (int i = 0; i < 8; ++i) {
        const std::string& line = *(first_ssl + i);
        const std::string lead = i == 0 ? "ssl" : i == 4 ? "ipsec" : "";
        expect(line.rfind(lead, 0) == 0 && line.find('(') == 7, "row layout: " + line);
        expect(std::count(line.begin(), line.end(), '(') == 2, "pairs per row: " + line);
    }

    if (!g_default_reports.empty()) {
        const Comparison live = compare_runs(g_default_reports);
        for (auto mode : kModes)
            expect(live.csv.find(fmt::format("\n{},1,", mode_token(mode))) != std::string::npos,
                   fmt::format("{} rows in a measured comparison", mode_token(mode)));
    }
}

} // namespace

int main()
{
    const std::vector<std::pair<std::string, std::function<void()>>> criteria{
        {"codec soundness", codec_soundness},
        {"end-to-end integrity", end_to_end_integrity},
        {"wire overhead", wire_overhead},
        {"RTT and goodput ordering", qualitative_ordering},
        {"analyzer oracles", analyzer_oracles},
        {"determinism", determinism},
        {"security behaviour", security_behaviour},
        {"report fidelity", report_fidelity},
    };
    int failures = 0;
    int n = 0;
    for (const auto& [name, check] : criteria) {
        ++n;
        const auto start = Clock::now();
        std::string detail;
        bool ok = true;
        try {
            check();
        } catch (const std::exception& e) {
            ok = false;
            detail = e.what();
        }
        failures += !ok;
        std::cout << fmt::format("{} {}. {} ({:.2f} s){}{}\n", ok ? "PASS" : "FAIL", n, name, seconds_since(start),
                                 ok ? "" : ": ", detail)
                  << std::flush;
    }
    return failures == 0 ? 0 : 1;
}
