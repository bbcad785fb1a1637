#include "ipstor/bench.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"

#include "ipstor/chart.hpp"
#include "ipstor/crypto.hpp"
#include "ipstor/error.hpp"
#include "ipstor/initiator.hpp"
#include "ipstor/sim.hpp"
#include "ipstor/target.hpp"
#include "ipstor/tcp.hpp"

namespace ipstor {

using json = nlohmann::ordered_json;

namespace {

constexpr const char* kTargetName = "iqn.2025-01.lab:disk0";
constexpr std::uint64_t kMinLunBytes = 64ull << 20;
constexpr const char* kReportNote =
    "workload size, link and crypto costs are configured defaults for a desk-scale run, "
    "not measurements of a deployed system";

void write_file(const std::filesystem::path& path, std::string_view content)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out)
        throw IoError("cannot write " + path.string());
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::unique_ptr<Target> start_target(Network& network, const ExperimentConfig& config,
                                     const ChannelOptions& options)
{
    TargetConfig tc;
    tc.target_name = kTargetName;
    const std::uint64_t lun_bytes = std::max(kMinLunBytes, config.total_bytes);
    tc.luns.push_back(LunConfig{0, (lun_bytes + kBlockSize - 1) / kBlockSize, std::nullopt});
    tc.chap = config.chap;

    if (config.transport == Transport::Mem) {
        tc.listen = Endpoint{"192.168.2.1", 3260};
        auto target = std::make_unique<Target>(tc);
        target->start(network, options);
        return target;
    }
    // Real sockets: take the first free port from 3260 up.
    for (std::uint16_t port = 3260; port < 3260 + 200; ++port) {
        tc.listen = Endpoint{"127.0.0.1", port};
        auto target = std::make_unique<Target>(tc);
        try {
            target->start(network, options);
            return target;
        } catch (const StartupError&) {
        }
    }
    throw StartupError("no free port for the target near 3260");
}

std::string format_g(double v)
{
    return fmt::format("{:g}", v);
}

std::string bandwidth_text(const LinkParams& link)
{
    return link.bandwidth ? fmt::format("{:g} bit/s", *link.bandwidth) : "unlimited";
}

} // namespace

const char* transport_token(Transport transport)
{
    return transport == Transport::Mem ? "mem" : "tcp";
}

std::optional<Transport> parse_transport(std::string_view token)
{
    if (token == "mem")
        return Transport::Mem;
    if (token == "tcp")
        return Transport::Tcp;
    return std::nullopt;
}

void ExperimentConfig::validate() const
{
    if (modes.empty())
        throw UsageError("no security mode selected");
    if (block_size == 0 || block_size % kBlockSize != 0)
        throw UsageError("block size must be a positive multiple of 512");
    if (block_size / kBlockSize > 0xFFFF)
        throw UsageError("block size must not exceed 65535 blocks");
    if (total_bytes % block_size != 0)
        throw UsageError("workload size must be a multiple of the block size");
    if (total_bytes / kBlockSize > 0xFFFFFFFFull)
        throw UsageError("workload exceeds the addressable LBA range");
    if (!(bucket_width > 0))
        throw UsageError("bucket width must be positive");
    if (per_unit_cost && !(*per_unit_cost >= 0))
        throw UsageError("crypto per-packet cost must be non-negative");
    if (per_byte_cost && !(*per_byte_cost >= 0))
        throw UsageError("crypto per-byte cost must be non-negative");
    if (psk && psk->size() != 32)
        throw UsageError("pre-shared key must be 32 bytes");
    try {
        link.validate();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

CryptoCostModel ExperimentConfig::costs_for(SecurityMode mode) const
{
    CryptoCostModel costs = CryptoCostModel::defaults(mode);
    if (mode != SecurityMode::Plain) {
        if (per_unit_cost)
            costs.per_unit_cost = *per_unit_cost;
        if (per_byte_cost)
            costs.per_byte_cost = *per_byte_cost;
    }
    return costs;
}

Bytes make_workload(std::uint64_t total_bytes, std::uint64_t seed)
{
    Bytes out(total_bytes);
    std::mt19937_64 rng(seed);
    std::size_t i = 0;
    while (i < out.size()) {
        std::uint64_t v = rng();
        for (int k = 0; k < 8 && i < out.size(); ++k, ++i) {
            out[i] = static_cast<std::uint8_t>(v);
            v >>= 8;
        }
    }
    return out;
}

std::vector<RunReport> run_experiment(const ExperimentConfig& config)
{
    config.validate();
    std::vector<RunReport> out;
    for (auto mode : config.modes)
        out.push_back(run_mode(config, mode));
    return out;
}

RunReport run_mode(const ExperimentConfig& config, SecurityMode mode)
{
    config.validate();

    RunReport report;
    report.mode = mode;
    report.transport = config.transport;
    report.total_bytes = config.total_bytes;
    report.block_size = config.block_size;
    report.seed = config.seed;
    report.pings = config.pings;
    report.link = config.link;
    report.costs = config.costs_for(mode);
    report.bucket_width = config.bucket_width;

    auto trace = std::make_shared<Trace>();
    ChannelOptions options;
    options.mode = mode;
    options.link = config.link;
    options.costs = report.costs;
    options.trace = trace;
    if (mode == SecurityMode::PacketLayer) {
        if (config.psk)
            options.psk = *config.psk;
        else if (auto env = psk_from_environment())
            options.psk = *env;
        else
            options.psk = default_psk(config.seed);
    }

    std::unique_ptr<Network> network;
    if (config.transport == Transport::Mem) {
        network = std::make_unique<SimNetwork>();
        options.seed = config.seed;
    } else {
        network = std::make_unique<TcpNetwork>();
    }

    const Bytes workload = make_workload(config.total_bytes, config.seed);
    const auto digest = crypto::sha256(workload);
    report.workload_sha256 = to_hex(digest);

    {
        auto target = start_target(*network, config, options);

        InitiatorConfig ic;
        ic.portal = target->bound();
        ic.chap = config.chap;
        ic.channel = options;

        const auto targets = discover(*network, ic);
        if (std::none_of(targets.begin(), targets.end(),
                         [](const DiscoveredTarget& t) { return t.name == kTargetName; }))
            throw ProtocolError("discovery did not list " + std::string(kTargetName));

        auto session = InitiatorSession::login(*network, ic, kTargetName);
        for (std::uint32_t i = 0; i < config.pings; ++i)
            report.ping_rtts.push_back(session->nop_ping());

        const std::uint32_t blocks_per_io = config.block_size / kBlockSize;
        for (std::uint64_t off = 0; off < workload.size(); off += config.block_size) {
            session->write(0, static_cast<std::uint32_t>(off / kBlockSize),
                           ByteView(workload).subspan(off, config.block_size));
        }
        for (std::uint64_t off = 0; off < workload.size(); off += config.block_size) {
            const Bytes got = session->read(0, static_cast<std::uint32_t>(off / kBlockSize), blocks_per_io);
            const auto expected = ByteView(workload).subspan(off, config.block_size);
            auto diff = std::mismatch(got.begin(), got.end(), expected.begin());
            if (diff.first != got.end()) {
                const auto first = off + static_cast<std::uint64_t>(diff.first - got.begin());
                std::size_t count = 0;
                for (std::size_t i = 0; i < got.size(); ++i)
                    count += got[i] != expected[i];
                throw IntegrityError(fmt::format("read-back mismatch at offset {} ({} differing bytes in "
                                                 "block at offset {})",
                                                 first, count, off));
            }
        }
        session->logout();
        session.reset();
        if (auto* sim = dynamic_cast<SimNetwork*>(network.get()))
            sim->run();
        target->stop();
    }
    report.integrity_ok = true;
    report.trace = trace->snapshot();
    analyse(report);
    return report;
}

void analyse(RunReport& report)
{
    report.rtt = rtt_series(report.trace);
    report.throughput = throughput_series(report.trace, report.bucket_width);
    report.hierarchy = protocol_hierarchy(report.trace);

    RunTotals& t = report.totals;
    t = RunTotals{};
    for (const auto& r : report.trace) {
        t.wire_bytes += r.wire_len;
        t.payload_bytes += r.payload_len;
    }
    t.frames = report.trace.size();
    if (!report.trace.empty())
        t.duration = static_cast<double>(report.trace.back().time_ns - report.trace.front().time_ns) / 1e9;
    if (!report.rtt.samples.empty()) {
        double sum = 0;
        for (const auto& s : report.rtt.samples)
            sum += s.rtt;
        t.mean_rtt = sum / static_cast<double>(report.rtt.samples.size());
    }
    t.mean_goodput = report.throughput.mean_goodput;
}

// ---------------------------------------------------------------------------
// Report files

std::string report_json(const RunReport& r)
{
    json j;
    j["mode"] = mode_token(r.mode);
    j["transport"] = transport_token(r.transport);
    j["note"] = kReportNote;
    j["workload"] = {{"total_bytes", r.total_bytes},
                     {"block_size", r.block_size},
                     {"seed", r.seed},
                     {"pings", r.pings},
                     {"sha256", r.workload_sha256}};
    j["link"] = {{"one_way_delay_s", r.link.one_way_delay},
                 {"bandwidth_bps", r.link.bandwidth ? json(*r.link.bandwidth) : json(nullptr)},
                 {"mtu", r.link.mtu}};
    j["costs"] = {{"per_unit_s", r.costs.per_unit_cost}, {"per_byte_s", r.costs.per_byte_cost}};
    j["bucket_width_s"] = r.bucket_width;
    j["totals"] = {{"frames", r.totals.frames},
                   {"wire_bytes", r.totals.wire_bytes},
                   {"payload_bytes", r.totals.payload_bytes},
                   {"duration_s", r.totals.duration},
                   {"mean_rtt_s", r.totals.mean_rtt},
                   {"mean_goodput_bps", r.totals.mean_goodput}};
    j["rtt"] = {{"samples", r.rtt.samples.size()}, {"orphans", r.rtt.orphans}};
    double ping_sum = 0;
    for (double p : r.ping_rtts)
        ping_sum += p;
    j["ping"] = {{"count", r.ping_rtts.size()},
                 {"mean_s", r.ping_rtts.empty() ? 0.0 : ping_sum / static_cast<double>(r.ping_rtts.size())}};
    json rows = json::array();
    for (const auto& h : r.hierarchy)
        rows.push_back({{"protocol", h.protocol}, {"frames", h.frames}, {"bytes", h.bytes}});
    j["hierarchy"] = rows;
    j["integrity_ok"] = r.integrity_ok;
    return j.dump(2) + "\n";
}

RunReport load_report(const std::filesystem::path& dir)
{
    RunReport r;
    json j;
    try {
        j = json::parse(read_file(dir / "report.json"));
        const auto mode = parse_mode(j.at("mode").get<std::string>());
        const auto transport = parse_transport(j.at("transport").get<std::string>());
        if (!mode || !transport)
            throw AnalysisError("report.json: unknown mode or transport");
        r.mode = *mode;
        r.transport = *transport;
        const auto& w = j.at("workload");
        r.total_bytes = w.at("total_bytes").get<std::uint64_t>();
        r.block_size = w.at("block_size").get<std::uint32_t>();
        r.seed = w.at("seed").get<std::uint64_t>();
        r.pings = w.at("pings").get<std::uint32_t>();
        r.workload_sha256 = w.at("sha256").get<std::string>();
        const auto& l = j.at("link");
        r.link.one_way_delay = l.at("one_way_delay_s").get<double>();
        if (!l.at("bandwidth_bps").is_null())
            r.link.bandwidth = l.at("bandwidth_bps").get<double>();
        r.link.mtu = l.at("mtu").get<std::uint32_t>();
        r.costs.per_unit_cost = j.at("costs").at("per_unit_s").get<double>();
        r.costs.per_byte_cost = j.at("costs").at("per_byte_s").get<double>();
        r.bucket_width = j.at("bucket_width_s").get<double>();
        r.integrity_ok = j.at("integrity_ok").get<bool>();
    } catch (const json::exception& e) {
        throw AnalysisError(fmt::format("{}: {}", (dir / "report.json").string(), e.what()));
    }
    r.trace = import_csv(read_file(dir / "trace.csv"));
    analyse(r);
    return r;
}

namespace {

template <typename T>
std::vector<T> sample(const std::vector<T>& items, std::size_t k)
{
    if (items.size() <= k)
        return items;
    std::vector<T> out;
    for (std::size_t j = 0; j < k; ++j)
        out.push_back(items[((j + 1) * items.size()) / k - 1]);
    return out;
}

std::string rtt_pair(const RttSample& s)
{
    return fmt::format("({}, {:g})", s.index, s.rtt);
}

std::string tp_pair(const ThroughputBucket& b)
{
    return fmt::format("({:g}, {})", b.t_start, b.bits);
}

std::string verdict_name(std::span<const RunReport> reports, bool lower_better,
                         double RunTotals::*field)
{
    double best = reports.front().totals.*field;
    for (const auto& r : reports)
        best = lower_better ? std::min(best, r.totals.*field) : std::max(best, r.totals.*field);
    std::vector<std::string> winners;
    for (const auto& r : reports)
        if (r.totals.*field == best)
            winners.emplace_back(mode_token(r.mode));
    return winners.size() == 1 ? winners.front() : "tie";
}

} // namespace

Comparison compare_runs(std::span<const RunReport> reports)
{
    if (reports.size() < 2)
        throw AnalysisError("comparison needs at least two runs");
    const RunReport& ref = reports.front();
    for (const auto& r : reports) {
        if (r.total_bytes != ref.total_bytes || r.block_size != ref.block_size || r.pings != ref.pings ||
            r.workload_sha256 != ref.workload_sha256)
            throw AnalysisError("runs used different workloads");
        if (r.link.one_way_delay != ref.link.one_way_delay || r.link.bandwidth != ref.link.bandwidth ||
            r.link.mtu != ref.link.mtu)
            throw AnalysisError("runs used different link parameters");
        if (r.transport != ref.transport)
            throw AnalysisError("runs used different transports");
        if (r.bucket_width != ref.bucket_width)
            throw AnalysisError("runs used different throughput bucket widths");
    }

    constexpr std::size_t kPairs = 4;
    const std::string rtt_head = "Round trip time values (Sequence no, Time s)";
    const std::string tp_head =
        fmt::format("Throughput values (Time s, No of bits per {:g} s)", ref.bucket_width);

    struct Group
    {
        std::string mode;
        std::vector<std::string> rtt;
        std::vector<std::string> tp;
        std::vector<RttSample> rtt_raw;
        std::vector<ThroughputBucket> tp_raw;
    };
    std::vector<Group> groups;
    std::size_t w0 = 4;
    std::size_t w1 = rtt_head.size();
    for (const auto& r : reports) {
        Group g;
        g.mode = mode_token(r.mode);
        g.rtt_raw = sample(r.rtt.samples, kPairs);
        g.tp_raw = sample(r.throughput.buckets, kPairs);
        for (const auto& s : g.rtt_raw)
            g.rtt.push_back(rtt_pair(s));
        for (const auto& b : g.tp_raw)
            g.tp.push_back(tp_pair(b));
        w0 = std::max(w0, g.mode.size());
        for (const auto& s : g.rtt)
            w1 = std::max(w1, s.size());
        groups.push_back(std::move(g));
    }

    Comparison out;
    out.text += fmt::format("# transport {}, workload {} bytes in {}-byte blocks, {} pings, seed {}\n",
                            transport_token(ref.transport), ref.total_bytes, ref.block_size, ref.pings,
                            ref.seed);
    out.text += fmt::format("# link: one-way delay {:g} s, bandwidth {}, MTU {}\n", ref.link.one_way_delay,
                            bandwidth_text(ref.link), ref.link.mtu);
    out.text += fmt::format("# {}\n\n", kReportNote);
    out.text += fmt::format("{:<{}}  {:<{}}  {}\n", "Mode", w0, rtt_head, w1, tp_head);
    out.csv = "mode,row,rtt_sequence_no,rtt_s,throughput_time_s,throughput_bits\n";
    for (const auto& g : groups) {
        const std::size_t rows = std::max({g.rtt.size(), g.tp.size(), std::size_t{1}});
        for (std::size_t i = 0; i < rows; ++i) {
            const std::string a = i < g.rtt.size() ? g.rtt[i] : "-";
            const std::string b = i < g.tp.size() ? g.tp[i] : "-";
            out.text += fmt::format("{:<{}}  {:<{}}  {}\n", i == 0 ? g.mode : "", w0, a, w1, b);
            out.csv += fmt::format(
                "{},{},{},{},{},{}\n", g.mode, i + 1,
                i < g.rtt_raw.size() ? std::to_string(g.rtt_raw[i].index) : "",
                i < g.rtt_raw.size() ? format_g(g.rtt_raw[i].rtt) : "",
                i < g.tp_raw.size() ? format_g(g.tp_raw[i].t_start) : "",
                i < g.tp_raw.size() ? std::to_string(g.tp_raw[i].bits) : "");
        }
    }

    out.text += "\nSummary\n";
    out.text += fmt::format("{:<{}}  {:>14}  {:>18}  {:>16}  {:>8}\n", "Mode", w0, "mean RTT (s)",
                            "mean goodput (bps)", "total wire bytes", "frames");
    for (const auto& r : reports) {
        out.text += fmt::format("{:<{}}  {:>14.9f}  {:>18.1f}  {:>16}  {:>8}\n", mode_token(r.mode), w0,
                                r.totals.mean_rtt, r.totals.mean_goodput, r.totals.wire_bytes, r.totals.frames);
    }
    out.text += fmt::format("\nverdict: lowest mean RTT = {}; highest mean goodput = {}\n",
                            verdict_name(reports, true, &RunTotals::mean_rtt),
                            verdict_name(reports, false, &RunTotals::mean_goodput));
    return out;
}

void render_report(std::span<const RunReport> reports, const std::filesystem::path& dir)
{
    if (reports.empty())
        throw UsageError("nothing to render");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw IoError("cannot create " + dir.string() + ": " + ec.message());

    for (const auto& r : reports) {
        const auto sub = dir / mode_token(r.mode);
        std::filesystem::create_directories(sub, ec);
        if (ec)
            throw IoError("cannot create " + sub.string() + ": " + ec.message());

        write_file(sub / "trace.csv", export_csv(r.trace));
        write_file(sub / "trace.txt", export_text(r.trace));

        std::string rtt = "index,task_tag,rtt_s\n";
        for (const auto& s : r.rtt.samples)
            rtt += fmt::format("{},{},{:.9f}\n", s.index, s.task_tag, s.rtt);
        write_file(sub / "rtt.csv", rtt);

        std::string tp = "t_start_s,width_s,payload_bits,wire_bits\n";
        for (const auto& b : r.throughput.buckets)
            tp += fmt::format("{:.9f},{:.9f},{},{}\n", b.t_start, b.width, b.bits, b.wire_bits);
        write_file(sub / "throughput.csv", tp);

        write_file(sub / "hierarchy.txt", render_hierarchy(r.hierarchy));
        write_file(sub / "report.json", report_json(r));

        LineChart rtt_chart{fmt::format("Round trip time ({})", mode_token(r.mode)), "Command sequence no",
                            "RTT (s)", {}};
        for (const auto& s : r.rtt.samples)
            rtt_chart.points.emplace_back(static_cast<double>(s.index), s.rtt);
        write_file(sub / "rtt.svg", render_svg(rtt_chart));

        LineChart tp_chart{fmt::format("Throughput ({})", mode_token(r.mode)), "Time (s)",
                           fmt::format("Payload bits per {:g} s", r.bucket_width), {}};
        for (const auto& b : r.throughput.buckets)
            tp_chart.points.emplace_back(b.t_start, static_cast<double>(b.bits));
        write_file(sub / "throughput.svg", render_svg(tp_chart));
    }

    if (reports.size() >= 2) {
        const Comparison cmp = compare_runs(reports);
        write_file(dir / "comparison.txt", cmp.text);
        write_file(dir / "comparison.csv", cmp.csv);
    }
}

} // namespace ipstor
