#include "ipstor/cli.hpp"

#include <csignal>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"

#include "ipstor/bench.hpp"
#include "ipstor/error.hpp"
#include "ipstor/initiator.hpp"
#include "ipstor/target.hpp"
#include "ipstor/tcp.hpp"

namespace ipstor {

namespace {

void use_stderr_logger()
{
    if (!spdlog::get("ipstor")) {
        auto logger = spdlog::stderr_color_mt("ipstor");
        spdlog::set_default_logger(logger);
    }
    spdlog::set_level(spdlog::level::warn);
}

std::vector<SecurityMode> expand_modes(const std::string& token)
{
    if (token == "all")
        return {SecurityMode::Plain, SecurityMode::RecordLayer, SecurityMode::PacketLayer};
    auto mode = parse_mode(token);
    if (!mode)
        throw UsageError("unknown mode " + token);
    return {*mode};
}

std::optional<double> parse_bandwidth(const std::string& text)
{
    if (text == "inf")
        return std::nullopt;
    std::size_t used = 0;
    double mbps = 0;
    try {
        mbps = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != text.size() || !(mbps > 0))
        throw UsageError("--bandwidth-mbps expects a positive number or inf");
    return mbps * 1e6;
}

Bytes packet_psk(std::uint64_t seed)
{
    if (auto env = psk_from_environment())
        return *env;
    return default_psk(seed);
}

struct BenchRunArgs
{
    std::string mode = "plain";
    std::string transport = "mem";
    std::uint64_t size_mb = 16;
    std::uint32_t block_size = 64 * 1024;
    std::uint32_t pings = 100;
    std::uint32_t mtu = 1500;
    double delay_ms = 1.0;
    std::string bandwidth = "1000";
    std::optional<double> per_packet_us;
    std::optional<double> per_byte_ns;
    std::uint32_t bucket_ms = 100;
    std::uint64_t seed = 1;
    std::string out = "ipstor-out";
    std::string chap_user;
    std::string chap_secret;
};

struct ClientArgs
{
    std::string portal = "127.0.0.1:3260";
    std::string target = "iqn.2025-01.lab:disk0";
    std::string mode = "plain";
    std::string chap_user;
    std::string chap_secret;
    std::uint64_t seed = 1;
    std::uint32_t count = 4;
    std::uint32_t lun = 0;
    std::uint32_t lba = 0;
    std::uint32_t blocks = 1;
    std::string file;
};

std::optional<ChapCredentials> chap_from(const std::string& user, const std::string& secret)
{
    if (user.empty() && secret.empty())
        return std::nullopt;
    if (user.empty() || secret.empty())
        throw UsageError("--chap-user and --chap-secret go together");
    return ChapCredentials{user, secret};
}

int bench_run(const BenchRunArgs& a, std::ostream& out)
{
    ExperimentConfig cfg;
    cfg.modes = expand_modes(a.mode);
    cfg.transport = *parse_transport(a.transport);
    cfg.total_bytes = a.size_mb << 20;
    cfg.block_size = a.block_size;
    cfg.pings = a.pings;
    cfg.seed = a.seed;
    cfg.link.mtu = a.mtu;
    cfg.link.one_way_delay = a.delay_ms / 1e3;
    cfg.link.bandwidth = parse_bandwidth(a.bandwidth);
    if (a.per_packet_us)
        cfg.per_unit_cost = *a.per_packet_us / 1e6;
    if (a.per_byte_ns)
        cfg.per_byte_cost = *a.per_byte_ns / 1e9;
    cfg.bucket_width = a.bucket_ms / 1e3;
    cfg.chap = chap_from(a.chap_user, a.chap_secret);
    cfg.validate();

    const auto reports = run_experiment(cfg);
    render_report(reports, a.out);
    for (const auto& r : reports) {
        out << fmt::format("{:<6} rtt samples {:>5}  mean rtt {:.6f} s  mean goodput {:.0f} bit/s  "
                           "wire bytes {}  integrity {}\n",
                           mode_token(r.mode), r.rtt.samples.size(), r.totals.mean_rtt, r.totals.mean_goodput,
                           r.totals.wire_bytes, r.integrity_ok ? "ok" : "FAILED");
    }
    out << "reports written to " << a.out << "\n";
    return 0;
}

int bench_compare(const std::vector<std::string>& dirs, const std::string& out_dir, std::ostream& out)
{
    std::vector<RunReport> reports;
    for (const auto& d : dirs)
        reports.push_back(load_report(d));
    const Comparison cmp = compare_runs(reports);
    out << cmp.text;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream(std::filesystem::path(out_dir) / "comparison.txt") << cmp.text;
        std::ofstream(std::filesystem::path(out_dir) / "comparison.csv") << cmp.csv;
    }
    return 0;
}

int target_serve(const std::string& config_path, const std::string& mode_token_text, std::uint64_t seed,
                 std::ostream& out)
{
    const TargetConfig config = TargetConfig::load(config_path);
    const auto mode = expand_modes(mode_token_text);
    if (mode.size() != 1)
        throw UsageError("target serve takes a single mode");

    ChannelOptions options;
    options.mode = mode.front();
    options.costs = CryptoCostModel{};
    if (options.mode == SecurityMode::PacketLayer)
        options.psk = packet_psk(seed);

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    TcpNetwork network;
    Target target(config);
    target.start(network, options);
    out << "serving " << (config.target_name.empty() ? "(no targets)" : config.target_name) << " on "
        << target.bound().to_string() << " (" << mode_token(options.mode) << ")" << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    target.stop();
    out << "stopped after " << target.total_connections() << " connections" << std::endl;
    return 0;
}

InitiatorConfig client_config(const ClientArgs& a)
{
    InitiatorConfig ic;
    ic.portal = Endpoint::parse(a.portal);
    ic.chap = chap_from(a.chap_user, a.chap_secret);
    const auto mode = expand_modes(a.mode);
    if (mode.size() != 1)
        throw UsageError("initiator commands take a single mode");
    ic.channel.mode = mode.front();
    ic.channel.costs = CryptoCostModel{};
    if (ic.channel.mode == SecurityMode::PacketLayer)
        ic.channel.psk = packet_psk(a.seed);
    return ic;
}

int initiator_discover(const ClientArgs& a, std::ostream& out)
{
    TcpNetwork network;
    for (const auto& t : discover(network, client_config(a)))
        out << t.name << " " << t.address << "\n";
    return 0;
}

int initiator_ping(const ClientArgs& a, std::ostream& out)
{
    TcpNetwork network;
    auto session = InitiatorSession::login(network, client_config(a), a.target);
    for (std::uint32_t i = 0; i < a.count; ++i)
        out << fmt::format("nop {}: {:.6f} s\n", i + 1, session->nop_ping());
    session->logout();
    return 0;
}

int initiator_write(const ClientArgs& a, std::ostream& out)
{
    std::ifstream in(a.file, std::ios::binary);
    if (!in)
        throw IoError("cannot read " + a.file);
    const Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    TcpNetwork network;
    auto session = InitiatorSession::login(network, client_config(a), a.target);
    session->write(a.lun, a.lba, data);
    session->logout();
    out << "wrote " << data.size() << " bytes at lba " << a.lba << "\n";
    return 0;
}

int initiator_read(const ClientArgs& a, std::ostream& out)
{
    TcpNetwork network;
    auto session = InitiatorSession::login(network, client_config(a), a.target);
    const Bytes data = session->read(a.lun, a.lba, a.blocks);
    session->logout();
    if (a.file.empty() || a.file == "-") {
        out << to_hex(data) << "\n";
    } else {
        std::ofstream f(a.file, std::ios::binary | std::ios::trunc);
        f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        if (!f)
            throw IoError("cannot write " + a.file);
        out << "read " << data.size() << " bytes into " << a.file << "\n";
    }
    return 0;
}

void add_client_options(CLI::App* cmd, ClientArgs& a)
{
    cmd->add_option("--portal", a.portal, "Target portal host:port")->capture_default_str();
    cmd->add_option("--target", a.target, "Target name to log in to")->capture_default_str();
    cmd->add_option("--mode", a.mode, "Security mode")
        ->check(CLI::IsMember({"plain", "ssl", "ipsec"}))
        ->capture_default_str();
    cmd->add_option("--chap-user", a.chap_user, "CHAP user name");
    cmd->add_option("--chap-secret", a.chap_secret, "CHAP secret");
    cmd->add_option("--seed", a.seed, "Seed for the fallback ipsec key when IPSTOR_PSK is unset")
        ->capture_default_str();
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    use_stderr_logger();

    CLI::App app{"ipstor: iSCSI storage over plain, record-layer and packet-layer secured links"};
    app.name("ipstor");
    app.require_subcommand(1);

    auto* bench = app.add_subcommand("bench", "Run experiments and compare reports");
    bench->require_subcommand(1);

    BenchRunArgs run_args;
    auto* run = bench->add_subcommand("run", "Run the benchmark in one or all security modes");
    run->add_option("--mode", run_args.mode, "Security mode: plain, ssl, ipsec or all")
        ->check(CLI::IsMember({"plain", "ssl", "ipsec", "all"}))
        ->capture_default_str();
    run->add_option("--transport", run_args.transport, "mem (simulated, deterministic) or tcp (loopback)")
        ->check(CLI::IsMember({"mem", "tcp"}))
        ->capture_default_str();
    run->add_option("--size-mb", run_args.size_mb, "Workload size in MiB (0 for pings only)")
        ->capture_default_str();
    run->add_option("--block-size", run_args.block_size, "Bytes per SCSI command, a multiple of 512")
        ->capture_default_str();
    run->add_option("--pings", run_args.pings, "NOP pings before the transfer")->capture_default_str();
    run->add_option("--mtu", run_args.mtu, "Link MTU in bytes")->capture_default_str();
    run->add_option("--delay-ms", run_args.delay_ms, "One-way link delay in milliseconds")
        ->capture_default_str();
    run->add_option("--bandwidth-mbps", run_args.bandwidth, "Link bandwidth in Mbit/s, or inf")
        ->capture_default_str();
    run->add_option("--crypto-per-packet-us", run_args.per_packet_us,
                    "Crypto cost per sealed or opened unit in microseconds (secure modes)");
    run->add_option("--crypto-per-byte-ns", run_args.per_byte_ns,
                    "Crypto cost per payload byte in nanoseconds (secure modes)");
    run->add_option("--bucket-ms", run_args.bucket_ms, "Throughput bucket width in milliseconds")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    run->add_option("--seed", run_args.seed, "Workload and handshake seed")->capture_default_str();
    run->add_option("--out", run_args.out, "Output directory")->capture_default_str();
    run->add_option("--chap-user", run_args.chap_user, "Enable CHAP with this user name");
    run->add_option("--chap-secret", run_args.chap_secret, "CHAP secret");
    run->footer("Environment: IPSTOR_PSK holds the 32-byte hex key for ipsec mode; without it a key is "
                "derived from --seed.");

    std::vector<std::string> compare_dirs;
    std::string compare_out;
    auto* compare = bench->add_subcommand("compare", "Compare per-mode report directories");
    compare->add_option("dirs", compare_dirs, "Per-mode directories written by bench run")
        ->required()
        ->expected(2, -1)
        ->check(CLI::ExistingDirectory);
    compare->add_option("--out", compare_out, "Also write comparison.txt and comparison.csv here");

    auto* target = app.add_subcommand("target", "Storage target");
    target->require_subcommand(1);
    std::string config_path;
    std::string serve_mode = "plain";
    std::uint64_t serve_seed = 1;
    auto* serve = target->add_subcommand("serve", "Serve LUNs over TCP until SIGINT or SIGTERM");
    serve->add_option("config", config_path, "Target configuration file")->required();
    serve->add_option("--mode", serve_mode, "Security mode")
        ->check(CLI::IsMember({"plain", "ssl", "ipsec"}))
        ->capture_default_str();
    serve->add_option("--seed", serve_seed, "Seed for the fallback ipsec key when IPSTOR_PSK is unset")
        ->capture_default_str();

    auto* initiator = app.add_subcommand("initiator", "Talk to a running target over TCP");
    initiator->require_subcommand(1);
    ClientArgs discover_args;
    auto* disc = initiator->add_subcommand("discover", "List the targets a portal offers");
    add_client_options(disc, discover_args);

    ClientArgs ping_args;
    auto* ping = initiator->add_subcommand("ping", "Log in and send NOP pings");
    add_client_options(ping, ping_args);
    ping->add_option("--count", ping_args.count, "Number of pings")->capture_default_str();

    ClientArgs write_args;
    auto* write = initiator->add_subcommand("write", "Write a file to a LUN");
    add_client_options(write, write_args);
    write->add_option("--lun", write_args.lun, "LUN")->capture_default_str();
    write->add_option("--lba", write_args.lba, "First block")->capture_default_str();
    write->add_option("--input", write_args.file, "File to write, a multiple of 512 bytes")->required();

    ClientArgs read_args;
    auto* read = initiator->add_subcommand("read", "Read blocks from a LUN");
    add_client_options(read, read_args);
    read->add_option("--lun", read_args.lun, "LUN")->capture_default_str();
    read->add_option("--lba", read_args.lba, "First block")->capture_default_str();
    read->add_option("--blocks", read_args.blocks, "Number of blocks")->capture_default_str();
    read->add_option("--output", read_args.file, "Destination file, hex on stdout when omitted");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        if (code == 0)
            return 0;
        err << app.help();
        return 2;
    }

    try {
        if (*run)
            return bench_run(run_args, out);
        if (*compare)
            return bench_compare(compare_dirs, compare_out, out);
        if (*serve)
            return target_serve(config_path, serve_mode, serve_seed, out);
        if (*disc)
            return initiator_discover(discover_args, out);
        if (*ping)
            return initiator_ping(ping_args, out);
        if (*write)
            return initiator_write(write_args, out);
        if (*read)
            return initiator_read(read_args, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace ipstor
