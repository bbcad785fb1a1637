#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipstor/security.hpp"
#include "ipstor/target.hpp"
#include "ipstor/trace.hpp"

namespace ipstor {

enum class Transport { Mem, Tcp };

const char* transport_token(Transport transport);
std::optional<Transport> parse_transport(std::string_view token);

struct ExperimentConfig
{
    std::vector<SecurityMode> modes = {SecurityMode::Plain};
    Transport transport = Transport::Mem;
    std::uint64_t total_bytes = 16ull << 20;
    std::uint32_t block_size = 64 * 1024;
    std::uint64_t seed = 1;
    std::uint32_t pings = 100;
    LinkParams link{0.001, 1e9, 1500};
    // Overrides for the secure modes; plain never pays crypto costs.
    std::optional<double> per_unit_cost; // seconds
    std::optional<double> per_byte_cost; // seconds per byte
    double bucket_width = 0.1;           // seconds
    std::optional<ChapCredentials> chap;
    std::optional<Bytes> psk; // falls back to $IPSTOR_PSK, then a seed-derived key

    /// Throws UsageError.
    void validate() const;

    CryptoCostModel costs_for(SecurityMode mode) const;
};

struct RunTotals
{
    std::uint64_t wire_bytes = 0;
    std::uint64_t payload_bytes = 0;
    std::uint64_t frames = 0;
    double duration = 0.0;     // seconds between the first and last frame
    double mean_rtt = 0.0;     // seconds, over command RTT samples
    double mean_goodput = 0.0; // bits per second
};

struct RunReport
{
    SecurityMode mode = SecurityMode::Plain;
    Transport transport = Transport::Mem;

    // configuration echo
    std::uint64_t total_bytes = 0;
    std::uint32_t block_size = 0;
    std::uint64_t seed = 0;
    std::uint32_t pings = 0;
    LinkParams link;
    CryptoCostModel costs;
    double bucket_width = 0.1;

    std::vector<TraceRecord> trace;
    RttSeries rtt;
    ThroughputSeries throughput;
    std::vector<HierarchyRow> hierarchy;
    std::vector<double> ping_rtts; // as measured by the initiator
    RunTotals totals;
    std::string workload_sha256;
    bool integrity_ok = false;
};

/// Deterministic workload bytes for a seed.
Bytes make_workload(std::uint64_t total_bytes, std::uint64_t seed);

/// One report per configured mode, all over the same workload bytes.
std::vector<RunReport> run_experiment(const ExperimentConfig& config);
RunReport run_mode(const ExperimentConfig& config, SecurityMode mode);

/// Recomputes series and totals from `trace`.
void analyse(RunReport& report);

std::string report_json(const RunReport& report);

/// Reads a per-mode directory written by render_report. Throws IoError or
/// AnalysisError.
RunReport load_report(const std::filesystem::path& dir);

struct Comparison
{
    std::string text;
    std::string csv;
};

/// Side-by-side table of sampled RTT and throughput pairs per mode, summary
/// rows and a verdict line. Throws AnalysisError unless there are at least two
/// reports over the same workload, link and transport.
Comparison compare_runs(std::span<const RunReport> reports);

/// Writes <dir>/<mode>/{trace.csv,trace.txt,rtt.csv,throughput.csv,
/// hierarchy.txt,report.json,rtt.svg,throughput.svg} and, for two or more
/// reports, <dir>/comparison.{txt,csv}. Throws IoError.
void render_report(std::span<const RunReport> reports, const std::filesystem::path& dir);

} // namespace ipstor
