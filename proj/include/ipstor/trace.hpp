#pragma once

#include <chrono>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ipstor/channel.hpp"

namespace ipstor {

/// One captured frame, one row of the capture listing.
struct TraceRecord
{
    std::uint64_t frame_no = 0;
    std::int64_t time_ns = 0;
    std::string src; // address:port
    std::string dst;
    std::string protocol;
    std::string info;
    std::uint32_t wire_len = 0;
    std::uint32_t payload_len = 0;
    Direction direction = Direction::InitiatorToTarget;
    // Set on the first frame of a command (NOP-Out, SCSI Command) and on the
    // frame completing its final status (NOP-In, SCSI Response).
    std::optional<std::uint32_t> task_tag;

    double time() const { return static_cast<double>(time_ns) / 1e9; }

    bool operator==(const TraceRecord&) const = default;
};

/// Frame capture shared by every link of one experiment. Producers may append
/// concurrently and out of time order; snapshot() returns the merged view.
class Trace
{
public:
    Trace();

    void record_frame(TraceRecord record);

    /// Records ordered by time (ties keep append order), numbered from 1.
    std::vector<TraceRecord> snapshot() const;

    std::size_t size() const;
    void clear();

    /// Zero point for wall-clock timestamps.
    std::chrono::steady_clock::time_point epoch() const { return epoch_; }

private:
    mutable std::mutex mutex_;
    std::vector<TraceRecord> records_;
    std::chrono::steady_clock::time_point epoch_;
};

/// "iscsi-target" for 3260, the number otherwise.
std::string service_name(std::uint16_t port);

/// "50387 > iscsi-target [ACK]"
std::string format_tcp_info(std::uint16_t src_port, std::uint16_t dst_port, std::string_view flags);

// ---------------------------------------------------------------------------
// Export

inline constexpr std::string_view kTraceCsvHeader =
    "frame_no,time,src,dst,protocol,info,wire_len,payload_len,direction,task_tag";

/// One line per record: No. Time Source Destination Protocol Info, with the
/// time at six decimals and addresses without ports.
std::string export_text(std::span<const TraceRecord> records);
std::string export_csv(std::span<const TraceRecord> records);

/// Inverse of export_csv; throws AnalysisError on malformed input.
std::vector<TraceRecord> import_csv(std::string_view csv);

// ---------------------------------------------------------------------------
// Analysis

struct RttSample
{
    std::uint64_t index = 0; // command ordinal, from 1
    std::uint32_t task_tag = 0;
    double rtt = 0.0; // seconds

    bool operator==(const RttSample&) const = default;
};

struct RttSeries
{
    std::vector<RttSample> samples;
    std::size_t orphans = 0;
};

/// Command-level round trip times matched by task tag. Throws AnalysisError
/// when a tag is reused while its command is still outstanding.
RttSeries rtt_series(std::span<const TraceRecord> records);

struct ThroughputBucket
{
    double t_start = 0.0; // seconds
    double width = 0.0;   // seconds
    std::uint64_t bits = 0;      // application payload bits
    std::uint64_t wire_bits = 0; // all link bits in the bucket

    bool operator==(const ThroughputBucket&) const = default;
};

struct ThroughputSeries
{
    std::vector<ThroughputBucket> buckets;
    std::uint64_t payload_bytes = 0;
    double mean_goodput = 0.0; // bits per second
};

/// Buckets aligned to multiples of `bucket_width` covering the first to the
/// last frame that carries application payload.
ThroughputSeries throughput_series(std::span<const TraceRecord> records, double bucket_width);

struct HierarchyRow
{
    std::string protocol;
    std::uint64_t frames = 0;
    std::uint64_t bytes = 0;

    bool operator==(const HierarchyRow&) const = default;
};

/// Frame and byte counts per protocol label, ordered ESP, TCP, RECORD, iSCSI,
/// then any other labels alphabetically.
std::vector<HierarchyRow> protocol_hierarchy(std::span<const TraceRecord> records);

std::string render_hierarchy(std::span<const HierarchyRow> rows);

} // namespace ipstor
