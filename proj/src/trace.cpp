#include "ipstor/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "ipstor/error.hpp"

namespace ipstor {

Trace::Trace() : epoch_(std::chrono::steady_clock::now()) {}

void Trace::record_frame(TraceRecord record)
{
    std::lock_guard lock(mutex_);
    records_.push_back(std::move(record));
}

std::vector<TraceRecord> Trace::snapshot() const
{
    std::vector<TraceRecord> out;
    {
        std::lock_guard lock(mutex_);
        out = records_;
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const TraceRecord& a, const TraceRecord& b) { return a.time_ns < b.time_ns; });
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i].frame_no = i + 1;
    return out;
}

std::size_t Trace::size() const
{
    std::lock_guard lock(mutex_);
    return records_.size();
}

void Trace::clear()
{
    std::lock_guard lock(mutex_);
    records_.clear();
}

std::string service_name(std::uint16_t port)
{
    if (port == 3260)
        return "iscsi-target";
    return std::to_string(port);
}

std::string format_tcp_info(std::uint16_t src_port, std::uint16_t dst_port, std::string_view flags)
{
    return fmt::format("{} > {} [{}]", service_name(src_port), service_name(dst_port), flags);
}

// ---------------------------------------------------------------------------

namespace {

std::string_view host_of(std::string_view address)
{
    const auto colon = address.rfind(':');
    return colon == std::string_view::npos ? address : address.substr(0, colon);
}

std::string format_time(std::int64_t ns, int decimals)
{
    std::int64_t scale = 1;
    for (int i = decimals; i < 9; ++i)
        scale *= 10;
    const bool negative = ns < 0;
    std::uint64_t mag = negative ? static_cast<std::uint64_t>(-ns) : static_cast<std::uint64_t>(ns);
    mag = (mag + static_cast<std::uint64_t>(scale) / 2) / static_cast<std::uint64_t>(scale);
    std::uint64_t unit = 1;
    for (int i = 0; i < decimals; ++i)
        unit *= 10;
    return fmt::format("{}{}.{:0{}}", negative ? "-" : "", mag / unit, mag % unit, decimals);
}

const char* direction_token(Direction d)
{
    return d == Direction::InitiatorToTarget ? "i2t" : "t2i";
}

std::string csv_field(std::string_view s)
{
    if (s.find_first_of(",\"\n\r") == std::string_view::npos)
        return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"')
            out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::vector<std::vector<std::string>> parse_csv_rows(std::string_view csv)
{
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool row_started = false;
    for (std::size_t i = 0; i < csv.size(); ++i) {
        const char c = csv[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < csv.size() && csv[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        row_started = true;
        if (c == '"') {
            if (!field.empty())
                throw AnalysisError("csv: quote inside an unquoted field");
            quoted = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < csv.size() && csv[i + 1] == '\n')
                ++i;
            row.push_back(std::move(field));
            field.clear();
            rows.push_back(std::move(row));
            row.clear();
            row_started = false;
        } else {
            field += c;
        }
    }
    if (quoted)
        throw AnalysisError("csv: unterminated quoted field");
    if (row_started) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

template <typename T>
T parse_number(const std::string& s, const char* what)
{
    T value{};
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || end != s.data() + s.size())
        throw AnalysisError(fmt::format("csv: bad {} '{}'", what, s));
    return value;
}

std::int64_t parse_time_ns(const std::string& s)
{
    std::string_view v = s;
    bool negative = false;
    if (!v.empty() && v.front() == '-') {
        negative = true;
        v.remove_prefix(1);
    }
    const auto dot = v.find('.');
    const std::string whole(v.substr(0, dot));
    std::string frac = dot == std::string_view::npos ? std::string() : std::string(v.substr(dot + 1));
    if (whole.empty() || frac.size() > 9)
        throw AnalysisError(fmt::format("csv: bad time '{}'", s));
    frac.resize(9, '0');
    const auto secs = parse_number<std::int64_t>(whole, "time");
    const auto nanos = parse_number<std::int64_t>(frac, "time");
    const std::int64_t ns = secs * 1'000'000'000 + nanos;
    return negative ? -ns : ns;
}

} // namespace

std::string export_text(std::span<const TraceRecord> records)
{
    std::string out;
    for (const auto& r : records) {
        out += fmt::format("{} {} {} {} {} {}\n", r.frame_no, format_time(r.time_ns, 6), host_of(r.src),
                           host_of(r.dst), r.protocol, r.info);
    }
    return out;
}

std::string export_csv(std::span<const TraceRecord> records)
{
    std::string out(kTraceCsvHeader);
    out += '\n';
    for (const auto& r : records) {
        out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", r.frame_no, format_time(r.time_ns, 9),
                           csv_field(r.src), csv_field(r.dst), csv_field(r.protocol), csv_field(r.info),
                           r.wire_len, r.payload_len, direction_token(r.direction),
                           r.task_tag ? std::to_string(*r.task_tag) : std::string());
    }
    return out;
}

std::vector<TraceRecord> import_csv(std::string_view csv)
{
    auto rows = parse_csv_rows(csv);
    if (rows.empty())
        throw AnalysisError("csv: missing header");
    std::string header;
    for (std::size_t i = 0; i < rows[0].size(); ++i)
        header += (i ? "," : "") + rows[0][i];
    if (header != kTraceCsvHeader)
        throw AnalysisError("csv: unexpected header '" + header + "'");

    std::vector<TraceRecord> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        auto& f = rows[i];
        if (f.size() == 1 && f[0].empty())
            continue;
        if (f.size() != 10)
            throw AnalysisError(fmt::format("csv: row {} has {} fields, expected 10", i + 1, f.size()));
        TraceRecord r;
        r.frame_no = parse_number<std::uint64_t>(f[0], "frame_no");
        r.time_ns = parse_time_ns(f[1]);
        r.src = std::move(f[2]);
        r.dst = std::move(f[3]);
        r.protocol = std::move(f[4]);
        r.info = std::move(f[5]);
        r.wire_len = parse_number<std::uint32_t>(f[6], "wire_len");
        r.payload_len = parse_number<std::uint32_t>(f[7], "payload_len");
        if (f[8] == "i2t")
            r.direction = Direction::InitiatorToTarget;
        else if (f[8] == "t2i")
            r.direction = Direction::TargetToInitiator;
        else
            throw AnalysisError("csv: bad direction '" + f[8] + "'");
        if (!f[9].empty())
            r.task_tag = parse_number<std::uint32_t>(f[9], "task_tag");
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------

RttSeries rtt_series(std::span<const TraceRecord> records)
{
    struct Open
    {
        std::uint64_t index;
        std::int64_t start;
    };
    std::map<std::uint32_t, Open> open;
    std::uint64_t issued = 0;
    RttSeries out;
    for (const auto& r : records) {
        if (!r.task_tag)
            continue;
        const std::uint32_t tag = *r.task_tag;
        if (r.direction == Direction::InitiatorToTarget) {
            if (open.count(tag))
                throw AnalysisError(fmt::format("task tag {} reused while outstanding", tag));
            open[tag] = Open{++issued, r.time_ns};
        } else if (auto it = open.find(tag); it != open.end()) {
            out.samples.push_back(
                RttSample{it->second.index, tag, static_cast<double>(r.time_ns - it->second.start) / 1e9});
            open.erase(it);
        }
    }
    out.orphans = open.size();
    std::sort(out.samples.begin(), out.samples.end(),
              [](const RttSample& a, const RttSample& b) { return a.index < b.index; });
    return out;
}

ThroughputSeries throughput_series(std::span<const TraceRecord> records, double bucket_width)
{
    if (!(bucket_width > 0.0))
        throw std::invalid_argument("bucket width must be positive");
    const std::int64_t width = std::max<std::int64_t>(1, std::llround(bucket_width * 1e9));

    ThroughputSeries out;
    std::optional<std::int64_t> first, last;
    for (const auto& r : records) {
        if (r.payload_len == 0)
            continue;
        first = first ? std::min(*first, r.time_ns) : r.time_ns;
        last = last ? std::max(*last, r.time_ns) : r.time_ns;
        out.payload_bytes += r.payload_len;
    }
    if (!first)
        return out;

    auto bucket_of = [width](std::int64_t t) {
        std::int64_t q = t / width;
        if (t % width != 0 && t < 0)
            --q;
        return q;
    };
    const std::int64_t lo = bucket_of(*first);
    const std::int64_t hi = bucket_of(*last);
    if (hi - lo >= 10'000'000)
        throw AnalysisError("throughput bucket width too small for the trace duration");

    out.buckets.resize(static_cast<std::size_t>(hi - lo + 1));
    for (std::size_t i = 0; i < out.buckets.size(); ++i) {
        out.buckets[i].t_start = static_cast<double>((lo + static_cast<std::int64_t>(i)) * width) / 1e9;
        out.buckets[i].width = static_cast<double>(width) / 1e9;
    }
    for (const auto& r : records) {
        const std::int64_t b = bucket_of(r.time_ns);
        if (b < lo || b > hi)
            continue;
        auto& bucket = out.buckets[static_cast<std::size_t>(b - lo)];
        bucket.bits += std::uint64_t{r.payload_len} * 8;
        bucket.wire_bits += std::uint64_t{r.wire_len} * 8;
    }
    const std::int64_t span = *last - *first;
    if (span > 0)
        out.mean_goodput = static_cast<double>(out.payload_bytes * 8) / (static_cast<double>(span) / 1e9);
    return out;
}

std::vector<HierarchyRow> protocol_hierarchy(std::span<const TraceRecord> records)
{
    std::map<std::string, HierarchyRow> by_label;
    for (const auto& r : records) {
        auto& row = by_label[r.protocol];
        row.protocol = r.protocol;
        ++row.frames;
        row.bytes += r.wire_len;
    }
    static const std::vector<std::string> layering = {"ESP", "TCP", "RECORD", "iSCSI"};
    auto rank = [](const std::string& label) {
        auto it = std::find(layering.begin(), layering.end(), label);
        return static_cast<std::size_t>(it - layering.begin());
    };
    std::vector<HierarchyRow> out;
    for (auto& [label, row] : by_label)
        out.push_back(row);
    std::stable_sort(out.begin(), out.end(), [&](const HierarchyRow& a, const HierarchyRow& b) {
        const auto ra = rank(a.protocol);
        const auto rb = rank(b.protocol);
        return ra != rb ? ra < rb : a.protocol < b.protocol;
    });
    return out;
}

std::string render_hierarchy(std::span<const HierarchyRow> rows)
{
    std::uint64_t frames = 0;
    std::uint64_t bytes = 0;
    std::size_t width = 8;
    for (const auto& r : rows) {
        frames += r.frames;
        bytes += r.bytes;
        width = std::max(width, r.protocol.size());
    }
    std::string out = fmt::format("{:<{}}  {:>10}  {:>7}  {:>14}  {:>7}\n", "Protocol", width, "Frames",
                                  "Frames%", "Bytes", "Bytes%");
    for (const auto& r : rows) {
        const double fp = frames ? 100.0 * static_cast<double>(r.frames) / static_cast<double>(frames) : 0.0;
        const double bp = bytes ? 100.0 * static_cast<double>(r.bytes) / static_cast<double>(bytes) : 0.0;
        out += fmt::format("{:<{}}  {:>10}  {:>7.2f}  {:>14}  {:>7.2f}\n", r.protocol, width, r.frames, fp,
                           r.bytes, bp);
    }
    out += fmt::format("{:<{}}  {:>10}  {:>7.2f}  {:>14}  {:>7.2f}\n", "Total", width, frames,
                       frames ? 100.0 : 0.0, bytes, bytes ? 100.0 : 0.0);
    return out;
}

} // namespace ipstor
