#include "ipstor/channel.hpp"

#include <algorithm>
#include <cstdlib>
#include <random>

#include "ipstor/error.hpp"
#include "ipstor/trace.hpp"

namespace ipstor {

namespace {

std::size_t overlap(std::size_t a0, std::size_t a1, std::size_t b0, std::size_t b1)
{
    const std::size_t lo = std::max(a0, b0);
    const std::size_t hi = std::min(a1, b1);
    return hi > lo ? hi - lo : 0;
}

RecordHandshake::RandomSource make_random(const ChannelOptions& options, Channel::Role role)
{
    if (!options.seed)
        return [](std::uint8_t* out, std::size_t n) { crypto::random_bytes(out, n); };
    const std::uint64_t salt = role == Channel::Role::Initiator ? 0x1u : 0x2u;
    auto rng = std::make_shared<std::mt19937_64>(*options.seed * 0x9E3779B97F4A7C15ull + salt);
    return [rng](std::uint8_t* out, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i)
            out[i] = static_cast<std::uint8_t>((*rng)() >> 56);
    };
}

} // namespace

Channel::Channel(std::unique_ptr<Link> link, ChannelOptions options, Role role)
    : link_(std::move(link)), options_(std::move(options)), role_(role)
{
    options_.link.validate();
    options_.costs.validate();
    local_ = link_->local();
    remote_ = link_->remote();

    if (options_.mode == SecurityMode::RecordLayer) {
        handshake_ = std::make_unique<RecordHandshake>(
            role == Role::Initiator ? RecordHandshake::Role::Client : RecordHandshake::Role::Server,
            make_random(options_, role));
    } else if (options_.mode == SecurityMode::PacketLayer) {
        if (options_.psk.size() != 32)
            throw UsageError("PacketLayer mode needs a 32-byte pre-shared secret");
        const bool outbound_i2t = role == Role::Initiator;
        esp_send_ = derive_esp_keys(options_.psk, outbound_i2t);
        esp_recv_ = derive_esp_keys(options_.psk, !outbound_i2t);
    }
    link_->attach(this, false);
}

Channel::~Channel()
{
    {
        std::lock_guard lock(mutex_);
        if (!closed_) {
            closed_ = true;
            link_->close();
        }
        receiver_.reset();
        link_->attach(nullptr, false);
    }
    link_.reset();
}

bool Channel::is_open() const
{
    std::lock_guard lock(mutex_);
    return !closed_ && !peer_closed_ && !error_;
}

bool Channel::established() const
{
    std::lock_guard lock(mutex_);
    return !handshake_ || handshake_->established();
}

std::int64_t Channel::now_ns() const
{
    return link_->now_ns();
}

void Channel::set_receiver(Receiver receiver)
{
    std::lock_guard lock(mutex_);
    receiver_ = std::move(receiver);
    if (!inbox_.empty()) {
        Bytes pending = std::exchange(inbox_, {});
        receiver_->on_data(pending);
    }
    link_->attach(this, true);
}

void Channel::handshake()
{
    std::lock_guard lock(mutex_);
    if (!handshake_ || handshake_->established() || role_ != Role::Initiator)
        return;
    if (handshake_messages_ == 0)
        send_handshake_message(handshake_->start());
    while (!handshake_->established()) {
        if (error_)
            std::rethrow_exception(error_);
        if (peer_closed_)
            throw HandshakeError("peer closed the connection during the handshake");
        if (!link_->pump() && !handshake_->established() && !error_)
            throw TransportError("handshake stalled: no reply from peer");
    }
}

void Channel::send(ByteView data, const SendMeta& meta)
{
    std::lock_guard lock(mutex_);
    if (error_)
        std::rethrow_exception(error_);
    if (closed_)
        throw TransportError("send on a closed channel");
    if (handshake_ && !handshake_->established()) {
        if (role_ != Role::Initiator)
            throw HandshakeError("application data before the handshake completed");
        handshake();
    }
    if (data.empty())
        return;

    std::vector<WirePacket> packets;
    switch (options_.mode) {
    case SecurityMode::Plain: packets = build_plain(data, meta); break;
    case SecurityMode::RecordLayer: packets = build_record(data, meta); break;
    case SecurityMode::PacketLayer: packets = build_esp(data, meta); break;
    }

    if (meta.task_tag && !packets.empty()) {
        if (meta.tag_on == SendMeta::TagOn::First)
            packets.front().task_tag = meta.task_tag;
        else if (meta.tag_on == SendMeta::TagOn::Last)
            packets.back().task_tag = meta.task_tag;
    }
    link_->transmit(std::move(packets));
}

Bytes Channel::receive()
{
    std::lock_guard lock(mutex_);
    while (inbox_.empty()) {
        if (error_)
            std::rethrow_exception(error_);
        if (peer_closed_)
            return {};
        if (closed_)
            throw TransportError("receive on a closed channel");
        if (!link_->pump() && inbox_.empty() && !error_ && !peer_closed_)
            throw TransportError("no data from peer (link idle)");
    }
    return std::exchange(inbox_, {});
}

void Channel::close()
{
    std::lock_guard lock(mutex_);
    if (closed_)
        return;
    closed_ = true;
    link_->close();
}

// ---------------------------------------------------------------------------
// Send path

WirePacket Channel::tcp_packet(ByteView payload, std::uint8_t flags)
{
    IpHeader ip;
    ip.src = local_.ipv4();
    ip.dst = remote_.ipv4();
    ip.id = ip_id_++;
    TcpHeader tcp;
    tcp.src_port = local_.port;
    tcp.dst_port = remote_.port;
    tcp.seq = tcp_seq_;
    tcp.flags = flags;
    tcp_seq_ += static_cast<std::uint32_t>(payload.size());

    WirePacket pkt;
    pkt.bytes = build_tcp_packet(ip, tcp, payload);
    return pkt;
}

void Channel::send_handshake_message(const Bytes& message)
{
    const std::size_t index = role_ == Role::Initiator ? 2 * handshake_messages_
                                                       : 2 * handshake_messages_ + 1;
    ++handshake_messages_;
    WirePacket pkt = tcp_packet(message, kTcpAck | kTcpPsh);
    pkt.protocol = "RECORD";
    pkt.info = std::string("Handshake: ") + RecordHandshake::message_name(index);
    std::vector<WirePacket> packets;
    packets.push_back(std::move(pkt));
    link_->transmit(std::move(packets));
}

std::vector<WirePacket> Channel::build_plain(ByteView data, const SendMeta& meta)
{
    const std::size_t seg = options_.link.mtu - kPseudoHeaderSize;
    std::vector<WirePacket> out;
    for (std::size_t pos = 0; pos < data.size(); pos += seg) {
        const std::size_t n = std::min(seg, data.size() - pos);
        const bool last = pos + n == data.size();
        const std::uint16_t sport = local_.port;
        const std::uint16_t dport = remote_.port;
        WirePacket pkt = tcp_packet(data.subspan(pos, n), last ? kTcpAck | kTcpPsh : kTcpAck);
        pkt.payload_len =
            static_cast<std::uint32_t>(overlap(pos, pos + n, meta.payload_begin, meta.payload_end));
        if (!meta.info.empty()) {
            pkt.protocol = last ? "iSCSI" : "TCP";
            pkt.info = last ? meta.info : "[TCP segment of a reassembled PDU]";
        } else {
            pkt.protocol = "TCP";
            pkt.info = format_tcp_info(sport, dport, last ? "PSH, ACK" : "ACK");
        }
        out.push_back(std::move(pkt));
    }
    return out;
}

std::vector<WirePacket> Channel::build_record(ByteView data, const SendMeta& meta)
{
    struct Span
    {
        std::size_t stream_begin; // offset of the record header in the sealed stream
        std::size_t plain_begin;  // offset of its plaintext in `data`
        std::size_t plain_len;
    };
    Bytes stream;
    stream.reserve(record_stream_size(data.size()));
    std::vector<Span> records;
    for (std::size_t pos = 0; pos < data.size(); pos += kMaxRecordPlaintext) {
        const std::size_t n = std::min(kMaxRecordPlaintext, data.size() - pos);
        records.push_back({stream.size(), pos, n});
        Bytes rec = seal_record(data.subspan(pos, n), handshake_->send_keys(), record_send_seq_++);
        stream.insert(stream.end(), rec.begin(), rec.end());
    }

    const std::size_t seg = options_.link.mtu - kPseudoHeaderSize;
    std::vector<WirePacket> out;
    std::size_t next_record = 0;
    for (std::size_t pos = 0; pos < stream.size(); pos += seg) {
        const std::size_t n = std::min(seg, stream.size() - pos);
        const bool last = pos + n == stream.size();
        WirePacket pkt = tcp_packet(ByteView(stream).subspan(pos, n), last ? kTcpAck | kTcpPsh : kTcpAck);
        pkt.protocol = "RECORD";
        pkt.info = "Application Data";

        std::size_t payload = 0;
        for (std::size_t r = next_record; r < records.size(); ++r) {
            const Span& rec = records[r];
            const std::size_t rec_end = rec.stream_begin + kRecordOverhead + rec.plain_len;
            if (rec.stream_begin >= pos + n)
                break;
            if (rec.stream_begin >= pos)
                pkt.seal_units.push_back(rec.plain_len);
            if (rec_end > pos && rec_end <= pos + n)
                pkt.open_units.push_back(rec.plain_len);
            // plaintext bytes of this record that sit inside [pos, pos + n)
            const std::size_t body = rec.stream_begin + kRecordHeaderSize;
            const std::size_t in_packet = overlap(pos, pos + n, body, body + rec.plain_len);
            if (in_packet > 0) {
                const std::size_t first = std::max(pos, body) - body + rec.plain_begin;
                payload += overlap(first, first + in_packet, meta.payload_begin, meta.payload_end);
            }
        }
        while (next_record < records.size() &&
               records[next_record].stream_begin + kRecordOverhead + records[next_record].plain_len <=
                   pos + n)
            ++next_record;
        pkt.payload_len = static_cast<std::uint32_t>(payload);
        out.push_back(std::move(pkt));
    }
    return out;
}

std::vector<WirePacket> Channel::build_esp(ByteView data, const SendMeta& meta)
{
    const std::size_t max = esp_max_payload(options_.link.mtu);
    char info[48];
    std::snprintf(info, sizeof info, "ESP (SPI=0x%08x)", esp_send_->spi);

    std::vector<WirePacket> out;
    for (std::size_t pos = 0; pos < data.size(); pos += max) {
        const std::size_t n = std::min(max, data.size() - pos);
        const bool last = pos + n == data.size();
        Bytes inner(kTcpHeaderSize + n);
        TcpHeader tcp;
        tcp.src_port = local_.port;
        tcp.dst_port = remote_.port;
        tcp.seq = tcp_seq_;
        tcp.flags = last ? kTcpAck | kTcpPsh : kTcpAck;
        tcp_seq_ += static_cast<std::uint32_t>(n);
        write_tcp_header(inner.data(), tcp);
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(pos), n, inner.begin() + kTcpHeaderSize);

        WirePacket pkt;
        pkt.bytes = seal_packet(inner, *esp_send_, ++esp_send_seq_, local_.ipv4(), remote_.ipv4());
        pkt.payload_len =
            static_cast<std::uint32_t>(overlap(pos, pos + n, meta.payload_begin, meta.payload_end));
        pkt.seal_units.push_back(n);
        pkt.open_units.push_back(n);
        pkt.protocol = "ESP";
        pkt.info = info;
        out.push_back(std::move(pkt));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Receive path

void Channel::on_packet(Bytes packet)
{
    std::lock_guard lock(mutex_);
    if (error_ || closed_)
        return;
    try {
        handle_packet(packet);
    } catch (...) {
        fail(std::current_exception());
    }
}

void Channel::on_eof()
{
    std::lock_guard lock(mutex_);
    if (peer_closed_)
        return;
    peer_closed_ = true;
    if (!error_ && handshake_ && !stream_.empty())
        error_ = std::make_exception_ptr(IntegrityError("stream ended inside a record"));
    if (!closed_ && receiver_ && receiver_->on_close)
        receiver_->on_close(error_);
}

void Channel::fail(std::exception_ptr error)
{
    error_ = error;
    if (!closed_) {
        closed_ = true;
        link_->close();
    }
    if (receiver_ && receiver_->on_close)
        receiver_->on_close(error);
}

void Channel::handle_packet(const Bytes& packet)
{
    switch (options_.mode) {
    case SecurityMode::Plain: {
        const IpHeader ip = parse_ip_header(packet);
        if (ip.protocol != kIpProtoTcp)
            throw ProtocolError("non-TCP packet on a plain channel");
        parse_tcp_header(ByteView(packet).subspan(kIpHeaderSize));
        deliver(ByteView(packet).subspan(kPseudoHeaderSize));
        break;
    }
    case SecurityMode::RecordLayer: {
        const IpHeader ip = parse_ip_header(packet);
        if (ip.protocol != kIpProtoTcp)
            throw ProtocolError("non-TCP packet on a record-layer channel");
        const TcpHeader tcp = parse_tcp_header(ByteView(packet).subspan(kIpHeaderSize));
        stream_.insert(stream_.end(), packet.begin() + kPseudoHeaderSize, packet.end());
        handle_record_stream((tcp.flags & kTcpPsh) != 0);
        break;
    }
    case SecurityMode::PacketLayer: {
        const Bytes inner = open_packet(packet, *esp_recv_, replay_);
        parse_tcp_header(inner);
        deliver(ByteView(inner).subspan(kTcpHeaderSize));
        break;
    }
    }
}

void Channel::handle_record_stream(bool push_flag)
{
    std::size_t pos = 0;
    while (pos < stream_.size() && !closed_) {
        ByteView rest = ByteView(stream_).subspan(pos);
        if (!handshake_->established()) {
            auto len = RecordHandshake::message_length(rest);
            if (!len || rest.size() < *len)
                break;
            auto reply = handshake_->on_message(rest.first(*len));
            pos += *len;
            if (reply)
                send_handshake_message(*reply);
            continue;
        }
        auto opened = open_record(rest, handshake_->recv_keys(), record_recv_seq_);
        if (std::holds_alternative<Incomplete>(opened))
            break;
        auto& rec = std::get<OpenedRecord>(opened);
        ++record_recv_seq_;
        pos += rec.consumed;
        deliver(rec.plaintext);
    }
    stream_.erase(stream_.begin(), stream_.begin() + static_cast<std::ptrdiff_t>(pos));
    // Writers flush whole records, so a pushed segment never ends mid-record.
    if (push_flag && !stream_.empty() && !closed_)
        throw IntegrityError("record framing broken at segment boundary");
}

void Channel::deliver(ByteView data)
{
    if (data.empty())
        return;
    if (receiver_)
        receiver_->on_data(data);
    else
        inbox_.insert(inbox_.end(), data.begin(), data.end());
}

// ---------------------------------------------------------------------------

std::optional<Bytes> psk_from_environment()
{
    const char* value = std::getenv("IPSTOR_PSK");
    if (!value || !*value)
        return std::nullopt;
    Bytes psk;
    try {
        psk = from_hex(value);
    } catch (const std::invalid_argument&) {
        throw UsageError("IPSTOR_PSK is not valid hex");
    }
    if (psk.size() != 32)
        throw UsageError("IPSTOR_PSK must encode exactly 32 bytes");
    return psk;
}

Bytes default_psk(std::uint64_t seed)
{
    Bytes input = to_bytes("ipstor default psk");
    std::uint8_t s[8];
    put_be64(s, seed);
    input.insert(input.end(), s, s + 8);
    const auto digest = crypto::sha256(input);
    return Bytes(digest.begin(), digest.end());
}

} // namespace ipstor
