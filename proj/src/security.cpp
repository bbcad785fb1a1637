#include "ipstor/security.hpp"

#include <algorithm>
#include <arpa/inet.h>
#include <charconv>
#include <cmath>
#include <cstring>

#include "ipstor/error.hpp"

namespace ipstor {

// ---------------------------------------------------------------------------
// Endpoint

std::string Endpoint::to_string() const
{
    return host + ":" + std::to_string(port);
}

Endpoint Endpoint::parse(std::string_view text)
{
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos || colon == 0 || colon + 1 == text.size())
        throw UsageError("expected host:port, got '" + std::string(text) + "'");
    unsigned port = 0;
    auto digits = text.substr(colon + 1);
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), port);
    if (ec != std::errc{} || ptr != digits.data() + digits.size() || port > 65535)
        throw UsageError("invalid port in '" + std::string(text) + "'");
    return Endpoint{std::string(text.substr(0, colon)), static_cast<std::uint16_t>(port)};
}

std::array<std::uint8_t, 4> Endpoint::ipv4() const
{
    std::array<std::uint8_t, 4> out{};
    in_addr addr{};
    if (inet_pton(AF_INET, host.c_str(), &addr) == 1)
        std::memcpy(out.data(), &addr.s_addr, 4);
    return out;
}

// ---------------------------------------------------------------------------
// Modes and cost model

const char* mode_token(SecurityMode mode)
{
    switch (mode) {
    case SecurityMode::Plain: return "plain";
    case SecurityMode::RecordLayer: return "ssl";
    case SecurityMode::PacketLayer: return "ipsec";
    }
    return "?";
}

std::optional<SecurityMode> parse_mode(std::string_view token)
{
    if (token == "plain")
        return SecurityMode::Plain;
    if (token == "ssl")
        return SecurityMode::RecordLayer;
    if (token == "ipsec")
        return SecurityMode::PacketLayer;
    return std::nullopt;
}

void LinkParams::validate() const
{
    if (!(one_way_delay >= 0.0))
        throw UsageError("one-way delay must be >= 0");
    if (mtu < kMinMtu)
        throw UsageError("mtu must be >= 576");
    if (bandwidth && !(*bandwidth > 0.0))
        throw UsageError("bandwidth must be > 0");
}

CryptoCostModel CryptoCostModel::defaults(SecurityMode mode)
{
    switch (mode) {
    case SecurityMode::Plain: return {};
    case SecurityMode::RecordLayer: return {10e-6, 5e-9};
    case SecurityMode::PacketLayer: return {50e-6, 5e-9};
    }
    return {};
}

void CryptoCostModel::validate() const
{
    if (!(per_unit_cost >= 0.0) || !(per_byte_cost >= 0.0))
        throw UsageError("crypto costs must be >= 0");
}

std::int64_t CryptoCostModel::cost_ns(std::size_t bytes) const
{
    return std::llround(per_unit_cost * 1e9 + per_byte_cost * 1e9 * static_cast<double>(bytes));
}

// ---------------------------------------------------------------------------
// Pseudo TCP/IP

std::vector<PseudoPacket> packetize(ByteView stream, std::uint32_t mtu, const Endpoint& src,
                                    const Endpoint& dst)
{
    if (mtu < kMinMtu)
        throw std::invalid_argument("mtu must be >= 576");
    const std::size_t max_payload = mtu - kPseudoHeaderSize;
    std::vector<PseudoPacket> out;
    out.reserve((stream.size() + max_payload - 1) / max_payload);
    std::uint64_t seq = 0;
    for (std::size_t pos = 0; pos < stream.size(); pos += max_payload) {
        const std::size_t n = std::min(max_payload, stream.size() - pos);
        PseudoPacket pkt;
        pkt.src = src;
        pkt.dst = dst;
        pkt.seq = seq++;
        pkt.payload.assign(stream.begin() + static_cast<std::ptrdiff_t>(pos),
                           stream.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pkt.wire_len = static_cast<std::uint32_t>(n + kPseudoHeaderSize);
        out.push_back(std::move(pkt));
    }
    return out;
}

namespace {

std::uint16_t ip_checksum(const std::uint8_t* header)
{
    std::uint32_t sum = 0;
    for (std::size_t i = 0; i < kIpHeaderSize; i += 2)
        sum += get_be16(header + i);
    while (sum >> 16)
        sum = (sum & 0xFFFF) + (sum >> 16);
    return static_cast<std::uint16_t>(~sum);
}

} // namespace

void write_ip_header(std::uint8_t* out, const IpHeader& h)
{
    std::memset(out, 0, kIpHeaderSize);
    out[0] = 0x45;
    put_be16(out + 2, h.total_length);
    put_be16(out + 4, h.id);
    out[8] = 64;
    out[9] = h.protocol;
    std::copy(h.src.begin(), h.src.end(), out + 12);
    std::copy(h.dst.begin(), h.dst.end(), out + 16);
    put_be16(out + 10, ip_checksum(out));
}

IpHeader parse_ip_header(ByteView packet)
{
    if (packet.size() < kIpHeaderSize)
        throw ProtocolError("packet shorter than an IP header");
    const std::uint8_t* p = packet.data();
    if (p[0] != 0x45)
        throw ProtocolError("unsupported IP version/header length");
    if (ip_checksum(p) != 0)
        throw ProtocolError("IP header checksum mismatch");
    IpHeader h;
    h.total_length = get_be16(p + 2);
    h.id = get_be16(p + 4);
    h.protocol = p[9];
    std::copy(p + 12, p + 16, h.src.begin());
    std::copy(p + 16, p + 20, h.dst.begin());
    if (h.total_length != packet.size())
        throw ProtocolError("IP total length does not match packet size");
    return h;
}

void write_tcp_header(std::uint8_t* out, const TcpHeader& h)
{
    std::memset(out, 0, kTcpHeaderSize);
    put_be16(out, h.src_port);
    put_be16(out + 2, h.dst_port);
    put_be32(out + 4, h.seq);
    put_be32(out + 8, h.ack);
    out[12] = 0x50;
    out[13] = h.flags;
    put_be16(out + 14, 65535);
}

TcpHeader parse_tcp_header(ByteView segment)
{
    if (segment.size() < kTcpHeaderSize)
        throw ProtocolError("segment shorter than a TCP header");
    const std::uint8_t* p = segment.data();
    if (p[12] != 0x50)
        throw ProtocolError("unsupported TCP data offset");
    TcpHeader h;
    h.src_port = get_be16(p);
    h.dst_port = get_be16(p + 2);
    h.seq = get_be32(p + 4);
    h.ack = get_be32(p + 8);
    h.flags = p[13];
    return h;
}

Bytes build_tcp_packet(const IpHeader& ip, const TcpHeader& tcp, ByteView payload)
{
    Bytes out(kPseudoHeaderSize + payload.size());
    IpHeader h = ip;
    h.protocol = kIpProtoTcp;
    h.total_length = static_cast<std::uint16_t>(out.size());
    write_ip_header(out.data(), h);
    write_tcp_header(out.data() + kIpHeaderSize, tcp);
    std::copy(payload.begin(), payload.end(), out.begin() + kPseudoHeaderSize);
    return out;
}

// ---------------------------------------------------------------------------
// Record layer

namespace {

std::array<std::uint8_t, 12> record_nonce(const RecordKeys& keys, std::uint64_t seq)
{
    auto nonce = keys.iv;
    std::uint8_t counter[8];
    put_be64(counter, seq);
    for (int i = 0; i < 8; ++i)
        nonce[4 + i] ^= counter[i];
    return nonce;
}

} // namespace

Bytes seal_record(ByteView plaintext, const RecordKeys& keys, std::uint64_t seq)
{
    if (plaintext.size() > kMaxRecordPlaintext)
        throw std::invalid_argument("record plaintext exceeds 16384 bytes");
    std::uint8_t header[kRecordHeaderSize];
    header[0] = kRecordTypeApplicationData;
    put_be16(header + 1, kRecordVersion);
    put_be16(header + 3, static_cast<std::uint16_t>(plaintext.size() + kRecordTagSize));

    Bytes sealed = crypto::aes_gcm_seal(keys.key, record_nonce(keys, seq),
                                        ByteView(header, kRecordHeaderSize), plaintext);
    Bytes out(kRecordHeaderSize + sealed.size());
    std::copy_n(header, kRecordHeaderSize, out.begin());
    std::copy(sealed.begin(), sealed.end(), out.begin() + kRecordHeaderSize);
    return out;
}

std::variant<OpenedRecord, Incomplete> open_record(ByteView wire, const RecordKeys& keys,
                                                   std::uint64_t seq)
{
    if (wire.size() < kRecordHeaderSize)
        return Incomplete{kRecordHeaderSize};
    const std::uint8_t* p = wire.data();
    if (p[0] != kRecordTypeApplicationData)
        throw IntegrityError("unexpected record type");
    if (get_be16(p + 1) != kRecordVersion)
        throw IntegrityError("unexpected record version");
    const std::size_t body = get_be16(p + 3);
    if (body < kRecordTagSize || body > kMaxRecordPlaintext + kRecordTagSize)
        throw IntegrityError("record length out of range");
    const std::size_t total = kRecordHeaderSize + body;
    if (wire.size() < total)
        return Incomplete{total};

    OpenedRecord rec;
    if (!crypto::aes_gcm_open(keys.key, record_nonce(keys, seq), wire.first(kRecordHeaderSize),
                              wire.subspan(kRecordHeaderSize, body), rec.plaintext))
        throw IntegrityError("record authentication failed");
    rec.consumed = total;
    return rec;
}

std::size_t record_stream_size(std::size_t plaintext_len)
{
    const std::size_t records = (plaintext_len + kMaxRecordPlaintext - 1) / kMaxRecordPlaintext;
    return plaintext_len + records * kRecordOverhead;
}

// ---------------------------------------------------------------------------
// ESP

EspKeys derive_esp_keys(ByteView psk, bool initiator_to_target)
{
    const std::string dir = initiator_to_target ? "i2t" : "t2i";
    auto label = [&](const char* what) { return to_bytes("ipstor esp " + dir + " " + what); };
    EspKeys keys;
    keys.enc = crypto::hmac_sha256(psk, label("enc"));
    keys.auth = crypto::hmac_sha256(psk, label("auth"));
    keys.iv = crypto::hmac_sha256(psk, label("iv"));
    keys.spi = initiator_to_target ? 0x00001001 : 0x00001002;
    return keys;
}

std::size_t esp_packet_size(std::size_t payload)
{
    const std::size_t inner = kTcpHeaderSize + payload + kEspTrailerSize;
    return kEspFixedOverhead + ((inner + 15) / 16) * 16;
}

std::size_t esp_max_payload(std::uint32_t mtu)
{
    if (mtu < kMinMtu)
        throw std::invalid_argument("mtu must be >= 576");
    const std::size_t encrypted = ((mtu - kEspFixedOverhead) / 16) * 16;
    return encrypted - kTcpHeaderSize - kEspTrailerSize;
}

Bytes seal_packet(ByteView inner_segment, const EspKeys& keys, std::uint32_t seq,
                  const std::array<std::uint8_t, 4>& src_ip, const std::array<std::uint8_t, 4>& dst_ip)
{
    const std::size_t unpadded = inner_segment.size() + kEspTrailerSize;
    const std::size_t padded = ((unpadded + 15) / 16) * 16;
    const std::size_t pad = padded - unpadded;

    Bytes plain(inner_segment.begin(), inner_segment.end());
    for (std::size_t i = 1; i <= pad; ++i)
        plain.push_back(static_cast<std::uint8_t>(i));
    plain.push_back(static_cast<std::uint8_t>(pad));
    plain.push_back(kIpProtoTcp);

    std::uint8_t seq_bytes[4];
    put_be32(seq_bytes, seq);
    const auto iv_full = crypto::hmac_sha256(keys.iv, ByteView(seq_bytes, 4));
    std::array<std::uint8_t, 16> iv;
    std::copy_n(iv_full.begin(), 16, iv.begin());

    const Bytes cipher = crypto::aes_cbc_encrypt(keys.enc, iv, plain);

    Bytes out(kEspFixedOverhead + cipher.size());
    if (out.size() > 0xFFFF)
        throw std::invalid_argument("ESP packet exceeds IP length limit");
    IpHeader ip;
    ip.src = src_ip;
    ip.dst = dst_ip;
    ip.protocol = kIpProtoEsp;
    ip.total_length = static_cast<std::uint16_t>(out.size());
    ip.id = static_cast<std::uint16_t>(seq);
    write_ip_header(out.data(), ip);
    std::uint8_t* esp = out.data() + kIpHeaderSize;
    put_be32(esp, keys.spi);
    put_be32(esp + 4, seq);
    std::copy(iv.begin(), iv.end(), esp + kEspHeaderSize);
    std::copy(cipher.begin(), cipher.end(), esp + kEspHeaderSize + kEspIvSize);

    const std::size_t covered = out.size() - kEspIcvSize;
    const auto icv = crypto::hmac_sha256(keys.auth, ByteView(out.data(), covered));
    std::copy_n(icv.begin(), kEspIcvSize, out.begin() + static_cast<std::ptrdiff_t>(covered));
    return out;
}

std::uint32_t esp_sequence(ByteView packet)
{
    if (packet.size() < kIpHeaderSize + kEspHeaderSize)
        throw ProtocolError("packet too short for ESP");
    return get_be32(packet.data() + kIpHeaderSize + 4);
}

Bytes open_packet(ByteView packet, const EspKeys& keys, ReplayWindow& window)
{
    if (packet.size() < kEspFixedOverhead + 16 || (packet.size() - kEspFixedOverhead) % 16 != 0)
        throw IntegrityError("ESP packet has invalid length");

    const std::size_t covered = packet.size() - kEspIcvSize;
    const auto icv = crypto::hmac_sha256(keys.auth, packet.first(covered));
    if (!crypto::equal(ByteView(icv.data(), kEspIcvSize), packet.subspan(covered)))
        throw IntegrityError("ESP integrity check failed");

    const std::uint8_t* p = packet.data();
    if (get_be16(p + 2) != packet.size() || p[9] != kIpProtoEsp)
        throw IntegrityError("ESP outer header inconsistent");
    const std::uint8_t* esp = p + kIpHeaderSize;
    if (get_be32(esp) != keys.spi)
        throw IntegrityError("ESP SPI mismatch");
    const std::uint32_t seq = get_be32(esp + 4);
    if (seq == 0 || seq <= window.highest)
        throw ReplayError("ESP sequence " + std::to_string(seq) + " replayed or regressed (highest " +
                          std::to_string(window.highest) + ")");

    std::array<std::uint8_t, 16> iv;
    std::copy_n(esp + kEspHeaderSize, 16, iv.begin());
    const std::size_t cipher_off = kIpHeaderSize + kEspHeaderSize + kEspIvSize;
    Bytes plain = crypto::aes_cbc_decrypt(keys.enc, iv,
                                          packet.subspan(cipher_off, covered - cipher_off));

    const std::uint8_t next_header = plain.back();
    const std::size_t pad = plain[plain.size() - 2];
    if (next_header != kIpProtoTcp || pad + kEspTrailerSize + kTcpHeaderSize > plain.size())
        throw IntegrityError("ESP trailer malformed");
    const std::size_t inner = plain.size() - kEspTrailerSize - pad;
    for (std::size_t i = 0; i < pad; ++i) {
        if (plain[inner + i] != i + 1)
            throw IntegrityError("ESP padding malformed");
    }
    window.highest = seq;
    plain.resize(inner);
    return plain;
}

// ---------------------------------------------------------------------------

std::uint64_t wire_bytes(SecurityMode mode, std::uint64_t app_bytes, std::uint32_t mtu)
{
    if (mtu < kMinMtu)
        throw std::invalid_argument("mtu must be >= 576");
    auto plain = [mtu](std::uint64_t s) {
        const std::uint64_t seg = mtu - kPseudoHeaderSize;
        return s + kPseudoHeaderSize * ((s + seg - 1) / seg);
    };
    switch (mode) {
    case SecurityMode::Plain: return plain(app_bytes);
    case SecurityMode::RecordLayer: return plain(record_stream_size(app_bytes));
    case SecurityMode::PacketLayer: {
        const std::uint64_t max = esp_max_payload(mtu);
        const std::uint64_t full = app_bytes / max;
        const std::uint64_t rest = app_bytes % max;
        return full * esp_packet_size(max) + (rest ? esp_packet_size(rest) : 0);
    }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Record-layer handshake

namespace {

enum : std::uint8_t {
    kClientHello = 1,
    kServerHello = 2,
    kFinished = 20,
};

Bytes make_message(std::uint8_t type, std::size_t total)
{
    Bytes msg(total, 0);
    msg[0] = type;
    put_be24(msg.data() + 1, static_cast<std::uint32_t>(total - kHandshakeMessageHeader));
    return msg;
}

Bytes labelled(std::string_view label, ByteView data)
{
    Bytes out(label.begin(), label.end());
    out.insert(out.end(), data.begin(), data.end());
    return out;
}

RecordKeys expand(const crypto::Digest& master, std::string_view dir)
{
    RecordKeys keys;
    keys.key = crypto::hmac_sha256(master, to_bytes(std::string(dir) + " key"));
    const auto iv = crypto::hmac_sha256(master, to_bytes(std::string(dir) + " iv"));
    std::copy_n(iv.begin(), keys.iv.size(), keys.iv.begin());
    return keys;
}

} // namespace

RecordHandshake::RecordHandshake(Role role, RandomSource random)
    : role_(role), random_(std::move(random))
{
    crypto::Key256 priv;
    random_(priv.data(), priv.size());
    keys_ = crypto::x25519_from_private(priv);
}

const char* RecordHandshake::message_name(std::size_t index)
{
    static constexpr const char* names[] = {"Client Hello", "Server Hello", "Client Finished",
                                            "Server Finished"};
    return index < 4 ? names[index] : "Handshake";
}

Bytes RecordHandshake::start()
{
    if (role_ != Role::Client || stage_ != 0)
        throw HandshakeError("handshake already started");
    Bytes hello = make_message(kClientHello, kHandshakeMessageSizes[0]);
    std::copy(keys_.public_key.begin(), keys_.public_key.end(), hello.begin() + 4);
    random_(hello.data() + 36, 28);
    transcript_ = hello;
    stage_ = 1;
    return hello;
}

std::optional<std::size_t> RecordHandshake::message_length(ByteView buffered)
{
    if (buffered.size() < kHandshakeMessageHeader)
        return std::nullopt;
    return kHandshakeMessageHeader + get_be24(buffered.data() + 1);
}

void RecordHandshake::derive(const crypto::Key256& shared)
{
    const auto th = crypto::sha256(transcript_);
    master_ = crypto::hmac_sha256(shared, labelled("ipstor master", th));
    RecordKeys c2s = expand(master_, "c2s");
    RecordKeys s2c = expand(master_, "s2c");
    if (role_ == Role::Client) {
        send_keys_ = c2s;
        recv_keys_ = s2c;
    } else {
        send_keys_ = s2c;
        recv_keys_ = c2s;
    }
}

std::optional<Bytes> RecordHandshake::on_message(ByteView message)
{
    auto expect = [&](std::uint8_t type, std::size_t size) {
        if (message.size() != size || message[0] != type)
            throw HandshakeError("unexpected handshake message");
    };
    auto peer_key = [&]() {
        crypto::Key256 pub;
        std::copy_n(message.begin() + 4, 32, pub.begin());
        try {
            return crypto::x25519_shared(keys_.private_key, pub);
        } catch (const std::runtime_error&) {
            throw HandshakeError("invalid peer key share");
        }
    };

    if (role_ == Role::Server && stage_ == 0) {
        expect(kClientHello, kHandshakeMessageSizes[0]);
        const auto shared = peer_key();
        Bytes hello = make_message(kServerHello, kHandshakeMessageSizes[1]);
        std::copy(keys_.public_key.begin(), keys_.public_key.end(), hello.begin() + 4);
        random_(hello.data() + 36, 60);
        transcript_.assign(message.begin(), message.end());
        transcript_.insert(transcript_.end(), hello.begin(), hello.end());
        derive(shared);
        stage_ = 1;
        return hello;
    }
    if (role_ == Role::Client && stage_ == 1) {
        expect(kServerHello, kHandshakeMessageSizes[1]);
        const auto shared = peer_key();
        transcript_.insert(transcript_.end(), message.begin(), message.end());
        derive(shared);
        Bytes fin = make_message(kFinished, kHandshakeMessageSizes[2]);
        const auto verify =
            crypto::hmac_sha256(master_, labelled("client finished", crypto::sha256(transcript_)));
        std::copy(verify.begin(), verify.end(), fin.begin() + 4);
        transcript_.insert(transcript_.end(), fin.begin(), fin.end());
        stage_ = 2;
        return fin;
    }
    if (role_ == Role::Server && stage_ == 1) {
        expect(kFinished, kHandshakeMessageSizes[2]);
        const auto verify =
            crypto::hmac_sha256(master_, labelled("client finished", crypto::sha256(transcript_)));
        if (!crypto::equal(verify, message.subspan(4, 32)))
            throw HandshakeError("client finished verification failed (key mismatch)");
        transcript_.insert(transcript_.end(), message.begin(), message.end());
        Bytes fin = make_message(kFinished, kHandshakeMessageSizes[3]);
        const auto server_verify =
            crypto::hmac_sha256(master_, labelled("server finished", crypto::sha256(transcript_)));
        std::copy(server_verify.begin(), server_verify.end(), fin.begin() + 4);
        stage_ = 2;
        established_ = true;
        return fin;
    }
    if (role_ == Role::Client && stage_ == 2) {
        expect(kFinished, kHandshakeMessageSizes[3]);
        const auto verify =
            crypto::hmac_sha256(master_, labelled("server finished", crypto::sha256(transcript_)));
        if (!crypto::equal(verify, message.subspan(4, 32)))
            throw HandshakeError("server finished verification failed (key mismatch)");
        stage_ = 3;
        established_ = true;
        return std::nullopt;
    }
    throw HandshakeError("handshake message after completion");
}

} // namespace ipstor
