#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ipstor/bytes.hpp"
#include "ipstor/crypto.hpp"
#include "ipstor/endpoint.hpp"
#include "ipstor/pdu.hpp"

namespace ipstor {

enum class SecurityMode {
    Plain,
    RecordLayer, // socket-level records, SSL style
    PacketLayer, // per-packet ESP, IPsec style
};

/// CLI token: "plain", "ssl" or "ipsec".
const char* mode_token(SecurityMode mode);
std::optional<SecurityMode> parse_mode(std::string_view token);

struct LinkParams
{
    double one_way_delay = 0.0;               // seconds
    std::optional<double> bandwidth;          // bits per second; nullopt = unlimited
    std::uint32_t mtu = 1500;

    void validate() const;
};

/// Virtual CPU time charged once per sealed/opened unit plus per payload byte.
struct CryptoCostModel
{
    double per_unit_cost = 0.0; // seconds
    double per_byte_cost = 0.0; // seconds per byte

    static CryptoCostModel defaults(SecurityMode mode);
    void validate() const;

    /// Cost for one unit carrying `bytes` payload bytes, in nanoseconds.
    std::int64_t cost_ns(std::size_t bytes) const;
};

// ---------------------------------------------------------------------------
// Pseudo TCP/IP packets

inline constexpr std::size_t kIpHeaderSize = 20;
inline constexpr std::size_t kTcpHeaderSize = 20;
inline constexpr std::size_t kPseudoHeaderSize = kIpHeaderSize + kTcpHeaderSize;
inline constexpr std::uint32_t kMinMtu = 576;

inline constexpr std::uint8_t kIpProtoTcp = 6;
inline constexpr std::uint8_t kIpProtoEsp = 50;

inline constexpr std::uint8_t kTcpAck = 0x10;
inline constexpr std::uint8_t kTcpPsh = 0x08;

struct PseudoPacket
{
    Endpoint src;
    Endpoint dst;
    std::uint64_t seq = 0;
    Bytes payload;
    std::uint32_t wire_len = 0;
    std::string protocol_label = "TCP";
};

/// Splits a byte stream into segments of at most mtu-40 payload bytes.
std::vector<PseudoPacket> packetize(ByteView stream, std::uint32_t mtu, const Endpoint& src = {},
                                    const Endpoint& dst = {});

struct IpHeader
{
    std::array<std::uint8_t, 4> src{};
    std::array<std::uint8_t, 4> dst{};
    std::uint8_t protocol = kIpProtoTcp;
    std::uint16_t total_length = 0;
    std::uint16_t id = 0;
};

void write_ip_header(std::uint8_t* out, const IpHeader& header);

/// Validates version, header length, checksum and that total_length equals
/// `packet.size()`; throws ProtocolError otherwise.
IpHeader parse_ip_header(ByteView packet);

struct TcpHeader
{
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    std::uint32_t seq = 0;
    std::uint32_t ack = 0;
    std::uint8_t flags = kTcpAck;
};

void write_tcp_header(std::uint8_t* out, const TcpHeader& header);
TcpHeader parse_tcp_header(ByteView segment);

/// 20-byte IP header + 20-byte TCP header + payload.
Bytes build_tcp_packet(const IpHeader& ip, const TcpHeader& tcp, ByteView payload);

// ---------------------------------------------------------------------------
// Record layer

inline constexpr std::size_t kRecordHeaderSize = 5;
inline constexpr std::size_t kRecordTagSize = 16;
inline constexpr std::size_t kRecordOverhead = kRecordHeaderSize + kRecordTagSize;
inline constexpr std::size_t kMaxRecordPlaintext = 16384;
inline constexpr std::uint8_t kRecordTypeApplicationData = 0x17;
inline constexpr std::uint16_t kRecordVersion = 0x0002;

struct RecordKeys
{
    crypto::Key256 key{};
    std::array<std::uint8_t, 12> iv{};
};

/// Seals one record (plaintext of at most 16384 bytes). The record counter
/// `seq` is folded into the nonce, so each value must be used once per key.
Bytes seal_record(ByteView plaintext, const RecordKeys& keys, std::uint64_t seq);

struct OpenedRecord
{
    Bytes plaintext;
    std::size_t consumed;
};

/// Opens the record at the front of `wire`. Returns Incomplete while the
/// record is truncated; throws IntegrityError on a malformed header or tag
/// mismatch.
std::variant<OpenedRecord, Incomplete> open_record(ByteView wire, const RecordKeys& keys,
                                                   std::uint64_t seq);

/// Sealed size of `plaintext_len` bytes split into maximal records.
std::size_t record_stream_size(std::size_t plaintext_len);

// ---------------------------------------------------------------------------
// ESP (transport mode over pseudo IP)

inline constexpr std::size_t kEspHeaderSize = 8;
inline constexpr std::size_t kEspIvSize = 16;
inline constexpr std::size_t kEspIcvSize = 16;
inline constexpr std::size_t kEspTrailerSize = 2;
inline constexpr std::size_t kEspFixedOverhead = kIpHeaderSize + kEspHeaderSize + kEspIvSize + kEspIcvSize;

struct EspKeys
{
    crypto::Key256 enc{};
    crypto::Key256 auth{};
    crypto::Key256 iv{};
    std::uint32_t spi = 0;
};

/// Keys for one direction derived from a 32-byte pre-shared secret.
EspKeys derive_esp_keys(ByteView psk, bool initiator_to_target);

struct ReplayWindow
{
    std::uint32_t highest = 0;
};

/// `inner_segment` is a 20-byte pseudo TCP header followed by payload.
Bytes seal_packet(ByteView inner_segment, const EspKeys& keys, std::uint32_t seq,
                  const std::array<std::uint8_t, 4>& src_ip, const std::array<std::uint8_t, 4>& dst_ip);

/// Verifies the integrity value, then the sequence number against `window`,
/// then decrypts and checks the padding. Throws IntegrityError or
/// ReplayError. Returns the inner segment.
Bytes open_packet(ByteView packet, const EspKeys& keys, ReplayWindow& window);

std::uint32_t esp_sequence(ByteView packet);

/// Wire size of an ESP packet carrying `payload` application bytes.
std::size_t esp_packet_size(std::size_t payload);

/// Largest application payload whose sealed packet fits in `mtu`.
std::size_t esp_max_payload(std::uint32_t mtu);

// ---------------------------------------------------------------------------

/// Total link bytes needed to carry `app_bytes` in one write under `mode`
/// (handshake excluded).
std::uint64_t wire_bytes(SecurityMode mode, std::uint64_t app_bytes, std::uint32_t mtu);

// ---------------------------------------------------------------------------
// Record-layer handshake: ClientHello 64, ServerHello 128, ClientFinished 80,
// ServerFinished 48 bytes; each travels in its own 40-byte-header packet.

inline constexpr std::array<std::size_t, 4> kHandshakeMessageSizes = {64, 128, 80, 48};
inline constexpr std::size_t kHandshakeMessageHeader = 4;
inline constexpr std::uint64_t kHandshakeWireBytes =
    64 + 128 + 80 + 48 + 4 * kPseudoHeaderSize;

class RecordHandshake
{
public:
    enum class Role { Client, Server };
    using RandomSource = std::function<void(std::uint8_t*, std::size_t)>;

    RecordHandshake(Role role, RandomSource random);

    /// Client only: produces the ClientHello.
    Bytes start();

    /// Total length of the message at the front of `buffered`, once its
    /// header is present.
    static std::optional<std::size_t> message_length(ByteView buffered);

    /// Consumes one complete message and returns the reply, if any. Throws
    /// HandshakeError on an unexpected or unverifiable message.
    std::optional<Bytes> on_message(ByteView message);

    bool established() const { return established_; }
    const RecordKeys& send_keys() const { return send_keys_; }
    const RecordKeys& recv_keys() const { return recv_keys_; }

    static const char* message_name(std::size_t index);

private:
    void derive(const crypto::Key256& shared);

    Role role_;
    RandomSource random_;
    crypto::X25519KeyPair keys_{};
    Bytes transcript_;
    crypto::Digest master_{};
    int stage_ = 0;
    bool established_ = false;
    RecordKeys send_keys_;
    RecordKeys recv_keys_;
};

} // namespace ipstor
