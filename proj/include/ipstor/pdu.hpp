#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ipstor/bytes.hpp"

namespace ipstor {

inline constexpr std::size_t kBhsSize = 48;
inline constexpr std::size_t kBlockSize = 512;
inline constexpr std::uint32_t kMaxDataSegmentLength = (1u << 24) - 1;
inline constexpr std::size_t kDefaultDecodeLimit = 1u << 20;
inline constexpr std::uint32_t kDefaultMaxRecvDataSegment = 65536;

// Wire values follow RFC 3720 section 10.2.1.2. Request opcodes are below
// 0x20, response opcodes are 0x20 and above.
enum class Opcode : std::uint8_t {
    NopOut = 0x00,
    ScsiCommand = 0x01,
    LoginRequest = 0x03,
    TextRequest = 0x04,
    ScsiDataOut = 0x05,
    LogoutRequest = 0x06,
    NopIn = 0x20,
    ScsiResponse = 0x21,
    LoginResponse = 0x23,
    TextResponse = 0x24,
    ScsiDataIn = 0x25,
    LogoutResponse = 0x26,
};

inline constexpr std::array<Opcode, 12> kAllOpcodes = {
    Opcode::NopOut,        Opcode::ScsiCommand,   Opcode::LoginRequest, Opcode::TextRequest,
    Opcode::ScsiDataOut,   Opcode::LogoutRequest, Opcode::NopIn,        Opcode::ScsiResponse,
    Opcode::LoginResponse, Opcode::TextResponse,  Opcode::ScsiDataIn,   Opcode::LogoutResponse,
};

std::optional<Opcode> opcode_from_wire(std::uint8_t value);
bool is_request(Opcode op);
const char* opcode_name(Opcode op);

/// Basic header segment.
///
/// Field placement on the wire is per opcode, following RFC 3720:
///
///   all:        0 opcode, 1 F-bit | flags, 4 AHS length (always 0),
///               5..7 data segment length, 8..15 LUN, 16..19 task tag
///   requests:   24..27 cmd_sn, 28..31 exp_stat_sn (Data-Out: exp_stat_sn only)
///   responses:  24..27 stat_sn, 28..31 cmd_sn (carried as ExpCmdSN)
///   data PDUs:  40..43 buffer_offset
///
/// `opcode_specific` holds the CDB (wire 32..47) for ScsiCommand. For every
/// other opcode only bytes [0..6] are carried: [0] -> low 7 bits of byte 1,
/// [1..2] -> bytes 2..3, [3..6] -> bytes 36..39. A field the opcode does not
/// carry must be zero; encode_pdu rejects it otherwise.
struct Bhs
{
    Opcode opcode = Opcode::NopOut;
    bool final_flag = false;
    std::uint32_t data_segment_length = 0;
    std::array<std::uint8_t, 8> lun{};
    std::uint32_t initiator_task_tag = 0;
    std::uint32_t cmd_sn = 0;
    std::uint32_t stat_sn = 0;
    std::uint32_t exp_stat_sn = 0;
    std::uint32_t buffer_offset = 0;
    std::array<std::uint8_t, 16> opcode_specific{};

    bool operator==(const Bhs&) const = default;
};

struct Pdu
{
    Bhs bhs;
    Bytes data;

    bool operator==(const Pdu&) const = default;
};

/// Stream framing signal: at least `needed` bytes must be buffered before the
/// next PDU can be decoded.
struct Incomplete
{
    std::size_t needed;
};

struct Decoded
{
    Pdu pdu;
    std::size_t consumed;
};

using DecodeResult = std::variant<Decoded, Incomplete>;

/// Throws std::invalid_argument when the header disagrees with the payload
/// length or sets a field the opcode does not carry.
Bytes encode_pdu(const Pdu& pdu);

/// Decodes one PDU from the front of `wire`. Never reads beyond the frame it
/// returns. Throws ProtocolError on an unknown opcode, a nonzero AHS length
/// or a data segment longer than `max_data`.
DecodeResult decode_pdu(ByteView wire, std::size_t max_data = kDefaultDecodeLimit);

inline std::size_t padded_length(std::size_t n)
{
    return (n + 3) & ~std::size_t{3};
}

// LUN helpers (single-level peripheral addressing, LUN < 256).
std::array<std::uint8_t, 8> lun_to_wire(std::uint32_t lun);
std::uint32_t lun_from_wire(const std::array<std::uint8_t, 8>& wire);

// ---------------------------------------------------------------------------
// SCSI CDBs

enum class CdbKind : std::uint8_t {
    Read10 = 0x28,
    Write10 = 0x2A,
};

struct Cdb
{
    CdbKind kind = CdbKind::Read10;
    std::uint32_t lba = 0;
    std::uint16_t blocks = 1;

    bool operator==(const Cdb&) const = default;
};

std::array<std::uint8_t, 10> encode_cdb(const Cdb& cdb);

/// Reads the first 10 bytes of `bytes`.
Cdb decode_cdb(ByteView bytes);

// ---------------------------------------------------------------------------
// Text keys

using TextKeys = std::vector<std::pair<std::string, std::string>>;

Bytes encode_text(const TextKeys& keys);
TextKeys decode_text(ByteView bytes);

/// First value for `key`, if present.
std::optional<std::string> find_key(const TextKeys& keys, std::string_view key);

// ---------------------------------------------------------------------------
// Field accessors for the opcode-specific area

namespace scsi_status {
inline constexpr std::uint8_t Good = 0x00;
inline constexpr std::uint8_t CheckCondition = 0x02;
} // namespace scsi_status

inline std::uint8_t response_status(const Bhs& bhs)
{
    return bhs.opcode_specific[2];
}

inline void set_response_status(Bhs& bhs, std::uint8_t status)
{
    bhs.opcode_specific[2] = status;
}

// Login stage flags live in opcode_specific[0]: C (0x40), CSG (0x0C), NSG (0x03).
// The transit bit is the F bit.
namespace login_stage {
inline constexpr std::uint8_t Security = 0;
inline constexpr std::uint8_t Operational = 1;
inline constexpr std::uint8_t FullFeature = 3;
} // namespace login_stage

inline std::uint8_t login_flags(std::uint8_t csg, std::uint8_t nsg)
{
    return static_cast<std::uint8_t>(((csg & 0x3) << 2) | (nsg & 0x3));
}

inline std::uint8_t login_csg(const Bhs& bhs)
{
    return (bhs.opcode_specific[0] >> 2) & 0x3;
}

inline std::uint8_t login_nsg(const Bhs& bhs)
{
    return bhs.opcode_specific[0] & 0x3;
}

// Login response status class and detail (wire bytes 36 and 37).
inline std::uint8_t login_status_class(const Bhs& bhs)
{
    return bhs.opcode_specific[3];
}

inline std::uint8_t login_status_detail(const Bhs& bhs)
{
    return bhs.opcode_specific[4];
}

inline void set_login_status(Bhs& bhs, std::uint8_t status_class, std::uint8_t detail)
{
    bhs.opcode_specific[3] = status_class;
    bhs.opcode_specific[4] = detail;
}

// DataSN for Data-In / Data-Out (wire bytes 36..39).
std::uint32_t data_sn(const Bhs& bhs);
void set_data_sn(Bhs& bhs, std::uint32_t sn);

/// Builds a PDU whose header data length matches `data`.
Pdu make_pdu(Bhs bhs, Bytes data = {});

/// One-line description in the style of a protocol analyser's Info column,
/// e.g. "SCSI: Data In LUN: 0x00 (Read(10) Response Data)".
std::string describe_pdu(const Pdu& pdu);

} // namespace ipstor
