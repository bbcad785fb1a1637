#include "ipstor/pdu.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

#include "ipstor/error.hpp"

namespace ipstor {

std::optional<Opcode> opcode_from_wire(std::uint8_t value)
{
    for (auto op : kAllOpcodes) {
        if (static_cast<std::uint8_t>(op) == value)
            return op;
    }
    return std::nullopt;
}

bool is_request(Opcode op)
{
    return static_cast<std::uint8_t>(op) < 0x20;
}

const char* opcode_name(Opcode op)
{
    switch (op) {
    case Opcode::NopOut: return "NOP-Out";
    case Opcode::ScsiCommand: return "SCSI Command";
    case Opcode::LoginRequest: return "Login Request";
    case Opcode::TextRequest: return "Text Request";
    case Opcode::ScsiDataOut: return "SCSI Data-Out";
    case Opcode::LogoutRequest: return "Logout Request";
    case Opcode::NopIn: return "NOP-In";
    case Opcode::ScsiResponse: return "SCSI Response";
    case Opcode::LoginResponse: return "Login Response";
    case Opcode::TextResponse: return "Text Response";
    case Opcode::ScsiDataIn: return "SCSI Data-In";
    case Opcode::LogoutResponse: return "Logout Response";
    }
    return "?";
}

namespace {

bool carries_cmd_sn(Opcode op)
{
    return op != Opcode::ScsiDataOut;
}

bool carries_stat_sn(Opcode op)
{
    return !is_request(op);
}

bool carries_exp_stat_sn(Opcode op)
{
    return is_request(op);
}

bool carries_buffer_offset(Opcode op)
{
    return op == Opcode::ScsiDataIn || op == Opcode::ScsiDataOut;
}

void require(bool ok, const char* what)
{
    if (!ok)
        throw std::invalid_argument(what);
}

} // namespace

Bytes encode_pdu(const Pdu& pdu)
{
    const Bhs& h = pdu.bhs;
    require(h.data_segment_length == pdu.data.size(), "data_segment_length does not match payload");
    require(h.data_segment_length <= kMaxDataSegmentLength, "data segment too long");
    require(carries_stat_sn(h.opcode) || h.stat_sn == 0, "opcode does not carry stat_sn");
    require(carries_exp_stat_sn(h.opcode) || h.exp_stat_sn == 0, "opcode does not carry exp_stat_sn");
    require(carries_cmd_sn(h.opcode) || h.cmd_sn == 0, "opcode does not carry cmd_sn");
    require(carries_buffer_offset(h.opcode) || h.buffer_offset == 0,
            "opcode does not carry buffer_offset");

    const bool is_cmd = h.opcode == Opcode::ScsiCommand;
    if (!is_cmd) {
        require(h.opcode_specific[0] < 0x80, "flag byte overlaps the F bit");
        require(std::all_of(h.opcode_specific.begin() + 7, h.opcode_specific.end(),
                            [](std::uint8_t b) { return b == 0; }),
                "opcode-specific bytes 7..15 are not carried");
    }

    const std::size_t data_len = pdu.data.size();
    Bytes out(kBhsSize + padded_length(data_len), 0);
    std::uint8_t* p = out.data();

    p[0] = static_cast<std::uint8_t>(h.opcode);
    p[1] = h.final_flag ? 0x80 : 0x00;
    put_be24(p + 5, h.data_segment_length);
    std::copy(h.lun.begin(), h.lun.end(), p + 8);
    put_be32(p + 16, h.initiator_task_tag);

    if (is_request(h.opcode)) {
        if (carries_cmd_sn(h.opcode))
            put_be32(p + 24, h.cmd_sn);
        put_be32(p + 28, h.exp_stat_sn);
    } else {
        put_be32(p + 24, h.stat_sn);
        put_be32(p + 28, h.cmd_sn);
    }
    if (carries_buffer_offset(h.opcode))
        put_be32(p + 40, h.buffer_offset);

    if (is_cmd) {
        std::copy(h.opcode_specific.begin(), h.opcode_specific.end(), p + 32);
    } else {
        p[1] |= h.opcode_specific[0];
        p[2] = h.opcode_specific[1];
        p[3] = h.opcode_specific[2];
        std::copy(h.opcode_specific.begin() + 3, h.opcode_specific.begin() + 7, p + 36);
    }

    std::copy(pdu.data.begin(), pdu.data.end(), p + kBhsSize);
    return out;
}

DecodeResult decode_pdu(ByteView wire, std::size_t max_data)
{
    if (wire.size() < kBhsSize)
        return Incomplete{kBhsSize};

    const std::uint8_t* p = wire.data();
    if (p[0] & 0x80)
        throw ProtocolError("reserved bit set in opcode byte");
    auto op = opcode_from_wire(p[0] & 0x3F);
    if (!op) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "unknown opcode 0x%02x", p[0] & 0x3F);
        throw ProtocolError(buf);
    }
    if (p[4] != 0)
        throw ProtocolError("additional header segments are not supported");

    const std::uint32_t data_len = get_be24(p + 5);
    if (data_len > max_data)
        throw ProtocolError("data segment length " + std::to_string(data_len) +
                            " exceeds limit " + std::to_string(max_data));

    const std::size_t total = kBhsSize + padded_length(data_len);
    if (wire.size() < total)
        return Incomplete{total};

    Pdu pdu;
    Bhs& h = pdu.bhs;
    h.opcode = *op;
    h.final_flag = (p[1] & 0x80) != 0;
    h.data_segment_length = data_len;
    std::copy(p + 8, p + 16, h.lun.begin());
    h.initiator_task_tag = get_be32(p + 16);

    if (is_request(h.opcode)) {
        if (carries_cmd_sn(h.opcode))
            h.cmd_sn = get_be32(p + 24);
        h.exp_stat_sn = get_be32(p + 28);
    } else {
        h.stat_sn = get_be32(p + 24);
        h.cmd_sn = get_be32(p + 28);
    }
    if (carries_buffer_offset(h.opcode))
        h.buffer_offset = get_be32(p + 40);

    if (h.opcode == Opcode::ScsiCommand) {
        std::copy(p + 32, p + 48, h.opcode_specific.begin());
    } else {
        h.opcode_specific[0] = p[1] & 0x7F;
        h.opcode_specific[1] = p[2];
        h.opcode_specific[2] = p[3];
        std::copy(p + 36, p + 40, h.opcode_specific.begin() + 3);
    }

    pdu.data.assign(p + kBhsSize, p + kBhsSize + data_len);
    return Decoded{std::move(pdu), total};
}

std::array<std::uint8_t, 8> lun_to_wire(std::uint32_t lun)
{
    if (lun > 0xFF)
        throw std::invalid_argument("LUN must be below 256");
    std::array<std::uint8_t, 8> out{};
    out[1] = static_cast<std::uint8_t>(lun);
    return out;
}

std::uint32_t lun_from_wire(const std::array<std::uint8_t, 8>& wire)
{
    return wire[1];
}

std::uint32_t data_sn(const Bhs& bhs)
{
    return get_be32(bhs.opcode_specific.data() + 3);
}

void set_data_sn(Bhs& bhs, std::uint32_t sn)
{
    put_be32(bhs.opcode_specific.data() + 3, sn);
}

Pdu make_pdu(Bhs bhs, Bytes data)
{
    bhs.data_segment_length = static_cast<std::uint32_t>(data.size());
    return Pdu{bhs, std::move(data)};
}

// ---------------------------------------------------------------------------

std::array<std::uint8_t, 10> encode_cdb(const Cdb& cdb)
{
    if (cdb.blocks == 0)
        throw std::invalid_argument("CDB transfer length must be at least one block");
    std::array<std::uint8_t, 10> out{};
    out[0] = static_cast<std::uint8_t>(cdb.kind);
    put_be32(out.data() + 2, cdb.lba);
    put_be16(out.data() + 7, cdb.blocks);
    return out;
}

Cdb decode_cdb(ByteView bytes)
{
    if (bytes.size() < 10)
        throw ProtocolError("CDB shorter than 10 bytes");
    Cdb cdb;
    switch (bytes[0]) {
    case 0x28: cdb.kind = CdbKind::Read10; break;
    case 0x2A: cdb.kind = CdbKind::Write10; break;
    default: {
        char buf[48];
        std::snprintf(buf, sizeof buf, "unsupported CDB opcode 0x%02x", bytes[0]);
        throw ProtocolError(buf);
    }
    }
    cdb.lba = get_be32(bytes.data() + 2);
    cdb.blocks = get_be16(bytes.data() + 7);
    if (cdb.blocks == 0)
        throw ProtocolError("CDB transfer length is zero");
    return cdb;
}

// ---------------------------------------------------------------------------

Bytes encode_text(const TextKeys& keys)
{
    Bytes out;
    for (const auto& [key, value] : keys) {
        require(!key.empty(), "empty text key");
        require(key.find_first_of(std::string_view("=\0", 2)) == std::string::npos,
                "text key contains '=' or NUL");
        require(value.find('\0') == std::string::npos, "text value contains NUL");
        out.insert(out.end(), key.begin(), key.end());
        out.push_back('=');
        out.insert(out.end(), value.begin(), value.end());
        out.push_back(0);
    }
    return out;
}

TextKeys decode_text(ByteView bytes)
{
    TextKeys keys;
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        auto end = std::find(bytes.begin() + pos, bytes.end(), std::uint8_t{0});
        if (end == bytes.end())
            throw ProtocolError("text key/value pair missing NUL terminator");
        std::string pair(bytes.begin() + pos, end);
        auto eq = pair.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ProtocolError("text pair without key=value form: " + pair);
        keys.emplace_back(pair.substr(0, eq), pair.substr(eq + 1));
        pos = static_cast<std::size_t>(end - bytes.begin()) + 1;
    }
    return keys;
}

std::optional<std::string> find_key(const TextKeys& keys, std::string_view key)
{
    for (const auto& [k, v] : keys) {
        if (k == key)
            return v;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------

std::string describe_pdu(const Pdu& pdu)
{
    const Bhs& h = pdu.bhs;
    char lun[16];
    std::snprintf(lun, sizeof lun, "0x%02x", lun_from_wire(h.lun));

    switch (h.opcode) {
    case Opcode::NopOut: return "NOP Out";
    case Opcode::NopIn: return "NOP In";
    case Opcode::LoginRequest: return "Login Command";
    case Opcode::LoginResponse:
        return login_status_class(h) == 0 ? "Login Response (Success)"
                                          : "Login Response (Rejected)";
    case Opcode::TextRequest: return "Text Command";
    case Opcode::TextResponse: return "Text Response";
    case Opcode::LogoutRequest: return "Logout Command";
    case Opcode::LogoutResponse: return "Logout Response (Connection or session closed successfully)";
    case Opcode::ScsiCommand: {
        Cdb cdb;
        try {
            cdb = decode_cdb(ByteView(h.opcode_specific.data(), 10));
        } catch (const ProtocolError&) {
            return std::string("SCSI: Command LUN: ") + lun;
        }
        char buf[96];
        std::snprintf(buf, sizeof buf, "SCSI: %s LUN: %s (LBA: 0x%08x, Len: %u)",
                      cdb.kind == CdbKind::Read10 ? "Read(10)" : "Write(10)", lun, cdb.lba,
                      unsigned{cdb.blocks});
        return buf;
    }
    case Opcode::ScsiDataOut: return std::string("SCSI: Data Out LUN: ") + lun + " (Write(10) Request Data)";
    case Opcode::ScsiDataIn: return std::string("SCSI: Data In LUN: ") + lun + " (Read(10) Response Data)";
    case Opcode::ScsiResponse:
        return std::string("SCSI: Response LUN: ") + lun +
               (response_status(h) == scsi_status::Good ? " (Good)" : " (Check Condition)");
    }
    return opcode_name(h.opcode);
}

} // namespace ipstor
