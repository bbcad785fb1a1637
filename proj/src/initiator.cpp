#include "ipstor/initiator.hpp"

#include <algorithm>
#include <charconv>

#include <spdlog/spdlog.h>

#include "ipstor/error.hpp"

namespace ipstor {

namespace {

class BusyGuard
{
public:
    explicit BusyGuard(std::atomic<bool>& flag) : flag_(flag)
    {
        if (flag_.exchange(true))
            throw UsageError("initiator session used concurrently");
    }
    ~BusyGuard() { flag_ = false; }

private:
    std::atomic<bool>& flag_;
};

StorageError storage_error(const Pdu& response)
{
    std::uint8_t key = 0;
    std::uint8_t asc = 0;
    if (response.data.size() >= 2 + 14) {
        key = response.data[2 + 2] & 0x0F;
        asc = response.data[2 + 12];
    }
    char what[96];
    std::snprintf(what, sizeof what, "SCSI status 0x%02x (sense key 0x%02x, ASC 0x%02x)",
                  response_status(response.bhs), key, asc);
    return StorageError(what, response_status(response.bhs), key, asc);
}

} // namespace

void InitiatorConfig::validate() const
{
    if (initiator_name.empty())
        throw UsageError("initiator name must not be empty");
    if (portal.host.empty() || portal.port == 0)
        throw UsageError("portal must be host:port");
    if (chap && (chap->user.empty() || chap->secret.empty()))
        throw UsageError("CHAP needs both a user and a secret");
    if (max_recv_data_segment < 512 || max_recv_data_segment > kMaxDataSegmentLength)
        throw UsageError("MaxRecvDataSegmentLength out of range");
}

InitiatorSession::InitiatorSession(std::unique_ptr<Channel> channel, const InitiatorConfig& config)
    : channel_(std::move(channel)), config_(config), max_data_segment_(config.max_recv_data_segment)
{}

InitiatorSession::~InitiatorSession()
{
    if (state_ == State::LoggedIn) {
        try {
            do_logout();
        } catch (const std::exception& e) {
            spdlog::debug("initiator: implicit logout failed: {}", e.what());
        }
    }
}

std::unique_ptr<InitiatorSession> InitiatorSession::login(Network& network, const InitiatorConfig& config,
                                                          const std::string& target_name)
{
    config.validate();
    if (target_name.empty())
        throw UsageError("target name must not be empty");
    auto channel = network.connect(config.portal, config.channel);
    std::unique_ptr<InitiatorSession> session(new InitiatorSession(std::move(channel), config));
    session->do_login("Normal", target_name);
    return session;
}

std::vector<DiscoveredTarget> discover(Network& network, const InitiatorConfig& config)
{
    config.validate();
    auto channel = network.connect(config.portal, config.channel);
    InitiatorSession session(std::move(channel), config);
    session.do_login("Discovery", "");
    const TextKeys keys = session.text_request({{"SendTargets", "All"}});
    std::vector<DiscoveredTarget> out;
    for (const auto& [key, value] : keys) {
        if (key == "TargetName")
            out.push_back(DiscoveredTarget{value, ""});
        else if (key == "TargetAddress" && !out.empty())
            out.back().address = value;
    }
    session.logout();
    return out;
}

// ---------------------------------------------------------------------------

Bhs InitiatorSession::request(Opcode op)
{
    Bhs h;
    h.opcode = op;
    h.final_flag = true;
    h.initiator_task_tag = next_itt_++;
    h.cmd_sn = cmd_sn_;
    h.exp_stat_sn = exp_stat_sn_;
    return h;
}

void InitiatorSession::send_pdu(const Pdu& pdu, const SendMeta& meta)
{
    channel_->send(encode_pdu(pdu), meta);
}

Pdu InitiatorSession::receive_pdu()
{
    const std::size_t limit = std::max<std::size_t>(kDefaultDecodeLimit, max_data_segment_);
    for (;;) {
        if (!rx_.empty()) {
            auto result = decode_pdu(rx_, limit);
            if (auto* decoded = std::get_if<Decoded>(&result)) {
                Pdu pdu = std::move(decoded->pdu);
                rx_.erase(rx_.begin(), rx_.begin() + static_cast<std::ptrdiff_t>(decoded->consumed));
                return pdu;
            }
        }
        Bytes chunk = channel_->receive();
        if (chunk.empty())
            throw TransportError("connection closed by the target");
        rx_.insert(rx_.end(), chunk.begin(), chunk.end());
    }
}

void InitiatorSession::check_stat_sn(const Bhs& bhs)
{
    if (stat_sn_synced_ && bhs.stat_sn != exp_stat_sn_)
        throw ProtocolError("stat_sn " + std::to_string(bhs.stat_sn) + ", expected " +
                            std::to_string(exp_stat_sn_));
    stat_sn_synced_ = true;
    exp_stat_sn_ = bhs.stat_sn + 1;
}

void InitiatorSession::require_logged_in(const char* what) const
{
    if (state_ != State::LoggedIn)
        throw UsageError(std::string(what) + " on a session that is not logged in");
}

void InitiatorSession::do_login(const std::string& session_type, const std::string& target_name)
{
    TextKeys keys = {{"InitiatorName", config_.initiator_name}, {"SessionType", session_type}};
    if (!target_name.empty())
        keys.emplace_back("TargetName", target_name);
    keys.emplace_back("AuthMethod", config_.chap ? "CHAP,None" : "None");
    keys.emplace_back("MaxRecvDataSegmentLength", std::to_string(config_.max_recv_data_segment));

    const std::uint32_t itt = next_itt_;
    Bhs h = request(Opcode::LoginRequest);
    h.opcode_specific[0] = login_flags(login_stage::Security, login_stage::FullFeature);
    Pdu req = make_pdu(h, encode_text(keys));

    for (int round = 0; round < 2; ++round) {
        send_pdu(req, SendMeta{describe_pdu(req), std::nullopt, SendMeta::TagOn::None, 0, 0});
        const Pdu resp = receive_pdu();
        if (resp.bhs.opcode != Opcode::LoginResponse || resp.bhs.initiator_task_tag != itt)
            throw ProtocolError("expected a login response");
        check_stat_sn(resp.bhs);
        const std::uint8_t cls = login_status_class(resp.bhs);
        const std::uint8_t detail = login_status_detail(resp.bhs);
        if (cls == 2 && detail == 1)
            throw AuthFailure("login rejected: authentication failed");
        if (cls != 0) {
            const std::string why = cls == 2 && detail == 3 ? "target not found" : "login rejected";
            throw LoginRejected(why + " (status " + std::to_string(cls) + "/" + std::to_string(detail) + ")",
                                cls, detail);
        }
        const TextKeys reply = decode_text(resp.data);

        if (const auto challenge_hex = find_key(reply, "CHAP_C")) {
            if (round != 0)
                throw ProtocolError("second CHAP challenge");
            if (!config_.chap)
                throw AuthFailure("target requires CHAP but no credentials are configured");
            if (find_key(reply, "CHAP_A").value_or("") != "7")
                throw ProtocolError("unsupported CHAP algorithm");
            Bytes challenge;
            try {
                challenge = from_hex(*challenge_hex);
            } catch (const std::invalid_argument&) {
                throw ProtocolError("CHAP_C is not hex");
            }
            const Bytes response = chap_response(config_.chap->secret, challenge);
            TextKeys answer = {{"CHAP_N", config_.chap->user}, {"CHAP_R", "0x" + to_hex(response)}};
            Bhs h2 = req.bhs;
            h2.exp_stat_sn = exp_stat_sn_;
            req = make_pdu(h2, encode_text(answer));
            continue;
        }

        if (!resp.bhs.final_flag || login_nsg(resp.bhs) != login_stage::FullFeature)
            throw ProtocolError("login response does not complete the login");
        if (const auto mrdsl = find_key(reply, "MaxRecvDataSegmentLength")) {
            std::uint32_t n = 0;
            auto [end, ec] = std::from_chars(mrdsl->data(), mrdsl->data() + mrdsl->size(), n);
            if (ec != std::errc() || end != mrdsl->data() + mrdsl->size() || n < 512)
                throw ProtocolError("bad MaxRecvDataSegmentLength in login response");
            max_data_segment_ = std::min(n, config_.max_recv_data_segment);
        }
        state_ = State::LoggedIn;
        return;
    }
    throw ProtocolError("login did not complete");
}

TextKeys InitiatorSession::text_request(const TextKeys& keys)
{
    require_logged_in("text request");
    Bhs h = request(Opcode::TextRequest);
    const std::uint32_t itt = h.initiator_task_tag;
    Pdu req = make_pdu(h, encode_text(keys));
    send_pdu(req, SendMeta{describe_pdu(req), std::nullopt, SendMeta::TagOn::None, 0, 0});
    ++cmd_sn_;
    const Pdu resp = receive_pdu();
    if (resp.bhs.opcode != Opcode::TextResponse || resp.bhs.initiator_task_tag != itt)
        throw ProtocolError("expected a text response");
    check_stat_sn(resp.bhs);
    return decode_text(resp.data);
}

void InitiatorSession::write(std::uint32_t lun, std::uint32_t lba, ByteView data)
{
    BusyGuard guard(busy_);
    require_logged_in("write");
    if (data.empty() || data.size() % kBlockSize != 0)
        throw UsageError("write length must be a positive multiple of 512");
    if (data.size() / kBlockSize > 0xFFFF)
        throw UsageError("write larger than 65535 blocks");
    if (lun > 255)
        throw UsageError("LUN must be below 256");

    Bhs h = request(Opcode::ScsiCommand);
    const std::uint32_t itt = h.initiator_task_tag;
    h.lun = lun_to_wire(lun);
    const auto cdb = encode_cdb(Cdb{CdbKind::Write10, lba, static_cast<std::uint16_t>(data.size() / kBlockSize)});
    std::copy(cdb.begin(), cdb.end(), h.opcode_specific.begin());
    const Pdu cmd = make_pdu(h);
    send_pdu(cmd, SendMeta{describe_pdu(cmd), itt, SendMeta::TagOn::First, 0, 0});
    ++cmd_sn_;

    std::uint32_t sn = 0;
    for (std::size_t pos = 0; pos < data.size(); pos += max_data_segment_) {
        const std::size_t n = std::min<std::size_t>(max_data_segment_, data.size() - pos);
        Bhs d;
        d.opcode = Opcode::ScsiDataOut;
        d.final_flag = pos + n == data.size();
        d.lun = h.lun;
        d.initiator_task_tag = itt;
        d.exp_stat_sn = exp_stat_sn_;
        d.buffer_offset = static_cast<std::uint32_t>(pos);
        set_data_sn(d, sn++);
        const Pdu out = make_pdu(d, Bytes(data.begin() + static_cast<std::ptrdiff_t>(pos),
                                          data.begin() + static_cast<std::ptrdiff_t>(pos + n)));
        send_pdu(out, SendMeta{describe_pdu(out), std::nullopt, SendMeta::TagOn::None, kBhsSize, kBhsSize + n});
    }

    const Pdu resp = receive_pdu();
    if (resp.bhs.opcode != Opcode::ScsiResponse || resp.bhs.initiator_task_tag != itt)
        throw ProtocolError(std::string("expected SCSI response, got ") + opcode_name(resp.bhs.opcode));
    check_stat_sn(resp.bhs);
    if (response_status(resp.bhs) != scsi_status::Good)
        throw storage_error(resp);
}

Bytes InitiatorSession::read(std::uint32_t lun, std::uint32_t lba, std::uint32_t blocks)
{
    BusyGuard guard(busy_);
    require_logged_in("read");
    if (blocks == 0 || blocks > 0xFFFF)
        throw UsageError("read length must be 1..65535 blocks");
    if (lun > 255)
        throw UsageError("LUN must be below 256");

    Bhs h = request(Opcode::ScsiCommand);
    const std::uint32_t itt = h.initiator_task_tag;
    h.lun = lun_to_wire(lun);
    const auto cdb = encode_cdb(Cdb{CdbKind::Read10, lba, static_cast<std::uint16_t>(blocks)});
    std::copy(cdb.begin(), cdb.end(), h.opcode_specific.begin());
    const Pdu cmd = make_pdu(h);
    send_pdu(cmd, SendMeta{describe_pdu(cmd), itt, SendMeta::TagOn::First, 0, 0});
    ++cmd_sn_;

    const std::size_t expected = std::size_t{blocks} * kBlockSize;
    Bytes data;
    data.reserve(expected);
    bool final_seen = false;
    for (;;) {
        Pdu resp = receive_pdu();
        if (resp.bhs.initiator_task_tag != itt)
            throw ProtocolError("response for unknown task " + std::to_string(resp.bhs.initiator_task_tag));
        if (resp.bhs.opcode == Opcode::ScsiDataIn) {
            if (final_seen)
                throw ProtocolError("Data-In after the final one");
            if (resp.bhs.buffer_offset != data.size())
                throw ProtocolError("Data-In offset " + std::to_string(resp.bhs.buffer_offset) +
                                    " leaves a gap or overlap at " + std::to_string(data.size()));
            if (data.size() + resp.data.size() > expected)
                throw ProtocolError("more Data-In than requested");
            data.insert(data.end(), resp.data.begin(), resp.data.end());
            final_seen = resp.bhs.final_flag;
            continue;
        }
        if (resp.bhs.opcode != Opcode::ScsiResponse)
            throw ProtocolError(std::string("unexpected ") + opcode_name(resp.bhs.opcode));
        check_stat_sn(resp.bhs);
        if (response_status(resp.bhs) != scsi_status::Good)
            throw storage_error(resp);
        if (!final_seen || data.size() != expected)
            throw ProtocolError("read returned " + std::to_string(data.size()) + " of " +
                                std::to_string(expected) + " bytes");
        return data;
    }
}

double InitiatorSession::nop_ping(ByteView payload)
{
    BusyGuard guard(busy_);
    require_logged_in("ping");
    Bhs h = request(Opcode::NopOut);
    const std::uint32_t itt = h.initiator_task_tag;
    const Pdu nop = make_pdu(h, Bytes(payload.begin(), payload.end()));
    const std::int64_t start = channel_->now_ns();
    send_pdu(nop, SendMeta{describe_pdu(nop), itt, SendMeta::TagOn::First, 0, 0});
    ++cmd_sn_;
    const Pdu resp = receive_pdu();
    const std::int64_t end = channel_->now_ns();
    if (resp.bhs.opcode != Opcode::NopIn || resp.bhs.initiator_task_tag != itt)
        throw ProtocolError("expected NOP-In");
    check_stat_sn(resp.bhs);
    if (resp.data.size() != payload.size() || !std::equal(resp.data.begin(), resp.data.end(), payload.begin()))
        throw ProtocolError("NOP-In payload differs from the ping");
    return static_cast<double>(end - start) / 1e9;
}

void InitiatorSession::logout()
{
    BusyGuard guard(busy_);
    if (state_ == State::LoggedOut)
        throw UsageError("session already logged out");
    do_logout();
}

void InitiatorSession::do_logout()
{
    if (state_ == State::LoggedIn) {
        try {
            Bhs h = request(Opcode::LogoutRequest);
            const std::uint32_t itt = h.initiator_task_tag;
            const Pdu req = make_pdu(h);
            send_pdu(req, SendMeta{describe_pdu(req), std::nullopt, SendMeta::TagOn::None, 0, 0});
            ++cmd_sn_;
            const Pdu resp = receive_pdu();
            if (resp.bhs.opcode != Opcode::LogoutResponse || resp.bhs.initiator_task_tag != itt)
                throw ProtocolError("expected a logout response");
            check_stat_sn(resp.bhs);
        } catch (const TransportError& e) {
            spdlog::warn("initiator: connection lost during logout: {}", e.what());
        }
    }
    state_ = State::LoggedOut;
    channel_->close();
}

} // namespace ipstor
