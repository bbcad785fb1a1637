#include "ipstor/target.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "ipstor/crypto.hpp"
#include "ipstor/error.hpp"

namespace ipstor {

namespace {

constexpr std::size_t kMaxHeldCommands = 64;

// SCSI sense keys and additional sense codes used by the target.
constexpr std::uint8_t kSenseIllegalRequest = 0x05;
constexpr std::uint8_t kAscInvalidOpcode = 0x20;
constexpr std::uint8_t kAscLbaOutOfRange = 0x21;
constexpr std::uint8_t kAscLunNotSupported = 0x25;

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
std::optional<T> to_number(std::string_view s)
{
    T value{};
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || end != s.data() + s.size())
        return std::nullopt;
    return value;
}

std::string hex_value(ByteView bytes)
{
    return "0x" + to_hex(bytes);
}

} // namespace

Bytes chap_response(std::string_view secret, ByteView challenge)
{
    Bytes input(secret.begin(), secret.end());
    input.insert(input.end(), challenge.begin(), challenge.end());
    const auto digest = crypto::sha256(input);
    return Bytes(digest.begin(), digest.end());
}

const char* phase_name(SessionPhase phase)
{
    switch (phase) {
    case SessionPhase::AwaitingLogin: return "AwaitingLogin";
    case SessionPhase::Discovery: return "Discovery";
    case SessionPhase::FullFeature: return "FullFeature";
    case SessionPhase::LoggedOut: return "LoggedOut";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Configuration

void TargetConfig::validate() const
{
    if (listen.port == 0)
        throw UsageError("listen port must be in 1..65535");
    std::vector<std::uint32_t> ids;
    for (const auto& lun : luns) {
        if (lun.id > 255)
            throw UsageError("LUN ids must be below 256");
        if (lun.blocks < 1)
            throw UsageError("LUN " + std::to_string(lun.id) + " needs a capacity of at least one block");
        if (std::find(ids.begin(), ids.end(), lun.id) != ids.end())
            throw UsageError("duplicate LUN id " + std::to_string(lun.id));
        ids.push_back(lun.id);
    }
    if (chap && (chap->user.empty() || chap->secret.empty()))
        throw UsageError("CHAP needs both a user and a secret");
    if (max_recv_data_segment < 512 || max_recv_data_segment > kMaxDataSegmentLength)
        throw UsageError("max_recv_data_segment out of range");
}

TargetConfig TargetConfig::parse(std::string_view text)
{
    TargetConfig cfg;
    cfg.target_name.clear();
    std::map<std::uint32_t, LunConfig> luns;
    std::optional<std::string> chap_user;
    std::optional<std::string> chap_secret;

    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = raw;
        if (auto hash = line.find('#'); hash != std::string_view::npos)
            line = line.substr(0, hash);
        const std::string content = trim(line);
        if (content.empty())
            continue;
        const auto eq = content.find('=');
        if (eq == std::string::npos)
            throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(std::string_view(content).substr(0, eq));
        const std::string value = trim(std::string_view(content).substr(eq + 1));
        auto bad = [&](const std::string& why) {
            return UsageError("config line " + std::to_string(line_no) + ": " + why);
        };

        if (key == "target_name") {
            cfg.target_name = value;
        } else if (key == "listen") {
            cfg.listen = Endpoint::parse(value);
        } else if (key == "chap.user") {
            chap_user = value;
        } else if (key == "chap.secret") {
            chap_secret = value;
        } else if (key == "max_recv_data_segment") {
            auto n = to_number<std::uint32_t>(value);
            if (!n)
                throw bad("max_recv_data_segment is not a number");
            cfg.max_recv_data_segment = *n;
        } else if (key.rfind("lun.", 0) == 0) {
            const auto dot = key.find('.', 4);
            if (dot == std::string::npos)
                throw bad("unknown key " + key);
            auto id = to_number<std::uint32_t>(std::string_view(key).substr(4, dot - 4));
            if (!id)
                throw bad("bad LUN id in " + key);
            const std::string field = key.substr(dot + 1);
            LunConfig& lun = luns[*id];
            lun.id = *id;
            if (field == "blocks") {
                auto n = to_number<std::uint64_t>(value);
                if (!n)
                    throw bad("lun blocks is not a number");
                lun.blocks = *n;
            } else if (field == "file") {
                lun.file = value;
            } else {
                throw bad("unknown key " + key);
            }
        } else {
            throw bad("unknown key " + key);
        }
    }
    if (chap_user || chap_secret)
        cfg.chap = ChapCredentials{chap_user.value_or(""), chap_secret.value_or("")};
    for (auto& [id, lun] : luns)
        cfg.luns.push_back(lun);
    cfg.validate();
    return cfg;
}

TargetConfig TargetConfig::load(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot read config " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

// ---------------------------------------------------------------------------
// Session

TargetSession::TargetSession(const TargetConfig& config,
                             std::map<std::uint32_t, std::shared_ptr<BlockStore>> luns,
                             std::string portal_address, RandomSource random)
    : config_(config),
      luns_(std::move(luns)),
      portal_address_(std::move(portal_address)),
      random_(std::move(random)),
      max_data_segment_(config.max_recv_data_segment)
{}

Bhs TargetSession::response_header(Opcode op, const Bhs& request, bool status_bearing)
{
    Bhs h;
    h.opcode = op;
    h.final_flag = true;
    h.lun = request.lun;
    h.initiator_task_tag = request.initiator_task_tag;
    if (status_bearing)
        h.stat_sn = stat_sn_++;
    h.cmd_sn = exp_cmd_sn_;
    return h;
}

Pdu TargetSession::check_condition(const Bhs& request, std::uint8_t sense_key, std::uint8_t asc)
{
    Bhs h = response_header(Opcode::ScsiResponse, request, true);
    set_response_status(h, scsi_status::CheckCondition);
    Bytes sense(2 + 18, 0);
    put_be16(sense.data(), 18);
    sense[2] = 0x70;
    sense[2 + 2] = sense_key;
    sense[2 + 7] = 10;
    sense[2 + 12] = asc;
    return make_pdu(h, std::move(sense));
}

Pdu TargetSession::login_reject(const Bhs& request, std::uint8_t status_class, std::uint8_t detail)
{
    Bhs h = response_header(Opcode::LoginResponse, request, true);
    h.final_flag = false;
    h.opcode_specific[0] = login_flags(login_csg(request), login_csg(request));
    set_login_status(h, status_class, detail);
    return make_pdu(h);
}

TargetSession::Outcome TargetSession::on_pdu(const Pdu& pdu)
{
    Outcome out;
    const Opcode op = pdu.bhs.opcode;
    if (!is_request(op))
        throw ProtocolError(std::string("unexpected response opcode from initiator: ") + opcode_name(op));
    if (phase_ == SessionPhase::LoggedOut)
        throw ProtocolError("PDU after logout");

    if (op == Opcode::LoginRequest) {
        if (phase_ != SessionPhase::AwaitingLogin)
            throw ProtocolError("login on a session that is already logged in");
        handle_login(pdu, out);
        return out;
    }
    if (phase_ == SessionPhase::AwaitingLogin)
        throw ProtocolError(std::string(opcode_name(op)) + " before login");

    if (op == Opcode::ScsiDataOut) {
        handle_data_out(pdu);
        drain(out);
        return out;
    }

    const std::uint32_t sn = pdu.bhs.cmd_sn;
    if (static_cast<std::int32_t>(sn - exp_cmd_sn_) < 0)
        throw ProtocolError("stale cmd_sn " + std::to_string(sn) + ", expected " + std::to_string(exp_cmd_sn_));
    if (held_.count(sn))
        throw ProtocolError("duplicate cmd_sn " + std::to_string(sn));
    if (held_.size() >= kMaxHeldCommands)
        throw ProtocolError("too many commands waiting for a cmd_sn gap");

    if (op == Opcode::ScsiCommand && phase_ == SessionPhase::FullFeature) {
        try {
            const Cdb cdb = decode_cdb(ByteView(pdu.bhs.opcode_specific.data(), 10));
            if (cdb.kind == CdbKind::Write10) {
                const std::uint32_t itt = pdu.bhs.initiator_task_tag;
                if (writes_.count(itt))
                    throw ProtocolError("task tag " + std::to_string(itt) + " already in use");
                writes_[itt].expected = std::uint64_t{cdb.blocks} * kBlockSize;
            }
        } catch (const ProtocolError&) {
            if (writes_.count(pdu.bhs.initiator_task_tag))
                throw;
            // unsupported CDB: answered with check condition when executed
        }
    }
    held_.emplace(sn, pdu);
    drain(out);
    return out;
}

void TargetSession::handle_data_out(const Pdu& pdu)
{
    if (phase_ != SessionPhase::FullFeature)
        throw ProtocolError("Data-Out outside full feature phase");
    auto it = writes_.find(pdu.bhs.initiator_task_tag);
    if (it == writes_.end())
        throw ProtocolError("Data-Out for unknown task " + std::to_string(pdu.bhs.initiator_task_tag));
    PendingWrite& w = it->second;
    if (w.final_seen)
        throw ProtocolError("Data-Out after the final one");
    if (pdu.bhs.buffer_offset != w.data.size())
        throw ProtocolError("Data-Out offset " + std::to_string(pdu.bhs.buffer_offset) + ", expected " +
                            std::to_string(w.data.size()));
    if (pdu.data.size() > max_data_segment_)
        throw ProtocolError("Data-Out segment exceeds the negotiated maximum");
    if (w.data.size() + pdu.data.size() > w.expected)
        throw ProtocolError("more write data than the command requested");
    w.data.insert(w.data.end(), pdu.data.begin(), pdu.data.end());
    if (pdu.bhs.final_flag) {
        w.final_seen = true;
        if (w.data.size() != w.expected)
            throw ProtocolError("write data length " + std::to_string(w.data.size()) +
                                " does not match the command's " + std::to_string(w.expected));
    }
}

void TargetSession::drain(Outcome& out)
{
    for (;;) {
        auto it = held_.find(exp_cmd_sn_);
        if (it == held_.end())
            return;
        const Pdu& pdu = it->second;
        if (pdu.bhs.opcode == Opcode::ScsiCommand) {
            auto w = writes_.find(pdu.bhs.initiator_task_tag);
            if (w != writes_.end() && !w->second.final_seen)
                return;
        }
        Pdu cmd = std::move(it->second);
        held_.erase(it);
        ++exp_cmd_sn_;
        execute(cmd, out);
        if (out.close)
            return;
    }
}

void TargetSession::execute(const Pdu& pdu, Outcome& out)
{
    switch (pdu.bhs.opcode) {
    case Opcode::NopOut: handle_nop(pdu, out); break;
    case Opcode::TextRequest: handle_text(pdu, out); break;
    case Opcode::ScsiCommand: handle_cmd(pdu, out); break;
    case Opcode::LogoutRequest: handle_logout(pdu, out); break;
    default: throw ProtocolError(std::string("unsupported request ") + opcode_name(pdu.bhs.opcode));
    }
}

void TargetSession::handle_login(const Pdu& pdu, Outcome& out)
{
    const Bhs& req = pdu.bhs;
    const TextKeys keys = decode_text(pdu.data);
    exp_cmd_sn_ = req.cmd_sn;

    if (chap_challenge_) {
        const auto name = find_key(keys, "CHAP_N");
        const auto response = find_key(keys, "CHAP_R");
        if (!name || !response)
            throw ProtocolError("CHAP response keys missing");
        bool ok = *name == config_.chap->user;
        Bytes got;
        try {
            got = from_hex(*response);
        } catch (const std::invalid_argument&) {
            throw ProtocolError("CHAP_R is not hex");
        }
        const Bytes want = chap_response(config_.chap->secret, *chap_challenge_);
        ok = crypto::equal(got, want) && ok;
        chap_challenge_.reset();
        if (!ok) {
            out.responses.push_back(login_reject(req, 2, 1));
            out.close = true;
            phase_ = SessionPhase::LoggedOut;
            return;
        }
    } else {
        const auto initiator = find_key(keys, "InitiatorName");
        if (!initiator || initiator->empty())
            throw ProtocolError("login without InitiatorName");
        peer_name_ = *initiator;

        const std::string type = find_key(keys, "SessionType").value_or("Normal");
        if (type == "Discovery") {
            login_goal_ = SessionPhase::Discovery;
        } else if (type == "Normal") {
            login_goal_ = SessionPhase::FullFeature;
            const auto target = find_key(keys, "TargetName");
            if (!target)
                throw ProtocolError("normal session login without TargetName");
            if (config_.target_name.empty() || *target != config_.target_name) {
                out.responses.push_back(login_reject(req, 2, 3));
                out.close = true;
                phase_ = SessionPhase::LoggedOut;
                return;
            }
        } else {
            throw ProtocolError("unknown SessionType " + type);
        }

        if (const auto mrdsl = find_key(keys, "MaxRecvDataSegmentLength")) {
            const auto n = to_number<std::uint32_t>(*mrdsl);
            if (!n || *n < 512 || *n > kMaxDataSegmentLength)
                throw ProtocolError("bad MaxRecvDataSegmentLength " + *mrdsl);
            max_data_segment_ = std::min(*n, config_.max_recv_data_segment);
        }

        if (config_.chap) {
            const std::string methods = find_key(keys, "AuthMethod").value_or("None");
            if (methods.find("CHAP") == std::string::npos) {
                out.responses.push_back(login_reject(req, 2, 1));
                out.close = true;
                phase_ = SessionPhase::LoggedOut;
                return;
            }
            Bytes challenge(kChapChallengeSize);
            random_(challenge.data(), challenge.size());
            std::uint8_t id = 0;
            random_(&id, 1);
            chap_id_ = id;
            chap_challenge_ = challenge;

            Bhs h = response_header(Opcode::LoginResponse, req, true);
            h.final_flag = false;
            h.opcode_specific[0] = login_flags(login_stage::Security, login_stage::Security);
            TextKeys reply = {{"AuthMethod", "CHAP"},
                              {"CHAP_A", "7"},
                              {"CHAP_I", std::to_string(chap_id_)},
                              {"CHAP_C", hex_value(challenge)}};
            out.responses.push_back(make_pdu(h, encode_text(reply)));
            return;
        }
    }

    Bhs h = response_header(Opcode::LoginResponse, req, true);
    h.opcode_specific[0] = login_flags(login_csg(req), login_stage::FullFeature);
    TextKeys reply;
    if (!config_.chap)
        reply.emplace_back("AuthMethod", "None");
    reply.emplace_back("MaxRecvDataSegmentLength", std::to_string(max_data_segment_));
    if (login_goal_ == SessionPhase::FullFeature) {
        reply.emplace_back("TargetPortalGroupTag", "1");
        reply.emplace_back("InitialR2T", "No");
        reply.emplace_back("ImmediateData", "No");
    }
    reply.emplace_back("HeaderDigest", "None");
    reply.emplace_back("DataDigest", "None");
    reply.emplace_back("MaxConnections", "1");
    out.responses.push_back(make_pdu(h, encode_text(reply)));
    phase_ = login_goal_;
}

void TargetSession::handle_text(const Pdu& pdu, Outcome& out)
{
    if (phase_ != SessionPhase::Discovery)
        throw ProtocolError("text request outside a discovery session");
    const TextKeys keys = decode_text(pdu.data);
    const auto send_targets = find_key(keys, "SendTargets");
    if (!send_targets)
        throw ProtocolError("text request without SendTargets");
    TextKeys reply;
    if (!config_.target_name.empty() && (*send_targets == "All" || *send_targets == config_.target_name)) {
        reply.emplace_back("TargetName", config_.target_name);
        reply.emplace_back("TargetAddress", portal_address_ + ",1");
    }
    Bhs h = response_header(Opcode::TextResponse, pdu.bhs, true);
    out.responses.push_back(make_pdu(h, encode_text(reply)));
}

void TargetSession::handle_cmd(const Pdu& pdu, Outcome& out)
{
    if (phase_ != SessionPhase::FullFeature)
        throw ProtocolError("SCSI command outside full feature phase");
    const Bhs& req = pdu.bhs;
    const std::uint32_t itt = req.initiator_task_tag;

    std::optional<PendingWrite> write;
    if (auto it = writes_.find(itt); it != writes_.end()) {
        write = std::move(it->second);
        writes_.erase(it);
    }

    Cdb cdb;
    try {
        cdb = decode_cdb(ByteView(req.opcode_specific.data(), 10));
    } catch (const ProtocolError&) {
        out.responses.push_back(check_condition(req, kSenseIllegalRequest, kAscInvalidOpcode));
        return;
    }

    const std::uint32_t lun = lun_from_wire(req.lun);
    auto store_it = luns_.find(lun);
    if (store_it == luns_.end()) {
        out.responses.push_back(check_condition(req, kSenseIllegalRequest, kAscLunNotSupported));
        return;
    }
    BlockStore& store = *store_it->second;
    if (std::uint64_t{cdb.lba} + cdb.blocks > store.blocks()) {
        out.responses.push_back(check_condition(req, kSenseIllegalRequest, kAscLbaOutOfRange));
        return;
    }

    if (cdb.kind == CdbKind::Write10) {
        if (!write)
            throw ProtocolError("write command without data bookkeeping");
        store.write(cdb.lba, write->data);
    } else {
        const Bytes data = store.read(cdb.lba, cdb.blocks);
        std::uint32_t sn = 0;
        for (std::size_t pos = 0; pos < data.size(); pos += max_data_segment_) {
            const std::size_t n = std::min<std::size_t>(max_data_segment_, data.size() - pos);
            Bhs h = response_header(Opcode::ScsiDataIn, req, false);
            h.final_flag = pos + n == data.size();
            h.buffer_offset = static_cast<std::uint32_t>(pos);
            set_data_sn(h, sn++);
            out.responses.push_back(
                make_pdu(h, Bytes(data.begin() + static_cast<std::ptrdiff_t>(pos),
                                  data.begin() + static_cast<std::ptrdiff_t>(pos + n))));
        }
    }
    Bhs h = response_header(Opcode::ScsiResponse, req, true);
    set_response_status(h, scsi_status::Good);
    out.responses.push_back(make_pdu(h));
}

void TargetSession::handle_nop(const Pdu& pdu, Outcome& out)
{
    Bhs h = response_header(Opcode::NopIn, pdu.bhs, true);
    out.responses.push_back(make_pdu(h, pdu.data));
}

void TargetSession::handle_logout(const Pdu& pdu, Outcome& out)
{
    Bhs h = response_header(Opcode::LogoutResponse, pdu.bhs, true);
    out.responses.push_back(make_pdu(h));
    phase_ = SessionPhase::LoggedOut;
    out.close = true;
}

// ---------------------------------------------------------------------------
// Server

struct Target::Connection
{
    std::unique_ptr<Channel> channel;
    std::unique_ptr<TargetSession> session;
    Bytes rx;
    std::atomic<bool> dead{false};

    ~Connection() { channel.reset(); }

    void on_data(ByteView data)
    {
        if (dead)
            return;
        rx.insert(rx.end(), data.begin(), data.end());
        try {
            std::size_t pos = 0;
            while (!dead) {
                auto result = decode_pdu(ByteView(rx).subspan(pos));
                if (std::holds_alternative<Incomplete>(result))
                    break;
                auto& decoded = std::get<Decoded>(result);
                pos += decoded.consumed;
                TargetSession::Outcome outcome = session->on_pdu(decoded.pdu);
                for (const auto& response : outcome.responses)
                    send(response);
                if (outcome.close)
                    shut();
            }
            rx.erase(rx.begin(), rx.begin() + static_cast<std::ptrdiff_t>(std::min(pos, rx.size())));
        } catch (const std::exception& e) {
            spdlog::warn("target: dropping connection from {}: {}", channel->remote().to_string(), e.what());
            shut();
        }
    }

    void send(const Pdu& pdu)
    {
        SendMeta meta;
        meta.info = describe_pdu(pdu);
        meta.payload_begin = 0;
        meta.payload_end = 0;
        if (pdu.bhs.opcode == Opcode::NopIn || pdu.bhs.opcode == Opcode::ScsiResponse) {
            meta.task_tag = pdu.bhs.initiator_task_tag;
            meta.tag_on = SendMeta::TagOn::Last;
        } else if (pdu.bhs.opcode == Opcode::ScsiDataIn) {
            meta.payload_begin = kBhsSize;
            meta.payload_end = kBhsSize + pdu.data.size();
        }
        channel->send(encode_pdu(pdu), meta);
    }

    void shut()
    {
        dead = true;
        channel->close();
    }
};

Target::Target(TargetConfig config) : config_(std::move(config))
{
    try {
        config_.validate();
    } catch (const UsageError& e) {
        throw StartupError(e.what());
    }
    for (const auto& lun : config_.luns) {
        if (lun.file)
            stores_[lun.id] = std::make_shared<FileStore>(*lun.file, lun.blocks);
        else
            stores_[lun.id] = std::make_shared<MemoryStore>(lun.blocks);
    }
}

Target::~Target()
{
    try {
        stop();
    } catch (const std::exception& e) {
        spdlog::error("target: shutdown failed: {}", e.what());
    }
}

void Target::start(Network& network, ChannelOptions options)
{
    if (listener_)
        throw UsageError("target already started");
    if (options.seed) {
        auto rng = std::make_shared<std::mt19937_64>(*options.seed ^ 0x7461726765740000ull);
        random_ = [rng](std::uint8_t* out, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i)
                out[i] = static_cast<std::uint8_t>((*rng)() >> 56);
        };
    } else {
        random_ = [](std::uint8_t* out, std::size_t n) { crypto::random_bytes(out, n); };
    }
    listener_ = network.listen(config_.listen, std::move(options),
                               [this](std::unique_ptr<Channel> channel) { accept(std::move(channel)); });
}

void Target::accept(std::unique_ptr<Channel> channel)
{
    reap();
    auto conn = std::make_unique<Connection>();
    conn->session = std::make_unique<TargetSession>(config_, stores_, channel->local().to_string(), random_);
    conn->channel = std::move(channel);
    Connection* raw = conn.get();
    {
        std::lock_guard lock(mutex_);
        connections_.push_back(std::move(conn));
    }
    ++accepted_;
    raw->channel->set_receiver(Channel::Receiver{
        [raw](ByteView data) { raw->on_data(data); },
        [raw](std::exception_ptr error) {
            if (error) {
                try {
                    std::rethrow_exception(error);
                } catch (const std::exception& e) {
                    spdlog::warn("target: connection failed: {}", e.what());
                }
            }
            raw->dead = true;
        }});
}

void Target::reap()
{
    std::vector<std::unique_ptr<Connection>> dead;
    {
        std::lock_guard lock(mutex_);
        auto it = std::stable_partition(connections_.begin(), connections_.end(),
                                        [](const auto& c) { return !c->dead; });
        std::move(it, connections_.end(), std::back_inserter(dead));
        connections_.erase(it, connections_.end());
    }
}

void Target::stop()
{
    if (listener_) {
        listener_->close();
        listener_.reset();
    }
    std::vector<std::unique_ptr<Connection>> all;
    {
        std::lock_guard lock(mutex_);
        all.swap(connections_);
    }
    for (auto& c : all) {
        c->dead = true;
        c->channel->close();
    }
    all.clear();
    for (auto& [id, store] : stores_)
        store->flush();
}

Endpoint Target::bound() const
{
    if (!listener_)
        throw UsageError("target not started");
    return listener_->bound();
}

std::size_t Target::active_sessions() const
{
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(
        std::count_if(connections_.begin(), connections_.end(), [](const auto& c) { return !c->dead; }));
}

std::shared_ptr<BlockStore> Target::store(std::uint32_t lun) const
{
    auto it = stores_.find(lun);
    return it == stores_.end() ? nullptr : it->second;
}

} // namespace ipstor
