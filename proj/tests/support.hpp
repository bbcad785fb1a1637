#pragma once

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <memory>
#include <random>
#include <string>

#include "ipstor/bytes.hpp"
#include "ipstor/initiator.hpp"
#include "ipstor/pdu.hpp"
#include "ipstor/sim.hpp"
#include "ipstor/target.hpp"
#include "ipstor/trace.hpp"

namespace support {

using namespace ipstor;

class Gen
{
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    std::uint64_t u64() { return rng_(); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(rng_()); }
    std::uint8_t u8() { return static_cast<std::uint8_t>(rng_()); }
    bool coin() { return (rng_() & 1) != 0; }

    // uniform in [0, n)
    std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng_); }

    Bytes bytes(std::size_t n)
    {
        Bytes out(n);
        for (auto& b : out)
            b = u8();
        return out;
    }

    std::string text(std::size_t min_len, std::size_t max_len, std::string_view alphabet)
    {
        const std::size_t n = min_len + below(max_len - min_len + 1);
        std::string out;
        for (std::size_t i = 0; i < n; ++i)
            out += alphabet[below(alphabet.size())];
        return out;
    }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

// A header with every field the opcode carries filled at random and every
// other field zero.
inline Pdu random_pdu(Gen& g)
{
    Bhs h;
    h.opcode = kAllOpcodes[g.below(kAllOpcodes.size())];
    h.final_flag = g.coin();
    for (auto& b : h.lun)
        b = g.u8();
    h.initiator_task_tag = g.u32();
    const bool request = is_request(h.opcode);
    if (request) {
        if (h.opcode != Opcode::ScsiDataOut)
            h.cmd_sn = g.u32();
        h.exp_stat_sn = g.u32();
    } else {
        h.stat_sn = g.u32();
        h.cmd_sn = g.u32();
    }
    if (h.opcode == Opcode::ScsiDataIn || h.opcode == Opcode::ScsiDataOut)
        h.buffer_offset = g.u32();
    if (h.opcode == Opcode::ScsiCommand) {
        for (auto& b : h.opcode_specific)
            b = g.u8();
    } else {
        h.opcode_specific[0] = g.u8() & 0x7F;
        for (int i = 1; i < 7; ++i)
            h.opcode_specific[i] = g.u8();
    }
    const std::size_t len = g.below(8) == 0 ? g.below(9000) : g.below(300);
    return make_pdu(h, g.bytes(len));
}

inline Cdb random_cdb(Gen& g)
{
    Cdb c;
    c.kind = g.coin() ? CdbKind::Read10 : CdbKind::Write10;
    c.lba = g.u32();
    c.blocks = static_cast<std::uint16_t>(1 + g.below(0xFFFF));
    return c;
}

inline TextKeys random_text(Gen& g)
{
    static constexpr std::string_view key_chars =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789.-_:";
    static constexpr std::string_view value_chars =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789.-_:,=/ ";
    TextKeys keys;
    const std::size_t n = g.below(8);
    for (std::size_t i = 0; i < n; ++i)
        keys.emplace_back(g.text(1, 24, key_chars), g.text(0, 48, value_chars));
    return keys;
}

inline LinkParams ideal_link(double delay = 0.0)
{
    LinkParams link;
    link.one_way_delay = delay;
    link.bandwidth = std::nullopt;
    link.mtu = 1500;
    return link;
}

inline Bytes default_test_psk()
{
    return default_psk(7);
}

inline ChannelOptions channel_options(SecurityMode mode, LinkParams link, CryptoCostModel costs = {},
                                      std::shared_ptr<Trace> trace = nullptr)
{
    ChannelOptions o;
    o.mode = mode;
    o.link = link;
    o.costs = costs;
    o.seed = 11;
    o.trace = std::move(trace);
    if (mode == SecurityMode::PacketLayer)
        o.psk = default_test_psk();
    return o;
}

// A loopback port nobody listens on right now.
inline std::uint16_t free_tcp_port()
{
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    socklen_t len = sizeof addr;
    ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    ::close(fd);
    return ntohs(addr.sin_port);
}

inline TargetConfig small_target(std::uint64_t blocks = 2048)
{
    TargetConfig cfg;
    cfg.target_name = "iqn.2025-01.lab:disk0";
    cfg.listen = Endpoint{"192.168.2.1", 3260};
    cfg.luns.push_back(LunConfig{0, blocks, std::nullopt});
    return cfg;
}

// Target and initiator configuration on one simulated network.
struct SimRig
{
    SimNetwork net;
    std::shared_ptr<Trace> trace = std::make_shared<Trace>();
    std::unique_ptr<Target> target;
    InitiatorConfig initiator;

    explicit SimRig(SecurityMode mode = SecurityMode::Plain, LinkParams link = ideal_link(),
                    TargetConfig config = small_target(), CryptoCostModel costs = {})
    {
        const ChannelOptions opts = channel_options(mode, link, costs, trace);
        target = std::make_unique<Target>(std::move(config));
        target->start(net, opts);
        initiator.portal = target->bound();
        initiator.channel = opts;
    }

    std::unique_ptr<InitiatorSession> login(const std::string& name = "iqn.2025-01.lab:disk0")
    {
        return InitiatorSession::login(net, initiator, name);
    }
};

} // namespace support
