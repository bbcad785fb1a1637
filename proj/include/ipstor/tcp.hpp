#pragma once

#include "ipstor/channel.hpp"

namespace ipstor {

/// Real sockets. Each wire packet is written as-is; the receiver splits the
/// byte stream again using the total length field of the leading IP header.
/// Frames are stamped with wall-clock time when they are written.
class TcpNetwork final : public Network
{
public:
    std::unique_ptr<Listener> listen(const Endpoint& address, ChannelOptions options,
                                     AcceptHandler on_accept) override;
    std::unique_ptr<Channel> connect(const Endpoint& portal, ChannelOptions options) override;
    bool deterministic() const override { return false; }
};

} // namespace ipstor
