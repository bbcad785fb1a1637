#include "ipstor/tcp.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <thread>

#include "ipstor/error.hpp"
#include "ipstor/trace.hpp"

namespace ipstor {

namespace {

std::string errno_text()
{
    return std::strerror(errno);
}

sockaddr_in resolve(const Endpoint& ep)
{
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(ep.port);
    if (ep.host.empty() || ep.host == "0.0.0.0") {
        addr.sin_addr.s_addr = htonl(INADDR_ANY);
        return addr;
    }
    if (inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1)
        return addr;
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* result = nullptr;
    if (getaddrinfo(ep.host.c_str(), nullptr, &hints, &result) != 0 || !result)
        throw TransportError("cannot resolve host " + ep.host);
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(result->ai_addr)->sin_addr;
    freeaddrinfo(result);
    return addr;
}

Endpoint endpoint_of(const sockaddr_in& addr)
{
    char host[INET_ADDRSTRLEN] = {};
    inet_ntop(AF_INET, &addr.sin_addr, host, sizeof host);
    return Endpoint{host, ntohs(addr.sin_port)};
}

Endpoint local_endpoint(int fd)
{
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    return endpoint_of(addr);
}

Endpoint peer_endpoint(int fd)
{
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    getpeername(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    return endpoint_of(addr);
}

enum class ReadStatus { Ok, Eof, Timeout, Error };

ReadStatus read_exact(int fd, std::uint8_t* out, std::size_t n, bool at_boundary)
{
    std::size_t got = 0;
    while (got < n) {
        const ssize_t r = ::recv(fd, out + got, n - got, 0);
        if (r > 0) {
            got += static_cast<std::size_t>(r);
            continue;
        }
        if (r == 0)
            return got == 0 && at_boundary ? ReadStatus::Eof : ReadStatus::Error;
        if (errno == EINTR)
            continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK)
            return ReadStatus::Timeout;
        return ReadStatus::Error;
    }
    return ReadStatus::Ok;
}

// State shared with the reader thread, which may outlive the link when the
// link is destroyed from inside one of its own callbacks.
struct SocketState
{
    int fd = -1;
    std::mutex sink_mutex;
    PacketSink* sink = nullptr;
    std::atomic<bool> stopping{false};

    ~SocketState()
    {
        if (fd >= 0)
            ::close(fd);
    }
};

class TcpLink final : public Link
{
public:
    TcpLink(int fd, Direction outbound, std::shared_ptr<Trace> trace)
        : state_(std::make_shared<SocketState>()), outbound_(outbound), trace_(std::move(trace))
    {
        state_->fd = fd;
        local_ = local_endpoint(fd);
        remote_ = peer_endpoint(fd);
        const int one = 1;
        setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    }

    ~TcpLink() override
    {
        state_->stopping = true;
        {
            std::lock_guard lock(state_->sink_mutex);
            state_->sink = nullptr;
        }
        ::shutdown(state_->fd, SHUT_RDWR);
        if (reader_.joinable()) {
            if (reader_.get_id() == std::this_thread::get_id())
                reader_.detach();
            else
                reader_.join();
        }
    }

    void transmit(std::vector<WirePacket> packets) override
    {
        std::lock_guard lock(write_mutex_);
        for (auto& pkt : packets) {
            if (trace_) {
                TraceRecord rec;
                rec.time_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                  std::chrono::steady_clock::now() - trace_->epoch())
                                  .count();
                const bool i2t = outbound_ == Direction::InitiatorToTarget;
                rec.src = (i2t ? local_ : remote_).to_string();
                rec.dst = (i2t ? remote_ : local_).to_string();
                rec.protocol = pkt.protocol;
                rec.info = pkt.info;
                rec.wire_len = static_cast<std::uint32_t>(pkt.bytes.size());
                rec.payload_len = pkt.payload_len;
                rec.direction = outbound_;
                rec.task_tag = pkt.task_tag;
                trace_->record_frame(std::move(rec));
            }
            std::size_t sent = 0;
            while (sent < pkt.bytes.size()) {
                const ssize_t n =
                    ::send(state_->fd, pkt.bytes.data() + sent, pkt.bytes.size() - sent, MSG_NOSIGNAL);
                if (n < 0) {
                    if (errno == EINTR)
                        continue;
                    throw TransportError("send failed: " + errno_text());
                }
                sent += static_cast<std::size_t>(n);
            }
        }
    }

    void close() override
    {
        if (!write_closed_.exchange(true))
            ::shutdown(state_->fd, SHUT_WR);
    }

    bool pump() override
    {
        if (eof_)
            return false;
        Bytes packet;
        switch (read_packet(state_->fd, packet)) {
        case ReadStatus::Ok:
            if (state_->sink)
                state_->sink->on_packet(std::move(packet));
            return true;
        case ReadStatus::Timeout:
            throw TransportError("timed out waiting for the peer");
        case ReadStatus::Eof:
        case ReadStatus::Error:
            break;
        }
        eof_ = true;
        if (state_->sink)
            state_->sink->on_eof();
        return true;
    }

    std::int64_t now_ns() const override
    {
        return std::chrono::duration_cast<std::chrono::nanoseconds>(
                   std::chrono::steady_clock::now().time_since_epoch())
            .count();
    }

    void attach(PacketSink* sink, bool push) override
    {
        {
            std::lock_guard lock(state_->sink_mutex);
            state_->sink = sink;
        }
        if (push && sink && !reader_.joinable())
            reader_ = std::thread([state = state_] { read_loop(state); });
    }

    Endpoint local() const override { return local_; }
    Endpoint remote() const override { return remote_; }

private:
    static ReadStatus read_packet(int fd, Bytes& packet)
    {
        packet.assign(kIpHeaderSize, 0);
        const ReadStatus head = read_exact(fd, packet.data(), kIpHeaderSize, true);
        if (head != ReadStatus::Ok)
            return head;
        const std::size_t total = get_be16(packet.data() + 2);
        if (total < kIpHeaderSize)
            return ReadStatus::Error;
        packet.resize(total);
        const ReadStatus body = read_exact(fd, packet.data() + kIpHeaderSize, total - kIpHeaderSize, false);
        return body == ReadStatus::Eof ? ReadStatus::Error : body;
    }

    static void read_loop(std::shared_ptr<SocketState> state)
    {
        for (;;) {
            Bytes packet;
            const ReadStatus status = read_packet(state->fd, packet);
            if (state->stopping)
                return;
            if (status == ReadStatus::Timeout)
                continue;
            PacketSink* sink = nullptr;
            {
                std::lock_guard lock(state->sink_mutex);
                sink = state->sink;
            }
            if (!sink)
                return;
            if (status != ReadStatus::Ok) {
                sink->on_eof();
                return;
            }
            sink->on_packet(std::move(packet));
        }
    }

    std::shared_ptr<SocketState> state_;
    Direction outbound_;
    std::shared_ptr<Trace> trace_;
    Endpoint local_;
    Endpoint remote_;
    std::mutex write_mutex_;
    std::atomic<bool> write_closed_{false};
    bool eof_ = false;
    std::thread reader_;
};

class TcpListener final : public Listener
{
public:
    TcpListener(int fd, ChannelOptions options, AcceptHandler on_accept)
        : fd_(fd), bound_(local_endpoint(fd)), options_(std::move(options)), on_accept_(std::move(on_accept))
    {
        thread_ = std::thread([this] { accept_loop(); });
    }

    ~TcpListener() override { close(); }

    Endpoint bound() const override { return bound_; }

    void close() override
    {
        if (stopping_.exchange(true))
            return;
        ::shutdown(fd_, SHUT_RDWR);
        if (thread_.joinable())
            thread_.join();
        ::close(fd_);
    }

private:
    void accept_loop()
    {
        while (!stopping_) {
            const int client = ::accept(fd_, nullptr, nullptr);
            if (client < 0) {
                if (errno == EINTR || errno == ECONNABORTED)
                    continue;
                return;
            }
            if (stopping_) {
                ::close(client);
                return;
            }
            try {
                auto link = std::make_unique<TcpLink>(client, Direction::TargetToInitiator, options_.trace);
                on_accept_(std::make_unique<Channel>(std::move(link), options_, Channel::Role::Target));
            } catch (const std::exception&) {
                // the channel (and its socket) is gone; keep accepting
            }
        }
    }

    int fd_;
    Endpoint bound_;
    ChannelOptions options_;
    AcceptHandler on_accept_;
    std::atomic<bool> stopping_{false};
    std::thread thread_;
};

} // namespace

std::unique_ptr<Listener> TcpNetwork::listen(const Endpoint& address, ChannelOptions options,
                                             AcceptHandler on_accept)
{
    sockaddr_in addr{};
    try {
        addr = resolve(address);
    } catch (const TransportError& e) {
        throw StartupError(e.what());
    }
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0)
        throw StartupError("socket: " + errno_text());
    const int one = 1;
    setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 16) != 0) {
        const std::string why = errno_text();
        ::close(fd);
        throw StartupError("cannot listen on " + address.to_string() + ": " + why);
    }
    return std::make_unique<TcpListener>(fd, std::move(options), std::move(on_accept));
}

std::unique_ptr<Channel> TcpNetwork::connect(const Endpoint& portal, ChannelOptions options)
{
    const sockaddr_in addr = resolve(portal);
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0)
        throw TransportError("socket: " + errno_text());
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
        const std::string why = errno_text();
        ::close(fd);
        throw TransportError("cannot connect to " + portal.to_string() + ": " + why);
    }
    if (options.receive_timeout.count() > 0) {
        timeval tv{};
        tv.tv_sec = static_cast<time_t>(options.receive_timeout.count() / 1000);
        tv.tv_usec = static_cast<suseconds_t>((options.receive_timeout.count() % 1000) * 1000);
        setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    }
    auto link = std::make_unique<TcpLink>(fd, Direction::InitiatorToTarget, options.trace);
    return std::make_unique<Channel>(std::move(link), std::move(options), Channel::Role::Initiator);
}

} // namespace ipstor
