#include "dhtidx/live_runtime.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <system_error>

namespace dhtidx {

namespace {

sockaddr_in to_sockaddr(const Endpoint& ep) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_addr.s_addr = htonl(ep.ip);
    sa.sin_port = htons(ep.port);
    return sa;
}

Endpoint from_sockaddr(const sockaddr_in& sa) { return Endpoint{ntohl(sa.sin_addr.s_addr), ntohs(sa.sin_port)}; }

[[noreturn]] void fail(const std::string& what) { throw std::system_error(errno, std::generic_category(), what); }

int open_socket(int type) {
    const int fd = ::socket(AF_INET, type | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
    if (fd < 0) fail("socket");
    if (type == SOCK_STREAM) {
        const int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    }
    return fd;
}

void bind_or_throw(int fd, const Endpoint& local) {
    const auto sa = to_sockaddr(local);
    if (::bind(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) != 0) {
        const int err = errno;
        ::close(fd);
        errno = err;
        fail("bind " + local.to_string());
    }
}

}  // namespace

class LiveRuntime::TcpStream : public Stream, public std::enable_shared_from_this<TcpStream> {
public:
    TcpStream(LiveRuntime& rt, int fd, Endpoint remote, std::shared_ptr<StreamHandler> handler, bool connecting)
        : rt_(rt), fd_(fd), remote_(remote), handler_(std::move(handler)), connecting_(connecting) {}
    ~TcpStream() override { shutdown_fd(); }

    void send(std::string_view bytes) override {
        if (fd_ < 0 || closing_) return;
        out_.append(bytes);
        flush();
    }

    void close() override {
        if (fd_ < 0) return;
        closing_ = true;
        handler_.reset();
        if (out_.empty()) finish();
    }

    Endpoint remote() const override { return remote_; }

    int fd() const { return fd_; }
    short events() const {
        short ev = 0;
        if (!connecting_ && !closing_) ev |= POLLIN;
        if (connecting_ || !out_.empty()) ev |= POLLOUT;
        return ev;
    }

    void on_ready(short revents) {
        auto self = shared_from_this();
        if (connecting_) {
            if (!(revents & (POLLOUT | POLLERR | POLLHUP))) return;
            int err = 0;
            socklen_t len = sizeof err;
            ::getsockopt(fd_, SOL_SOCKET, SO_ERROR, &err, &len);
            connecting_ = false;
            if (err != 0) {
                ++rt_.counters_.streams_failed;
                fail_with(std::strerror(err));
                return;
            }
            ++rt_.counters_.streams_opened;
            if (handler_) handler_->on_open(self);
            return;
        }
        if ((revents & POLLOUT) && !out_.empty()) flush();
        if (fd_ < 0 || closing_) return;
        if (revents & (POLLIN | POLLHUP | POLLERR)) {
            char buf[65536];
            while (fd_ >= 0 && !closing_) {
                const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
                if (n > 0) {
                    if (handler_) handler_->on_data(std::string_view(buf, static_cast<std::size_t>(n)));
                    continue;
                }
                if (n == 0) {
                    fail_with("");
                } else if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) {
                    fail_with(std::strerror(errno));
                }
                break;
            }
        }
    }

    // Local teardown without callbacks (runtime destruction).
    void drop() {
        handler_.reset();
        shutdown_fd();
    }

private:
    void flush() {
        while (!out_.empty() && fd_ >= 0 && !connecting_) {
            const ssize_t n = ::send(fd_, out_.data(), out_.size(), MSG_NOSIGNAL);
            if (n > 0) {
                out_.erase(0, static_cast<std::size_t>(n));
                continue;
            }
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) return;
            if (n < 0 && errno == EINTR) continue;
            fail_with(std::strerror(errno));
            return;
        }
        if (out_.empty() && closing_) finish();
    }

    void fail_with(const std::string& error) {
        auto h = std::move(handler_);
        finish();
        if (h) h->on_close(error);
    }

    void finish() {
        const int fd = fd_;
        shutdown_fd();
        rt_.streams_.erase(fd);
    }

    void shutdown_fd() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

    LiveRuntime& rt_;
    int fd_;
    Endpoint remote_;
    std::shared_ptr<StreamHandler> handler_;
    bool connecting_;
    bool closing_ = false;
    std::string out_;
};

LiveRuntime::LiveRuntime()
    : epoch_(std::chrono::steady_clock::now()),
      offset_(std::chrono::duration_cast<Duration>(std::chrono::system_clock::now().time_since_epoch())) {}

LiveRuntime::~LiveRuntime() {
    timers_.clear();
    auto streams = std::move(streams_);
    for (auto& [fd, s] : streams) s->drop();
    for (auto& [ep, u] : udp_) ::close(u.fd);
    for (auto& [ep, l] : listeners_) ::close(l.fd);
}

TimePoint LiveRuntime::now() const {
    return TimePoint{offset_ + std::chrono::duration_cast<Duration>(std::chrono::steady_clock::now() - epoch_)};
}

TimerId LiveRuntime::schedule(Duration delay, std::function<void()> fn) {
    if (delay < Duration::zero()) delay = Duration::zero();
    const TimerId id = next_id_++;
    timers_.emplace(id, std::move(fn));
    heap_.push(Timer{now() + delay, seq_++, id});
    return id;
}

void LiveRuntime::cancel(TimerId id) {
    if (id != 0) timers_.erase(id);
}

void LiveRuntime::bind_datagram(const Endpoint& local, DatagramHandler* handler) {
    auto it = udp_.find(local);
    if (!handler) {
        if (it != udp_.end()) {
            ::close(it->second.fd);
            udp_.erase(it);
        }
        return;
    }
    if (it != udp_.end()) {
        it->second.handler = handler;
        return;
    }
    const int fd = open_socket(SOCK_DGRAM);
    bind_or_throw(fd, local);
    udp_.emplace(local, Udp{fd, handler});
}

void LiveRuntime::send_datagram(const Endpoint& local, const Endpoint& to, std::string payload) {
    auto it = udp_.find(local);
    if (it == udp_.end()) {
        ++counters_.send_errors;
        return;
    }
    const auto sa = to_sockaddr(to);
    const ssize_t n = ::sendto(it->second.fd, payload.data(), payload.size(), 0, reinterpret_cast<const sockaddr*>(&sa),
                               sizeof sa);
    if (n < 0) ++counters_.send_errors;
    else ++counters_.datagrams_sent;
}

void LiveRuntime::listen_stream(const Endpoint& local, StreamAcceptor* acceptor) {
    auto it = listeners_.find(local);
    if (!acceptor) {
        if (it != listeners_.end()) {
            ::close(it->second.fd);
            listeners_.erase(it);
        }
        return;
    }
    if (it != listeners_.end()) {
        it->second.acceptor = acceptor;
        return;
    }
    const int fd = open_socket(SOCK_STREAM);
    bind_or_throw(fd, local);
    if (::listen(fd, 128) != 0) {
        ::close(fd);
        fail("listen " + local.to_string());
    }
    listeners_.emplace(local, Listener{fd, acceptor});
}

void LiveRuntime::connect_stream(const Endpoint& local, const Endpoint& to, std::shared_ptr<StreamHandler> handler) {
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
    auto refuse = [&](const std::string& why) {
        ++counters_.streams_failed;
        schedule(Duration::zero(), [handler, why] { handler->on_close(why); });
    };
    if (fd < 0) {
        refuse(std::strerror(errno));
        return;
    }
    const auto src = to_sockaddr(Endpoint{local.ip, 0});
    if (::bind(fd, reinterpret_cast<const sockaddr*>(&src), sizeof src) != 0) {
        const std::string why = std::strerror(errno);
        ::close(fd);
        refuse(why);
        return;
    }
    const auto sa = to_sockaddr(to);
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) != 0 && errno != EINPROGRESS) {
        const std::string why = std::strerror(errno);
        ::close(fd);
        refuse(why);
        return;
    }
    streams_.emplace(fd, std::make_shared<TcpStream>(*this, fd, to, std::move(handler), true));
}

void LiveRuntime::run() { loop(std::nullopt); }

void LiveRuntime::run_for(Duration d) { loop(now() + d); }

void LiveRuntime::run_timers() {
    const auto t = now();
    while (!heap_.empty() && heap_.top().at <= t) {
        const Timer timer = heap_.top();
        heap_.pop();
        auto it = timers_.find(timer.id);
        if (it == timers_.end()) continue;
        auto fn = std::move(it->second);
        timers_.erase(it);
        fn();
        if (stop_.load()) return;
    }
}

int LiveRuntime::poll_timeout(std::optional<TimePoint> deadline) const {
    // Wake periodically so a stop() from a signal handler is noticed.
    Duration wait = milliseconds(100);
    const auto t = now();
    if (!heap_.empty()) wait = std::min(wait, heap_.top().at - t);
    if (deadline) wait = std::min(wait, *deadline - t);
    if (wait <= Duration::zero()) return 0;
    return static_cast<int>(std::chrono::ceil<milliseconds>(wait).count());
}

void LiveRuntime::on_udp_readable(const Endpoint& local) {
    for (int i = 0; i < 64; ++i) {
        auto it = udp_.find(local);
        if (it == udp_.end()) return;
        char buf[65536];
        sockaddr_in from{};
        socklen_t len = sizeof from;
        const ssize_t n = ::recvfrom(it->second.fd, buf, sizeof buf, 0, reinterpret_cast<sockaddr*>(&from), &len);
        if (n < 0) return;
        ++counters_.datagrams_received;
        it->second.handler->on_datagram(local, from_sockaddr(from), std::string_view(buf, static_cast<std::size_t>(n)));
    }
}

void LiveRuntime::on_listener_readable(const Endpoint& local) {
    for (;;) {
        auto it = listeners_.find(local);
        if (it == listeners_.end()) return;
        sockaddr_in from{};
        socklen_t len = sizeof from;
        const int fd = ::accept4(it->second.fd, reinterpret_cast<sockaddr*>(&from), &len, SOCK_NONBLOCK | SOCK_CLOEXEC);
        if (fd < 0) return;
        const Endpoint remote = from_sockaddr(from);
        auto handler = it->second.acceptor->on_accept(local, remote);
        if (!handler) {
            ::close(fd);
            continue;
        }
        auto stream = std::make_shared<TcpStream>(*this, fd, remote, handler, false);
        streams_.emplace(fd, stream);
        ++counters_.streams_opened;
        handler->on_open(stream);
    }
}

void LiveRuntime::loop(std::optional<TimePoint> deadline) {
    while (!stop_.load()) {
        run_timers();
        if (stop_.load()) break;
        if (deadline && now() >= *deadline) break;

        enum class Kind { Udp, Listener, Stream };
        std::vector<pollfd> fds;
        std::vector<std::pair<Kind, Endpoint>> owners;
        for (const auto& [ep, u] : udp_) {
            fds.push_back(pollfd{u.fd, POLLIN, 0});
            owners.emplace_back(Kind::Udp, ep);
        }
        for (const auto& [ep, l] : listeners_) {
            fds.push_back(pollfd{l.fd, POLLIN, 0});
            owners.emplace_back(Kind::Listener, ep);
        }
        std::vector<std::weak_ptr<TcpStream>> streams;
        for (const auto& [fd, s] : streams_) {
            fds.push_back(pollfd{fd, s->events(), 0});
            owners.emplace_back(Kind::Stream, Endpoint{});
            streams.push_back(s);
        }
        const int n = ::poll(fds.data(), fds.size(), poll_timeout(deadline));
        if (n < 0) {
            if (errno == EINTR) continue;
            fail("poll");
        }
        std::size_t s = 0;
        for (std::size_t i = 0; i < fds.size() && !stop_.load(); ++i) {
            const auto [kind, ep] = owners[i];
            const short rev = fds[i].revents;
            if (kind == Kind::Stream) {
                auto stream = streams[s++].lock();
                if (rev && stream && stream->fd() == fds[i].fd) stream->on_ready(rev);
                continue;
            }
            if (!(rev & POLLIN)) continue;
            if (kind == Kind::Udp) on_udp_readable(ep);
            else on_listener_readable(ep);
        }
    }
}

}  // namespace dhtidx
