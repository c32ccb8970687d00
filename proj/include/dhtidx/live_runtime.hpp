#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <unordered_map>
#include <vector>

#include "dhtidx/runtime.hpp"

namespace dhtidx {

/// Single-threaded poll(2) reactor over real UDP and TCP sockets (IPv4).
/// All callbacks run on the thread that calls run(). now() counts from the
/// Unix epoch at start-up and then advances with the steady clock, so times
/// persisted by the store stay meaningful across restarts.
class LiveRuntime : public Runtime {
public:
    struct Counters {
        std::uint64_t datagrams_sent = 0;
        std::uint64_t datagrams_received = 0;
        std::uint64_t send_errors = 0;
        std::uint64_t streams_opened = 0;
        std::uint64_t streams_failed = 0;
    };

    LiveRuntime();
    ~LiveRuntime() override;

    LiveRuntime(const LiveRuntime&) = delete;
    LiveRuntime& operator=(const LiveRuntime&) = delete;

    TimePoint now() const override;
    TimerId schedule(Duration delay, std::function<void()> fn) override;
    void cancel(TimerId id) override;

    /// Binds a UDP socket; throws std::system_error when the address is
    /// unavailable. Rebinding a bound endpoint swaps its handler; a null
    /// handler closes the socket.
    void bind_datagram(const Endpoint& local, DatagramHandler* handler) override;
    void send_datagram(const Endpoint& local, const Endpoint& to, std::string payload) override;
    void listen_stream(const Endpoint& local, StreamAcceptor* acceptor) override;
    void connect_stream(const Endpoint& local, const Endpoint& to, std::shared_ptr<StreamHandler> handler) override;

    /// Runs until stop() is called from a callback or a signal handler.
    void run();
    /// Runs for `d`, or less if stop() is called.
    void run_for(Duration d);
    /// Async-signal-safe. Sticky: later run() calls return at once.
    void stop() { stop_.store(true); }
    bool stopping() const { return stop_.load(); }

    const Counters& counters() const { return counters_; }

private:
    class TcpStream;
    struct Timer {
        TimePoint at;
        std::uint64_t seq;
        TimerId id;
        bool operator>(const Timer& o) const { return at != o.at ? at > o.at : seq > o.seq; }
    };
    struct Udp {
        int fd;
        DatagramHandler* handler;
    };
    struct Listener {
        int fd;
        StreamAcceptor* acceptor;
    };

    void loop(std::optional<TimePoint> deadline);
    void run_timers();
    int poll_timeout(std::optional<TimePoint> deadline) const;
    void on_udp_readable(const Endpoint& local);
    void on_listener_readable(const Endpoint& local);

    std::chrono::steady_clock::time_point epoch_;
    Duration offset_;
    std::atomic<bool> stop_{false};
    std::uint64_t seq_ = 0;
    TimerId next_id_ = 1;
    std::priority_queue<Timer, std::vector<Timer>, std::greater<Timer>> heap_;
    std::unordered_map<TimerId, std::function<void()>> timers_;
    std::map<Endpoint, Udp> udp_;
    std::map<Endpoint, Listener> listeners_;
    std::map<int, std::shared_ptr<TcpStream>> streams_;
    Counters counters_;
};

}  // namespace dhtidx
