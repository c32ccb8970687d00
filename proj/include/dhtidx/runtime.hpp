#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "dhtidx/endpoint.hpp"

namespace dhtidx {

/// Clock used by every module. The simulator starts it at zero and advances
/// it virtually; the live reactor starts it at the Unix time of start-up and
/// advances it with std::chrono::steady_clock.
struct RuntimeClock {
    using duration = std::chrono::microseconds;
    using rep = duration::rep;
    using period = duration::period;
    using time_point = std::chrono::time_point<RuntimeClock>;
    static constexpr bool is_steady = true;
};

using Duration = RuntimeClock::duration;
using TimePoint = RuntimeClock::time_point;

using std::chrono::milliseconds;
using std::chrono::minutes;
using std::chrono::seconds;

inline double to_seconds(Duration d) { return std::chrono::duration<double>(d).count(); }
inline std::int64_t to_millis(Duration d) { return std::chrono::duration_cast<milliseconds>(d).count(); }

using TimerId = std::uint64_t;

/// A bidirectional byte stream (TCP in live mode, an in-process pipe in the
/// simulator).
class Stream {
public:
    virtual ~Stream() = default;
    virtual void send(std::string_view bytes) = 0;
    /// Flushes pending output and closes. The local handler gets no on_close.
    virtual void close() = 0;
    virtual Endpoint remote() const = 0;
};

class StreamHandler {
public:
    virtual ~StreamHandler() = default;
    virtual void on_open(const std::shared_ptr<Stream>& stream) = 0;
    virtual void on_data(std::string_view bytes) = 0;
    /// Called once; `error` is empty for an orderly close.
    virtual void on_close(std::string_view error) = 0;
};

/// Receiver of datagrams addressed to a bound local endpoint.
class DatagramHandler {
public:
    virtual ~DatagramHandler() = default;
    virtual void on_datagram(const Endpoint& local, const Endpoint& from, std::string_view payload) = 0;
};

/// Accepts inbound streams on a listening endpoint.
class StreamAcceptor {
public:
    virtual ~StreamAcceptor() = default;
    /// Returns nullptr to refuse the connection.
    virtual std::shared_ptr<StreamHandler> on_accept(const Endpoint& local, const Endpoint& remote) = 0;
};

/// Event-loop services a host needs: time, timers, datagrams and streams.
/// All callbacks for one host are delivered serially.
class Runtime {
public:
    virtual ~Runtime() = default;

    virtual TimePoint now() const = 0;
    virtual TimerId schedule(Duration delay, std::function<void()> fn) = 0;
    virtual void cancel(TimerId id) = 0;

    virtual void bind_datagram(const Endpoint& local, DatagramHandler* handler) = 0;
    virtual void send_datagram(const Endpoint& local, const Endpoint& to, std::string payload) = 0;

    virtual void listen_stream(const Endpoint& local, StreamAcceptor* acceptor) = 0;
    virtual void connect_stream(const Endpoint& local, const Endpoint& to, std::shared_ptr<StreamHandler> handler) = 0;
};

}  // namespace dhtidx
