#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>

#include "dhtidx/krpc.hpp"
#include "dhtidx/lookup_engine.hpp"
#include "dhtidx/runtime.hpp"
#include "dhtidx/timing.hpp"

namespace dhtidx {

class RpcSocket;

/// Answers inbound queries. Returning nullopt sends nothing.
class QueryResponder {
public:
    virtual ~QueryResponder() = default;
    virtual std::optional<krpc::Message> handle_query(RpcSocket& socket, const Endpoint& from,
                                                      const krpc::Message& query) = 0;
};

struct RpcCounters {
    std::uint64_t datagrams_sent = 0;
    std::uint64_t datagrams_received = 0;
    std::uint64_t queries_received = 0;
    std::uint64_t calls = 0;
    std::uint64_t replies = 0;
    std::uint64_t stalls = 0;
    std::uint64_t timeouts = 0;
    std::uint64_t malformed = 0;
};

/// One bound UDP endpoint speaking KRPC: issues calls with the dual
/// stall/hard timeout, correlates responses by (transaction id, remote
/// address), and hands inbound queries to a responder.
class RpcSocket : public DatagramHandler {
public:
    RpcSocket(Runtime& runtime, const Endpoint& local, const NodeId& id, QueryResponder* responder);
    ~RpcSocket() override;

    RpcSocket(const RpcSocket&) = delete;
    RpcSocket& operator=(const RpcSocket&) = delete;

    const Endpoint& local() const { return local_; }
    const NodeId& id() const { return id_; }
    RttWindow& rtt_window() { return rtt_; }
    const RttWindow& rtt_window() const { return rtt_; }
    const RpcCounters& counters() const { return counters_; }
    std::size_t pending_calls() const;

    /// Fills in transaction and sender id, sends, and arms both timers.
    void call(const Endpoint& to, krpc::Message query, CallHandlers handlers);
    /// Sends without expecting an answer.
    void send(const Endpoint& to, const krpc::Message& msg);

    void on_datagram(const Endpoint& local, const Endpoint& from, std::string_view payload) override;

private:
    struct CallKey {
        std::uint16_t tid;
        Endpoint remote;
        friend auto operator<=>(const CallKey&, const CallKey&) = default;
    };
    struct Pending {
        CallHandlers handlers;
        TimePoint sent_at;
        TimerId stall_timer = 0;
        TimerId hard_timer = 0;
    };

    static std::string encode_tid(std::uint16_t tid);
    void on_stall(const CallKey& key);
    void on_hard_timeout(const CallKey& key);

    Runtime& runtime_;
    Endpoint local_;
    NodeId id_;
    QueryResponder* responder_;
    RttWindow rtt_;
    RpcCounters counters_;

    mutable std::mutex mutex_;
    std::map<CallKey, Pending> calls_;
    std::uint16_t next_tid_ = 0;
};

}  // namespace dhtidx
