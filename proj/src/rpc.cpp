#include "dhtidx/rpc.hpp"

#include <algorithm>

namespace dhtidx {

RpcSocket::RpcSocket(Runtime& runtime, const Endpoint& local, const NodeId& id, QueryResponder* responder)
    : runtime_(runtime), local_(local), id_(id), responder_(responder) {
    runtime_.bind_datagram(local_, this);
}

RpcSocket::~RpcSocket() {
    std::lock_guard lock(mutex_);
    for (auto& [key, p] : calls_) {
        runtime_.cancel(p.stall_timer);
        runtime_.cancel(p.hard_timer);
    }
    runtime_.bind_datagram(local_, nullptr);
}

std::size_t RpcSocket::pending_calls() const {
    std::lock_guard lock(mutex_);
    return calls_.size();
}

std::string RpcSocket::encode_tid(std::uint16_t tid) {
    return std::string{static_cast<char>(tid >> 8), static_cast<char>(tid & 0xff)};
}

void RpcSocket::call(const Endpoint& to, krpc::Message query, CallHandlers handlers) {
    std::unique_lock lock(mutex_);
    CallKey key{next_tid_, to};
    // Skip transaction ids still pending towards the same remote.
    for (int guard = 0; calls_.count(key) && guard < 65536; ++guard) key.tid = ++next_tid_;
    if (calls_.count(key)) {
        lock.unlock();
        if (handlers.on_timeout) handlers.on_timeout();
        return;
    }
    ++next_tid_;

    query.transaction_id = encode_tid(key.tid);
    query.sender_id = id_;
    std::string wire = krpc::serialize_message(query);

    Pending p;
    p.handlers = std::move(handlers);
    p.sent_at = runtime_.now();
    const auto stall_ms = rtt_.adaptive_timeout();
    if (stall_ms < kHardTimeoutMs) {
        p.stall_timer = runtime_.schedule(milliseconds(stall_ms), [this, key] { on_stall(key); });
    }
    p.hard_timer = runtime_.schedule(milliseconds(kHardTimeoutMs), [this, key] { on_hard_timeout(key); });
    calls_.emplace(key, std::move(p));
    ++counters_.calls;
    ++counters_.datagrams_sent;
    lock.unlock();
    runtime_.send_datagram(local_, to, std::move(wire));
}

void RpcSocket::send(const Endpoint& to, const krpc::Message& msg) {
    std::string wire = krpc::serialize_message(msg);
    {
        std::lock_guard lock(mutex_);
        ++counters_.datagrams_sent;
    }
    runtime_.send_datagram(local_, to, std::move(wire));
}

void RpcSocket::on_stall(const CallKey& key) {
    std::function<void()> cb;
    {
        std::lock_guard lock(mutex_);
        auto it = calls_.find(key);
        if (it == calls_.end()) return;
        it->second.stall_timer = 0;
        cb = it->second.handlers.on_stall;
        ++counters_.stalls;
    }
    if (cb) cb();
}

void RpcSocket::on_hard_timeout(const CallKey& key) {
    CallHandlers handlers;
    {
        std::lock_guard lock(mutex_);
        auto it = calls_.find(key);
        if (it == calls_.end()) return;
        if (it->second.stall_timer) runtime_.cancel(it->second.stall_timer);
        handlers = std::move(it->second.handlers);
        calls_.erase(it);
        ++counters_.timeouts;
    }
    if (handlers.on_timeout) handlers.on_timeout();
}

void RpcSocket::on_datagram(const Endpoint&, const Endpoint& from, std::string_view payload) {
    {
        std::lock_guard lock(mutex_);
        ++counters_.datagrams_received;
    }
    krpc::Message msg;
    try {
        msg = krpc::parse_message(payload);
    } catch (const krpc::Error& e) {
        std::lock_guard lock(mutex_);
        ++counters_.malformed;
        if (e.code() == krpc::Errc::UnknownMethod) {
            auto reply = krpc::Message::error(e.transaction_id(), krpc::kMethodUnknown, "Method Unknown");
            ++counters_.datagrams_sent;
            runtime_.send_datagram(local_, from, krpc::serialize_message(reply));
        }
        return;
    }

    if (msg.kind == krpc::Kind::Query) {
        {
            std::lock_guard lock(mutex_);
            ++counters_.queries_received;
        }
        if (!responder_) return;
        auto reply = responder_->handle_query(*this, from, msg);
        if (!reply) return;
        reply->transaction_id = msg.transaction_id;
        if (reply->kind == krpc::Kind::Response) reply->sender_id = id_;
        try {
            send(from, *reply);
        } catch (const krpc::Error&) {
            // Oversized answer: the responder is expected to truncate.
        }
        return;
    }

    if (msg.transaction_id.size() != 2) return;
    const auto tid = static_cast<std::uint16_t>(static_cast<std::uint8_t>(msg.transaction_id[0]) << 8 |
                                                static_cast<std::uint8_t>(msg.transaction_id[1]));
    CallHandlers handlers;
    TimePoint sent_at;
    {
        std::lock_guard lock(mutex_);
        auto it = calls_.find(CallKey{tid, from});
        if (it == calls_.end()) return;
        runtime_.cancel(it->second.stall_timer);
        runtime_.cancel(it->second.hard_timer);
        handlers = std::move(it->second.handlers);
        sent_at = it->second.sent_at;
        calls_.erase(it);
        ++counters_.replies;
    }
    const auto rtt = to_millis(runtime_.now() - sent_at);
    if (rtt <= kHardTimeoutMs) rtt_.record_rtt(static_cast<std::uint32_t>(std::max<std::int64_t>(1, rtt)));
    if (handlers.on_reply) handlers.on_reply(msg);
}

}  // namespace dhtidx
