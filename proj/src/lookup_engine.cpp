#include "dhtidx/lookup_engine.hpp"

#include <algorithm>

namespace dhtidx {

LookupTask::LookupTask(const Key160& target, LookupMode mode, LookupParams params)
    : target_(target), mode_(mode), params_(params) {}

LookupTask::Candidate* LookupTask::find(const NodeId& id) {
    auto it = candidates_.find(id ^ target_);
    return it == candidates_.end() ? nullptr : &it->second;
}

CandidateState LookupTask::state_of(const NodeId& id) const {
    auto it = candidates_.find(id ^ target_);
    if (it == candidates_.end()) throw std::out_of_range("not a candidate of this lookup");
    return it->second.state;
}

void LookupTask::add_candidates(std::span<const Contact> contacts) {
    for (const auto& c : contacts) candidates_.try_emplace(c.id ^ target_, Candidate{c, CandidateState::New, {}});
}

void LookupTask::add_candidates(std::span<const krpc::CompactContact> contacts, TimePoint now) {
    for (const auto& c : contacts) {
        if (!c.endpoint.valid()) continue;
        candidates_.try_emplace(c.id ^ target_, Candidate{Contact{c.id, c.endpoint, now, now, 0}, CandidateState::New, {}});
    }
}

std::vector<Contact> LookupTask::take_dispatches() {
    // Only the N closest live candidates (replied or in flight) are queried.
    std::vector<Contact> out;
    std::size_t live_ahead = 0;
    for (auto& [dist, cand] : candidates_) {
        if (in_flight_ >= params_.concurrency || live_ahead >= params_.concurrency) break;
        if (cand.state == CandidateState::Replied || cand.state == CandidateState::InFlight) {
            ++live_ahead;
        } else if (cand.state == CandidateState::New) {
            ++live_ahead;
            cand.state = CandidateState::InFlight;
            ++in_flight_;
            ++stats_.queries;
            out.push_back(cand.contact);
        }
    }
    return out;
}

bool LookupTask::on_reply(const NodeId& id, std::span<const krpc::CompactContact> nodes,
                          std::span<const Endpoint> values, std::string token, TimePoint now) {
    Candidate* c = find(id);
    if (!c) return false;
    if (c->state == CandidateState::InFlight) {
        --in_flight_;
    } else if (c->state == CandidateState::Stalled) {
        --stalled_;
        ++stats_.late_replies;
    } else {
        return false;
    }
    c->state = CandidateState::Replied;
    c->contact.last_seen = now;
    c->token = std::move(token);
    ++stats_.replies;
    for (const auto& ep : values) {
        if (ep.valid() && peer_set_.insert(ep).second) peers_.push_back(ep);
    }
    add_candidates(nodes, now);
    return true;
}

bool LookupTask::on_stall(const NodeId& id) {
    Candidate* c = find(id);
    if (!c || c->state != CandidateState::InFlight) return false;
    c->state = CandidateState::Stalled;
    --in_flight_;
    ++stalled_;
    ++stats_.stalls;
    return true;
}

bool LookupTask::on_timeout(const NodeId& id) {
    Candidate* c = find(id);
    if (!c) return false;
    if (c->state == CandidateState::InFlight) {
        --in_flight_;
    } else if (c->state == CandidateState::Stalled) {
        --stalled_;
    } else {
        return false;
    }
    c->state = CandidateState::Failed;
    ++stats_.timeouts;
    return true;
}

bool LookupTask::finished() const {
    if (in_flight_ > 0 || stalled_ > 0) return false;
    std::size_t replied_ahead = 0;
    for (const auto& [dist, cand] : candidates_) {
        if (replied_ahead >= params_.closest) break;
        if (cand.state == CandidateState::Replied) ++replied_ahead;
        else if (cand.state == CandidateState::New) return false;
    }
    return true;
}

std::vector<Contact> LookupTask::closest_set() const {
    std::vector<Contact> out;
    for (const auto& [dist, cand] : candidates_) {
        if (out.size() >= params_.closest) break;
        if (cand.state == CandidateState::Replied) out.push_back(cand.contact);
    }
    return out;
}

std::vector<std::pair<Contact, std::string>> LookupTask::announce_targets() const {
    std::vector<std::pair<Contact, std::string>> out;
    for (const auto& [dist, cand] : candidates_) {
        if (out.size() >= params_.closest) break;
        if (cand.state == CandidateState::Replied) out.emplace_back(cand.contact, cand.token);
    }
    return out;
}

LookupEngine::LookupEngine(Runtime& runtime, RoutingTable& table, LookupCache* cache, QueryTransport& transport,
                           LookupEngineConfig config)
    : runtime_(runtime),
      table_(table),
      cache_(cache),
      transport_(transport),
      config_(config),
      alive_(std::make_shared<bool>(true)) {}

LookupEngine::~LookupEngine() { *alive_ = false; }

const LookupTask* LookupEngine::task(std::uint64_t id) const {
    auto it = tasks_.find(id);
    return it == tasks_.end() ? nullptr : &it->second->task;
}

std::uint64_t LookupEngine::start_lookup(const Key160& target, LookupMode mode, Completion done) {
    if (!has_capacity()) throw LookupBudgetExhausted();
    const auto now = runtime_.now();
    const std::uint64_t id = next_id_++;
    auto running = std::make_unique<Running>(Running{LookupTask(target, mode, config_.params), std::move(done), now});
    auto& task = running->task;

    const auto& locals = table_.local_ids();
    auto not_local = [&](const Contact& c) {
        return std::find(locals.begin(), locals.end(), c.id) == locals.end();
    };
    if (cache_) {
        auto cached = cache_->nearest_fresh(target, config_.params.seed_size, now);
        std::erase_if(cached, [&](const Contact& c) { return !not_local(c); });
        task.stats().cache_seeds = static_cast<std::uint32_t>(cached.size());
        task.add_candidates(cached);
        cache_->register_anchor(target, now);
    }
    task.add_candidates(table_.closest_contacts(target, config_.params.seed_size));

    tasks_.emplace(id, std::move(running));
    peak_active_ = std::max(peak_active_, tasks_.size());
    pump(id);
    return id;
}

void LookupEngine::pump(std::uint64_t id) {
    auto it = tasks_.find(id);
    if (it == tasks_.end()) return;
    auto& task = it->second->task;
    for (const auto& c : task.take_dispatches()) dispatch(id, c);
    if (task.finished()) {
        std::weak_ptr<bool> alive = alive_;
        runtime_.schedule(Duration::zero(), [this, alive, id] {
            if (auto a = alive.lock(); a && *a) finish(id);
        });
    }
}

void LookupEngine::dispatch(std::uint64_t id, const Contact& c) {
    const Key160 target = tasks_.at(id)->task.target();
    std::weak_ptr<bool> alive = alive_;
    auto guard = [alive] {
        auto a = alive.lock();
        return a && *a;
    };
    CallHandlers h;
    h.on_reply = [this, guard, id, c](const krpc::Message& msg) {
        if (guard()) handle_reply(id, c, msg);
    };
    h.on_stall = [this, guard, id, c] {
        if (guard()) handle_stall(id, c);
    };
    h.on_timeout = [this, guard, id, c] {
        if (guard()) handle_timeout(id, c);
    };
    transport_.send_get_peers(c, target, std::move(h));
}

void LookupEngine::handle_reply(std::uint64_t id, const Contact& c, const krpc::Message& msg) {
    const auto now = runtime_.now();
    if (msg.kind != krpc::Kind::Response || msg.sender_id != c.id) {
        // Error replies or ID changes count as failures for this lookup only.
        auto it = tasks_.find(id);
        if (it != tasks_.end() && it->second->task.on_timeout(c.id)) pump(id);
        return;
    }
    table_.insert_contact(c.id, c.endpoint, now);
    table_.record_result(c.endpoint, c.id, CallOutcome::Success, now);
    if (cache_) cache_->offer_contact(Contact{c.id, c.endpoint, now, now, 0}, now);

    auto it = tasks_.find(id);
    if (it == tasks_.end()) return;  // stale: lookup already finished
    const auto& locals = table_.local_ids();
    std::vector<krpc::CompactContact> nodes;
    nodes.reserve(msg.nodes.size());
    for (const auto& n : msg.nodes) {
        if (std::find(locals.begin(), locals.end(), n.id) == locals.end()) nodes.push_back(n);
    }
    if (it->second->task.on_reply(c.id, nodes, msg.values, msg.token, now)) pump(id);
}

void LookupEngine::handle_stall(std::uint64_t id, const Contact& c) {
    auto it = tasks_.find(id);
    if (it == tasks_.end()) return;
    if (it->second->task.on_stall(c.id)) pump(id);
}

void LookupEngine::handle_timeout(std::uint64_t id, const Contact& c) {
    const auto now = runtime_.now();
    table_.record_result(c.endpoint, c.id, CallOutcome::Timeout, now);
    if (cache_) cache_->evict(c.id);
    auto it = tasks_.find(id);
    if (it == tasks_.end()) return;
    if (it->second->task.on_timeout(c.id)) pump(id);
}

void LookupEngine::finish(std::uint64_t id) {
    auto it = tasks_.find(id);
    if (it == tasks_.end()) return;
    std::unique_ptr<Running> running = std::move(it->second);
    tasks_.erase(it);
    auto& task = running->task;

    LookupResult result;
    result.target = task.target();
    result.mode = task.mode();
    result.peers = task.peers();
    result.closest = task.closest_set();
    if (task.mode() == LookupMode::Announce) {
        for (const auto& [contact, token] : task.announce_targets()) {
            if (token.empty()) continue;
            transport_.send_announce(contact, task.target(), token);
            ++task.stats().announces;
        }
    }
    task.stats().duration = runtime_.now() - running->started;
    result.stats = task.stats();
    if (running->done) running->done(result);
}

}  // namespace dhtidx
