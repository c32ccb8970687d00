#include "dhtidx/admission_filter.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dhtidx {

ArcDirectory::ArcDirectory(std::size_t capacity) : c_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ARC capacity must be positive");
}

ArcDirectory::List& ArcDirectory::list(ListId id) {
    switch (id) {
        case ListId::T1: return t1_;
        case ListId::T2: return t2_;
        case ListId::B1: return b1_;
        case ListId::B2: return b2_;
    }
    return t1_;
}

void ArcDirectory::push_mru(ListId id, const Key160& key) {
    auto& l = list(id);
    l.push_front(key);
    index_[key] = Slot{id, l.begin()};
}

void ArcDirectory::remove(const Key160& key) {
    auto it = index_.find(key);
    if (it == index_.end()) return;
    list(it->second.list).erase(it->second.it);
    index_.erase(it);
}

void ArcDirectory::drop_lru(ListId id) {
    auto& l = list(id);
    if (l.empty()) return;
    index_.erase(l.back());
    l.pop_back();
}

void ArcDirectory::move_lru(ListId from, ListId to) {
    auto& l = list(from);
    if (l.empty()) return;
    const Key160 key = l.back();
    l.pop_back();
    push_mru(to, key);
}

void ArcDirectory::replace(bool hit_in_b2) {
    const double t1 = static_cast<double>(t1_.size());
    if (!t1_.empty() && ((hit_in_b2 && t1 == p_) || t1 > p_)) {
        move_lru(ListId::T1, ListId::B1);
    } else if (!t2_.empty()) {
        move_lru(ListId::T2, ListId::B2);
    } else {
        move_lru(ListId::T1, ListId::B1);
    }
}

bool ArcDirectory::reference(const Key160& key) {
    const double c = static_cast<double>(c_);
    auto it = index_.find(key);
    if (it != index_.end()) {
        const ListId where = it->second.list;
        if (where == ListId::T1 || where == ListId::T2) {
            remove(key);
            push_mru(ListId::T2, key);
            return true;
        }
        if (where == ListId::B1) {
            const double delta = std::max(1.0, static_cast<double>(b2_.size()) / static_cast<double>(b1_.size()));
            p_ = std::min(c, p_ + delta);
            replace(false);
        } else {
            const double delta = std::max(1.0, static_cast<double>(b1_.size()) / static_cast<double>(b2_.size()));
            p_ = std::max(0.0, p_ - delta);
            replace(true);
        }
        remove(key);
        push_mru(ListId::T2, key);
        return false;
    }

    const std::size_t l1 = t1_.size() + b1_.size();
    const std::size_t total = l1 + t2_.size() + b2_.size();
    if (l1 >= c_) {
        if (t1_.size() < c_) {
            drop_lru(ListId::B1);
            replace(false);
        } else {
            drop_lru(ListId::T1);
        }
    } else if (total >= c_) {
        if (total >= 2 * c_) drop_lru(ListId::B2);
        replace(false);
    }
    push_mru(ListId::T1, key);
    return false;
}

bool ArcDirectory::resident(const Key160& key) const {
    auto it = index_.find(key);
    return it != index_.end() && (it->second.list == ListId::T1 || it->second.list == ListId::T2);
}

std::optional<ArcDirectory::ListId> ArcDirectory::where(const Key160& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second.list;
}

void ArcDirectory::resize(std::size_t capacity) {
    if (capacity == 0) throw std::invalid_argument("ARC capacity must be positive");
    c_ = capacity;
    p_ = std::min(p_, static_cast<double>(c_));
    while (t1_.size() + t2_.size() > c_) replace(false);
    while (t1_.size() + b1_.size() > c_) {
        if (!b1_.empty()) drop_lru(ListId::B1);
        else move_lru(ListId::T1, ListId::B1);
    }
    while (t1_.size() + t2_.size() + b1_.size() + b2_.size() > 2 * c_) {
        if (!b2_.empty()) drop_lru(ListId::B2);
        else drop_lru(ListId::B1);
    }
}

bool ArcDirectory::invariants_hold() const {
    const std::size_t total = t1_.size() + t2_.size() + b1_.size() + b2_.size();
    return t1_.size() + t2_.size() <= c_ && t1_.size() + b1_.size() <= c_ && total <= 2 * c_ &&
           t2_.size() + b2_.size() <= 2 * c_ && index_.size() == total && p_ >= 0 && p_ <= static_cast<double>(c_);
}

AdmissionFilter::AdmissionFilter(AdmissionConfig config)
    : config_(config), arc_(config.min_capacity) {
    if (config.min_capacity == 0 || config.max_capacity < config.min_capacity) {
        throw std::invalid_argument("admission filter capacity bounds are inconsistent");
    }
}

std::size_t AdmissionFilter::capacity_for(double pressure) const {
    const double lo = static_cast<double>(config_.min_capacity);
    const double hi = static_cast<double>(config_.max_capacity);
    const double c = lo * std::pow(hi / lo, pressure);
    return std::clamp(static_cast<std::size_t>(std::llround(c)), config_.min_capacity, config_.max_capacity);
}

bool AdmissionFilter::admit(const Key160& h, TimePoint) {
    const bool was_resident = arc_.reference(h);
    ++(was_resident ? denied_ : admitted_);
    return !was_resident;
}

void AdmissionFilter::on_queue_feedback(QueueFeedback event, TimePoint now) {
    if (last_change_ && now - *last_change_ < config_.freeze) return;
    const double before = pressure_;
    if (event == QueueFeedback::Overflow) pressure_ = std::min(1.0, pressure_ + config_.increment);
    else pressure_ = std::max(0.0, pressure_ - config_.decrement);
    if (pressure_ == before) return;
    last_change_ = now;
    ++adjustments_;
    arc_.resize(capacity_for(pressure_));
}

AdmissionStats AdmissionFilter::stats() const {
    return AdmissionStats{arc_.resident_size(), arc_.ghost_size(), arc_.target_t1(), pressure_,
                          arc_.capacity(),      admitted_,          denied_,          adjustments_};
}

}  // namespace dhtidx
