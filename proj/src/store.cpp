#include "dhtidx/store.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <mutex>
#include <unordered_map>

namespace dhtidx {

const char* to_string(RecordState s) {
    switch (s) {
        case RecordState::Discovered: return "DISCOVERED";
        case RecordState::LookingUp: return "LOOKING_UP";
        case RecordState::PeersFound: return "PEERS_FOUND";
        case RecordState::Fetching: return "FETCHING";
        case RecordState::Indexed: return "INDEXED";
        case RecordState::FailedRetryable: return "FAILED_RETRYABLE";
        case RecordState::Dead: return "DEAD";
    }
    return "?";
}

std::optional<RecordState> parse_record_state(std::string_view text) {
    for (int i = 0; i <= static_cast<int>(RecordState::Dead); ++i) {
        auto s = static_cast<RecordState>(i);
        if (text == to_string(s)) return s;
    }
    return std::nullopt;
}

namespace {

constexpr char kJournalMagic[4] = {'D', 'I', 'J', 'B'};
constexpr char kSnapshotMagic[4] = {'D', 'I', 'S', 'N'};
constexpr std::uint8_t kPurgedState = 0xff;

template <typename T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out += static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
}

template <typename T>
T get_le(const char* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(p[i])) << (8 * i);
    return static_cast<T>(v);
}

void put_record(std::string& out, const InfohashRecord& r, std::uint8_t state) {
    out.append(reinterpret_cast<const char*>(r.infohash.bytes().data()), Key160::kBytes);
    out += static_cast<char>(state);
    put_le<std::uint64_t>(out, r.hit_count);
    put_le<std::uint32_t>(out, r.fail_count);
    put_le<std::int64_t>(out, r.first_seen.time_since_epoch().count());
    put_le<std::int64_t>(out, r.last_state_change.time_since_epoch().count());
}

InfohashRecord get_record(const char* p, std::uint8_t& raw_state) {
    InfohashRecord r;
    std::memcpy(r.infohash.bytes().data(), p, Key160::kBytes);
    raw_state = static_cast<std::uint8_t>(p[20]);
    r.state = static_cast<RecordState>(raw_state);
    r.hit_count = get_le<std::uint64_t>(p + 21);
    r.fail_count = get_le<std::uint32_t>(p + 29);
    r.first_seen = TimePoint(Duration(get_le<std::int64_t>(p + 33)));
    r.last_state_change = TimePoint(Duration(get_le<std::int64_t>(p + 41)));
    return r;
}

std::uint32_t crc_of(std::string_view bytes) {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

void write_all(int fd, std::string_view bytes) {
    while (!bytes.empty()) {
        const ssize_t n = ::write(fd, bytes.data(), bytes.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            throw StoreError(StoreErrc::Io, std::string("store: write failed: ") + std::strerror(errno));
        }
        bytes.remove_prefix(static_cast<std::size_t>(n));
    }
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

bool is_pending_state(RecordState s) {
    return s == RecordState::Discovered || s == RecordState::LookingUp || s == RecordState::FailedRetryable;
}

}  // namespace

bool Store::legal_transition(RecordState from, RecordState to) {
    using S = RecordState;
    switch (from) {
        case S::Discovered: return to == S::LookingUp;
        case S::LookingUp: return to == S::PeersFound || to == S::FailedRetryable;
        case S::PeersFound: return to == S::Fetching;
        case S::Fetching: return to == S::Indexed || to == S::FailedRetryable;
        case S::FailedRetryable: return to == S::LookingUp;
        case S::Indexed:
        case S::Dead: return false;
    }
    return false;
}

Store::Store(StoreConfig config) : config_(std::move(config)) {
    if (!config_.dir) return;
    std::filesystem::create_directories(*config_.dir);
    recover();
    const auto journal_path = *config_.dir / "journal.bin";
    journal_fd_ = ::open(journal_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (journal_fd_ < 0) {
        throw StoreError(StoreErrc::Io, "store: cannot open journal " + journal_path.string() + ": " + std::strerror(errno));
    }
}

Store::~Store() {
    if (journal_fd_ >= 0) {
        try {
            compact();
        } catch (...) {
            // The journal is still intact; recovery replays it next time.
        }
        ::close(journal_fd_);
    }
}

void Store::index_pending(const InfohashRecord& r) {
    if (is_pending_state(r.state)) pending_.insert(r.infohash);
    else pending_.erase(r.infohash);
}

void Store::apply_image(const InfohashRecord& r) {
    records_[r.infohash] = r;
    index_pending(r);
}

void Store::recover() {
    const auto snapshot_path = *config_.dir / "snapshot.bin";
    if (std::filesystem::exists(snapshot_path)) {
        const std::string data = read_file(snapshot_path);
        constexpr std::size_t header = 4 + 2 + 2 + 8;
        if (data.size() < header + 4 || std::memcmp(data.data(), kSnapshotMagic, 4) != 0) {
            throw StoreError(StoreErrc::Corrupt, "store: snapshot header invalid");
        }
        const auto version = get_le<std::uint16_t>(data.data() + 4);
        const auto record_len = get_le<std::uint16_t>(data.data() + 6);
        const auto count = get_le<std::uint64_t>(data.data() + 8);
        if (version != kFormatVersion || record_len != kRecordBytes || data.size() != header + count * kRecordBytes + 4) {
            throw StoreError(StoreErrc::Corrupt, "store: snapshot size or version mismatch");
        }
        const std::string_view body(data.data(), header + count * kRecordBytes);
        if (crc_of(body) != get_le<std::uint32_t>(data.data() + body.size())) {
            throw StoreError(StoreErrc::Corrupt, "store: snapshot checksum mismatch");
        }
        for (std::uint64_t i = 0; i < count; ++i) {
            std::uint8_t raw = 0;
            apply_image(get_record(data.data() + header + i * kRecordBytes, raw));
        }
    }

    const auto journal_path = *config_.dir / "journal.bin";
    if (!std::filesystem::exists(journal_path)) return;
    const std::string data = read_file(journal_path);
    std::size_t pos = 0;
    constexpr std::size_t header = 4 + 2 + 2 + 4;
    while (pos + header + 4 <= data.size()) {
        const char* p = data.data() + pos;
        if (std::memcmp(p, kJournalMagic, 4) != 0) break;
        const auto version = get_le<std::uint16_t>(p + 4);
        const auto record_len = get_le<std::uint16_t>(p + 6);
        const auto count = get_le<std::uint32_t>(p + 8);
        if (version != kFormatVersion || record_len != kRecordBytes) break;
        const std::size_t frame = header + static_cast<std::size_t>(count) * kRecordBytes;
        if (pos + frame + 4 > data.size()) break;
        if (crc_of(std::string_view(p, frame)) != get_le<std::uint32_t>(p + frame)) break;
        for (std::uint32_t i = 0; i < count; ++i) {
            std::uint8_t raw = 0;
            auto r = get_record(p + header + i * kRecordBytes, raw);
            if (raw == kPurgedState) {
                records_.erase(r.infohash);
                pending_.erase(r.infohash);
            } else {
                apply_image(r);
            }
        }
        pos += frame + 4;
    }
    if (pos != data.size()) {
        // Torn tail from an unclean shutdown.
        std::filesystem::resize_file(journal_path, pos);
    }
}

void Store::journal(std::span<const InfohashRecord> records, std::span<const Infohash> purged) {
    if (journal_fd_ < 0 || (records.empty() && purged.empty())) return;
    std::string frame(kJournalMagic, 4);
    put_le<std::uint16_t>(frame, kFormatVersion);
    put_le<std::uint16_t>(frame, static_cast<std::uint16_t>(kRecordBytes));
    put_le<std::uint32_t>(frame, static_cast<std::uint32_t>(records.size() + purged.size()));
    for (const auto& r : records) put_record(frame, r, static_cast<std::uint8_t>(r.state));
    for (const auto& h : purged) {
        InfohashRecord tomb;
        tomb.infohash = h;
        put_record(frame, tomb, kPurgedState);
    }
    put_le<std::uint32_t>(frame, crc_of(frame));
    write_all(journal_fd_, frame);
    if (config_.sync) ::fdatasync(journal_fd_);
}

IngestCounts Store::ingest_batch(std::span<const Infohash> sightings, TimePoint now) {
    std::unordered_map<Infohash, std::uint64_t> consolidated;
    for (const auto& h : sightings) ++consolidated[h];

    std::unique_lock lock(mutex_);
    std::size_t fresh = 0;
    for (const auto& [h, n] : consolidated) fresh += records_.count(h) ? 0 : 1;
    if (records_.size() + fresh > config_.max_records) {
        throw StoreError(StoreErrc::StorageFull, "store: record limit of " + std::to_string(config_.max_records) + " reached");
    }

    IngestCounts counts;
    std::vector<InfohashRecord> changed;
    changed.reserve(consolidated.size());
    for (const auto& [h, n] : consolidated) {
        auto it = records_.find(h);
        if (it == records_.end()) {
            InfohashRecord r{h, RecordState::Discovered, n, 0, now, now};
            apply_image(r);
            changed.push_back(r);
            ++counts.inserted;
        } else {
            it->second.hit_count += n;
            changed.push_back(it->second);
            ++counts.incremented;
        }
    }
    std::sort(changed.begin(), changed.end(), [](const auto& a, const auto& b) { return a.infohash < b.infohash; });
    journal(changed);
    return counts;
}

bool Store::eligible(const InfohashRecord& r, TimePoint now) const {
    switch (r.state) {
        case RecordState::Discovered: return true;
        case RecordState::FailedRetryable: return r.last_state_change + config_.retry_delay <= now;
        case RecordState::LookingUp: return r.last_state_change + config_.lease <= now;
        default: return false;
    }
}

std::vector<InfohashRecord> Store::next_batch(Cursor& cursor, std::size_t limit, TimePoint now) {
    std::unique_lock lock(mutex_);
    std::vector<Infohash> picked;

    if (cursor.policy == CursorPolicy::Natural) {
        bool wrapped = false;
        auto take_from = [&](auto first, auto last) {
            for (auto it = first; it != last && picked.size() < limit; ++it) {
                if (eligible(records_.at(*it), now)) picked.push_back(*it);
            }
        };
        take_from(pending_.lower_bound(cursor.position), pending_.end());
        if (picked.size() < limit) {
            const std::size_t before = picked.size();
            take_from(pending_.begin(), pending_.lower_bound(cursor.position));
            wrapped = picked.size() > before;
        }
        if (!picked.empty()) {
            Key160 next = picked.back();
            if (next.increment()) wrapped = true;
            cursor.position = next;
            if (wrapped) ++cursor.wraps;
        }
    } else {
        std::vector<const InfohashRecord*> pool;
        for (const auto& h : pending_) {
            const auto& r = records_.at(h);
            if (eligible(r, now)) pool.push_back(&r);
        }
        auto better = [&](const InfohashRecord* a, const InfohashRecord* b) {
            if (cursor.policy == CursorPolicy::MostFrequent) {
                if (a->hit_count != b->hit_count) return a->hit_count > b->hit_count;
            } else if (a->first_seen != b->first_seen) {
                return a->first_seen > b->first_seen;
            }
            return a->infohash < b->infohash;
        };
        const std::size_t n = std::min(limit, pool.size());
        std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n), pool.end(), better);
        for (std::size_t i = 0; i < n; ++i) picked.push_back(pool[i]->infohash);
    }

    std::vector<InfohashRecord> out;
    out.reserve(picked.size());
    for (const auto& h : picked) {
        auto& r = records_.at(h);
        r.state = RecordState::LookingUp;
        r.last_state_change = now;
        out.push_back(r);
    }
    journal(out);
    return out;
}

InfohashRecord Store::transition(const Infohash& h, RecordState next, TimePoint now) {
    std::unique_lock lock(mutex_);
    auto it = records_.find(h);
    if (it == records_.end()) throw StoreError(StoreErrc::UnknownHash, "store: unknown infohash " + h.to_hex());
    auto& r = it->second;
    if (!legal_transition(r.state, next)) {
        throw StoreError(StoreErrc::IllegalTransition,
                         std::string("store: illegal transition ") + to_string(r.state) + " -> " + to_string(next));
    }
    r.state = next;
    r.last_state_change = now;
    if (next == RecordState::FailedRetryable && ++r.fail_count >= config_.max_failures) r.state = RecordState::Dead;
    index_pending(r);
    const InfohashRecord copy = r;
    journal(std::span(&copy, 1));
    return copy;
}

std::size_t Store::purge_dead(TimePoint now) {
    std::unique_lock lock(mutex_);
    std::vector<Infohash> purged;
    for (const auto& [h, r] : records_) {
        if (r.state == RecordState::Dead && r.last_state_change + config_.dead_retention <= now) purged.push_back(h);
    }
    for (const auto& h : purged) {
        records_.erase(h);
        pending_.erase(h);
    }
    journal({}, purged);
    return purged.size();
}

std::optional<InfohashRecord> Store::get(const Infohash& h) const {
    std::shared_lock lock(mutex_);
    auto it = records_.find(h);
    if (it == records_.end()) return std::nullopt;
    return it->second;
}

std::vector<InfohashRecord> Store::scan() const {
    std::shared_lock lock(mutex_);
    std::vector<InfohashRecord> out;
    out.reserve(records_.size());
    for (const auto& [h, r] : records_) out.push_back(r);
    return out;
}

StoreCounts Store::counts() const {
    std::shared_lock lock(mutex_);
    StoreCounts c;
    c.total = records_.size();
    for (const auto& [h, r] : records_) ++c.by_state[static_cast<std::size_t>(r.state)];
    return c;
}

std::size_t Store::size() const {
    std::shared_lock lock(mutex_);
    return records_.size();
}

void Store::compact() {
    if (!config_.dir) return;
    std::unique_lock lock(mutex_);
    std::string data(kSnapshotMagic, 4);
    put_le<std::uint16_t>(data, kFormatVersion);
    put_le<std::uint16_t>(data, static_cast<std::uint16_t>(kRecordBytes));
    put_le<std::uint64_t>(data, records_.size());
    data.reserve(data.size() + records_.size() * kRecordBytes + 4);
    for (const auto& [h, r] : records_) put_record(data, r, static_cast<std::uint8_t>(r.state));
    put_le<std::uint32_t>(data, crc_of(data));

    const auto final_path = *config_.dir / "snapshot.bin";
    const auto tmp_path = *config_.dir / "snapshot.bin.tmp";
    const int fd = ::open(tmp_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) throw StoreError(StoreErrc::Io, "store: cannot write snapshot: " + std::string(std::strerror(errno)));
    try {
        write_all(fd, data);
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::fsync(fd);
    ::close(fd);
    std::filesystem::rename(tmp_path, final_path);
    if (journal_fd_ >= 0 && ::ftruncate(journal_fd_, 0) != 0) {
        throw StoreError(StoreErrc::Io, "store: cannot truncate journal: " + std::string(std::strerror(errno)));
    }
}

void Store::export_text(std::ostream& out) const {
    std::shared_lock lock(mutex_);
    for (const auto& [h, r] : records_) out << h.to_hex() << ' ' << to_string(r.state) << ' ' << r.hit_count << '\n';
}

}  // namespace dhtidx
