#include "dhtidx/bencode.hpp"

#include <algorithm>
#include <charconv>

namespace dhtidx::bencode {

const char* to_string(Errc code) {
    switch (code) {
        case Errc::Malformed: return "malformed";
        case Errc::TrailingData: return "trailing data";
        case Errc::DepthExceeded: return "depth exceeded";
        case Errc::KeyCollision: return "key collision";
    }
    return "unknown";
}

const Value* Value::find(std::string_view key) const {
    if (!is_dict()) return nullptr;
    for (const auto& [k, v] : as_dict()) {
        if (k == key) return &v;
    }
    return nullptr;
}

const Value::String* Value::find_string(std::string_view key) const {
    const Value* v = find(key);
    return v && v->is_string() ? &v->as_string() : nullptr;
}

const Value::Integer* Value::find_int(std::string_view key) const {
    const Value* v = find(key);
    return v && v->is_int() ? &std::get<Integer>(v->data_) : nullptr;
}

const Value* Value::find_dict(std::string_view key) const {
    const Value* v = find(key);
    return v && v->is_dict() ? v : nullptr;
}

const Value::List* Value::find_list(std::string_view key) const {
    const Value* v = find(key);
    return v && v->is_list() ? &v->as_list() : nullptr;
}

Value& Value::set(std::string key, Value v) {
    auto& d = as_dict();
    for (auto& [k, existing] : d) {
        if (k == key) {
            existing = std::move(v);
            return existing;
        }
    }
    d.emplace_back(std::move(key), std::move(v));
    return d.back().second;
}

namespace {

std::vector<const std::pair<std::string, Value>*> sorted_entries(const Value::Dict& d) {
    std::vector<const std::pair<std::string, Value>*> out;
    out.reserve(d.size());
    for (const auto& e : d) out.push_back(&e);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->first < b->first; });
    return out;
}

}  // namespace

bool operator==(const Value& a, const Value& b) {
    if (a.data_.index() != b.data_.index()) return false;
    if (!a.is_dict()) return a.data_ == b.data_;
    const auto& da = a.as_dict();
    const auto& db = b.as_dict();
    if (da.size() != db.size()) return false;
    auto sa = sorted_entries(da);
    auto sb = sorted_entries(db);
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i]->first != sb[i]->first || !(sa[i]->second == sb[i]->second)) return false;
    }
    return true;
}

namespace {

void debug_into(const Value& v, std::string& out) {
    if (v.is_int()) {
        out += std::to_string(v.as_int());
    } else if (v.is_string()) {
        const auto& s = v.as_string();
        const bool printable = std::all_of(s.begin(), s.end(), [](char c) { return c >= 0x20 && c < 0x7f; });
        if (printable) {
            out += '"';
            out += s;
            out += '"';
        } else {
            static constexpr char digits[] = "0123456789abcdef";
            out += "0x";
            for (unsigned char c : s) {
                out += digits[c >> 4];
                out += digits[c & 0xf];
            }
        }
    } else if (v.is_list()) {
        out += '[';
        bool first = true;
        for (const auto& item : v.as_list()) {
            if (!first) out += ", ";
            first = false;
            debug_into(item, out);
        }
        out += ']';
    } else {
        out += '{';
        bool first = true;
        for (const auto& [k, item] : v.as_dict()) {
            if (!first) out += ", ";
            first = false;
            out += k;
            out += ": ";
            debug_into(item, out);
        }
        out += '}';
    }
}

class Decoder {
public:
    explicit Decoder(std::string_view in) : in_(in) {}

    Value parse(int depth) {
        if (pos_ >= in_.size()) fail(Errc::Malformed, "unexpected end of input");
        const char c = in_[pos_];
        if (c == 'i') return Value(parse_int());
        if (c >= '0' && c <= '9') return Value(parse_string());
        if (c == 'l' || c == 'd') {
            if (depth >= kMaxDepth) fail(Errc::DepthExceeded, "nesting deeper than 16");
            ++pos_;
            if (c == 'l') {
                Value::List list;
                while (peek() != 'e') list.push_back(parse(depth + 1));
                ++pos_;
                return Value(std::move(list));
            }
            Value::Dict dict;
            while (peek() != 'e') {
                if (!(peek() >= '0' && peek() <= '9')) fail(Errc::Malformed, "dictionary key must be a string");
                std::string key = parse_string();
                for (const auto& e : dict) {
                    if (e.first == key) fail(Errc::Malformed, "duplicate dictionary key");
                }
                Value v = parse(depth + 1);
                dict.emplace_back(std::move(key), std::move(v));
            }
            ++pos_;
            return Value(std::move(dict));
        }
        fail(Errc::Malformed, "unexpected byte");
    }

    std::size_t position() const { return pos_; }

private:
    [[noreturn]] void fail(Errc code, const char* what) const {
        throw Error(code, std::string("bencode: ") + what + " at offset " + std::to_string(pos_));
    }

    char peek() const {
        if (pos_ >= in_.size()) fail(Errc::Malformed, "missing terminator");
        return in_[pos_];
    }

    Value::Integer parse_int() {
        ++pos_;  // 'i'
        const auto end = in_.find('e', pos_);
        if (end == std::string_view::npos) fail(Errc::Malformed, "unterminated integer");
        const auto text = in_.substr(pos_, end - pos_);
        if (text.empty()) fail(Errc::Malformed, "empty integer");
        const bool negative = text[0] == '-';
        const auto digits = negative ? text.substr(1) : text;
        if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            fail(Errc::Malformed, "non-digit in integer");
        }
        if (digits.size() > 1 && digits[0] == '0') fail(Errc::Malformed, "integer with leading zero");
        if (negative && digits == "0") fail(Errc::Malformed, "negative zero");
        Value::Integer value = 0;
        auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
        if (ec != std::errc{} || p != text.data() + text.size()) fail(Errc::Malformed, "integer out of 64-bit range");
        pos_ = end + 1;
        return value;
    }

    std::string parse_string() {
        const auto colon = in_.find(':', pos_);
        if (colon == std::string_view::npos) fail(Errc::Malformed, "missing ':' after string length");
        const auto text = in_.substr(pos_, colon - pos_);
        if (text.empty() || text.size() > 9) fail(Errc::Malformed, "bad string length");
        if (text.size() > 1 && text[0] == '0') fail(Errc::Malformed, "string length with leading zero");
        std::size_t len = 0;
        auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), len);
        if (ec != std::errc{} || p != text.data() + text.size()) fail(Errc::Malformed, "bad string length");
        pos_ = colon + 1;
        if (len > in_.size() - pos_) fail(Errc::Malformed, "string runs past end of input");
        std::string out(in_.substr(pos_, len));
        pos_ += len;
        return out;
    }

    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string Value::debug_string() const {
    std::string out;
    debug_into(*this, out);
    return out;
}

Value decode(std::string_view input) {
    auto [value, used] = decode_prefix(input);
    if (used != input.size()) {
        throw Error(Errc::TrailingData, "bencode: " + std::to_string(input.size() - used) + " bytes after value");
    }
    return std::move(value);
}

std::pair<Value, std::size_t> decode_prefix(std::string_view input) {
    if (input.empty()) throw Error(Errc::Malformed, "bencode: empty input");
    Decoder d(input);
    Value v = d.parse(0);
    return {std::move(v), d.position()};
}

void encode_to(const Value& value, std::string& out) {
    if (value.is_int()) {
        out += 'i';
        out += std::to_string(value.as_int());
        out += 'e';
    } else if (value.is_string()) {
        const auto& s = value.as_string();
        out += std::to_string(s.size());
        out += ':';
        out += s;
    } else if (value.is_list()) {
        out += 'l';
        for (const auto& item : value.as_list()) encode_to(item, out);
        out += 'e';
    } else {
        auto entries = sorted_entries(value.as_dict());
        for (std::size_t i = 1; i < entries.size(); ++i) {
            if (entries[i - 1]->first == entries[i]->first) {
                throw Error(Errc::KeyCollision, "bencode: duplicate key '" + entries[i]->first + "'");
            }
        }
        out += 'd';
        for (const auto* e : entries) {
            out += std::to_string(e->first.size());
            out += ':';
            out += e->first;
            encode_to(e->second, out);
        }
        out += 'e';
    }
}

std::string encode(const Value& value) {
    std::string out;
    encode_to(value, out);
    return out;
}

}  // namespace dhtidx::bencode
