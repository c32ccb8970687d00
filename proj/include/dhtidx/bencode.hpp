#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace dhtidx::bencode {

enum class Errc {
    Malformed,
    TrailingData,
    DepthExceeded,
    KeyCollision,
};

const char* to_string(Errc code);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Errc code() const { return code_; }

private:
    Errc code_;
};

inline constexpr int kMaxDepth = 16;

/// A bencoded value: byte string, integer, list or dictionary.
///
/// Dictionaries keep their entries in insertion (or wire) order; the encoder
/// sorts keys on output and equality ignores entry order.
class Value {
public:
    using String = std::string;
    using Integer = std::int64_t;
    using List = std::vector<Value>;
    using Dict = std::vector<std::pair<std::string, Value>>;

    Value() : data_(Dict{}) {}
    Value(String s) : data_(std::move(s)) {}
    Value(const char* s) : data_(String(s)) {}
    Value(std::string_view s) : data_(String(s)) {}
    Value(Integer i) : data_(i) {}
    Value(int i) : data_(static_cast<Integer>(i)) {}
    Value(List l) : data_(std::move(l)) {}
    Value(Dict d) : data_(std::move(d)) {}

    static Value dict(std::initializer_list<std::pair<std::string, Value>> items) { return Value(Dict(items)); }
    static Value list(std::initializer_list<Value> items) { return Value(List(items)); }

    bool is_string() const { return std::holds_alternative<String>(data_); }
    bool is_int() const { return std::holds_alternative<Integer>(data_); }
    bool is_list() const { return std::holds_alternative<List>(data_); }
    bool is_dict() const { return std::holds_alternative<Dict>(data_); }

    const String& as_string() const { return std::get<String>(data_); }
    Integer as_int() const { return std::get<Integer>(data_); }
    const List& as_list() const { return std::get<List>(data_); }
    List& as_list() { return std::get<List>(data_); }
    const Dict& as_dict() const { return std::get<Dict>(data_); }
    Dict& as_dict() { return std::get<Dict>(data_); }

    /// Dictionary lookup; nullptr when absent or when this is not a dictionary.
    const Value* find(std::string_view key) const;
    /// Typed lookups returning nullptr on absence or type mismatch.
    const String* find_string(std::string_view key) const;
    const Integer* find_int(std::string_view key) const;
    const Value* find_dict(std::string_view key) const;
    const List* find_list(std::string_view key) const;

    /// Appends or replaces a dictionary entry.
    Value& set(std::string key, Value v);

    friend bool operator==(const Value& a, const Value& b);

    /// Human-readable rendering for logs and test failures.
    std::string debug_string() const;

private:
    std::variant<String, Integer, List, Dict> data_;
};

/// Parses exactly one value spanning the whole input.
Value decode(std::string_view input);

/// Parses one value from the front of the input and reports how many bytes
/// it occupied. Used where a bencoded header is followed by raw payload.
std::pair<Value, std::size_t> decode_prefix(std::string_view input);

/// Canonical encoding: dictionary keys sorted bytewise, no whitespace.
std::string encode(const Value& value);
void encode_to(const Value& value, std::string& out);

}  // namespace dhtidx::bencode
