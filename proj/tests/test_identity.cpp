#include "doctest.h"

#include <algorithm>
#include <set>

#include "dhtidx/identity.hpp"
#include "test_util.hpp"

using namespace dhtidx;
using testutil::bits_of;
using testutil::key_of;
using testutil::random_key;

namespace {

Key160 from_bit_string(const std::string& s) {
    // Right-aligned: the last character is the least significant bit.
    std::bitset<160> b;
    for (std::size_t i = 0; i < s.size(); ++i) b[160 - s.size() + i] = s[i] == '1';
    return key_of(b);
}

}  // namespace

TEST_CASE("xor distance matches the worked examples") {
    CHECK(xor_distance(from_bit_string("011111010"), from_bit_string("011111110")) == from_bit_string("000000100"));
    CHECK(xor_distance(from_bit_string("011111111"), from_bit_string("100000011")) == from_bit_string("111111100"));
    std::mt19937_64 rng(1);
    const auto x = random_key(rng);
    CHECK(xor_distance(x, x).is_zero());
}

TEST_CASE("xor distance agrees with a bitset oracle") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 1000; ++i) {
        const auto a = random_key(rng), b = random_key(rng);
        CHECK(bits_of(xor_distance(a, b)) == (bits_of(a) ^ bits_of(b)));
    }
}

TEST_CASE("natural order is big-endian unsigned order") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 1000; ++i) {
        const auto a = random_key(rng), b = random_key(rng);
        const auto ba = bits_of(a), bb = bits_of(b);
        int first_diff = -1;
        for (int j = 0; j < 160 && first_diff < 0; ++j) {
            if (ba[j] != bb[j]) first_diff = j;
        }
        const bool less = first_diff >= 0 && !ba[first_diff];
        CHECK((natural_compare(a, b) < 0) == less);
        CHECK((a < b) == less);
    }
}

TEST_CASE("common prefix bits") {
    std::mt19937_64 rng(4);
    const auto x = random_key(rng);
    CHECK(common_prefix_bits(x, x) == 160);
    CHECK(common_prefix_bits(Key160::from_hex("8000000000000000000000000000000000000000"), Key160{}) == 0);
    for (int i = 0; i < 1000; ++i) {
        const auto a = random_key(rng);
        auto b = a;
        const int flip = static_cast<int>(rng() % 160);
        b.flip_bit(flip);
        CHECK(common_prefix_bits(a, b) == flip);
    }
}

TEST_CASE("derive_node_id") {
    std::mt19937_64 seed_rng(5);
    const auto root = random_key(seed_rng);
    CHECK(derive_node_id(root, 0) == root);

    const auto f0 = Key160::from_hex("f070e90000000000000000000000000000000000");
    CHECK(derive_node_id(f0, 1) == Key160::from_hex("7070e90000000000000000000000000000000000"));

    const auto b = Key160::from_hex("b000000000000000000000000000000000000000");
    const auto d3 = derive_node_id(b, 3);
    CHECK(d3.bit(0) == false);
    CHECK(d3.bit(1) == true);
    CHECK(d3.bit(2) == true);
    CHECK(d3.bit(3) == true);

    // Bit-reversal oracle: counter bit i lands on key bit i.
    std::mt19937_64 rng(6);
    for (int i = 0; i < 200; ++i) {
        const auto r = random_key(rng);
        const std::uint64_t counter = rng();
        auto expect = bits_of(r);
        for (int j = 0; j < 64; ++j) expect[j] = expect[j] ^ ((counter >> j) & 1);
        CHECK(bits_of(derive_node_id(r, counter)) == expect);
    }
}

TEST_CASE("derived ids spread over distinct top-k prefixes") {
    std::mt19937_64 rng(7);
    const auto root = random_key(rng);
    for (int k = 1; k <= 8; ++k) {
        std::set<unsigned> tops;
        std::vector<Key160> ids;
        for (std::uint64_t c = 0; c < (1u << k); ++c) ids.push_back(derive_node_id(root, c));
        for (const auto& id : ids) {
            unsigned top = 0;
            for (int j = 0; j < k; ++j) top = top << 1 | id.bit(j);
            tops.insert(top);
        }
        CHECK(tops.size() == (1u << k));
        // Any two ids differ within the top k bits.
        int max_cpl = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::size_t j = i + 1; j < ids.size(); ++j) max_cpl = std::max(max_cpl, common_prefix_bits(ids[i], ids[j]));
        }
        CHECK(max_cpl < k);
    }
}

TEST_CASE("hex and raw round trips") {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 100; ++i) {
        const auto k = random_key(rng);
        CHECK(Key160::from_hex(k.to_hex()) == k);
        CHECK(Key160::from_bytes(k.to_bytes()) == k);
        CHECK(k.to_hex().size() == 40);
    }
    CHECK_THROWS(Key160::from_hex("abc"));
    CHECK_THROWS(Key160::from_hex(std::string(40, 'g')));
    CHECK_THROWS(Key160::from_bytes("short"));
}

TEST_CASE("increment wraps at the top of the keyspace") {
    auto k = Key160::max();
    CHECK(k.increment());
    CHECK(k.is_zero());
    Key160 z;
    CHECK_FALSE(z.increment());
    CHECK(z == Key160::from_hex("0000000000000000000000000000000000000001"));
}

TEST_CASE("prefix coverage") {
    std::mt19937_64 rng(9);
    for (int i = 0; i < 200; ++i) {
        const auto k = random_key(rng);
        const int bits = static_cast<int>(rng() % 161);
        const Prefix p(k, bits);
        CHECK(p.covers(k));
        CHECK(p.covers(p.key()));
        CHECK(p.covers(p.last()));
        if (bits > 0) {
            auto other = k;
            other.flip_bit(bits - 1);
            CHECK_FALSE(p.covers(other));
        }
        if (bits < 160) {
            CHECK(p.child(false).covers(p.key()));
            CHECK(p.child(true).covers(p.last()));
        }
    }
}
