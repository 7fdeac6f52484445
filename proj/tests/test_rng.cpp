#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <vector>

#include "stepwise/rng.hpp"

using namespace stepwise;

TEST_CASE("same seed reproduces the same stream") {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    Rng c(43);
    Rng d(42);
    bool any_diff = false;
    for (int i = 0; i < 100; ++i) {
        any_diff = any_diff || (c.next_u64() != d.next_u64());
    }
    CHECK(any_diff);
}

TEST_CASE("next_double stays in [0, 1)") {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.next_double();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("next_uniform covers the requested interval") {
    Rng rng(8);
    double lo = 1.0, hi = -1.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.next_uniform(-0.5, 0.5);
        CHECK(u >= -0.5);
        CHECK(u < 0.5);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < -0.4);
    CHECK(hi > 0.4);
}

TEST_CASE("next_int respects bounds and is roughly uniform") {
    Rng rng(9);
    std::array<int, 8> counts{};
    for (int i = 0; i < 80000; ++i) {
        const int k = rng.next_int(8);
        REQUIRE(k >= 0);
        REQUIRE(k < 8);
        counts[static_cast<std::size_t>(k)]++;
    }
    for (int c : counts) {
        CHECK(c > 9000);
        CHECK(c < 11000);
    }
    Rng one(10);
    for (int i = 0; i < 20; ++i) {
        CHECK(one.next_int(1) == 0);
    }
    CHECK_THROWS_AS(rng.next_int(0), PreconditionError);
    CHECK_THROWS_AS(rng.next_int(-3), PreconditionError);
}

TEST_CASE("substreams are deterministic, distinct, and leave the parent untouched") {
    Rng parent(123);
    const std::uint64_t before = Rng(123).next_u64();

    Rng s0 = parent.substream(0);
    Rng s1 = parent.substream(1);
    Rng s0_again = parent.substream(0);
    CHECK(s0.next_u64() == s0_again.next_u64());
    CHECK(Rng(123).substream(0).next_u64() != s1.next_u64());

    // Deriving substreams consumes nothing from the parent.
    CHECK(parent.next_u64() == before);

    Rng la = Rng(123).substream("bootstrap");
    Rng lb = Rng(123).substream("bootstrap");
    Rng lc = Rng(123).substream("decode");
    CHECK(la.next_u64() == lb.next_u64());
    CHECK(Rng(123).substream("bootstrap").next_u64() != lc.next_u64());
}

TEST_CASE("sample_categorical follows the distribution") {
    Rng rng(11);
    const std::vector<double> point{0.0, 1.0, 0.0};
    for (int i = 0; i < 50; ++i) {
        CHECK(rng.sample_categorical(point) == 1);
    }

    const std::vector<double> fair{0.5, 0.5};
    std::array<int, 2> counts{};
    for (int i = 0; i < 2000; ++i) {
        counts[static_cast<std::size_t>(rng.sample_categorical(fair))]++;
    }
    CHECK(counts[0] > 800);
    CHECK(counts[1] > 800);

    // Sub-normalized input falls back to the last strictly positive entry.
    const std::vector<double> short_mass{0.0, 0.25};
    for (int i = 0; i < 50; ++i) {
        CHECK(rng.sample_categorical(short_mass) == 1);
    }

    CHECK_THROWS_AS(rng.sample_categorical(std::vector<double>{}), PreconditionError);
    CHECK_THROWS_AS(rng.sample_categorical(std::vector<double>{0.0, 0.0}), PreconditionError);
}

TEST_CASE("fnv1a64 matches the reference constants") {
    CHECK(fnv1a64("") == 0xCBF29CE484222325ULL);
    CHECK(fnv1a64("a") == 0xAF63DC4C8601EC8CULL);
    CHECK(fnv1a64("foobar") == 0x85944171F73967E8ULL);
}
