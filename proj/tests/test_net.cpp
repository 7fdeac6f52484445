#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "stepwise/net.hpp"
#include "test_helpers.hpp"

using namespace stepwise;
namespace st = stepwise::testing;

namespace {

Architecture tiny() {
    Architecture arch;
    arch.context_window = 3;
    arch.hint_positions = 1;
    arch.hidden_dim = 5;
    arch.vocab_size = 4;
    arch.output_dim = 4;
    return arch;
}

}  // namespace

TEST_CASE("parameter layout covers the block exactly") {
    const Architecture arch = tiny();
    const ParamLayout layout = ParamLayout::of(arch);
    CHECK(arch.input_dim() == 4 * 5);
    CHECK(layout.b1 == static_cast<std::size_t>(5 * 20));
    CHECK(layout.w2 == layout.b1 + 5);
    CHECK(layout.b2 == layout.w2 + 4 * 5);
    CHECK(layout.total == layout.b2 + 4);
    CHECK(layout.total == arch.param_count());
}

TEST_CASE("init_params is seeded and bounded") {
    const Architecture arch = tiny();
    Rng a(5);
    Rng b(5);
    const auto p1 = init_params(arch, a, 0.01);
    const auto p2 = init_params(arch, b, 0.01);
    CHECK(p1 == p2);
    for (double v : p1) {
        CHECK(std::abs(v) <= 0.01);
    }
    Rng c(6);
    CHECK(init_params(arch, c, 0.01) != p1);
}

TEST_CASE("encode_context right-aligns and pads") {
    const Architecture arch = tiny();
    const int feat = arch.feature_dim();  // 5

    // Short context: front positions read as padding.
    const std::vector<TokenId> short_ctx{2};
    const auto active = encode_context(arch, short_ctx);
    REQUIRE(active.size() == 4);
    CHECK(active[0] == 0 * feat + arch.pad_id());
    CHECK(active[1] == 1 * feat + arch.pad_id());
    CHECK(active[2] == 2 * feat + 2);
    CHECK(active[3] == 3 * feat + arch.pad_id());  // empty hint slot

    // Long context: only the trailing window matters.
    const std::vector<TokenId> long_ctx{0, 1, 2, 3, 1};
    const auto tail = encode_context(arch, long_ctx, std::vector<TokenId>{3});
    CHECK(tail[0] == 0 * feat + 2);
    CHECK(tail[1] == 1 * feat + 3);
    CHECK(tail[2] == 2 * feat + 1);
    CHECK(tail[3] == 3 * feat + 3);

    Architecture no_hint = tiny();
    no_hint.hint_positions = 0;
    CHECK_THROWS_AS(encode_context(no_hint, short_ctx, std::vector<TokenId>{1}),
                    PreconditionError);
    CHECK_THROWS_AS(encode_context(arch, std::vector<TokenId>{99}), PreconditionError);
}

TEST_CASE("forward is deterministic and shape-checked") {
    const Architecture arch = tiny();
    Rng rng(7);
    const auto params = init_params(arch, rng, 0.5);
    const auto active = encode_context(arch, std::vector<TokenId>{1, 2});
    const Activations a = forward(arch, params, active);
    const Activations b = forward(arch, params, active);
    CHECK(a.logits == b.logits);
    CHECK(a.hidden == b.hidden);
    REQUIRE(a.logits.size() == 4);
    REQUIRE(a.hidden.size() == 5);
    for (double h : a.hidden) {
        CHECK(std::abs(h) < 1.0);
    }
    std::vector<double> short_params(params.begin(), params.end() - 1);
    CHECK_THROWS_AS(forward(arch, short_params, active), PreconditionError);
}

TEST_CASE("softmax identities") {
    const std::vector<double> logits{0.3, -1.2, 2.5, 0.0};
    const auto lsm = log_softmax(logits);
    const auto sm = softmax(logits);
    double total = std::accumulate(sm.begin(), sm.end(), 0.0);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < logits.size(); ++i) {
        CHECK(sm[i] == doctest::Approx(std::exp(lsm[i])).epsilon(1e-12));
        CHECK(sm[i] > 0.0);
    }
    // Shift invariance.
    std::vector<double> shifted = logits;
    for (double& z : shifted) {
        z += 100.0;
    }
    const auto lsm2 = log_softmax(shifted);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        CHECK(lsm2[i] == doctest::Approx(lsm[i]).epsilon(1e-9));
    }
    // Extreme logits stay finite.
    const auto huge = log_softmax(std::vector<double>{1000.0, 999.0});
    CHECK(std::isfinite(huge[0]));
    CHECK(huge[0] == doctest::Approx(std::log(1.0 / (1.0 + std::exp(-1.0)))).epsilon(1e-9));
}

TEST_CASE("backward matches central finite differences") {
    const Architecture arch = tiny();
    Rng rng(11);
    const auto params = init_params(arch, rng, 0.3);
    const auto active = encode_context(arch, std::vector<TokenId>{1, 2, 0},
                                       std::vector<TokenId>{3});

    // Probe loss: NLL of a fixed target class plus a quadratic pull on the
    // first logit, so every output participates.
    const int target = 2;
    auto loss = [&](const std::vector<double>& p) {
        const Activations acts = forward(arch, p, active);
        const auto lsm = log_softmax(acts.logits);
        return -lsm[target] + 0.5 * acts.logits[0] * acts.logits[0];
    };

    const Activations acts = forward(arch, params, active);
    const auto probs = softmax(acts.logits);
    std::vector<double> dlogits(probs.begin(), probs.end());
    dlogits[target] -= 1.0;
    dlogits[0] += acts.logits[0];

    std::vector<double> grad(params.size(), 0.0);
    backward(arch, params, acts, dlogits, grad);

    // Probe every parameter of this small model.
    double max_err = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double numeric = st::central_diff(loss, params, i);
        max_err = std::max(max_err, st::grad_probe_error(grad[i], numeric));
    }
    CHECK(max_err < st::kGradTolerance);

    // Inactive W1 columns receive no gradient.
    const ParamLayout layout = ParamLayout::of(arch);
    int inactive_checked = 0;
    for (int col = 0; col < arch.input_dim(); ++col) {
        bool is_active = false;
        for (int a : active) {
            is_active = is_active || a == col;
        }
        if (is_active) {
            continue;
        }
        for (int j = 0; j < arch.hidden_dim; ++j) {
            CHECK(grad[layout.w1 + static_cast<std::size_t>(j) *
                                       static_cast<std::size_t>(arch.input_dim()) +
                       static_cast<std::size_t>(col)] == 0.0);
        }
        ++inactive_checked;
    }
    CHECK(inactive_checked == arch.input_dim() - 4);
}

TEST_CASE("axpy and sgd_step") {
    std::vector<double> y{1.0, 2.0};
    axpy(0.5, std::vector<double>{2.0, -2.0}, y);
    CHECK(y == std::vector<double>{2.0, 1.0});
    sgd_step(y, std::vector<double>{1.0, 1.0}, 0.5);
    CHECK(y == std::vector<double>{1.5, 0.5});
    CHECK_THROWS_AS(axpy(1.0, std::vector<double>{1.0}, y), PreconditionError);
}
