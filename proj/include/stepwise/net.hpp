#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/rng.hpp"

namespace stepwise {

// ============================================================================
// Architecture
// ============================================================================

// One-hidden-layer tanh MLP over a fixed window of recent tokens. Each input
// position is a one-hot over the vocabulary plus a padding slot, so the input
// is sparse with exactly one active feature per position. `hint_positions`
// are extra slots after the window for conditioning tokens (for example the
// gold answer when sampling rationales in hindsight); they read as padding
// when no hint is supplied.
struct Architecture {
    int context_window = 8;
    int hint_positions = 0;
    int hidden_dim = 64;
    int vocab_size = 16;
    int output_dim = 16;

    int positions() const noexcept { return context_window + hint_positions; }
    int feature_dim() const noexcept { return vocab_size + 1; }
    int input_dim() const noexcept { return positions() * feature_dim(); }
    TokenId pad_id() const noexcept { return vocab_size; }
    std::size_t param_count() const noexcept;

    void validate() const;  // throws PreconditionError

    bool operator==(const Architecture&) const = default;
};

// Offsets into the flat parameter block:
// [W1 (hidden x input, row-major) | b1 | W2 (output x hidden) | b2].
struct ParamLayout {
    std::size_t w1 = 0;
    std::size_t b1 = 0;
    std::size_t w2 = 0;
    std::size_t b2 = 0;
    std::size_t total = 0;

    static ParamLayout of(const Architecture& arch);
};

// Uniform init in [-scale, scale], one draw per parameter in layout order.
std::vector<double> init_params(const Architecture& arch, Rng& rng, double scale = 0.01);

// ============================================================================
// Encoding and forward/backward
// ============================================================================

// Active feature indices for a context: the last `context_window` tokens
// right-aligned (front-padded when the context is short), then the hint
// tokens right-aligned into the hint slots. Exactly one index per position.
std::vector<int> encode_context(const Architecture& arch, std::span<const TokenId> context,
                                std::span<const TokenId> hint = {});

struct Activations {
    std::vector<int> active;
    std::vector<double> hidden;  // post-tanh
    std::vector<double> logits;
};

Activations forward(const Architecture& arch, std::span<const double> params,
                    std::span<const int> active);

// Accumulates d(loss)/d(params) into `grad`, given d(loss)/d(logits) at the
// activations produced by `forward`. Only the active input columns of W1 are
// touched.
void backward(const Architecture& arch, std::span<const double> params,
              const Activations& acts, std::span<const double> dlogits,
              std::span<double> grad);

// ============================================================================
// Numerics
// ============================================================================

std::vector<double> log_softmax(std::span<const double> logits);
std::vector<double> softmax(std::span<const double> logits);

// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

// params -= lr * grad
void sgd_step(std::span<double> params, std::span<const double> grad, double lr);

}  // namespace stepwise
