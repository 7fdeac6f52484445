#include "stepwise/net.hpp"

#include <algorithm>
#include <cmath>

namespace stepwise {

// ============================================================================
// Architecture
// ============================================================================

void Architecture::validate() const {
    if (context_window <= 0) {
        throw PreconditionError("context_window must be positive");
    }
    if (hint_positions < 0) {
        throw PreconditionError("hint_positions must be non-negative");
    }
    if (hidden_dim <= 0) {
        throw PreconditionError("hidden_dim must be positive");
    }
    if (vocab_size <= 0) {
        throw PreconditionError("vocab_size must be positive");
    }
    if (output_dim <= 0) {
        throw PreconditionError("output_dim must be positive");
    }
}

std::size_t Architecture::param_count() const noexcept {
    const std::size_t in = static_cast<std::size_t>(input_dim());
    const std::size_t hid = static_cast<std::size_t>(hidden_dim);
    const std::size_t out = static_cast<std::size_t>(output_dim);
    return hid * in + hid + out * hid + out;
}

ParamLayout ParamLayout::of(const Architecture& arch) {
    arch.validate();
    const std::size_t in = static_cast<std::size_t>(arch.input_dim());
    const std::size_t hid = static_cast<std::size_t>(arch.hidden_dim);
    const std::size_t out = static_cast<std::size_t>(arch.output_dim);
    ParamLayout layout;
    layout.w1 = 0;
    layout.b1 = layout.w1 + hid * in;
    layout.w2 = layout.b1 + hid;
    layout.b2 = layout.w2 + out * hid;
    layout.total = layout.b2 + out;
    return layout;
}

std::vector<double> init_params(const Architecture& arch, Rng& rng, double scale) {
    arch.validate();
    if (scale < 0.0) {
        throw PreconditionError("init scale must be non-negative");
    }
    std::vector<double> params(arch.param_count());
    for (double& p : params) {
        p = rng.next_uniform(-scale, scale);
    }
    return params;
}

// ============================================================================
// Encoding and forward/backward
// ============================================================================

std::vector<int> encode_context(const Architecture& arch, std::span<const TokenId> context,
                                std::span<const TokenId> hint) {
    arch.validate();
    const int window = arch.context_window;
    const int feat = arch.feature_dim();
    std::vector<int> active;
    active.reserve(static_cast<std::size_t>(arch.positions()));

    auto fill = [&](std::span<const TokenId> tokens, int slots, int first_position) {
        const int len = static_cast<int>(tokens.size());
        const int used = std::min(len, slots);
        for (int p = 0; p < slots; ++p) {
            // Right-aligned: the last slot holds the most recent token.
            const int offset = p - (slots - used);
            TokenId tok = arch.pad_id();
            if (offset >= 0) {
                tok = tokens[static_cast<std::size_t>(len - used + offset)];
            }
            if (tok < 0 || tok > arch.pad_id()) {
                throw PreconditionError("context token id outside the vocabulary: " +
                                        std::to_string(tok));
            }
            active.push_back((first_position + p) * feat + static_cast<int>(tok));
        }
    };
    fill(context, window, 0);
    if (arch.hint_positions > 0) {
        fill(hint, arch.hint_positions, window);
    } else if (!hint.empty()) {
        throw PreconditionError("hint supplied to an architecture without hint positions");
    }
    return active;
}

Activations forward(const Architecture& arch, std::span<const double> params,
                    std::span<const int> active) {
    const ParamLayout layout = ParamLayout::of(arch);
    if (params.size() != layout.total) {
        throw PreconditionError("parameter block has wrong size");
    }
    if (static_cast<int>(active.size()) != arch.positions()) {
        throw PreconditionError("encoded context has wrong number of positions");
    }
    const int in = arch.input_dim();
    for (int a : active) {
        if (a < 0 || a >= in) {
            throw PreconditionError("active feature index out of range");
        }
    }

    const std::size_t hid = static_cast<std::size_t>(arch.hidden_dim);
    const std::size_t out = static_cast<std::size_t>(arch.output_dim);
    const std::size_t inw = static_cast<std::size_t>(in);

    Activations acts;
    acts.active.assign(active.begin(), active.end());
    acts.hidden.resize(hid);
    for (std::size_t j = 0; j < hid; ++j) {
        double pre = params[layout.b1 + j];
        const std::size_t row = layout.w1 + j * inw;
        for (int a : active) {
            pre += params[row + static_cast<std::size_t>(a)];
        }
        acts.hidden[j] = std::tanh(pre);
    }
    acts.logits.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
        double z = params[layout.b2 + o];
        const std::size_t row = layout.w2 + o * hid;
        for (std::size_t j = 0; j < hid; ++j) {
            z += params[row + j] * acts.hidden[j];
        }
        acts.logits[o] = z;
    }
    return acts;
}

void backward(const Architecture& arch, std::span<const double> params,
              const Activations& acts, std::span<const double> dlogits,
              std::span<double> grad) {
    const ParamLayout layout = ParamLayout::of(arch);
    if (params.size() != layout.total || grad.size() != layout.total) {
        throw PreconditionError("parameter or gradient block has wrong size");
    }
    if (dlogits.size() != static_cast<std::size_t>(arch.output_dim) ||
        acts.hidden.size() != static_cast<std::size_t>(arch.hidden_dim) ||
        static_cast<int>(acts.active.size()) != arch.positions()) {
        throw PreconditionError("activations do not match the architecture");
    }

    const std::size_t hid = static_cast<std::size_t>(arch.hidden_dim);
    const std::size_t out = static_cast<std::size_t>(arch.output_dim);
    const std::size_t inw = static_cast<std::size_t>(arch.input_dim());

    std::vector<double> dhidden(hid, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
        const double d = dlogits[o];
        const std::size_t row = layout.w2 + o * hid;
        grad[layout.b2 + o] += d;
        for (std::size_t j = 0; j < hid; ++j) {
            grad[row + j] += d * acts.hidden[j];
            dhidden[j] += d * params[row + j];
        }
    }
    for (std::size_t j = 0; j < hid; ++j) {
        const double h = acts.hidden[j];
        const double dpre = dhidden[j] * (1.0 - h * h);
        grad[layout.b1 + j] += dpre;
        const std::size_t row = layout.w1 + j * inw;
        for (int a : acts.active) {
            grad[row + static_cast<std::size_t>(a)] += dpre;
        }
    }
}

// ============================================================================
// Numerics
// ============================================================================

std::vector<double> log_softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw PreconditionError("log_softmax of an empty vector");
    }
    const double peak = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) {
        sum += std::exp(z - peak);
    }
    const double lse = peak + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
    return out;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out = log_softmax(logits);
    for (double& v : out) {
        v = std::exp(v);
    }
    return out;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) {
        throw PreconditionError("axpy size mismatch");
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] += alpha * x[i];
    }
}

void sgd_step(std::span<double> params, std::span<const double> grad, double lr) {
    if (params.size() != grad.size()) {
        throw PreconditionError("sgd_step size mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= lr * grad[i];
    }
}

}  // namespace stepwise
