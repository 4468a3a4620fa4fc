#pragma once
// Central finite-difference gradient check for tiny randomized networks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pancseg/convnet.hpp"

namespace gradcheck {

using namespace pancseg;

// 4x4 input, two conv layers, optional pooling and dropout.
inline NetworkSpec random_tiny_spec(Rng& rng) {
    NetworkSpec s;
    s.input = {1, 4, 4};
    auto pick = [&](int a, int b) { return a + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(b - a + 1))); };
    const int k1 = pick(0, 1) ? 3 : 1;
    s.layers.push_back(LayerSpec::conv(pick(2, 3), k1));
    s.layers.push_back(LayerSpec::relu());
    const bool pool_first = pick(0, 1) == 1;
    if (pool_first) {
        s.layers.push_back(LayerSpec::max_pool(2));
    }
    s.layers.push_back(LayerSpec::conv(pick(2, 3), pick(0, 1) ? 3 : 1));
    s.layers.push_back(LayerSpec::relu());
    if (!pool_first) {
        s.layers.push_back(LayerSpec::max_pool(2));
    }
    s.layers.push_back(LayerSpec::fully_connected(pick(3, 5)));
    s.layers.push_back(LayerSpec::relu());
    if (pick(0, 1)) {
        s.layers.push_back(LayerSpec::dropout(pick(0, 1) ? 0.5 : 0.25));
    }
    s.layers.push_back(LayerSpec::fully_connected(2));
    s.layers.push_back(LayerSpec::softmax(2));
    s.validate();
    return s;
}

// Which side of every ReLU each unit is on and which element every pool
// window picked. Finite differences are only meaningful when the stencil
// does not change this.
inline std::vector<std::uint32_t> kink_signature(const NetworkSpec& spec, const NetworkParams<double>& p,
                                                 const std::vector<double>& batch, std::uint64_t mask_seed) {
    const auto shapes = spec.shapes();
    const std::size_t in = spec.input.size();
    std::vector<std::uint32_t> sig;
    ForwardTrace<double> trace;
    Rng rng(mask_seed);
    for (std::size_t b = 0; b < batch.size() / in; ++b) {
        forward_sample(spec, shapes, p, std::span<const double>(batch).subspan(b * in, in), Mode::train, &rng, trace);
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            if (spec.layers[i].kind == LayerKind::relu) {
                for (double v : trace.activations[i]) sig.push_back(v > 0.0);
            } else if (spec.layers[i].kind == LayerKind::max_pool) {
                sig.insert(sig.end(), trace.argmax[i].begin(), trace.argmax[i].end());
            }
        }
    }
    return sig;
}

inline double loss_at(const NetworkSpec& spec, const NetworkParams<double>& p, const std::vector<double>& batch,
                      const std::vector<std::uint8_t>& labels, std::uint64_t mask_seed) {
    Rng rng(mask_seed);
    const auto probs = forward(spec, p, std::span<const double>(batch), Mode::train, &rng);
    return loss<double>(std::span<const double>(probs), std::span<const std::uint8_t>(labels));
}

struct Result {
    double max_relative_error = 0.0;
    std::size_t parameters = 0;
    int draws = 0;  // points tried before a kink-free one was found
    bool kink_free = false;
};

// Relative error |a-n| / max(|a|, |n|), with both sides below `floor`
// treated as agreeing zeros.
inline double relative_error(double a, double n, double floor = 1e-10) {
    const double d = std::max(std::abs(a), std::abs(n));
    return d < floor ? 0.0 : std::abs(a - n) / d;
}

// One randomized check: draws a tiny spec, parameters (including nonzero
// biases), a 3-sample batch and frozen dropout masks, redrawing the point
// until no stencil crosses a ReLU or pooling kink.
inline Result check_seed(std::uint64_t seed, double h = 1e-3, int max_draws = 200) {
    Result r;
    for (int draw = 0; draw < max_draws; ++draw) {
        r.draws = draw + 1;
        Rng rng(derive_seed(seed, draw));
        const NetworkSpec spec = random_tiny_spec(rng);
        auto p = init_params<double>(spec, derive_seed(seed, draw, 1));
        for (auto& l : p.layers) {
            for (auto& b : l.biases) b = uniform(rng, -0.5, 0.5);
        }
        std::vector<double> batch(3 * spec.input.size());
        for (auto& v : batch) v = uniform(rng, -1.0, 1.0);
        const std::vector<std::uint8_t> labels = {0, 1, static_cast<std::uint8_t>(uniform_index(rng, 2))};
        const std::uint64_t mask_seed = derive_seed(seed, draw, 2);

        Rng masks(mask_seed);
        const auto grad = backward(spec, p, std::span<const double>(batch), std::span<const std::uint8_t>(labels), masks);
        const auto base = kink_signature(spec, p, batch, mask_seed);
        bool crossed = false;
        double worst = 0.0;
        std::size_t count = 0;
        for (std::size_t l = 0; l < p.layers.size() && !crossed; ++l) {
            for (int which = 0; which < 2 && !crossed; ++which) {
                auto& values = which == 0 ? p.layers[l].weights : p.layers[l].biases;
                const auto& g = which == 0 ? grad.layers[l].weights : grad.layers[l].biases;
                for (std::size_t j = 0; j < values.size(); ++j) {
                    const double keep = values[j];
                    values[j] = keep + h;
                    const double up = loss_at(spec, p, batch, labels, mask_seed);
                    crossed = kink_signature(spec, p, batch, mask_seed) != base;
                    values[j] = keep - h;
                    const double down = loss_at(spec, p, batch, labels, mask_seed);
                    crossed = crossed || kink_signature(spec, p, batch, mask_seed) != base;
                    values[j] = keep;
                    if (crossed) break;
                    worst = std::max(worst, relative_error(g[j], (up - down) / (2.0 * h)));
                    ++count;
                }
            }
        }
        if (!crossed) {
            r.max_relative_error = worst;
            r.parameters = count;
            r.kink_free = true;
            return r;
        }
    }
    return r;
}

}  // namespace gradcheck
