#ifndef PANCSEG_CONVNET_HPP
#define PANCSEG_CONVNET_HPP

/// \file convnet.hpp
/// A small convolutional network written from scratch: convolution,
/// max-pooling, ReLU, fully-connected, inverted dropout and a 2-way softmax,
/// with backpropagation, mini-batch SGD (momentum, weight decay) and a
/// versioned parameter file. Templated on the scalar type so gradient checks
/// can run in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pancseg/augment.hpp"
#include "pancseg/core.hpp"

namespace pancseg {

enum class LayerKind : std::uint8_t { conv, max_pool, relu, fully_connected, dropout, softmax };

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int out = 0;      ///< conv filters, fc units, softmax classes
    int kernel = 0;   ///< conv kernel side, pool window
    int stride = 1;
    int pad = 0;
    double rate = 0;  ///< dropout probability

    static LayerSpec conv(int out, int kernel, int stride = 1, int pad = -1) {
        return {LayerKind::conv, out, kernel, stride, pad < 0 ? kernel / 2 : pad, 0};
    }
    static LayerSpec max_pool(int window, int stride = -1) {
        return {LayerKind::max_pool, 0, window, stride < 0 ? window : stride, 0, 0};
    }
    static LayerSpec relu() { return {LayerKind::relu, 0, 0, 1, 0, 0}; }
    static LayerSpec fully_connected(int out) { return {LayerKind::fully_connected, out, 0, 1, 0, 0}; }
    static LayerSpec dropout(double rate) { return {LayerKind::dropout, 0, 0, 1, 0, rate}; }
    static LayerSpec softmax(int classes = 2) { return {LayerKind::softmax, classes, 0, 1, 0, 0}; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Shape3 {
    int c = 1, h = 1, w = 1;
    std::size_t size() const { return static_cast<std::size_t>(c) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct NetworkSpec {
    Shape3 input{1, 64, 64};
    std::vector<LayerSpec> layers;

    /// Output shape of every layer. Throws when the layers do not chain.
    std::vector<Shape3> shapes() const {
        std::vector<Shape3> out;
        Shape3 s = input;
        require(s.c > 0 && s.h > 0 && s.w > 0, "network input shape must be positive");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const LayerSpec& l = layers[i];
            const std::string where = "layer " + std::to_string(i) + ": ";
            switch (l.kind) {
                case LayerKind::conv: {
                    require(l.out > 0 && l.kernel > 0 && l.stride > 0 && l.pad >= 0, where + "invalid conv parameters");
                    const int h = (s.h + 2 * l.pad - l.kernel) / l.stride + 1;
                    const int w = (s.w + 2 * l.pad - l.kernel) / l.stride + 1;
                    require(s.h + 2 * l.pad >= l.kernel && s.w + 2 * l.pad >= l.kernel, where + "conv kernel larger than input");
                    s = {l.out, h, w};
                    break;
                }
                case LayerKind::max_pool: {
                    require(l.kernel > 0 && l.stride > 0, where + "invalid pool parameters");
                    require(s.h >= l.kernel && s.w >= l.kernel, where + "pool window larger than input");
                    s = {s.c, (s.h - l.kernel) / l.stride + 1, (s.w - l.kernel) / l.stride + 1};
                    break;
                }
                case LayerKind::relu:
                    break;
                case LayerKind::fully_connected:
                    require(l.out > 0, where + "fully-connected layer needs units");
                    s = {l.out, 1, 1};
                    break;
                case LayerKind::dropout:
                    require(l.rate >= 0.0 && l.rate < 1.0, where + "dropout rate must be in [0,1)");
                    break;
                case LayerKind::softmax:
                    require(i + 1 == layers.size(), where + "softmax must be the last layer");
                    require(l.out == 2 && s.size() == 2, where + "softmax must be 2-way over a 2-unit input");
                    s = {2, 1, 1};
                    break;
            }
            out.push_back(s);
        }
        return out;
    }

    /// Checks chaining and the terminal 2-way softmax.
    void validate() const {
        require(!layers.empty() && layers.back().kind == LayerKind::softmax, "network must end in a 2-way softmax");
        shapes();
    }

    int conv_layer_count() const {
        return static_cast<int>(std::count_if(layers.begin(), layers.end(),
                                              [](const LayerSpec& l) { return l.kind == LayerKind::conv; }));
    }

    /// The classifier topology: exactly five convolutional layers, pooling,
    /// fully-connected layers with dropout, ending in a 2-way softmax.
    void validate_classifier() const {
        validate();
        require(conv_layer_count() == 5, "classifier network must have exactly five convolutional layers");
        auto has = [&](LayerKind k) {
            return std::any_of(layers.begin(), layers.end(), [k](const LayerSpec& l) { return l.kind == k; });
        };
        require(has(LayerKind::max_pool) && has(LayerKind::fully_connected) && has(LayerKind::dropout),
                "classifier network needs max-pooling, fully-connected and dropout layers");
    }

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Canonical text form: "in:1x64x64;conv:32:5:1:2;relu;pool:2:2;fc:256;dropout:0.5;softmax:2".
inline std::string format_spec(const NetworkSpec& spec) {
    std::ostringstream out;
    out << "in:" << spec.input.c << 'x' << spec.input.h << 'x' << spec.input.w;
    for (const auto& l : spec.layers) {
        out << ';';
        switch (l.kind) {
            case LayerKind::conv: out << "conv:" << l.out << ':' << l.kernel << ':' << l.stride << ':' << l.pad; break;
            case LayerKind::max_pool: out << "pool:" << l.kernel << ':' << l.stride; break;
            case LayerKind::relu: out << "relu"; break;
            case LayerKind::fully_connected: out << "fc:" << l.out; break;
            case LayerKind::dropout: out << "dropout:" << l.rate; break;
            case LayerKind::softmax: out << "softmax:" << l.out; break;
        }
    }
    return out.str();
}

inline NetworkSpec parse_spec(const std::string& text) {
    NetworkSpec spec;
    spec.layers.clear();
    std::istringstream in(text);
    std::string item;
    bool first = true;
    while (std::getline(in, item, ';')) {
        item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }), item.end());
        if (item.empty()) {
            continue;
        }
        std::vector<std::string> parts;
        std::istringstream fields(item);
        std::string f;
        while (std::getline(fields, f, ':')) {
            parts.push_back(f);
        }
        auto num = [&](std::size_t i) -> double {
            require(i < parts.size(), "network spec item '" + item + "' is missing a value");
            try {
                std::size_t used = 0;
                const double v = std::stod(parts[i], &used);
                require(used == parts[i].size(), "bad number in network spec item '" + item + "'");
                return v;
            } catch (const std::logic_error&) {
                throw UsageError("bad number in network spec item '" + item + "'");
            }
        };
        auto integer = [&](std::size_t i) { return static_cast<int>(num(i)); };
        const std::string& kind = parts[0];
        if (kind == "in") {
            require(first && parts.size() == 2, "network spec must start with in:CxHxW");
            int c = 0, h = 0, w = 0;
            char x1 = 0, x2 = 0;
            std::istringstream dims(parts[1]);
            dims >> c >> x1 >> h >> x2 >> w;
            require(!dims.fail() && x1 == 'x' && x2 == 'x', "bad input shape in network spec");
            spec.input = {c, h, w};
        } else if (kind == "conv") {
            spec.layers.push_back(LayerSpec::conv(integer(1), integer(2), parts.size() > 3 ? integer(3) : 1,
                                                  parts.size() > 4 ? integer(4) : -1));
        } else if (kind == "pool") {
            spec.layers.push_back(LayerSpec::max_pool(integer(1), parts.size() > 2 ? integer(2) : -1));
        } else if (kind == "relu") {
            spec.layers.push_back(LayerSpec::relu());
        } else if (kind == "fc") {
            spec.layers.push_back(LayerSpec::fully_connected(integer(1)));
        } else if (kind == "dropout") {
            spec.layers.push_back(LayerSpec::dropout(num(1)));
        } else if (kind == "softmax") {
            spec.layers.push_back(LayerSpec::softmax(parts.size() > 1 ? integer(1) : 2));
        } else {
            throw UsageError("unknown network layer '" + kind + "'");
        }
        first = false;
    }
    spec.validate();
    return spec;
}

inline std::uint64_t spec_hash(const NetworkSpec& spec) {
    return fnv1a(format_spec(spec));
}

/// Five conv layers with pooling, a dropout-regularized fully-connected
/// layer and a 2-way softmax. `width` scales every filter count.
inline NetworkSpec classifier_spec(int input_size = 64, double width = 1.0, int fc_units = 256,
                                   double dropout = 0.5) {
    auto f = [&](int n) { return std::max(1, static_cast<int>(std::lround(n * width))); };
    NetworkSpec s;
    s.input = {1, input_size, input_size};
    s.layers = {LayerSpec::conv(f(32), 5), LayerSpec::relu(), LayerSpec::max_pool(2),
                LayerSpec::conv(f(32), 5), LayerSpec::relu(), LayerSpec::max_pool(2),
                LayerSpec::conv(f(64), 3), LayerSpec::relu(),
                LayerSpec::conv(f(64), 3), LayerSpec::relu(), LayerSpec::max_pool(2),
                LayerSpec::conv(f(96), 3), LayerSpec::relu(), LayerSpec::max_pool(2),
                LayerSpec::fully_connected(fc_units), LayerSpec::relu(), LayerSpec::dropout(dropout),
                LayerSpec::fully_connected(2), LayerSpec::softmax(2)};
    s.validate_classifier();
    return s;
}

// ---------------------------------------------------------------------------

template <class Real>
struct LayerParams {
    std::vector<Real> weights;
    std::vector<Real> biases;
    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <class Real>
struct NetworkParams {
    std::vector<LayerParams<Real>> layers;
    std::uint64_t init_seed = 0;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) {
            n += l.weights.size() + l.biases.size();
        }
        return n;
    }
    /// Same shapes, all zeros.
    NetworkParams zeros_like() const {
        NetworkParams z;
        z.init_seed = init_seed;
        for (const auto& l : layers) {
            z.layers.push_back({std::vector<Real>(l.weights.size(), Real(0)), std::vector<Real>(l.biases.size(), Real(0))});
        }
        return z;
    }
    template <class Other>
    NetworkParams<Other> cast() const {
        NetworkParams<Other> out;
        out.init_seed = init_seed;
        for (const auto& l : layers) {
            out.layers.push_back({std::vector<Other>(l.weights.begin(), l.weights.end()),
                                  std::vector<Other>(l.biases.begin(), l.biases.end())});
        }
        return out;
    }
    friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

/// (weights, biases) sizes of layer i.
inline std::pair<std::size_t, std::size_t> parameter_shape(const NetworkSpec& spec, std::size_t i,
                                                           const std::vector<Shape3>& shapes) {
    const Shape3 in = i == 0 ? spec.input : shapes[i - 1];
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
        case LayerKind::conv:
            return {static_cast<std::size_t>(l.out) * static_cast<std::size_t>(in.c) * static_cast<std::size_t>(l.kernel) *
                        static_cast<std::size_t>(l.kernel),
                    static_cast<std::size_t>(l.out)};
        case LayerKind::fully_connected:
            return {static_cast<std::size_t>(l.out) * in.size(), static_cast<std::size_t>(l.out)};
        default:
            return {0, 0};
    }
}

/// He-style uniform initialization from fan-in; biases start at zero.
template <class Real>
NetworkParams<Real> init_params(const NetworkSpec& spec, std::uint64_t seed) {
    const auto shapes = spec.shapes();
    NetworkParams<Real> p;
    p.init_seed = seed;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto [nw, nb] = parameter_shape(spec, i, shapes);
        LayerParams<Real> lp{std::vector<Real>(nw), std::vector<Real>(nb, Real(0))};
        if (nw > 0) {
            const double fan_in = static_cast<double>(nw) / static_cast<double>(nb);
            const double limit = std::sqrt(6.0 / fan_in);
            Rng rng(derive_seed(seed, 0x696e, static_cast<std::int64_t>(i)));
            for (auto& w : lp.weights) {
                w = static_cast<Real>(uniform(rng, -limit, limit));
            }
        }
        p.layers.push_back(std::move(lp));
    }
    return p;
}

template <class Real>
void check_params(const NetworkSpec& spec, const NetworkParams<Real>& params) {
    const auto shapes = spec.shapes();
    if (params.layers.size() != spec.layers.size()) {
        throw DataError("network parameters do not match the layer count");
    }
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto [nw, nb] = parameter_shape(spec, i, shapes);
        if (params.layers[i].weights.size() != nw || params.layers[i].biases.size() != nb) {
            throw DataError("network parameters for layer " + std::to_string(i) + " have the wrong shape");
        }
    }
}

enum class Mode { train, test };

/// Per-sample record of a forward pass, kept for backpropagation.
template <class Real>
struct ForwardTrace {
    std::vector<std::vector<Real>> activations;  ///< output of each layer
    std::vector<std::vector<std::uint32_t>> argmax;  ///< per pool layer
    std::vector<std::vector<Real>> masks;         ///< per dropout layer (train mode)
};

namespace detail {

inline int floor_div(int a, int b) { return a / b - ((a % b != 0) && ((a < 0) != (b < 0))); }
inline int ceil_div(int a, int b) { return -floor_div(-a, b); }

template <class Real>
void conv_forward(const Shape3& in, const Shape3& out, const LayerSpec& l, const LayerParams<Real>& p,
                  std::span<const Real> x, std::vector<Real>& y) {
    y.assign(out.size(), Real(0));
    const int k = l.kernel, s = l.stride, pad = l.pad;
    for (int o = 0; o < out.c; ++o) {
        Real* yo = y.data() + static_cast<std::size_t>(o) * out.h * out.w;
        std::fill(yo, yo + out.h * out.w, p.biases[static_cast<std::size_t>(o)]);
        for (int c = 0; c < in.c; ++c) {
            const Real* xc = x.data() + static_cast<std::size_t>(c) * in.h * in.w;
            const Real* wk = p.weights.data() + (static_cast<std::size_t>(o) * in.c + c) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const Real w = wk[ky * k + kx];
                    // Output columns whose input column lies inside the image.
                    const int ox0 = std::max(0, ceil_div(pad - kx, s));
                    const int ox1 = std::min(out.w, floor_div(in.w - 1 + pad - kx, s) + 1);
                    for (int oy = 0; oy < out.h; ++oy) {
                        const int iy = oy * s + ky - pad;
                        if (iy < 0 || iy >= in.h) {
                            continue;
                        }
                        Real* yrow = yo + oy * out.w;
                        const Real* xrow = xc + iy * in.w + (kx - pad);
                        if (s == 1) {
                            for (int ox = ox0; ox < ox1; ++ox) {
                                yrow[ox] += w * xrow[ox];
                            }
                        } else {
                            for (int ox = ox0; ox < ox1; ++ox) {
                                yrow[ox] += w * xrow[ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <class Real>
void conv_backward(const Shape3& in, const Shape3& out, const LayerSpec& l, const LayerParams<Real>& p,
                   std::span<const Real> x, std::span<const Real> dy, std::vector<Real>& dx, LayerParams<Real>& g) {
    dx.assign(in.size(), Real(0));
    const int k = l.kernel, s = l.stride, pad = l.pad;
    for (int o = 0; o < out.c; ++o) {
        const Real* dyo = dy.data() + static_cast<std::size_t>(o) * out.h * out.w;
        Real bsum = 0;
        for (int i = 0; i < out.h * out.w; ++i) {
            bsum += dyo[i];
        }
        g.biases[static_cast<std::size_t>(o)] += bsum;
        for (int c = 0; c < in.c; ++c) {
            const Real* xc = x.data() + static_cast<std::size_t>(c) * in.h * in.w;
            Real* dxc = dx.data() + static_cast<std::size_t>(c) * in.h * in.w;
            const std::size_t base = (static_cast<std::size_t>(o) * in.c + c) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const Real w = p.weights[base + ky * k + kx];
                    Real acc = 0;
                    const int ox0 = std::max(0, ceil_div(pad - kx, s));
                    const int ox1 = std::min(out.w, floor_div(in.w - 1 + pad - kx, s) + 1);
                    for (int oy = 0; oy < out.h; ++oy) {
                        const int iy = oy * s + ky - pad;
                        if (iy < 0 || iy >= in.h) {
                            continue;
                        }
                        const Real* dyrow = dyo + oy * out.w;
                        const Real* xrow = xc + iy * in.w + (kx - pad);
                        Real* dxrow = dxc + iy * in.w + (kx - pad);
                        for (int ox = ox0; ox < ox1; ++ox) {
                            acc += dyrow[ox] * xrow[ox * s];
                            dxrow[ox * s] += w * dyrow[ox];
                        }
                    }
                    g.weights[base + ky * k + kx] += acc;
                }
            }
        }
    }
}

template <class Real>
void pool_forward(const Shape3& in, const Shape3& out, const LayerSpec& l, std::span<const Real> x,
                  std::vector<Real>& y, std::vector<std::uint32_t>& arg) {
    y.assign(out.size(), Real(0));
    arg.assign(out.size(), 0);
    for (int c = 0; c < out.c; ++c) {
        for (int oy = 0; oy < out.h; ++oy) {
            for (int ox = 0; ox < out.w; ++ox) {
                std::size_t best = (static_cast<std::size_t>(c) * in.h + static_cast<std::size_t>(oy * l.stride)) * in.w +
                                   static_cast<std::size_t>(ox * l.stride);
                for (int ky = 0; ky < l.kernel; ++ky) {
                    for (int kx = 0; kx < l.kernel; ++kx) {
                        const std::size_t i = (static_cast<std::size_t>(c) * in.h + static_cast<std::size_t>(oy * l.stride + ky)) * in.w +
                                              static_cast<std::size_t>(ox * l.stride + kx);
                        if (x[i] > x[best]) {
                            best = i;
                        }
                    }
                }
                const std::size_t o = (static_cast<std::size_t>(c) * out.h + oy) * out.w + ox;
                y[o] = x[best];
                arg[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
}

template <class Real>
void fc_forward(const Shape3& in, const LayerSpec& l, const LayerParams<Real>& p, std::span<const Real> x,
                std::vector<Real>& y) {
    const std::size_t n = in.size();
    y.assign(static_cast<std::size_t>(l.out), Real(0));
    for (std::size_t o = 0; o < y.size(); ++o) {
        const Real* w = p.weights.data() + o * n;
        Real acc = p.biases[o];
        for (std::size_t i = 0; i < n; ++i) {
            acc += w[i] * x[i];
        }
        y[o] = acc;
    }
}

}  // namespace detail

/// Runs one sample through the network, recording what backprop needs.
/// In train mode dropout masks are drawn from `rng`.
template <class Real>
void forward_sample(const NetworkSpec& spec, const std::vector<Shape3>& shapes, const NetworkParams<Real>& params,
                    std::span<const Real> input, Mode mode, Rng* rng, ForwardTrace<Real>& trace) {
    const std::size_t n = spec.layers.size();
    trace.activations.resize(n);
    trace.argmax.resize(n);
    trace.masks.resize(n);
    std::span<const Real> x = input;
    for (std::size_t i = 0; i < n; ++i) {
        const LayerSpec& l = spec.layers[i];
        const Shape3 in = i == 0 ? spec.input : shapes[i - 1];
        const Shape3& out = shapes[i];
        auto& y = trace.activations[i];
        switch (l.kind) {
            case LayerKind::conv:
                detail::conv_forward(in, out, l, params.layers[i], x, y);
                break;
            case LayerKind::max_pool:
                detail::pool_forward(in, out, l, x, y, trace.argmax[i]);
                break;
            case LayerKind::relu:
                y.resize(x.size());
                for (std::size_t j = 0; j < x.size(); ++j) {
                    y[j] = x[j] > Real(0) ? x[j] : Real(0);
                }
                break;
            case LayerKind::fully_connected:
                detail::fc_forward(in, l, params.layers[i], x, y);
                break;
            case LayerKind::dropout:
                y.assign(x.begin(), x.end());
                if (mode == Mode::train && l.rate > 0.0) {
                    if (!rng) {
                        throw UsageError("train-mode forward needs a random stream");
                    }
                    auto& mask = trace.masks[i];
                    mask.resize(x.size());
                    const Real keep = Real(1) / static_cast<Real>(1.0 - l.rate);
                    for (std::size_t j = 0; j < x.size(); ++j) {
                        mask[j] = uniform01(*rng) < l.rate ? Real(0) : keep;
                        y[j] *= mask[j];
                    }
                } else {
                    trace.masks[i].clear();
                }
                break;
            case LayerKind::softmax: {
                y.resize(2);
                const Real m = std::max(x[0], x[1]);
                const Real e0 = std::exp(x[0] - m), e1 = std::exp(x[1] - m);
                y[0] = e0 / (e0 + e1);
                y[1] = e1 / (e0 + e1);
                break;
            }
        }
        x = trace.activations[i];
    }
}

/// Class probabilities, batch x 2, for a batch of `count` inputs laid out
/// back to back.
template <class Real>
std::vector<Real> forward(const NetworkSpec& spec, const NetworkParams<Real>& params, std::span<const Real> batch,
                          Mode mode, Rng* rng = nullptr) {
    spec.validate();
    check_params(spec, params);
    const auto shapes = spec.shapes();
    const std::size_t in = spec.input.size();
    if (batch.empty() || batch.size() % in != 0) {
        throw DataError("forward: batch size is not a multiple of the input shape");
    }
    const std::size_t count = batch.size() / in;
    std::vector<Real> probs(count * 2);
    ForwardTrace<Real> trace;
    for (std::size_t b = 0; b < count; ++b) {
        forward_sample(spec, shapes, params, batch.subspan(b * in, in), mode, rng, trace);
        probs[2 * b] = trace.activations.back()[0];
        probs[2 * b + 1] = trace.activations.back()[1];
    }
    return probs;
}

inline constexpr double kLossEpsilon = 1e-12;

/// Mean negative log-probability of the true class, log clamped at 1e-12.
template <class Real>
Real loss(std::span<const Real> probs, std::span<const std::uint8_t> labels) {
    if (probs.size() != 2 * labels.size() || labels.empty()) {
        throw DataError("loss: probabilities and labels do not match");
    }
    double sum = 0.0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (labels[b] > 1) {
            throw DataError("loss: label outside {0,1}");
        }
        sum -= std::log(std::max(static_cast<double>(probs[2 * b + labels[b]]), kLossEpsilon));
    }
    return static_cast<Real>(sum / static_cast<double>(labels.size()));
}

/// Accumulates d(loss_b * scale)/d(params) for one traced sample into `grad`.
template <class Real>
void backward_sample(const NetworkSpec& spec, const std::vector<Shape3>& shapes, const NetworkParams<Real>& params,
                     std::span<const Real> input, const ForwardTrace<Real>& trace, std::uint8_t label, Real scale,
                     NetworkParams<Real>& grad) {
    const std::size_t n = spec.layers.size();
    std::vector<Real> dy, dx;
    for (std::size_t ii = n; ii-- > 0;) {
        const LayerSpec& l = spec.layers[ii];
        const Shape3 in = ii == 0 ? spec.input : shapes[ii - 1];
        const Shape3& out = shapes[ii];
        std::span<const Real> x = ii == 0 ? input : std::span<const Real>(trace.activations[ii - 1]);
        const auto& y = trace.activations[ii];
        switch (l.kind) {
            case LayerKind::softmax: {
                // Softmax and clamped cross-entropy together; the clamp has
                // zero slope once p_true falls below the epsilon.
                dx.assign(2, Real(0));
                if (static_cast<double>(y[label]) > kLossEpsilon) {
                    dx[0] = scale * (y[0] - (label == 0 ? Real(1) : Real(0)));
                    dx[1] = scale * (y[1] - (label == 1 ? Real(1) : Real(0)));
                }
                break;
            }
            case LayerKind::dropout:
                dx = dy;
                if (!trace.masks[ii].empty()) {
                    for (std::size_t j = 0; j < dx.size(); ++j) {
                        dx[j] *= trace.masks[ii][j];
                    }
                }
                break;
            case LayerKind::relu:
                dx.resize(dy.size());
                for (std::size_t j = 0; j < dy.size(); ++j) {
                    dx[j] = y[j] > Real(0) ? dy[j] : Real(0);
                }
                break;
            case LayerKind::max_pool:
                dx.assign(in.size(), Real(0));
                for (std::size_t j = 0; j < dy.size(); ++j) {
                    dx[trace.argmax[ii][j]] += dy[j];
                }
                break;
            case LayerKind::fully_connected: {
                const std::size_t nin = in.size();
                dx.assign(nin, Real(0));
                auto& g = grad.layers[ii];
                const auto& w = params.layers[ii].weights;
                for (std::size_t o = 0; o < static_cast<std::size_t>(l.out); ++o) {
                    const Real d = dy[o];
                    g.biases[o] += d;
                    Real* gw = g.weights.data() + o * nin;
                    const Real* wo = w.data() + o * nin;
                    for (std::size_t i = 0; i < nin; ++i) {
                        gw[i] += d * x[i];
                        dx[i] += d * wo[i];
                    }
                }
                break;
            }
            case LayerKind::conv:
                detail::conv_backward(in, out, l, params.layers[ii], x, std::span<const Real>(dy), dx, grad.layers[ii]);
                break;
        }
        std::swap(dy, dx);
    }
}

/// Gradients of the mean cross-entropy over the batch. Dropout masks come
/// from `rng` exactly as in a train-mode forward() with the same stream.
template <class Real>
NetworkParams<Real> backward(const NetworkSpec& spec, const NetworkParams<Real>& params, std::span<const Real> batch,
                             std::span<const std::uint8_t> labels, Rng& rng) {
    spec.validate();
    check_params(spec, params);
    const auto shapes = spec.shapes();
    const std::size_t in = spec.input.size();
    if (batch.size() != labels.size() * in || labels.empty()) {
        throw DataError("backward: batch and labels do not match");
    }
    NetworkParams<Real> grad = params.zeros_like();
    ForwardTrace<Real> trace;
    const Real scale = Real(1) / static_cast<Real>(labels.size());
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (labels[b] > 1) {
            throw DataError("backward: label outside {0,1}");
        }
        const auto x = batch.subspan(b * in, in);
        forward_sample(spec, shapes, params, x, Mode::train, &rng, trace);
        backward_sample(spec, shapes, params, x, trace, labels[b], scale, grad);
    }
    return grad;
}

/// p_ConvNet for one superpixel: arithmetic mean of the per-scale pancreas
/// probabilities, accumulated in scale order.
template <class Real>
double predict_superpixel(const NetworkSpec& spec, const NetworkParams<Real>& params,
                          const std::vector<Image2D<float>>& patches) {
    if (patches.empty()) {
        throw UsageError("predict_superpixel: no patches");
    }
    const auto shapes = spec.shapes();
    ForwardTrace<Real> trace;
    std::vector<Real> input;
    double sum = 0.0;
    for (const auto& p : patches) {
        if (static_cast<std::size_t>(p.size()) != spec.input.size()) {
            throw DataError("predict_superpixel: patch does not match the network input");
        }
        input.assign(p.values().begin(), p.values().end());
        forward_sample(spec, shapes, params, std::span<const Real>(input), Mode::test, nullptr, trace);
        sum += static_cast<double>(trace.activations.back()[1]);
    }
    return sum / static_cast<double>(patches.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 64;
    int epochs = 100;
    double dropout_rate = -1.0;  ///< overrides every dropout layer when >= 0
    std::uint64_t seed = 1;
    unsigned threads = 1;

    void validate() const {
        require(learning_rate >= 0.0 && std::isfinite(learning_rate), "train.learning_rate must be non-negative");
        require(momentum >= 0.0 && momentum < 1.0, "train.momentum must be in [0,1)");
        require(weight_decay >= 0.0, "train.weight_decay must be non-negative");
        require(batch_size >= 1, "train.batch_size must be at least 1");
        require(epochs >= 0, "train.epochs must be non-negative");
        require(dropout_rate < 1.0, "train.dropout_rate must be below 1");
    }
};

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;
    double train_accuracy = 0.0;
    double validation_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    NetworkParams<float> params;
    std::vector<EpochRecord> trace;
};

/// Fraction of samples whose argmax class matches the label (test mode).
template <class Real>
double accuracy(const NetworkSpec& spec, const NetworkParams<Real>& params, const PatchDataset& data) {
    if (data.count() == 0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    const auto shapes = spec.shapes();
    ForwardTrace<Real> trace;
    std::vector<Real> input;
    std::size_t right = 0;
    for (std::size_t i = 0; i < data.count(); ++i) {
        const auto p = data.patch(i);
        input.assign(p.begin(), p.end());
        forward_sample(spec, shapes, params, std::span<const Real>(input), Mode::test, nullptr, trace);
        right += (trace.activations.back()[1] > trace.activations.back()[0] ? 1 : 0) == data.labels[i];
    }
    return static_cast<double>(right) / static_cast<double>(data.count());
}

/// Mini-batch SGD with momentum and L2 weight decay on weights.
///
/// Each sample's dropout stream is seeded from (seed, epoch, sample), and a
/// batch gradient is the ordered sum of fixed 8-sample chunk gradients, so
/// the trained parameters do not depend on the thread count.
inline TrainResult train_sgd(NetworkSpec spec, const PatchDataset& data, const TrainConfig& cfg,
                             const PatchDataset* validation = nullptr,
                             const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    if (cfg.dropout_rate >= 0.0) {
        for (auto& l : spec.layers) {
            if (l.kind == LayerKind::dropout) {
                l.rate = cfg.dropout_rate;
            }
        }
    }
    spec.validate();
    if (data.count() == 0) {
        throw DataError("train_sgd: empty dataset");
    }
    if (static_cast<std::size_t>(data.patch_size) * static_cast<std::size_t>(data.patch_size) != spec.input.size() ||
        spec.input.c != 1) {
        throw DataError("train_sgd: patch size does not match the network input");
    }
    const auto positives = static_cast<std::size_t>(std::count(data.labels.begin(), data.labels.end(), 1));
    if (positives == 0 || positives == data.count()) {
        throw DataError("train_sgd: both classes must be present");
    }

    const auto shapes = spec.shapes();
    TrainResult result;
    result.params = init_params<float>(spec, derive_seed(cfg.seed, 0x77));
    NetworkParams<float> velocity = result.params.zeros_like();
    std::vector<std::size_t> order(data.count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    constexpr std::size_t kChunk = 8;
    const unsigned threads = std::max(1u, cfg.threads);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle(derive_seed(cfg.seed, 0x5348, epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[uniform_index(shuffle, i)]);
        }
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t chunks = (end - start + kChunk - 1) / kChunk;
            std::vector<NetworkParams<float>> chunk_grad(chunks);
            std::vector<double> chunk_loss(chunks, 0.0);
            std::vector<std::size_t> chunk_correct(chunks, 0);
            const float scale = 1.0f / static_cast<float>(end - start);
            auto run_chunk = [&](std::size_t c) {
                chunk_grad[c] = result.params.zeros_like();
                ForwardTrace<float> trace;
                for (std::size_t k = start + c * kChunk; k < std::min(end, start + (c + 1) * kChunk); ++k) {
                    const std::size_t idx = order[k];
                    Rng rng(derive_seed(cfg.seed, 0x4452, epoch, static_cast<std::int64_t>(idx)));
                    const auto x = data.patch(idx);
                    forward_sample(spec, shapes, result.params, x, Mode::train, &rng, trace);
                    const auto& p = trace.activations.back();
                    const std::uint8_t y = data.labels[idx];
                    chunk_loss[c] -= std::log(std::max(static_cast<double>(p[y]), kLossEpsilon));
                    chunk_correct[c] += (p[1] > p[0] ? 1 : 0) == y;
                    backward_sample(spec, shapes, result.params, x, trace, y, scale, chunk_grad[c]);
                }
            };
            if (threads == 1 || chunks == 1) {
                for (std::size_t c = 0; c < chunks; ++c) {
                    run_chunk(c);
                }
            } else {
                std::vector<std::thread> pool;
                for (unsigned w = 0; w < std::min<std::size_t>(threads, chunks); ++w) {
                    pool.emplace_back([&, w] {
                        for (std::size_t c = w; c < chunks; c += threads) {
                            run_chunk(c);
                        }
                    });
                }
                for (auto& t : pool) {
                    t.join();
                }
            }
            for (std::size_t c = 1; c < chunks; ++c) {
                for (std::size_t l = 0; l < chunk_grad[0].layers.size(); ++l) {
                    auto& dst = chunk_grad[0].layers[l];
                    const auto& src = chunk_grad[c].layers[l];
                    for (std::size_t j = 0; j < dst.weights.size(); ++j) dst.weights[j] += src.weights[j];
                    for (std::size_t j = 0; j < dst.biases.size(); ++j) dst.biases[j] += src.biases[j];
                }
            }
            for (std::size_t c = 0; c < chunks; ++c) {
                loss_sum += chunk_loss[c];
                correct += chunk_correct[c];
            }
            const auto lr = static_cast<float>(cfg.learning_rate);
            const auto mu = static_cast<float>(cfg.momentum);
            const auto wd = static_cast<float>(cfg.weight_decay);
            for (std::size_t l = 0; l < result.params.layers.size(); ++l) {
                auto& w = result.params.layers[l];
                auto& v = velocity.layers[l];
                const auto& g = chunk_grad[0].layers[l];
                for (std::size_t j = 0; j < w.weights.size(); ++j) {
                    v.weights[j] = mu * v.weights[j] - lr * (g.weights[j] + wd * w.weights[j]);
                    w.weights[j] += v.weights[j];
                }
                for (std::size_t j = 0; j < w.biases.size(); ++j) {
                    v.biases[j] = mu * v.biases[j] - lr * g.biases[j];
                    w.biases[j] += v.biases[j];
                }
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(data.count());
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.count());
        if (validation && validation->count() > 0) {
            rec.validation_accuracy = accuracy(spec, result.params, *validation);
        }
        result.trace.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Parameter file: "PSCN", format version, spec hash, config hash, layer
// count, then per layer the kind, weight and bias counts and float32 data.

inline void write_params(std::ostream& out, const NetworkSpec& spec, const NetworkParams<float>& params,
                         std::uint64_t config_hash = 0) {
    check_params(spec, params);
    binary::write_magic(out, "PSCN");
    binary::write(out, std::uint32_t{1});
    binary::write(out, spec_hash(spec));
    binary::write(out, config_hash);
    binary::write(out, params.init_seed);
    binary::write(out, static_cast<std::uint32_t>(params.layers.size()));
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        binary::write(out, static_cast<std::uint8_t>(spec.layers[i].kind));
        binary::write(out, static_cast<std::uint64_t>(params.layers[i].weights.size()));
        binary::write(out, static_cast<std::uint64_t>(params.layers[i].biases.size()));
        binary::write_array(out, params.layers[i].weights);
        binary::write_array(out, params.layers[i].biases);
    }
}

inline NetworkParams<float> read_params(std::istream& in, const NetworkSpec& spec, std::uint64_t* config_hash = nullptr) {
    binary::expect_magic(in, "PSCN");
    if (binary::read<std::uint32_t>(in) != 1) {
        throw DataError("unsupported network parameter format version");
    }
    if (binary::read<std::uint64_t>(in) != spec_hash(spec)) {
        throw DataError("network parameter file was written for a different network spec");
    }
    const auto cfg_hash = binary::read<std::uint64_t>(in);
    if (config_hash) {
        *config_hash = cfg_hash;
    }
    NetworkParams<float> p;
    p.init_seed = binary::read<std::uint64_t>(in);
    const auto count = binary::read<std::uint32_t>(in);
    if (count != spec.layers.size()) {
        throw DataError("network parameter file has the wrong layer count");
    }
    const auto shapes = spec.shapes();
    for (std::uint32_t i = 0; i < count; ++i) {
        if (binary::read<std::uint8_t>(in) != static_cast<std::uint8_t>(spec.layers[i].kind)) {
            throw DataError("network parameter file layer kinds do not match the spec");
        }
        const auto nw = binary::read<std::uint64_t>(in);
        const auto nb = binary::read<std::uint64_t>(in);
        const auto [ew, eb] = parameter_shape(spec, i, shapes);
        if (nw != ew || nb != eb) {
            throw DataError("network parameter file has wrong shapes for layer " + std::to_string(i));
        }
        LayerParams<float> lp;
        lp.weights = binary::read_array<float>(in, nw);
        lp.biases = binary::read_array<float>(in, nb);
        p.layers.push_back(std::move(lp));
    }
    return p;
}

}  // namespace pancseg

#endif  // PANCSEG_CONVNET_HPP
