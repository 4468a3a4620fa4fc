#ifndef PANCSEG_RF_CASCADE_HPP
#define PANCSEG_RF_CASCADE_HPP

/// \file rf_cascade.hpp
/// Patch features, the two-level random-forest cascade that produces the
/// dense response map, and retention of superpixels whose pixels mostly
/// respond above 0.5.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pancseg/core.hpp"
#include "pancseg/grid.hpp"
#include "pancseg/random_forest.hpp"
#include "pancseg/superpixel.hpp"

namespace pancseg {

/// Bumped whenever the feature layout below changes.
inline constexpr std::uint32_t kPatchFeatureVersion = 1;

/// Layout of the appearance/position feature vector:
///   0-4   intensity mean, std, min, max, median
///   5-12  8-bin intensity histogram over [0,1] (fractions)
///   13-14 gradient magnitude mean, std
///   15    center intensity
///   16-17 normalized x, y position
///   18    distance to the slice center (normalized)
inline constexpr std::size_t kBaseFeatureCount = 19;
inline constexpr std::size_t kAppearanceFeatureCount = 16;
/// Level 2 appends level-1 probability at the center, and its window mean and std.
inline constexpr std::size_t kCascadeFeatureCount = kBaseFeatureCount + 3;

using ResponseMap = Image2D<float>;

/// Precomputes the gradient magnitude of one slice so that many patches can
/// be described cheaply.
class SliceFeatureExtractor {
public:
    explicit SliceFeatureExtractor(const Image2D<float>& slice) : slice_(slice), grad_(slice.nx(), slice.ny(), 0.0f) {
        for (int y = 0; y < slice.ny(); ++y) {
            for (int x = 0; x < slice.nx(); ++x) {
                const double gx = 0.5 * (static_cast<double>(slice.clamped(x + 1, y)) - slice.clamped(x - 1, y));
                const double gy = 0.5 * (static_cast<double>(slice.clamped(x, y + 1)) - slice.clamped(x, y - 1));
                grad_(x, y) = static_cast<float>(std::sqrt(gx * gx + gy * gy));
            }
        }
    }

    void extract(int cx, int cy, int patch_size, std::span<float> out) const {
        require(patch_size > 0 && patch_size % 2 == 1, "patch_size must be a positive odd integer");
        require(out.size() >= kBaseFeatureCount, "feature buffer too small");
        require(slice_.contains(cx, cy), "patch center outside the slice");
        const int r = patch_size / 2;
        values_.clear();
        double sum = 0.0, sum2 = 0.0, gsum = 0.0, gsum2 = 0.0;
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        std::array<double, 8> hist{};
        for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
                const double v = slice_.clamped(cx + dx, cy + dy);
                const double g = grad_.clamped(cx + dx, cy + dy);
                values_.push_back(static_cast<float>(v));
                sum += v;
                sum2 += v * v;
                gsum += g;
                gsum2 += g * g;
                lo = std::min(lo, v);
                hi = std::max(hi, v);
                hist[static_cast<std::size_t>(std::clamp(static_cast<int>(v * 8.0), 0, 7))] += 1.0;
            }
        }
        const double n = static_cast<double>(values_.size());
        const double mean = sum / n;
        const double gmean = gsum / n;
        auto mid = values_.begin() + static_cast<std::ptrdiff_t>(values_.size() / 2);
        std::nth_element(values_.begin(), mid, values_.end());
        out[0] = static_cast<float>(mean);
        out[1] = static_cast<float>(std::sqrt(std::max(0.0, sum2 / n - mean * mean)));
        out[2] = static_cast<float>(lo);
        out[3] = static_cast<float>(hi);
        out[4] = *mid;
        for (std::size_t b = 0; b < 8; ++b) {
            out[5 + b] = static_cast<float>(hist[b] / n);
        }
        out[13] = static_cast<float>(gmean);
        out[14] = static_cast<float>(std::sqrt(std::max(0.0, gsum2 / n - gmean * gmean)));
        out[15] = slice_(cx, cy);
        const double px = slice_.nx() > 1 ? static_cast<double>(cx) / (slice_.nx() - 1) : 0.5;
        const double py = slice_.ny() > 1 ? static_cast<double>(cy) / (slice_.ny() - 1) : 0.5;
        out[16] = static_cast<float>(px);
        out[17] = static_cast<float>(py);
        out[18] = static_cast<float>(std::hypot(2.0 * px - 1.0, 2.0 * py - 1.0) / std::sqrt(2.0));
    }

    const Image2D<float>& slice() const { return slice_; }

private:
    const Image2D<float>& slice_;
    Image2D<float> grad_;
    mutable std::vector<float> values_;
};

/// Features of the patch centered at (cx, cy) with edge replication.
inline std::vector<float> extract_patch_features(const Image2D<float>& slice, int cx, int cy, int patch_size) {
    require(patch_size > 0 && patch_size % 2 == 1, "patch_size must be a positive odd integer");
    std::vector<float> fv(kBaseFeatureCount);
    SliceFeatureExtractor(slice).extract(cx, cy, patch_size, fv);
    return fv;
}

struct CascadeConfig {
    int patch_size = 25;
    int stride = 4;
    double gate = 0.2;         ///< level 2 runs where level 1 >= gate
    double passthrough = 1.0;  ///< factor applied to level 1 below the gate

    void validate() const {
        require(patch_size > 0 && patch_size % 2 == 1, "rf.patch_size must be a positive odd integer");
        require(stride >= 1, "rf.stride must be at least 1");
        require(gate >= 0.0 && gate <= 1.0, "rf.gate must be in [0,1]");
        require(passthrough >= 0.0 && passthrough <= 1.0, "rf.passthrough must be in [0,1]");
    }
};

struct CascadeModel {
    CascadeConfig config;
    RandomForestModel level1;
    RandomForestModel level2;
    std::uint64_t config_hash = 0;  ///< fingerprint of the producing configuration

    friend bool operator==(const CascadeModel& a, const CascadeModel& b) {
        return a.config.patch_size == b.config.patch_size && a.config.stride == b.config.stride &&
               a.config.gate == b.config.gate && a.config.passthrough == b.config.passthrough &&
               a.level1 == b.level1 && a.level2 == b.level2 && a.config_hash == b.config_hash;
    }
};

struct CascadeStats {
    std::size_t grid_points = 0;
    std::size_t level2_evaluations = 0;
};

namespace detail {

/// Grid coordinates 0, stride, 2*stride, ... always ending at n-1.
inline std::vector<int> grid_axis(int n, int stride) {
    std::vector<int> axis;
    for (int v = 0; v < n - 1; v += stride) {
        axis.push_back(v);
    }
    axis.push_back(n - 1);
    return axis;
}

/// Bilinear interpolation of values on a (xs x ys) grid to the full image.
inline Image2D<float> interpolate_grid(const std::vector<int>& xs, const std::vector<int>& ys,
                                       const std::vector<double>& grid, int nx, int ny) {
    Image2D<float> out(nx, ny, 0.0f);
    std::vector<std::size_t> ix(static_cast<std::size_t>(nx));
    std::vector<double> fx(static_cast<std::size_t>(nx));
    for (int x = 0, k = 0; x < nx; ++x) {
        while (k + 2 < static_cast<int>(xs.size()) && xs[static_cast<std::size_t>(k) + 1] <= x) {
            ++k;
        }
        ix[static_cast<std::size_t>(x)] = static_cast<std::size_t>(k);
        const int span = xs.size() > 1 ? xs[static_cast<std::size_t>(k) + 1] - xs[static_cast<std::size_t>(k)] : 1;
        fx[static_cast<std::size_t>(x)] = xs.size() > 1 ? static_cast<double>(x - xs[static_cast<std::size_t>(k)]) / span : 0.0;
    }
    const std::size_t gx = xs.size();
    for (int y = 0, k = 0; y < ny; ++y) {
        while (k + 2 < static_cast<int>(ys.size()) && ys[static_cast<std::size_t>(k) + 1] <= y) {
            ++k;
        }
        const std::size_t j0 = static_cast<std::size_t>(k);
        const std::size_t j1 = std::min(j0 + 1, ys.size() - 1);
        const double fy = ys.size() > 1 ? static_cast<double>(y - ys[j0]) / (ys[j1] - ys[j0]) : 0.0;
        for (int x = 0; x < nx; ++x) {
            const std::size_t i0 = ix[static_cast<std::size_t>(x)];
            const std::size_t i1 = std::min(i0 + 1, gx - 1);
            const double t = fx[static_cast<std::size_t>(x)];
            const double top = (1.0 - t) * grid[j0 * gx + i0] + t * grid[j0 * gx + i1];
            const double bottom = (1.0 - t) * grid[j1 * gx + i0] + t * grid[j1 * gx + i1];
            out(x, y) = static_cast<float>(std::clamp((1.0 - fy) * top + fy * bottom, 0.0, 1.0));
        }
    }
    return out;
}

/// Appends the level-1 context features for the patch at (cx, cy).
inline void append_level1_context(const Image2D<float>& level1, int cx, int cy, int patch_size, std::span<float> out) {
    const int r = patch_size / 2;
    double sum = 0.0, sum2 = 0.0;
    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            const double v = level1.clamped(cx + dx, cy + dy);
            sum += v;
            sum2 += v * v;
        }
    }
    const double n = static_cast<double>(patch_size) * patch_size;
    const double mean = sum / n;
    out[kBaseFeatureCount] = level1(cx, cy);
    out[kBaseFeatureCount + 1] = static_cast<float>(mean);
    out[kBaseFeatureCount + 2] = static_cast<float>(std::sqrt(std::max(0.0, sum2 / n - mean * mean)));
}

inline void check_cascade(const CascadeModel& model) {
    model.config.validate();
    if (model.level1.feature_version != model.level2.feature_version ||
        model.level1.feature_version != kPatchFeatureVersion) {
        throw DataError("cascade: feature-version mismatch between models");
    }
    if (model.level1.feature_count != kBaseFeatureCount || model.level2.feature_count != kCascadeFeatureCount) {
        throw DataError("cascade: model feature counts do not match the feature layout");
    }
}

}  // namespace detail

/// Level-1 response only, densely interpolated from the stride grid.
inline Image2D<float> level1_response(const RandomForestModel& level1, const CascadeConfig& cfg,
                                      const SliceFeatureExtractor& features) {
    const auto& slice = features.slice();
    const auto xs = detail::grid_axis(slice.nx(), cfg.stride);
    const auto ys = detail::grid_axis(slice.ny(), cfg.stride);
    std::vector<double> grid(xs.size() * ys.size());
    std::vector<float> fv(kBaseFeatureCount);
    for (std::size_t j = 0; j < ys.size(); ++j) {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            features.extract(xs[i], ys[j], cfg.patch_size, fv);
            grid[j * xs.size() + i] = predict_forest(level1, fv);
        }
    }
    return detail::interpolate_grid(xs, ys, grid, slice.nx(), slice.ny());
}

/// Dense p_RF for one [0,1] slice.
inline ResponseMap cascade_apply(const CascadeModel& model, const Image2D<float>& slice, CascadeStats* stats = nullptr) {
    detail::check_cascade(model);
    const CascadeConfig& cfg = model.config;
    const SliceFeatureExtractor features(slice);
    const auto xs = detail::grid_axis(slice.nx(), cfg.stride);
    const auto ys = detail::grid_axis(slice.ny(), cfg.stride);

    std::vector<double> p1(xs.size() * ys.size());
    std::vector<std::vector<float>> base(p1.size(), std::vector<float>(kCascadeFeatureCount));
    for (std::size_t j = 0; j < ys.size(); ++j) {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            auto& fv = base[j * xs.size() + i];
            features.extract(xs[i], ys[j], cfg.patch_size, fv);
            p1[j * xs.size() + i] = predict_forest(model.level1, std::span<const float>(fv.data(), kBaseFeatureCount));
        }
    }
    const Image2D<float> level1 = detail::interpolate_grid(xs, ys, p1, slice.nx(), slice.ny());

    std::vector<double> final_grid(p1.size());
    std::size_t evaluations = 0;
    for (std::size_t j = 0; j < ys.size(); ++j) {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const std::size_t k = j * xs.size() + i;
            if (p1[k] >= cfg.gate) {
                detail::append_level1_context(level1, xs[i], ys[j], cfg.patch_size, base[k]);
                final_grid[k] = predict_forest(model.level2, base[k]);
                ++evaluations;
            } else {
                final_grid[k] = cfg.passthrough * p1[k];
            }
        }
    }
    if (stats) {
        stats->grid_points = p1.size();
        stats->level2_evaluations = evaluations;
    }
    return detail::interpolate_grid(xs, ys, final_grid, slice.nx(), slice.ny());
}

/// Ids of superpixels where strictly more than half of the pixels have
/// p_RF > 0.5, ascending.
inline std::vector<std::int32_t> retain_superpixels(const SuperpixelMap& spmap, const ResponseMap& rmap) {
    if (rmap.nx() != spmap.nx() || rmap.ny() != spmap.ny()) {
        throw DataError("retain_superpixels: dimension mismatch");
    }
    std::vector<std::int64_t> high(static_cast<std::size_t>(spmap.count()), 0);
    for (std::size_t i = 0; i < rmap.size(); ++i) {
        if (rmap[i] > 0.5f) {
            ++high[static_cast<std::size_t>(spmap.labels()[i])];
        }
    }
    std::vector<std::int32_t> kept;
    for (int id = 0; id < spmap.count(); ++id) {
        if (2 * high[static_cast<std::size_t>(id)] > spmap.stats(id).pixel_count) {
            kept.push_back(id);
        }
    }
    return kept;
}

// ---------------------------------------------------------------------------
// Training

struct CascadeTrainConfig {
    CascadeConfig cascade;
    ForestConfig forest;
    double negative_ratio = 0.1;       ///< negatives kept per positive sample
    std::size_t max_samples = 40000;   ///< per level, after class balancing
};

/// One [0,1] training slice and its ground truth.
struct TrainingSlice {
    Image2D<float> image;
    Image2D<std::uint8_t> mask;
};

namespace detail {

/// Keeps every positive (up to half the budget) and a random subset of
/// negatives; returns selected row indices in ascending order.
inline std::vector<std::size_t> balance(std::span<const std::uint8_t> labels, double negative_ratio,
                                        std::size_t max_samples, Rng& rng) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        (labels[i] ? pos : neg).push_back(i);
    }
    auto take = [&](std::vector<std::size_t>& v, std::size_t k) {
        k = std::min(k, v.size());
        for (std::size_t i = 0; i < k; ++i) {
            std::swap(v[i], v[i + uniform_index(rng, v.size() - i)]);
        }
        v.resize(k);
    };
    const auto pos_budget = static_cast<std::size_t>(static_cast<double>(max_samples) / (1.0 + negative_ratio));
    take(pos, pos_budget);
    take(neg, static_cast<std::size_t>(negative_ratio * static_cast<double>(std::max<std::size_t>(pos.size(), 1))));
    pos.insert(pos.end(), neg.begin(), neg.end());
    std::sort(pos.begin(), pos.end());
    return pos;
}

inline void subset(const FeatureTable& x, std::span<const std::uint8_t> y, const std::vector<std::size_t>& rows,
                   FeatureTable& xs, std::vector<std::uint8_t>& ys) {
    xs = FeatureTable{x.feature_count, {}};
    xs.values.reserve(rows.size() * x.feature_count);
    ys.clear();
    for (std::size_t r : rows) {
        xs.append(x.row(r));
        ys.push_back(y[r]);
    }
}

}  // namespace detail

/// Trains level 1 on stride-grid patches of all slices, then level 2 on the
/// grid points that pass the gate, with level-1 context appended.
inline CascadeModel train_cascade(std::span<const TrainingSlice> slices, const CascadeTrainConfig& cfg) {
    cfg.cascade.validate();
    cfg.forest.validate();
    if (slices.empty()) {
        throw DataError("train_cascade: no training slices");
    }
    FeatureTable all{kCascadeFeatureCount, {}};
    std::vector<std::uint8_t> labels;
    struct Point {
        std::size_t slice;
        int x, y;
    };
    std::vector<Point> points;
    std::vector<float> fv(kCascadeFeatureCount, 0.0f);
    for (std::size_t s = 0; s < slices.size(); ++s) {
        const auto& ts = slices[s];
        if (ts.image.nx() != ts.mask.nx() || ts.image.ny() != ts.mask.ny()) {
            throw DataError("train_cascade: slice and mask dims differ");
        }
        const SliceFeatureExtractor features(ts.image);
        for (int y : detail::grid_axis(ts.image.ny(), cfg.cascade.stride)) {
            for (int x : detail::grid_axis(ts.image.nx(), cfg.cascade.stride)) {
                features.extract(x, y, cfg.cascade.patch_size, fv);
                all.append(fv);
                labels.push_back(ts.mask(x, y) ? 1 : 0);
                points.push_back({s, x, y});
            }
        }
    }

    Rng rng(derive_seed(cfg.forest.seed, 0x6361));
    FeatureTable level1_x{kBaseFeatureCount, {}};
    std::vector<std::uint8_t> level1_y;
    for (std::size_t r : detail::balance(labels, cfg.negative_ratio, cfg.max_samples, rng)) {
        level1_x.append(all.row(r).first(kBaseFeatureCount));
        level1_y.push_back(labels[r]);
    }
    CascadeModel model;
    model.config = cfg.cascade;
    ForestConfig f1 = cfg.forest;
    f1.seed = derive_seed(cfg.forest.seed, 1);
    model.level1 = train_forest(level1_x, level1_y, f1, kPatchFeatureVersion);

    // Level-1 maps of the training slices feed the level-2 context features.
    std::vector<std::size_t> gated;
    std::size_t current = slices.size();
    Image2D<float> level1;
    for (std::size_t r = 0; r < points.size(); ++r) {
        const Point& p = points[r];
        if (p.slice != current) {
            current = p.slice;
            level1 = level1_response(model.level1, cfg.cascade, SliceFeatureExtractor(slices[p.slice].image));
        }
        if (level1(p.x, p.y) >= cfg.cascade.gate) {
            std::span<float> row(all.values.data() + r * kCascadeFeatureCount, kCascadeFeatureCount);
            detail::append_level1_context(level1, p.x, p.y, cfg.cascade.patch_size, row);
            gated.push_back(r);
        }
    }
    std::vector<std::uint8_t> gated_labels;
    for (std::size_t r : gated) {
        gated_labels.push_back(labels[r]);
    }
    FeatureTable level2_x;
    std::vector<std::uint8_t> level2_y;
    std::vector<std::size_t> rows;
    for (std::size_t k : detail::balance(gated_labels, cfg.negative_ratio, cfg.max_samples, rng)) {
        rows.push_back(gated[k]);
    }
    detail::subset(all, labels, rows, level2_x, level2_y);
    ForestConfig f2 = cfg.forest;
    f2.seed = derive_seed(cfg.forest.seed, 2);
    model.level2 = train_forest(level2_x, level2_y, f2, kPatchFeatureVersion);
    return model;
}

// ---------------------------------------------------------------------------
// Serialization: "PSCA", format version, cascade config, config hash, then
// the two forests.

inline void write_cascade(std::ostream& out, const CascadeModel& m) {
    binary::write_magic(out, "PSCA");
    binary::write(out, std::uint32_t{1});
    binary::write(out, static_cast<std::int32_t>(m.config.patch_size));
    binary::write(out, static_cast<std::int32_t>(m.config.stride));
    binary::write(out, m.config.gate);
    binary::write(out, m.config.passthrough);
    binary::write(out, m.config_hash);
    write_forest(out, m.level1);
    write_forest(out, m.level2);
}

inline CascadeModel read_cascade(std::istream& in) {
    binary::expect_magic(in, "PSCA");
    if (binary::read<std::uint32_t>(in) != 1) {
        throw DataError("unsupported cascade format version");
    }
    CascadeModel m;
    m.config.patch_size = binary::read<std::int32_t>(in);
    m.config.stride = binary::read<std::int32_t>(in);
    m.config.gate = binary::read<double>(in);
    m.config.passthrough = binary::read<double>(in);
    m.config_hash = binary::read<std::uint64_t>(in);
    m.level1 = read_forest(in);
    m.level2 = read_forest(in);
    detail::check_cascade(m);
    return m;
}

}  // namespace pancseg

#endif  // PANCSEG_RF_CASCADE_HPP
