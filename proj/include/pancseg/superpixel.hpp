#ifndef PANCSEG_SUPERPIXEL_HPP
#define PANCSEG_SUPERPIXEL_HPP

/// \file superpixel.hpp
/// 2D SLIC superpixels on single axial slices, per-superpixel geometry, and
/// the ground-truth majority labeling that bounds any superpixel classifier.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "pancseg/core.hpp"
#include "pancseg/grid.hpp"

namespace pancseg {

struct SlicConfig {
    int region_size = 10;        ///< target superpixel side S, in pixels
    double compactness = 10.0;   ///< SLIC m
    int iterations = 10;
    double min_region_fraction = 0.25;  ///< fragments below this * S^2 get merged
    /// Intensities in [0,1] are scaled by this before distances are taken, so
    /// compactness has the same meaning as with CIELAB lightness (0..100).
    double intensity_scale = 100.0;

    void validate() const {
        require(region_size >= 2, "slic.region_size must be at least 2");
        require(compactness > 0.0, "slic.compactness must be positive");
        require(iterations >= 1, "slic.iterations must be at least 1");
        require(min_region_fraction > 0.0 && min_region_fraction <= 1.0,
                "slic.min_region_fraction must be in (0,1]");
        require(intensity_scale > 0.0, "slic.intensity_scale must be positive");
    }
};

/// Pixel-edge coordinates: pixel (x, y) covers [x, x+1) x [y, y+1).
struct Rect {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    bool contains(const Rect& r) const { return r.x0 >= x0 && r.y0 >= y0 && r.x1 <= x1 && r.y1 <= y1; }
    friend bool operator==(const Rect&, const Rect&) = default;
};

struct SuperpixelStats {
    std::int64_t pixel_count = 0;
    double cx = 0.0;  ///< centroid, pixel-center coordinates
    double cy = 0.0;
    Rect bbox;        ///< tight bounding box
};

/// Label image for one slice with contiguous ids 0..count-1.
class SuperpixelMap {
public:
    SuperpixelMap() = default;

    /// Relabels `labels` in raster order of first appearance and computes
    /// per-superpixel statistics.
    explicit SuperpixelMap(Image2D<std::int32_t> labels) : labels_(std::move(labels)) {
        std::vector<std::int32_t> remap;
        for (auto& v : labels_.values()) {
            if (v < 0) {
                throw DataError("superpixel labels must be non-negative");
            }
            if (static_cast<std::size_t>(v) >= remap.size()) {
                remap.resize(static_cast<std::size_t>(v) + 1, -1);
            }
        }
        std::int32_t next = 0;
        for (auto& v : labels_.values()) {
            auto& r = remap[static_cast<std::size_t>(v)];
            if (r < 0) {
                r = next++;
            }
            v = r;
        }
        stats_.assign(static_cast<std::size_t>(next), SuperpixelStats{});
        for (auto& s : stats_) {
            s.bbox = {std::numeric_limits<double>::max(), std::numeric_limits<double>::max(), -1.0, -1.0};
        }
        for (int y = 0; y < labels_.ny(); ++y) {
            for (int x = 0; x < labels_.nx(); ++x) {
                auto& s = stats_[static_cast<std::size_t>(labels_(x, y))];
                ++s.pixel_count;
                s.cx += x;
                s.cy += y;
                s.bbox.x0 = std::min(s.bbox.x0, static_cast<double>(x));
                s.bbox.y0 = std::min(s.bbox.y0, static_cast<double>(y));
                s.bbox.x1 = std::max(s.bbox.x1, static_cast<double>(x + 1));
                s.bbox.y1 = std::max(s.bbox.y1, static_cast<double>(y + 1));
            }
        }
        for (auto& s : stats_) {
            s.cx /= static_cast<double>(s.pixel_count);
            s.cy /= static_cast<double>(s.pixel_count);
        }
    }

    int nx() const { return labels_.nx(); }
    int ny() const { return labels_.ny(); }
    int count() const { return static_cast<int>(stats_.size()); }
    const Image2D<std::int32_t>& labels() const { return labels_; }
    std::int32_t operator()(int x, int y) const { return labels_(x, y); }
    const SuperpixelStats& stats(int id) const {
        require(id >= 0 && id < count(), "superpixel id out of range");
        return stats_[static_cast<std::size_t>(id)];
    }
    const std::vector<SuperpixelStats>& all_stats() const { return stats_; }

    friend bool operator==(const SuperpixelMap& a, const SuperpixelMap& b) { return a.labels_ == b.labels_; }

private:
    Image2D<std::int32_t> labels_;
    std::vector<SuperpixelStats> stats_;
};

namespace detail {

/// Merges 4-connected fragments smaller than `min_size` into their largest
/// neighbour until every remaining fragment is large enough or isolated.
inline Image2D<std::int32_t> enforce_connectivity(const Image2D<std::int32_t>& labels, std::int64_t min_size) {
    const int nx = labels.nx(), ny = labels.ny();
    Image2D<std::int32_t> comp(nx, ny, -1);
    std::vector<std::int64_t> size;
    std::vector<int> stack;
    for (int y0 = 0; y0 < ny; ++y0) {
        for (int x0 = 0; x0 < nx; ++x0) {
            if (comp(x0, y0) >= 0) {
                continue;
            }
            const auto id = static_cast<std::int32_t>(size.size());
            const std::int32_t label = labels(x0, y0);
            size.push_back(0);
            comp(x0, y0) = id;
            stack.push_back(static_cast<int>(labels.index(x0, y0)));
            while (!stack.empty()) {
                const int i = stack.back();
                stack.pop_back();
                ++size.back();
                const int x = i % nx, y = i / nx;
                const int nb[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
                for (const auto& o : nb) {
                    const int xx = x + o[0], yy = y + o[1];
                    if (labels.contains(xx, yy) && comp(xx, yy) < 0 && labels(xx, yy) == label) {
                        comp(xx, yy) = id;
                        stack.push_back(static_cast<int>(labels.index(xx, yy)));
                    }
                }
            }
        }
    }

    // Union-find over components; merging only ever joins touching regions,
    // so every merged group stays 4-connected.
    const std::size_t n = size.size();
    std::vector<std::int32_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::int32_t a) {
        while (parent[static_cast<std::size_t>(a)] != a) {
            parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
            a = parent[static_cast<std::size_t>(a)];
        }
        return a;
    };
    std::vector<std::int64_t> group_size = size;

    bool changed = true;
    while (changed) {
        changed = false;
        // Smallest fragments first, ties by component id.
        std::vector<std::int32_t> order;
        for (std::size_t c = 0; c < n; ++c) {
            if (find(static_cast<std::int32_t>(c)) == static_cast<std::int32_t>(c) && group_size[c] < min_size) {
                order.push_back(static_cast<std::int32_t>(c));
            }
        }
        std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
            return group_size[static_cast<std::size_t>(a)] < group_size[static_cast<std::size_t>(b)];
        });
        for (std::int32_t c : order) {
            if (find(c) != c || group_size[static_cast<std::size_t>(c)] >= min_size) {
                continue;
            }
            std::int32_t best = -1;
            for (int y = 0; y < ny; ++y) {
                for (int x = 0; x < nx; ++x) {
                    if (find(comp(x, y)) != c) {
                        continue;
                    }
                    const int nb[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
                    for (const auto& o : nb) {
                        const int xx = x + o[0], yy = y + o[1];
                        if (!labels.contains(xx, yy)) {
                            continue;
                        }
                        const std::int32_t other = find(comp(xx, yy));
                        if (other == c) {
                            continue;
                        }
                        if (best < 0 || group_size[static_cast<std::size_t>(other)] > group_size[static_cast<std::size_t>(best)] ||
                            (group_size[static_cast<std::size_t>(other)] == group_size[static_cast<std::size_t>(best)] && other < best)) {
                            best = other;
                        }
                    }
                }
            }
            if (best >= 0) {
                parent[static_cast<std::size_t>(c)] = best;
                group_size[static_cast<std::size_t>(best)] += group_size[static_cast<std::size_t>(c)];
                changed = true;
            }
        }
    }

    Image2D<std::int32_t> out(nx, ny, 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = find(comp[i]);
    }
    return out;
}

}  // namespace detail

/// SLIC clustering of a [0,1] slice on (intensity, x, y).
inline SuperpixelMap slic_2d(const Image2D<float>& slice, const SlicConfig& cfg) {
    cfg.validate();
    const int nx = slice.nx(), ny = slice.ny();
    const int S = cfg.region_size;
    if (nx < S || ny < S) {
        throw UsageError("slic_2d: image is smaller than one region");
    }

    struct Center {
        double value, x, y;
    };
    std::vector<Center> centers;
    const int gx = std::max(1, static_cast<int>(std::lround(static_cast<double>(nx) / S)));
    const int gy = std::max(1, static_cast<int>(std::lround(static_cast<double>(ny) / S)));
    const double step_x = static_cast<double>(nx) / gx;
    const double step_y = static_cast<double>(ny) / gy;

    auto gradient = [&](int x, int y) {
        const double dx = static_cast<double>(slice.clamped(x + 1, y)) - slice.clamped(x - 1, y);
        const double dy = static_cast<double>(slice.clamped(x, y + 1)) - slice.clamped(x, y - 1);
        return dx * dx + dy * dy;
    };
    for (int j = 0; j < gy; ++j) {
        for (int i = 0; i < gx; ++i) {
            int sx = std::min(nx - 1, static_cast<int>((i + 0.5) * step_x));
            int sy = std::min(ny - 1, static_cast<int>((j + 0.5) * step_y));
            // Move the seed to the lowest-gradient pixel of its 3x3 neighbourhood.
            double best = gradient(sx, sy);
            int bx = sx, by = sy;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const int x = sx + dx, y = sy + dy;
                    if (!slice.contains(x, y)) {
                        continue;
                    }
                    const double g = gradient(x, y);
                    if (g < best) {
                        best = g;
                        bx = x;
                        by = y;
                    }
                }
            }
            centers.push_back({cfg.intensity_scale * slice(bx, by), static_cast<double>(bx), static_cast<double>(by)});
        }
    }

    // Initial labels from the seed grid cover every pixel.
    Image2D<std::int32_t> labels(nx, ny, 0);
    for (int y = 0; y < ny; ++y) {
        for (int x = 0; x < nx; ++x) {
            const int i = std::min(gx - 1, static_cast<int>(x / step_x));
            const int j = std::min(gy - 1, static_cast<int>(y / step_y));
            labels(x, y) = j * gx + i;
        }
    }

    const double spatial_weight = (cfg.compactness / S) * (cfg.compactness / S);
    Image2D<double> distance(nx, ny, 0.0);
    for (int it = 0; it < cfg.iterations; ++it) {
        std::fill(distance.values().begin(), distance.values().end(), std::numeric_limits<double>::infinity());
        for (std::size_t k = 0; k < centers.size(); ++k) {
            const Center& c = centers[k];
            const int x0 = std::max(0, static_cast<int>(std::floor(c.x - S)));
            const int x1 = std::min(nx - 1, static_cast<int>(std::ceil(c.x + S)));
            const int y0 = std::max(0, static_cast<int>(std::floor(c.y - S)));
            const int y1 = std::min(ny - 1, static_cast<int>(std::ceil(c.y + S)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double dv = cfg.intensity_scale * slice(x, y) - c.value;
                    const double dx = x - c.x, dy = y - c.y;
                    const double D = dv * dv + (dx * dx + dy * dy) * spatial_weight;
                    if (D < distance(x, y)) {
                        distance(x, y) = D;
                        labels(x, y) = static_cast<std::int32_t>(k);
                    }
                }
            }
        }
        std::vector<Center> sums(centers.size(), Center{0, 0, 0});
        std::vector<std::int64_t> counts(centers.size(), 0);
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                const auto k = static_cast<std::size_t>(labels(x, y));
                sums[k].value += cfg.intensity_scale * slice(x, y);
                sums[k].x += x;
                sums[k].y += y;
                ++counts[k];
            }
        }
        for (std::size_t k = 0; k < centers.size(); ++k) {
            if (counts[k] > 0) {
                const double inv = 1.0 / static_cast<double>(counts[k]);
                centers[k] = {sums[k].value * inv, sums[k].x * inv, sums[k].y * inv};
            }
        }
    }

    const auto min_size = static_cast<std::int64_t>(std::ceil(cfg.min_region_fraction * S * S));
    return SuperpixelMap(detail::enforce_connectivity(labels, min_size));
}

/// Strict-majority ground-truth labeling: superpixel i is 1 iff more than
/// half of its pixels are foreground.
inline std::vector<std::uint8_t> optimal_labeling(const SuperpixelMap& spmap, const Image2D<std::uint8_t>& gt) {
    if (gt.nx() != spmap.nx() || gt.ny() != spmap.ny()) {
        throw DataError("optimal_labeling: dimension mismatch");
    }
    std::vector<std::int64_t> fg(static_cast<std::size_t>(spmap.count()), 0);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i]) {
            ++fg[static_cast<std::size_t>(spmap.labels()[i])];
        }
    }
    std::vector<std::uint8_t> out(fg.size());
    for (std::size_t k = 0; k < fg.size(); ++k) {
        out[k] = 2 * fg[k] > spmap.all_stats()[k].pixel_count ? 1 : 0;
    }
    return out;
}

/// The per-superpixel labeling with the highest Dice against `gt` over a
/// whole stack of slices. Majority voting minimizes the number of wrong
/// pixels, which is not the same thing; for Dice the best labeling selects
/// the superpixels whose foreground fraction exceeds some cut, so scanning
/// the superpixels in order of decreasing fraction finds it exactly.
inline std::vector<std::vector<std::uint8_t>> dice_optimal_labeling(const std::vector<SuperpixelMap>& slices,
                                                                    const std::vector<Image2D<std::uint8_t>>& gt) {
    if (slices.size() != gt.size()) {
        throw DataError("dice_optimal_labeling: slice counts differ");
    }
    struct Entry {
        std::int64_t fg, n;
        std::size_t slice;
        int id;
    };
    std::vector<Entry> entries;
    std::int64_t gt_total = 0;
    for (std::size_t z = 0; z < slices.size(); ++z) {
        const SuperpixelMap& sp = slices[z];
        if (gt[z].nx() != sp.nx() || gt[z].ny() != sp.ny()) {
            throw DataError("dice_optimal_labeling: dimension mismatch");
        }
        std::vector<std::int64_t> fg(static_cast<std::size_t>(sp.count()), 0);
        for (std::size_t i = 0; i < gt[z].size(); ++i) {
            if (gt[z][i]) {
                ++fg[static_cast<std::size_t>(sp.labels()[i])];
                ++gt_total;
            }
        }
        for (int id = 0; id < sp.count(); ++id) {
            if (fg[static_cast<std::size_t>(id)] > 0) {
                entries.push_back({fg[static_cast<std::size_t>(id)], sp.stats(id).pixel_count, z, id});
            }
        }
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.fg * b.n > b.fg * a.n; });
    // Prefix k selects entries[0..k). Empty selection scores 1 only when gt is empty.
    std::size_t best_k = 0;
    std::int64_t best_num = gt_total == 0 ? 1 : 0, best_den = 1;
    std::int64_t f = 0, n = 0;
    for (std::size_t k = 1; k <= entries.size(); ++k) {
        f += entries[k - 1].fg;
        n += entries[k - 1].n;
        // 2f/(n+G) > best_num/best_den, compared exactly.
        if (static_cast<__int128>(2 * f) * best_den > static_cast<__int128>(best_num) * (n + gt_total)) {
            best_num = 2 * f;
            best_den = n + gt_total;
            best_k = k;
        }
    }
    std::vector<std::vector<std::uint8_t>> out(slices.size());
    for (std::size_t z = 0; z < slices.size(); ++z) {
        out[z].assign(static_cast<std::size_t>(slices[z].count()), 0);
    }
    for (std::size_t k = 0; k < best_k; ++k) {
        out[entries[k].slice][static_cast<std::size_t>(entries[k].id)] = 1;
    }
    return out;
}

/// Paints per-superpixel binary labels back onto the slice.
inline Image2D<std::uint8_t> labels_to_mask(const SuperpixelMap& spmap, const std::vector<std::uint8_t>& labels) {
    if (static_cast<int>(labels.size()) != spmap.count()) {
        throw DataError("labels_to_mask: label count does not match superpixel count");
    }
    Image2D<std::uint8_t> out(spmap.nx(), spmap.ny(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = labels[static_cast<std::size_t>(spmap.labels()[i])];
    }
    return out;
}

/// Tight bounding box scaled by `s` about its center, clamped to the slice.
inline Rect scaled_bbox(const SuperpixelMap& spmap, int id, double s) {
    require(s >= 1.0, "scaled_bbox: scale must be at least 1");
    const Rect& b = spmap.stats(id).bbox;
    const double mx = 0.5 * (b.x0 + b.x1), my = 0.5 * (b.y0 + b.y1);
    const double hw = 0.5 * s * b.width(), hh = 0.5 * s * b.height();
    return Rect{std::max(0.0, mx - hw), std::max(0.0, my - hh), std::min(static_cast<double>(spmap.nx()), mx + hw),
                std::min(static_cast<double>(spmap.ny()), my + hh)};
}

}  // namespace pancseg

#endif  // PANCSEG_SUPERPIXEL_HPP
