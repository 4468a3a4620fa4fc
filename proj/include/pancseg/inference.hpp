#ifndef PANCSEG_INFERENCE_HPP
#define PANCSEG_INFERENCE_HPP

// Dense probability maps from per-superpixel scores, 3D Gaussian smoothing
// and thresholding.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "pancseg/superpixel.hpp"
#include "pancseg/volume.hpp"

namespace pancseg {

/// Superpixel id -> probability for one slice.
using SliceScores = std::map<int, double>;

/// Paints every retained superpixel with its probability; everything else
/// is 0. `retained[z]` and `scores[z]` must name the same ids.
inline ProbabilityMap project_to_pixels(const std::vector<SuperpixelMap>& slices,
                                        const std::vector<std::vector<int>>& retained,
                                        const std::vector<SliceScores>& scores) {
    if (slices.empty()) {
        throw UsageError("project_to_pixels: no slices");
    }
    if (retained.size() != slices.size() || scores.size() != slices.size()) {
        throw DataError("project_to_pixels: slice counts differ");
    }
    const Dims3 dims{slices[0].nx(), slices[0].ny(), static_cast<int>(slices.size())};
    ProbabilityMap out(dims, 0.0f);
    for (int z = 0; z < dims.nz; ++z) {
        const SuperpixelMap& sp = slices[static_cast<std::size_t>(z)];
        if (sp.nx() != dims.nx || sp.ny() != dims.ny) {
            throw DataError("project_to_pixels: slice sizes differ");
        }
        const std::set<int> keep(retained[static_cast<std::size_t>(z)].begin(), retained[static_cast<std::size_t>(z)].end());
        const SliceScores& sc = scores[static_cast<std::size_t>(z)];
        for (const auto& [id, p] : sc) {
            if (!keep.contains(id)) {
                throw DataError("project_to_pixels: slice " + std::to_string(z) + " has a probability for superpixel " +
                                std::to_string(id) + " which is not retained");
            }
            if (!(p >= 0.0 && p <= 1.0)) {
                throw DataError("project_to_pixels: probability outside [0,1]");
            }
        }
        for (int id : keep) {
            if (id < 0 || id >= sp.count()) {
                throw DataError("project_to_pixels: retained id out of range");
            }
            if (!sc.contains(id)) {
                throw DataError("project_to_pixels: retained superpixel " + std::to_string(id) + " on slice " +
                                std::to_string(z) + " has no probability");
            }
        }
        const auto& labels = sp.labels();
        for (int y = 0; y < dims.ny; ++y) {
            for (int x = 0; x < dims.nx; ++x) {
                auto it = sc.find(labels(x, y));
                if (it != sc.end()) {
                    out(x, y, z) = static_cast<float>(it->second);
                }
            }
        }
    }
    return out;
}

struct SmoothConfig {
    double sigma = 3.0;     ///< voxels
    double truncate = 4.0;  ///< kernel radius in multiples of sigma

    int radius() const { return static_cast<int>(std::ceil(truncate * sigma)); }
    void validate() const {
        require(sigma > 0.0 && std::isfinite(sigma), "smooth.sigma must be positive");
        require(truncate >= 2.0, "smooth.truncate must be at least 2");
    }
};

/// Sampled Gaussian on [-r, r], normalized to sum to 1.
inline std::vector<double> gaussian_kernel(const SmoothConfig& cfg) {
    cfg.validate();
    const int r = cfg.radius();
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (cfg.sigma * cfg.sigma));
        sum += k[static_cast<std::size_t>(i + r)];
    }
    for (double& v : k) v /= sum;
    return k;
}

/// Half-sample symmetric reflection: -1 -> 0, n -> n-1.
inline int reflect_index(int i, int n) {
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

/// Separable 3D Gaussian, one pass per axis, reflective boundary.
inline ProbabilityMap gaussian_smooth_3d(const ProbabilityMap& p, const SmoothConfig& cfg) {
    const auto kernel = gaussian_kernel(cfg);
    const int r = cfg.radius();
    const Dims3 d = p.dims();
    std::vector<double> cur(p.values().begin(), p.values().end());
    std::vector<double> next(cur.size());
    const int n[3] = {d.nx, d.ny, d.nz};
    const std::size_t stride[3] = {1, static_cast<std::size_t>(d.nx),
                                   static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)};
    for (int axis = 0; axis < 3; ++axis) {
        const int len = n[axis];
        const std::size_t st = stride[axis];
        std::vector<double> line(static_cast<std::size_t>(len));
        for (std::size_t start = 0; start < cur.size(); ++start) {
            // Visit each line once, from the voxel whose coordinate on this axis is 0.
            if ((start / st) % static_cast<std::size_t>(len) != 0) {
                continue;
            }
            for (int i = 0; i < len; ++i) {
                line[static_cast<std::size_t>(i)] = cur[start + static_cast<std::size_t>(i) * st];
            }
            for (int i = 0; i < len; ++i) {
                double acc = 0.0;
                for (int k = -r; k <= r; ++k) {
                    acc += kernel[static_cast<std::size_t>(k + r)] * line[static_cast<std::size_t>(reflect_index(i + k, len))];
                }
                next[start + static_cast<std::size_t>(i) * st] = acc;
            }
        }
        std::swap(cur, next);
    }
    ProbabilityMap out(d, 0.0f);
    for (std::size_t i = 0; i < cur.size(); ++i) {
        out[i] = static_cast<float>(std::clamp(cur[i], 0.0, 1.0));
    }
    return out;
}

/// mask = 1 where map > p.
inline LabelMask threshold_map(const ProbabilityMap& map, double p) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw UsageError("threshold must be in [0,1]");
    }
    LabelMask mask(map.dims(), 0);
    for (std::size_t i = 0; i < map.size(); ++i) {
        mask[i] = static_cast<double>(map[i]) > p ? 1 : 0;
    }
    return mask;
}

}  // namespace pancseg

#endif  // PANCSEG_INFERENCE_HPP
