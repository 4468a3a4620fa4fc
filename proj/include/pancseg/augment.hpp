#ifndef PANCSEG_AUGMENT_HPP
#define PANCSEG_AUGMENT_HPP

/// \file augment.hpp
/// Multi-scale superpixel patch sampling with optional TPS deformation, and
/// the augmented, labeled patch dataset used to train the ConvNet.

#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <vector>

#include "pancseg/core.hpp"
#include "pancseg/grid.hpp"
#include "pancseg/superpixel.hpp"
#include "pancseg/tps.hpp"

namespace pancseg {

/// Default bounding-box scale factors for N_s scales.
inline std::vector<double> default_scales(int count) {
    switch (count) {
        case 1: return {1.0};
        case 2: return {1.0, 2.0};
        case 4: return {1.0, 1.5, 2.0, 2.5};
        default: break;
    }
    require(count >= 1, "scale count must be at least 1");
    std::vector<double> s;
    for (int i = 0; i < count; ++i) {
        s.push_back(1.0 + 1.5 * i / (count - 1));
    }
    return s;
}

struct AugmentConfig {
    std::vector<double> scales{1.0, 2.0};  ///< N_s bounding-box factors
    int deformations = 8;                  ///< N_t random TPS warps per scale; 0 = none
    TpsDeformConfig deform;
    int patch_size = 64;
    std::uint64_t seed = 1;

    void validate() const {
        require(!scales.empty(), "augment: at least one scale is required");
        for (double s : scales) {
            require(s >= 1.0, "augment: every scale must be at least 1");
        }
        require(deformations >= 0, "augment: deformation count must be non-negative");
        require(patch_size >= 4, "augment: patch_size must be at least 4");
        deform.validate();
    }
};

/// Crops scaled_bbox(spmap, id, s), optionally deforms it in patch space,
/// and resamples it to patch_size^2 with bilinear interpolation.
inline Image2D<float> sample_patch(const Image2D<float>& slice, const SuperpixelMap& spmap, int id, double s,
                                   int patch_size, const TpsWarp* warp = nullptr) {
    if (slice.nx() != spmap.nx() || slice.ny() != spmap.ny()) {
        throw DataError("sample_patch: slice and superpixel map dims differ");
    }
    if (id < 0 || id >= spmap.count()) {
        throw UsageError("sample_patch: invalid superpixel id");
    }
    require(patch_size >= 1, "sample_patch: patch_size must be positive");
    const Rect box = scaled_bbox(spmap, id, s);
    const double sx = box.width() / patch_size, sy = box.height() / patch_size;
    Image2D<float> patch(patch_size, patch_size, 0.0f);
    for (int j = 0; j < patch_size; ++j) {
        for (int i = 0; i < patch_size; ++i) {
            Point2 q{static_cast<double>(i), static_cast<double>(j)};
            if (warp) {
                q = (*warp)(q);
            }
            // Patch pixel centers sit at q + 0.5 in box units; slice pixel
            // k has its center at k + 0.5 in edge coordinates.
            const double x = box.x0 + (q.x + 0.5) * sx - 0.5;
            const double y = box.y0 + (q.y + 0.5) * sy - 0.5;
            patch(i, j) = static_cast<float>(sample_bilinear(slice, x, y));
        }
    }
    return patch;
}

/// Where a patch came from.
struct PatchProvenance {
    std::int32_t volume = 0;
    std::int32_t slice = 0;
    std::int32_t superpixel = 0;
    std::int32_t scale_index = 0;
    std::int32_t deformation_index = -1;  ///< -1 when no warp was applied
    friend bool operator==(const PatchProvenance&, const PatchProvenance&) = default;
};

struct PatchDataset {
    int patch_size = 0;
    std::vector<float> pixels;  ///< count * patch_size^2, patch-major
    std::vector<std::uint8_t> labels;
    std::vector<PatchProvenance> provenance;

    std::size_t count() const { return labels.size(); }
    std::size_t patch_pixels() const { return static_cast<std::size_t>(patch_size) * static_cast<std::size_t>(patch_size); }
    std::span<const float> patch(std::size_t i) const { return {pixels.data() + i * patch_pixels(), patch_pixels()}; }
    void append(const Image2D<float>& p, std::uint8_t label, const PatchProvenance& where) {
        if (p.nx() != patch_size || p.ny() != patch_size) {
            throw DataError("patch size does not match dataset");
        }
        pixels.insert(pixels.end(), p.values().begin(), p.values().end());
        labels.push_back(label);
        provenance.push_back(where);
    }
    friend bool operator==(const PatchDataset&, const PatchDataset&) = default;
};

/// Candidate superpixels of one slice with their training labels.
struct SliceCandidates {
    std::int32_t volume = 0;
    std::int32_t slice_index = 0;
    const Image2D<float>* image = nullptr;
    const SuperpixelMap* superpixels = nullptr;
    std::vector<std::int32_t> retained;    ///< ascending ids
    std::vector<std::uint8_t> labels;      ///< per superpixel of the slice
};

/// Emits |retained| * N_s * max(N_t, 1) patches in slice, id, scale,
/// deformation order. Each warp is seeded from (seed, volume, slice, id,
/// scale, deformation), independent of iteration order.
inline PatchDataset augment_training_set(std::span<const SliceCandidates> slices, const AugmentConfig& cfg) {
    cfg.validate();
    std::size_t total = 0;
    for (const auto& s : slices) {
        total += s.retained.size();
    }
    if (total == 0) {
        throw DataError("augment_training_set: empty retained set");
    }
    PatchDataset out;
    out.patch_size = cfg.patch_size;
    const std::size_t per = cfg.scales.size() * static_cast<std::size_t>(std::max(cfg.deformations, 1));
    out.pixels.reserve(total * per * out.patch_pixels());
    const double extent = cfg.patch_size - 1;
    for (const auto& s : slices) {
        if (!s.image || !s.superpixels) {
            throw UsageError("augment_training_set: slice without image or superpixels");
        }
        if (static_cast<int>(s.labels.size()) != s.superpixels->count()) {
            throw DataError("augment_training_set: label count does not match superpixels");
        }
        for (std::int32_t id : s.retained) {
            const std::uint8_t label = s.labels[static_cast<std::size_t>(id)];
            for (std::size_t k = 0; k < cfg.scales.size(); ++k) {
                if (cfg.deformations == 0) {
                    out.append(sample_patch(*s.image, *s.superpixels, id, cfg.scales[k], cfg.patch_size), label,
                               {s.volume, s.slice_index, id, static_cast<std::int32_t>(k), -1});
                    continue;
                }
                for (int t = 0; t < cfg.deformations; ++t) {
                    Rng rng(derive_seed(cfg.seed, s.volume, s.slice_index, id, static_cast<std::int64_t>(k), t));
                    const TpsWarp warp = random_tps(cfg.deform, extent, extent, rng);
                    out.append(sample_patch(*s.image, *s.superpixels, id, cfg.scales[k], cfg.patch_size, &warp), label,
                               {s.volume, s.slice_index, id, static_cast<std::int32_t>(k), t});
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Packed dataset file: "PSPD", format version, count (u64), patch_size,
// label width in bytes, then float32 patches, uint8 labels and provenance
// records (five int32 each).

inline void write_dataset(std::ostream& out, const PatchDataset& ds) {
    binary::write_magic(out, "PSPD");
    binary::write(out, std::uint32_t{1});
    binary::write(out, static_cast<std::uint64_t>(ds.count()));
    binary::write(out, static_cast<std::uint32_t>(ds.patch_size));
    binary::write(out, std::uint32_t{1});
    binary::write_array(out, ds.pixels);
    binary::write_array(out, ds.labels);
    for (const auto& p : ds.provenance) {
        binary::write(out, p.volume);
        binary::write(out, p.slice);
        binary::write(out, p.superpixel);
        binary::write(out, p.scale_index);
        binary::write(out, p.deformation_index);
    }
}

inline PatchDataset read_dataset(std::istream& in) {
    binary::expect_magic(in, "PSPD");
    if (binary::read<std::uint32_t>(in) != 1) {
        throw DataError("unsupported dataset format version");
    }
    PatchDataset ds;
    const auto count = binary::read<std::uint64_t>(in);
    ds.patch_size = static_cast<int>(binary::read<std::uint32_t>(in));
    if (binary::read<std::uint32_t>(in) != 1) {
        throw DataError("unsupported label width");
    }
    if (ds.patch_size <= 0 || ds.patch_size > 4096 || count > (1ULL << 32)) {
        throw DataError("dataset header is implausible");
    }
    ds.pixels = binary::read_array<float>(in, count * ds.patch_pixels());
    ds.labels = binary::read_array<std::uint8_t>(in, count);
    ds.provenance.resize(count);
    for (auto& p : ds.provenance) {
        p.volume = binary::read<std::int32_t>(in);
        p.slice = binary::read<std::int32_t>(in);
        p.superpixel = binary::read<std::int32_t>(in);
        p.scale_index = binary::read<std::int32_t>(in);
        p.deformation_index = binary::read<std::int32_t>(in);
    }
    return ds;
}

}  // namespace pancseg

#endif  // PANCSEG_AUGMENT_HPP
