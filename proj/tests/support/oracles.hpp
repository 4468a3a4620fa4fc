#pragma once
// Slow reference implementations used as test oracles.

#include <cstddef>

#include "pancseg/inference.hpp"

namespace oracles {

using namespace pancseg;

// Direct triple sum with the same kernel and boundary rule as the separable filter.
inline ProbabilityMap dense_smooth(const ProbabilityMap& p, const SmoothConfig& cfg) {
    const auto k = gaussian_kernel(cfg);
    const int r = cfg.radius();
    const Dims3 d = p.dims();
    ProbabilityMap out(d, 0.0f);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                double acc = 0.0;
                for (int c = -r; c <= r; ++c)
                    for (int b = -r; b <= r; ++b)
                        for (int a = -r; a <= r; ++a)
                            acc += k[static_cast<std::size_t>(a + r)] * k[static_cast<std::size_t>(b + r)] *
                                   k[static_cast<std::size_t>(c + r)] *
                                   p(reflect_index(x + a, d.nx), reflect_index(y + b, d.ny), reflect_index(z + c, d.nz));
                out(x, y, z) = static_cast<float>(acc);
            }
    return out;
}

// Dice by explicit voxel counting: 2|A and B| / (|A| + |B|), 1 for two empty masks.
inline double counted_dice(const LabelMask& a, const LabelMask& b) {
    std::size_t na = 0, nb = 0, both = 0;
    for (int z = 0; z < a.dims().nz; ++z)
        for (int y = 0; y < a.dims().ny; ++y)
            for (int x = 0; x < a.dims().nx; ++x) {
                const bool in_a = a(x, y, z) == 1, in_b = b(x, y, z) == 1;
                na += in_a;
                nb += in_b;
                both += in_a && in_b;
            }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

}  // namespace oracles
