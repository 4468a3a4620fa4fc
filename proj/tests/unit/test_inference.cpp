#include <gtest/gtest.h>

#include "pancseg/inference.hpp"
#include "support/oracles.hpp"
#include "support/testing.hpp"

using namespace pancseg;

namespace {

SuperpixelMap strip_map(int nx, int ny, int width) {
    Image2D<std::int32_t> lab(nx, ny, 0);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) lab(x, y) = x / width;
    return SuperpixelMap(lab);
}

ProbabilityMap random_map(Dims3 d, Rng& rng) {
    ProbabilityMap m(d, 0.0f);
    for (auto& v : m.values()) v = static_cast<float>(uniform01(rng));
    return m;
}

}  // namespace

TEST(Projection, PaintsRetainedSuperpixels) {
    const std::vector<SuperpixelMap> slices{strip_map(6, 2, 2), strip_map(6, 2, 3)};
    const auto p = project_to_pixels(slices, {{0, 2}, {}}, {{{0, 0.25}, {2, 1.0}}, {}});
    EXPECT_EQ(p.dims(), (Dims3{6, 2, 2}));
    for (int y = 0; y < 2; ++y) {
        EXPECT_EQ(p(0, y, 0), 0.25f);
        EXPECT_EQ(p(1, y, 0), 0.25f);
        EXPECT_EQ(p(2, y, 0), 0.0f);
        EXPECT_EQ(p(3, y, 0), 0.0f);
        EXPECT_EQ(p(4, y, 0), 1.0f);
        EXPECT_EQ(p(5, y, 0), 1.0f);
        for (int x = 0; x < 6; ++x) EXPECT_EQ(p(x, y, 1), 0.0f);
    }
}

TEST(Projection, RejectsInconsistentInput) {
    const std::vector<SuperpixelMap> one{strip_map(6, 2, 2)};
    EXPECT_THROW(project_to_pixels({}, {}, {}), UsageError);
    EXPECT_THROW(project_to_pixels(one, {}, {{}}), DataError);
    EXPECT_THROW(project_to_pixels(one, {{0}}, {{}}), DataError);               // missing score
    EXPECT_THROW(project_to_pixels(one, {{}}, {{{0, 0.5}}}), DataError);        // score for a dropped id
    EXPECT_THROW(project_to_pixels(one, {{3}}, {{{3, 0.5}}}), DataError);       // id out of range
    EXPECT_THROW(project_to_pixels(one, {{0}}, {{{0, 1.5}}}), DataError);       // not a probability
    EXPECT_THROW(project_to_pixels({strip_map(6, 2, 2), strip_map(5, 2, 2)}, {{}, {}}, {{}, {}}), DataError);
}

TEST(Smoothing, KernelAndReflection) {
    const auto k = gaussian_kernel({2.0, 4.0});
    ASSERT_EQ(k.size(), 17u);
    double sum = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        sum += k[i];
        EXPECT_EQ(k[i], k[k.size() - 1 - i]);
    }
    EXPECT_NEAR(sum, 1.0, 1e-15);
    EXPECT_EQ(reflect_index(-1, 5), 0);
    EXPECT_EQ(reflect_index(-2, 5), 1);
    EXPECT_EQ(reflect_index(5, 5), 4);
    EXPECT_EQ(reflect_index(6, 5), 3);
    EXPECT_EQ(reflect_index(2, 5), 2);
    EXPECT_EQ(reflect_index(-7, 3), 0);
    EXPECT_EQ(reflect_index(-4, 3), 2);
    EXPECT_THROW(gaussian_kernel({0.0, 4.0}), UsageError);
    EXPECT_THROW(gaussian_kernel({-1.0, 4.0}), UsageError);
}

TEST(Smoothing, MatchesDenseConvolution) {
    Rng rng(8);
    for (double sigma : {0.7, 1.5, 3.0}) {
        const SmoothConfig cfg{sigma, 4.0};
        const auto p = random_map({11, 11, 11}, rng);
        const auto fast = gaussian_smooth_3d(p, cfg);
        const auto slow = oracles::dense_smooth(p, cfg);
        for (std::size_t i = 0; i < p.size(); ++i) ASSERT_NEAR(fast[i], slow[i], 1e-6) << "sigma " << sigma;
    }
    const auto odd = random_map({7, 4, 9}, rng);
    const auto a = gaussian_smooth_3d(odd, {1.2, 3.0});
    const auto b = oracles::dense_smooth(odd, {1.2, 3.0});
    for (std::size_t i = 0; i < odd.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-6);
}

TEST(Smoothing, ConstantsImpulsesAndRange) {
    const ProbabilityMap flat({9, 8, 7}, 0.3f);
    for (float v : gaussian_smooth_3d(flat, {2.0, 4.0}).values()) EXPECT_NEAR(v, 0.3f, 1e-6);

    ProbabilityMap impulse({31, 31, 31}, 0.0f);
    impulse(15, 15, 15) = 1.0f;
    const SmoothConfig cfg{2.0, 4.0};
    const auto k = gaussian_kernel(cfg);
    const auto g = gaussian_smooth_3d(impulse, cfg);
    for (int c = -8; c <= 8; ++c)
        for (int b = -8; b <= 8; ++b)
            for (int a = -8; a <= 8; ++a)
                ASSERT_NEAR(g(15 + a, 15 + b, 15 + c),
                            k[static_cast<std::size_t>(a + 8)] * k[static_cast<std::size_t>(b + 8)] *
                                k[static_cast<std::size_t>(c + 8)],
                            1e-6);

    Rng rng(9);
    const auto p = random_map({12, 10, 6}, rng);
    float lo = 1, hi = 0;
    for (float v : p.values()) { lo = std::min(lo, v); hi = std::max(hi, v); }
    const auto s = gaussian_smooth_3d(p, {1.0, 4.0});
    for (float v : s.values()) {
        EXPECT_GE(v, lo - 1e-6f);
        EXPECT_LE(v, hi + 1e-6f);
    }
}

TEST(Threshold, EndpointsNestingAndErrors) {
    Rng rng(10);
    const auto p = random_map({8, 8, 8}, rng);
    ProbabilityMap with_ends = p;
    with_ends[0] = 0.0f;
    with_ends[1] = 1.0f;
    const auto all = threshold_map(with_ends, 0.0);
    const auto none = threshold_map(with_ends, 1.0);
    EXPECT_EQ(all[0], 0);
    for (std::size_t i = 1; i < all.size(); ++i) EXPECT_EQ(all[i], 1);
    for (std::uint8_t v : none.values()) EXPECT_EQ(v, 0);
    for (int t = 0; t < 20; ++t) {
        const double a = uniform01(rng), b = uniform01(rng);
        const auto hi = threshold_map(p, std::max(a, b)), lo = threshold_map(p, std::min(a, b));
        for (std::size_t i = 0; i < p.size(); ++i) ASSERT_LE(hi[i], lo[i]);
    }
    EXPECT_THROW(threshold_map(p, -0.01), UsageError);
    EXPECT_THROW(threshold_map(p, 1.01), UsageError);
    EXPECT_THROW(threshold_map(p, std::nan("")), UsageError);
}
