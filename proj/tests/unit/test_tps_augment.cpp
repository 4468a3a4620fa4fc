#include <gtest/gtest.h>

#include <sstream>

#include "pancseg/augment.hpp"
#include "pancseg/tps.hpp"
#include "support/testing.hpp"

using namespace pancseg;

namespace {

std::vector<Point2> random_points(Rng& rng, int n, double extent) {
    std::vector<Point2> pts;
    for (int i = 0; i < n; ++i) pts.push_back({uniform(rng, 0, extent), uniform(rng, 0, extent)});
    return pts;
}

// Background 0 with a rectangle [x0, x0 + w) x [y0, y0 + h) as superpixel 1.
SuperpixelMap box_map(int nx, int ny, int x0, int y0, int w, int h) {
    Image2D<std::int32_t> lab(nx, ny, 0);
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) lab(x, y) = 1;
    return SuperpixelMap(lab);
}

}  // namespace

TEST(Tps, IdentityWhenTargetEqualsSource) {
    const auto grid = control_grid(4, 4, 63, 63);
    const auto w = fit_tps(grid, grid);
    Rng rng(1);
    for (const auto& p : random_points(rng, 100, 63)) {
        const auto q = w(p);
        EXPECT_NEAR(q.x, p.x, 1e-9);
        EXPECT_NEAR(q.y, p.y, 1e-9);
    }
    for (const auto& c : w.coefficients()) {
        EXPECT_NEAR(c.x, 0.0, 1e-9);
        EXPECT_NEAR(c.y, 0.0, 1e-9);
    }
}

TEST(Tps, ReproducesTranslation) {
    const auto src = control_grid(3, 3, 10, 10);
    auto dst = src;
    for (auto& p : dst) { p.x += 2.5; p.y -= 1.0; }
    const auto w = fit_tps(src, dst);
    const auto q = w({3.3, 7.1});
    EXPECT_NEAR(q.x, 5.8, 1e-9);
    EXPECT_NEAR(q.y, 6.1, 1e-9);
}

TEST(Tps, InterpolatesRandomControlPointsAndMeetsSideConditions) {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 3 + static_cast<int>(uniform_index(rng, 20));
        const auto src = random_points(rng, n, 100);
        auto dst = src;
        for (auto& p : dst) { p.x += uniform(rng, -5, 5); p.y += uniform(rng, -5, 5); }
        TpsWarp w;
        try {
            w = fit_tps(src, dst);
        } catch (const DataError&) {
            continue;  // nearly collinear draw
        }
        for (int i = 0; i < n; ++i) {
            const auto q = w(src[static_cast<std::size_t>(i)]);
            ASSERT_LT(std::abs(q.x - dst[static_cast<std::size_t>(i)].x), 1e-8);
            ASSERT_LT(std::abs(q.y - dst[static_cast<std::size_t>(i)].y), 1e-8);
        }
        ASSERT_LT(w.side_condition_residual(), 1e-8);
    }
}

TEST(Tps, RejectsDegenerateControlPoints) {
    const std::vector<Point2> line{{0, 0}, {1, 1}, {2, 2}, {3, 3}};
    EXPECT_THROW(fit_tps(line, line), DataError);
    const std::vector<Point2> dup{{0, 0}, {1, 0}, {0, 1}, {1, 0}};
    EXPECT_THROW(fit_tps(dup, dup), DataError);
    const std::vector<Point2> two{{0, 0}, {1, 0}};
    EXPECT_THROW(fit_tps(two, two), UsageError);
    EXPECT_THROW(fit_tps(control_grid(2, 2, 1, 1), two), UsageError);
}

TEST(Tps, WarpImageIdentityConstantAndShift) {
    Rng rng(3);
    const auto img = testing_support::random_image(20, 15, rng);
    const auto grid = control_grid(3, 3, 19, 14);
    EXPECT_TRUE(warp_image(img, fit_tps(grid, grid)) == img);

    auto moved = grid;
    for (auto& p : moved) { p.x += uniform(rng, -2, 2); p.y += uniform(rng, -2, 2); }
    const Image2D<float> flat(20, 15, 0.42f);
    const auto warped = warp_image(flat, fit_tps(grid, moved));
    for (float v : warped.values()) EXPECT_FLOAT_EQ(v, 0.42f);

    auto shifted = grid;
    for (auto& p : shifted) p.x += 2;
    const auto out = warp_image(img, fit_tps(grid, shifted));
    for (int y = 0; y < 15; ++y)
        for (int x = 0; x < 18; ++x) EXPECT_NEAR(out(x, y), img(x + 2, y), 1e-6);
}

TEST(Tps, RandomDeformations) {
    TpsDeformConfig cfg;
    cfg.max_displacement = 0.0;
    Rng rng(1);
    const auto still = random_tps(cfg, 63, 63, rng);
    const auto q = still({12.5, 40.25});
    EXPECT_NEAR(q.x, 12.5, 1e-9);
    EXPECT_NEAR(q.y, 40.25, 1e-9);

    cfg.max_displacement = 0.25;
    Rng a(5), b(5);
    const auto wa = random_tps(cfg, 63, 63, a), wb = random_tps(cfg, 63, 63, b);
    EXPECT_EQ(wa.coefficients().size(), wb.coefficients().size());
    for (std::size_t i = 0; i < wa.coefficients().size(); ++i) {
        EXPECT_EQ(wa.coefficients()[i].x, wb.coefficients()[i].x);
        EXPECT_EQ(wa.coefficients()[i].y, wb.coefficients()[i].y);
    }

    Rng many(11);
    for (int i = 0; i < 1000; ++i) ASSERT_TRUE(is_fold_free(random_tps(cfg, 63, 63, many), 63, 63));

    cfg.max_displacement = 0.6;
    EXPECT_THROW(random_tps(cfg, 63, 63, many), UsageError);
}

TEST(SamplePatch, IdentityCropOfExactBox) {
    Rng rng(2);
    const auto img = testing_support::random_image(100, 90, rng);
    const auto sp = box_map(100, 90, 10, 5, 64, 64);
    const auto patch = sample_patch(img, sp, 1, 1.0, 64);
    for (int j = 0; j < 64; ++j)
        for (int i = 0; i < 64; ++i) ASSERT_EQ(patch(i, j), img(10 + i, 5 + j));
    const auto grid = control_grid(4, 4, 63, 63);
    const auto warp = fit_tps(grid, grid);
    const auto warped = sample_patch(img, sp, 1, 1.0, 64, &warp);
    for (std::size_t k = 0; k < patch.size(); ++k) ASSERT_NEAR(warped[k], patch[k], 1e-6);
    EXPECT_FALSE(sample_patch(img, sp, 1, 2.0, 64) == patch);
}

TEST(SamplePatch, ConstantImageAndErrors) {
    const Image2D<float> img(50, 50, 0.25f);
    const auto sp = box_map(50, 50, 20, 20, 6, 9);
    for (double s : {1.0, 1.5, 2.5}) {
        const auto patch = sample_patch(img, sp, 1, s, 16);
        for (float v : patch.values()) EXPECT_FLOAT_EQ(v, 0.25f);
    }
    EXPECT_THROW(sample_patch(img, sp, 2, 1.0, 16), UsageError);
    EXPECT_THROW(sample_patch(Image2D<float>(49, 50, 0.0f), sp, 1, 1.0, 16), DataError);
}

TEST(Augment, DefaultScales) {
    EXPECT_EQ(default_scales(1), (std::vector<double>{1.0}));
    EXPECT_EQ(default_scales(4).size(), 4u);
    EXPECT_EQ(default_scales(3), (std::vector<double>{1.0, 1.75, 2.5}));
    EXPECT_THROW(default_scales(0), UsageError);
}

class AugmentSet : public ::testing::Test {
protected:
    void SetUp() override {
        Rng rng(4);
        image = testing_support::random_image(40, 40, rng);
        sp = slic_2d(image, {});
        SliceCandidates c;
        c.image = &image;
        c.superpixels = &sp;
        for (std::int32_t id = 0; id < 5; ++id) c.retained.push_back(id);
        c.labels.assign(static_cast<std::size_t>(sp.count()), 0);
        c.labels[1] = c.labels[3] = 1;
        slices.push_back(c);
        cfg.scales = {1.0, 2.0};
        cfg.deformations = 8;
        cfg.patch_size = 16;
    }
    Image2D<float> image;
    SuperpixelMap sp;
    std::vector<SliceCandidates> slices;
    AugmentConfig cfg;
};

TEST_F(AugmentSet, CountsAndLabels) {
    const auto ds = augment_training_set(slices, cfg);
    ASSERT_EQ(ds.count(), 5u * 2u * 8u);
    ASSERT_EQ(ds.pixels.size(), ds.count() * 256u);
    for (std::size_t i = 0; i < ds.count(); ++i) {
        EXPECT_EQ(ds.labels[i], slices[0].labels[static_cast<std::size_t>(ds.provenance[i].superpixel)]);
    }
    cfg.deformations = 0;
    const auto plain = augment_training_set(slices, cfg);
    ASSERT_EQ(plain.count(), 10u);
    for (const auto& p : plain.provenance) EXPECT_EQ(p.deformation_index, -1);
}

TEST_F(AugmentSet, DeterministicAndRoundTrips) {
    const auto a = augment_training_set(slices, cfg);
    EXPECT_EQ(augment_training_set(slices, cfg), a);
    std::stringstream s;
    write_dataset(s, a);
    EXPECT_EQ(read_dataset(s), a);
    std::stringstream bad("NOPE");
    EXPECT_THROW(read_dataset(bad), DataError);
}

TEST_F(AugmentSet, ErrorsOnEmptyOrInconsistentInput) {
    slices[0].retained.clear();
    EXPECT_THROW(augment_training_set(slices, cfg), DataError);
    EXPECT_THROW(augment_training_set(std::span<const SliceCandidates>{}, cfg), DataError);
    slices[0].retained = {0};
    slices[0].labels.pop_back();
    EXPECT_THROW(augment_training_set(slices, cfg), DataError);
}
