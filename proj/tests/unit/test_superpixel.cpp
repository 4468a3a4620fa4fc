#include <gtest/gtest.h>

#include <queue>

#include "pancseg/evaluation.hpp"
#include "pancseg/superpixel.hpp"
#include "support/testing.hpp"

using namespace pancseg;

namespace {

// Ids are 0..N-1, counts sum to the pixel count, every superpixel is one
// 4-connected piece, and the stats agree with a recount.
void expect_valid_map(const SuperpixelMap& sp) {
    const auto& lab = sp.labels();
    const int n = sp.count();
    ASSERT_GT(n, 0);
    std::vector<std::int64_t> count(static_cast<std::size_t>(n), 0);
    for (auto v : lab.values()) {
        ASSERT_GE(v, 0);
        ASSERT_LT(v, n);
        ++count[static_cast<std::size_t>(v)];
    }
    std::int64_t total = 0;
    for (int id = 0; id < n; ++id) {
        EXPECT_GT(count[static_cast<std::size_t>(id)], 0) << "id " << id << " unused";
        EXPECT_EQ(count[static_cast<std::size_t>(id)], sp.stats(id).pixel_count);
        total += sp.stats(id).pixel_count;
    }
    EXPECT_EQ(total, static_cast<std::int64_t>(lab.size()));

    std::vector<std::uint8_t> seen(lab.size(), 0);
    std::vector<int> pieces(static_cast<std::size_t>(n), 0);
    for (int y = 0; y < lab.ny(); ++y) {
        for (int x = 0; x < lab.nx(); ++x) {
            if (seen[lab.index(x, y)]) continue;
            const int id = lab(x, y);
            ++pieces[static_cast<std::size_t>(id)];
            std::queue<std::pair<int, int>> q;
            q.push({x, y});
            seen[lab.index(x, y)] = 1;
            while (!q.empty()) {
                auto [a, b] = q.front();
                q.pop();
                const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
                for (const auto& o : nb) {
                    const int u = a + o[0], v = b + o[1];
                    if (lab.contains(u, v) && !seen[lab.index(u, v)] && lab(u, v) == id) {
                        seen[lab.index(u, v)] = 1;
                        q.push({u, v});
                    }
                }
            }
        }
    }
    for (int id = 0; id < n; ++id) EXPECT_EQ(pieces[static_cast<std::size_t>(id)], 1) << "id " << id << " split";
}

SuperpixelMap grid_map(int nx, int ny, int cell) {
    Image2D<std::int32_t> lab(nx, ny, 0);
    const int cols = (nx + cell - 1) / cell;
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) lab(x, y) = (y / cell) * cols + x / cell;
    return SuperpixelMap(lab);
}

double mask_dice(const Image2D<std::uint8_t>& a, const Image2D<std::uint8_t>& b) {
    return dice(std::span<const std::uint8_t>(a.values()), std::span<const std::uint8_t>(b.values()));
}

}  // namespace

TEST(Slic, ConstantImageGivesNearRegularGrid) {
    SlicConfig cfg;
    cfg.region_size = 8;
    const auto sp = slic_2d(Image2D<float>(64, 64, 0.5f), cfg);
    expect_valid_map(sp);
    EXPECT_GE(sp.count(), 52);
    EXPECT_LE(sp.count(), 76);
    for (const auto& s : sp.all_stats()) {
        EXPECT_GE(s.pixel_count, 16);
        EXPECT_LE(s.pixel_count, 256);
    }
}

TEST(Slic, RandomInputsGiveValidPartitions) {
    Rng rng(11);
    for (int k = 0; k < 20; ++k) {
        const int nx = 20 + static_cast<int>(uniform_index(rng, 40)), ny = 20 + static_cast<int>(uniform_index(rng, 40));
        SlicConfig cfg;
        cfg.region_size = 4 + static_cast<int>(uniform_index(rng, 8));
        cfg.compactness = uniform(rng, 1, 30);
        const auto sp = slic_2d(testing_support::random_image(nx, ny, rng), cfg);
        expect_valid_map(sp);
    }
}

TEST(Slic, StepEdgeBoundaryRecall) {
    Image2D<float> img(64, 64, 0.0f);
    for (int y = 0; y < 64; ++y)
        for (int x = 32; x < 64; ++x) img(x, y) = 1.0f;
    SlicConfig cfg;
    cfg.region_size = 10;
    cfg.compactness = 1.0;
    const auto sp = slic_2d(img, cfg);
    // Ground-truth edge pixels: the two columns either side of the step.
    int hits = 0, total = 0;
    for (int y = 0; y < 64; ++y) {
        for (int x : {31, 32}) {
            ++total;
            bool near = false;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int u = x + dx, v = y + dy;
                    if (!img.contains(u, v)) continue;
                    const int w = u + 1;
                    if (img.contains(w, v) && sp(u, v) != sp(w, v)) near = true;
                    if (img.contains(u, v + 1) && sp(u, v) != sp(u, v + 1)) near = true;
                }
            hits += near;
        }
    }
    EXPECT_GE(static_cast<double>(hits) / total, 0.9);
}

TEST(Slic, DeterministicAndValidated) {
    Rng rng(5);
    const auto img = testing_support::random_image(40, 30, rng);
    EXPECT_EQ(slic_2d(img, {}), slic_2d(img, {}));
    EXPECT_THROW(slic_2d(Image2D<float>(8, 8, 0.0f), {}), UsageError);
    SlicConfig bad;
    bad.region_size = 1;
    EXPECT_THROW(slic_2d(img, bad), UsageError);
    bad = {};
    bad.iterations = 0;
    EXPECT_THROW(slic_2d(img, bad), UsageError);
}

TEST(SuperpixelMap, RelabelsToContiguousIds) {
    Image2D<std::int32_t> lab(2, 2, std::vector<std::int32_t>{7, 7, 3, 3});
    const SuperpixelMap sp(lab);
    EXPECT_EQ(sp.count(), 2);
    EXPECT_EQ(sp(0, 0), 0);
    EXPECT_EQ(sp(0, 1), 1);
    EXPECT_THROW(SuperpixelMap(Image2D<std::int32_t>(1, 1, -1)), DataError);
}

TEST(OptimalLabeling, UnionOfSuperpixelsIsReproduced) {
    const auto sp = grid_map(8, 8, 4);
    Image2D<std::uint8_t> gt(8, 8, 0);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 8; ++x) gt(x, y) = 1;
    const auto lab = optimal_labeling(sp, gt);
    EXPECT_EQ(labels_to_mask(sp, lab), gt);
    EXPECT_EQ(mask_dice(labels_to_mask(sp, lab), gt), 1.0);
}

TEST(OptimalLabeling, EmptyTruthGivesZeros) {
    const auto sp = grid_map(8, 8, 4);
    const auto lab = optimal_labeling(sp, Image2D<std::uint8_t>(8, 8, 0));
    EXPECT_EQ(lab, std::vector<std::uint8_t>(4, 0));
}

TEST(OptimalLabeling, MajorityAndTieRule) {
    const auto sp = grid_map(10, 1, 5);  // two superpixels of 5 pixels
    Image2D<std::uint8_t> gt(10, 1, 0);
    for (int x = 0; x < 3; ++x) gt(x, 0) = 1;  // 60% of the first
    for (int x = 5; x < 7; ++x) gt(x, 0) = 1;  // 40% of the second
    EXPECT_EQ(optimal_labeling(sp, gt), (std::vector<std::uint8_t>{1, 0}));

    const auto sp2 = grid_map(4, 1, 2);
    Image2D<std::uint8_t> half(4, 1, std::vector<std::uint8_t>{1, 0, 0, 0});
    EXPECT_EQ(optimal_labeling(sp2, half), (std::vector<std::uint8_t>{0, 0}));
    EXPECT_THROW(optimal_labeling(sp2, Image2D<std::uint8_t>(3, 1, 0)), DataError);
}

// Majority voting minimizes mislabeled pixels, not 1 - Dice. With two
// equal superpixels each 40% foreground, majority gives Dice 0 while
// selecting both gives 16/28.
TEST(OptimalLabeling, MajorityIsNotAlwaysDiceOptimal) {
    const auto sp = grid_map(10, 2, 5);  // two 5x2 superpixels
    Image2D<std::uint8_t> gt(10, 2, 0);
    for (int y = 0; y < 2; ++y)
        for (int x : {0, 1, 5, 6}) gt(x, y) = 1;
    const auto majority = labels_to_mask(sp, optimal_labeling(sp, gt));
    const auto both = labels_to_mask(sp, {1, 1});
    EXPECT_EQ(mask_dice(majority, gt), 0.0);
    EXPECT_NEAR(mask_dice(both, gt), 16.0 / 28.0, 1e-12);
    const auto best = dice_optimal_labeling({sp}, {gt});
    EXPECT_EQ(best[0], (std::vector<std::uint8_t>{1, 1}));
}

// Brute force over all 2^N assignments on tiny random instances: the
// Dice-optimal labeling attains the maximum, and majority voting never
// loses on pixel accuracy.
TEST(OptimalLabeling, BruteForceOverAllAssignments) {
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const int nx = 6 + static_cast<int>(uniform_index(rng, 5)), ny = 4 + static_cast<int>(uniform_index(rng, 4));
        // Random label image with at most 12 superpixels (connectivity is not needed here).
        const int n = 2 + static_cast<int>(uniform_index(rng, 11));
        Image2D<std::int32_t> lab(nx, ny, 0);
        for (auto& v : lab.values()) v = static_cast<std::int32_t>(uniform_index(rng, static_cast<std::size_t>(n)));
        const SuperpixelMap sp(lab);
        Image2D<std::uint8_t> gt(nx, ny, 0);
        const double density = uniform01(rng);
        for (auto& v : gt.values()) v = uniform01(rng) < density;
        const int count = sp.count();
        ASSERT_LE(count, 12);

        double best = -1.0;
        std::size_t best_errors = gt.size() + 1;
        for (std::uint32_t bits = 0; bits < (1u << count); ++bits) {
            std::vector<std::uint8_t> l(static_cast<std::size_t>(count));
            for (int i = 0; i < count; ++i) l[static_cast<std::size_t>(i)] = (bits >> i) & 1u;
            const auto m = labels_to_mask(sp, l);
            best = std::max(best, mask_dice(m, gt));
            std::size_t errors = 0;
            for (std::size_t i = 0; i < gt.size(); ++i) errors += m[i] != gt[i];
            best_errors = std::min(best_errors, errors);
        }
        const auto dopt = labels_to_mask(sp, dice_optimal_labeling({sp}, {gt})[0]);
        EXPECT_DOUBLE_EQ(mask_dice(dopt, gt), best) << "trial " << trial;

        const auto maj = labels_to_mask(sp, optimal_labeling(sp, gt));
        std::size_t errors = 0;
        for (std::size_t i = 0; i < gt.size(); ++i) errors += maj[i] != gt[i];
        EXPECT_EQ(errors, best_errors) << "trial " << trial;
    }
}

TEST(ScaledBbox, IdentityDoublingAndClamping) {
    Image2D<std::int32_t> lab(40, 40, 0);
    for (int y = 16; y < 24; ++y)
        for (int x = 14; x < 26; ++x) lab(x, y) = 1;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x) lab(x, y) = 2;
    const SuperpixelMap sp(lab);
    const int center = sp(20, 20), corner = sp(0, 0);
    EXPECT_EQ(scaled_bbox(sp, center, 1.0), sp.stats(center).bbox);
    const Rect d = scaled_bbox(sp, center, 2.0);
    EXPECT_DOUBLE_EQ(d.width(), 24.0);
    EXPECT_DOUBLE_EQ(d.height(), 16.0);
    EXPECT_DOUBLE_EQ(0.5 * (d.x0 + d.x1), 20.0);
    const Rect c = scaled_bbox(sp, corner, 4.0);
    EXPECT_GE(c.x0, 0.0);
    EXPECT_GE(c.y0, 0.0);
    EXPECT_TRUE(c.contains(sp.stats(corner).bbox));
    EXPECT_GT(c.width(), 0.0);
    EXPECT_GT(c.height(), 0.0);
    EXPECT_THROW(scaled_bbox(sp, 3, 1.0), UsageError);
    EXPECT_THROW(scaled_bbox(sp, center, 0.5), UsageError);
}
