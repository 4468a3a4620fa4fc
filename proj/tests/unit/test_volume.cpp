#include <gtest/gtest.h>

#include <cstring>

#include "pancseg/volume.hpp"
#include "support/testing.hpp"

using namespace pancseg;
using testing_support::TempDir;

namespace {

Volume ramp_volume() {
    std::vector<float> v(8);
    for (int i = 0; i < 8; ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(i);
    return Volume(Grid3<float>({2, 2, 2}, v), {1, 1, 1});
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(Volume, RoundTripIsBitExact) {
    TempDir dir("vol");
    const Volume v = ramp_volume();
    save_volume(v, dir / "v.mhd");
    const Volume back = load_volume(dir / "v.mhd");
    EXPECT_EQ(back.dims(), v.dims());
    EXPECT_TRUE(same_bits(back.voxels().vector(), v.voxels().vector()));
    EXPECT_EQ(back, v);
}

TEST(Volume, VoxelOrderIsXFastest) {
    const Volume v = ramp_volume();
    EXPECT_EQ(v(1, 0, 0), 1.0f);
    EXPECT_EQ(v(0, 1, 0), 2.0f);
    EXPECT_EQ(v(0, 0, 1), 4.0f);
}

TEST(Volume, SingleVoxelAndPhantomRoundTrip) {
    TempDir dir("vol1");
    const Volume one(Grid3<float>({1, 1, 1}, std::vector<float>{-123.25f}), {0.5, 0.75, 2.5});
    save_volume(one, dir / "one.mhd");
    EXPECT_EQ(load_volume(dir / "one.mhd"), one);

    PhantomConfig cfg;
    cfg.dims = {48, 48, 12};
    const auto [v, m] = make_phantom(cfg);
    save_volume(v, dir / "p.mhd");
    save_mask(m, dir / "p_mask.mhd", v.spacing());
    EXPECT_EQ(load_volume(dir / "p.mhd"), v);
    EXPECT_EQ(load_mask(dir / "p_mask.mhd"), m);
}

TEST(Volume, RandomRoundTrips) {
    TempDir dir("volr");
    Rng rng(7);
    for (int k = 0; k < 100; ++k) {
        const Dims3 d{1 + static_cast<int>(uniform_index(rng, 9)), 1 + static_cast<int>(uniform_index(rng, 9)),
                      1 + static_cast<int>(uniform_index(rng, 5))};
        std::vector<float> vals(d.count());
        for (auto& x : vals) x = std::bit_cast<float>(static_cast<std::uint32_t>(rng()) & 0xff7fffffu);
        const Volume v(Grid3<float>(d, vals), {uniform(rng, 0.1, 3), uniform(rng, 0.1, 3), uniform(rng, 0.1, 3)});
        save_volume(v, dir / "r.mhd");
        const Volume back = load_volume(dir / "r.mhd");
        ASSERT_TRUE(same_bits(back.voxels().vector(), vals));
        ASSERT_EQ(back.spacing(), v.spacing());
    }
}

TEST(Volume, PayloadSizeMismatchIsRejected) {
    TempDir dir("volbad");
    save_volume(ramp_volume(), dir / "v.mhd");
    std::filesystem::resize_file(dir / "v.raw", 7 * sizeof(float));
    try {
        load_volume(dir / "v.mhd");
        FAIL() << "expected an error";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("payload size mismatch"), std::string::npos);
    }
}

TEST(Volume, HeaderErrors) {
    TempDir dir("volhdr");
    save_volume(ramp_volume(), dir / "v.mhd");
    const std::string good = testing_support::read_bytes(dir / "v.mhd");
    auto with = [&](const std::string& from, const std::string& to) {
        std::string text = good;
        text.replace(text.find(from), from.size(), to);
        testing_support::write_text(dir / "w.mhd", text);
        std::filesystem::copy_file(dir / "v.raw", dir / "v2.raw", std::filesystem::copy_options::overwrite_existing);
        return dir / "w.mhd";
    };
    try {
        load_volume(with("ElementSpacing = 1 1 1", "ElementSpacing = 1 1 0"));
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("non-positive spacing"), std::string::npos);
    }
    EXPECT_THROW(load_volume(with("DimSize = 2 2 2", "DimSize = 2 0 2")), DataError);
    EXPECT_THROW(load_volume(with("NDims = 3\n", "")), DataError);
    EXPECT_THROW(load_volume(with("NDims = 3\n", "NDims = 3\nNDims = 3\n")), DataError);
    EXPECT_THROW(load_volume(dir / "missing.mhd"), DataError);
    EXPECT_THROW(load_mask(dir / "v.mhd"), DataError);  // float payload is not a mask
}

TEST(Volume, InvariantsAreEnforced) {
    EXPECT_THROW(Volume(Grid3<float>({1, 1, 1}, 0.0f), {1, 0, 1}), DataError);
    EXPECT_THROW(Volume(Grid3<float>({1, 1, 1}, 1.5f), {1, 1, 1}, IntensityKind::normalized), DataError);
    EXPECT_THROW(Grid3<float>({2, 2, 2}, std::vector<float>(7)), DataError);
    LabelMask m({2, 1, 1}, 0);
    m[1] = 2;
    EXPECT_THROW(check_binary(m), DataError);
}

TEST(Volume, SaveToUnwritableLocationFails) {
    EXPECT_THROW(save_volume(ramp_volume(), "/nonexistent-dir/sub/v.mhd"), DataError);
}

TEST(Window, EndpointsAndMidpoint) {
    const Volume v(Grid3<float>({3, 1, 1}, std::vector<float>{-160.0f, 240.0f, 40.0f}), {1, 1, 1});
    const Volume w = window_hu(v, -160, 240);
    EXPECT_EQ(w.kind(), IntensityKind::normalized);
    EXPECT_EQ(w(0, 0, 0), 0.0f);
    EXPECT_EQ(w(1, 0, 0), 1.0f);
    EXPECT_FLOAT_EQ(w(2, 0, 0), 0.5f);
    EXPECT_THROW(window_hu(v, 10, 10), UsageError);
    EXPECT_THROW(window_hu(v, 20, 10), UsageError);
}

TEST(Window, MonotoneAndIdempotent) {
    Rng rng(3);
    std::vector<float> vals(200);
    for (auto& x : vals) x = static_cast<float>(uniform(rng, -500, 500));
    std::sort(vals.begin(), vals.end());
    const Volume v(Grid3<float>({200, 1, 1}, vals), {1, 1, 1});
    const Volume w = window_hu(v, -160, 240);
    for (int i = 1; i < 200; ++i) EXPECT_LE(w(i - 1, 0, 0), w(i, 0, 0));
    const Volume again = window_hu(Volume(w.voxels(), w.spacing()), 0, 1);
    EXPECT_EQ(again.voxels(), w.voxels());
}

TEST(Phantom, DeterministicAndSeedSensitive) {
    PhantomConfig cfg;
    cfg.dims = {64, 64, 16};
    const auto a = make_phantom(cfg), b = make_phantom(cfg);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    cfg.seed = 2;
    EXPECT_NE(make_phantom(cfg).second, a.second);
}

TEST(Phantom, ForegroundFractionOverManySeeds) {
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        PhantomConfig cfg;
        cfg.seed = seed;
        const auto [v, m] = make_phantom(cfg);
        ASSERT_EQ(v.dims(), m.dims());
        std::size_t fg = 0;
        for (auto x : m.values()) fg += x;
        const double frac = static_cast<double>(fg) / static_cast<double>(m.size());
        ASSERT_GE(frac, 0.01) << "seed " << seed;
        ASSERT_LE(frac, 0.05) << "seed " << seed;
    }
}

TEST(Phantom, MaskIsOneConnectedComponent) {
    PhantomConfig cfg;
    const auto [v, m] = make_phantom(cfg);
    const Dims3 d = m.dims();
    std::vector<std::uint8_t> seen(m.size(), 0);
    std::vector<std::size_t> stack;
    std::size_t components = 0;
    for (std::size_t s = 0; s < m.size(); ++s) {
        if (!m[s] || seen[s]) continue;
        ++components;
        stack.push_back(s);
        seen[s] = 1;
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            const int x = static_cast<int>(i % static_cast<std::size_t>(d.nx));
            const int y = static_cast<int>((i / static_cast<std::size_t>(d.nx)) % static_cast<std::size_t>(d.ny));
            const int z = static_cast<int>(i / (static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)));
            const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
            for (const auto& o : nb) {
                const int a = x + o[0], b = y + o[1], c = z + o[2];
                if (a < 0 || b < 0 || c < 0 || a >= d.nx || b >= d.ny || c >= d.nz) continue;
                const std::size_t j = m.index(a, b, c);
                if (m[j] && !seen[j]) {
                    seen[j] = 1;
                    stack.push_back(j);
                }
            }
        }
    }
    EXPECT_EQ(components, 1u);
}

TEST(Phantom, OrganBrighterThanFatMargin) {
    PhantomConfig cfg;
    const auto [v, m] = make_phantom(cfg);
    double in = 0, n_in = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i]) {
            in += v.voxels()[i];
            ++n_in;
        }
    }
    // The darkest voxels adjacent to the organ are fat.
    double rim = 0, n_rim = 0;
    const Dims3 d = m.dims();
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 1; y + 1 < d.ny; ++y) {
            for (int x = 1; x + 1 < d.nx; ++x) {
                if (m(x, y, z)) continue;
                if (m(x + 1, y, z) || m(x - 1, y, z) || m(x, y + 1, z) || m(x, y - 1, z)) {
                    rim += v(x, y, z);
                    ++n_rim;
                }
            }
        }
    }
    EXPECT_GT(in / n_in, rim / n_rim + 20.0);
}

TEST(Phantom, RejectsSmallDims) {
    PhantomConfig cfg;
    cfg.dims = {31, 64, 16};
    EXPECT_THROW(make_phantom(cfg), UsageError);
    cfg.dims = {64, 64, 7};
    EXPECT_THROW(make_phantom(cfg), UsageError);
    cfg = {};
    cfg.contrast_gap = -1;
    EXPECT_THROW(make_phantom(cfg), UsageError);
}
