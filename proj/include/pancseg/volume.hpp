#ifndef PANCSEG_VOLUME_HPP
#define PANCSEG_VOLUME_HPP

/// \file volume.hpp
/// Volume and mask data model, MetaImage-style file I/O, HU windowing and
/// the synthetic phantom generator used for desk-scale experiments.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "pancseg/core.hpp"
#include "pancseg/grid.hpp"

namespace pancseg {

struct Spacing3 {
    double sx = 1.0;
    double sy = 1.0;
    double sz = 1.0;

    bool positive() const { return sx > 0.0 && sy > 0.0 && sz > 0.0; }
    friend bool operator==(const Spacing3&, const Spacing3&) = default;
};

enum class IntensityKind { hu, normalized };

/// Binary ground truth. Values are 0 or 1.
using LabelMask = Grid3<std::uint8_t>;

/// Per-voxel probabilities in [0, 1].
using ProbabilityMap = Grid3<float>;

inline void check_binary(const LabelMask& mask) {
    for (std::uint8_t v : mask.values()) {
        if (v > 1) {
            throw DataError("label mask contains a value outside {0,1}");
        }
    }
}

/// Scalar CT volume. Normalized volumes hold values in [0, 1].
class Volume {
public:
    Volume() = default;
    Volume(Grid3<float> voxels, Spacing3 spacing, IntensityKind kind = IntensityKind::hu)
        : voxels_(std::move(voxels)), spacing_(spacing), kind_(kind) {
        if (!spacing_.positive()) {
            throw DataError("non-positive spacing");
        }
        if (kind_ == IntensityKind::normalized) {
            for (float v : voxels_.values()) {
                if (!(v >= 0.0f && v <= 1.0f)) {
                    throw DataError("normalized volume has a voxel outside [0,1]");
                }
            }
        }
    }

    const Dims3& dims() const { return voxels_.dims(); }
    const Spacing3& spacing() const { return spacing_; }
    IntensityKind kind() const { return kind_; }
    const Grid3<float>& voxels() const { return voxels_; }
    float operator()(int x, int y, int z) const { return voxels_(x, y, z); }
    Image2D<float> slice(int z) const { return voxels_.slice(z); }

    friend bool operator==(const Volume&, const Volume&) = default;

private:
    Grid3<float> voxels_;
    Spacing3 spacing_;
    IntensityKind kind_ = IntensityKind::hu;
};

// ---------------------------------------------------------------------------
// MetaImage-style files: a text header plus a separate raw little-endian
// payload, x fastest.

enum class ElementType { float32, uint8, int32 };

template <class T>
constexpr ElementType element_type_of() {
    if constexpr (std::is_same_v<T, float>) {
        return ElementType::float32;
    } else if constexpr (std::is_same_v<T, std::uint8_t>) {
        return ElementType::uint8;
    } else {
        static_assert(std::is_same_v<T, std::int32_t>, "unsupported element type");
        return ElementType::int32;
    }
}

inline const char* element_type_name(ElementType t) {
    switch (t) {
        case ElementType::float32: return "MET_FLOAT";
        case ElementType::uint8: return "MET_UCHAR";
        case ElementType::int32: return "MET_INT";
    }
    return "";
}

inline std::size_t element_size(ElementType t) {
    return t == ElementType::uint8 ? 1 : 4;
}

struct MetaHeader {
    Dims3 dims;
    Spacing3 spacing;
    ElementType type = ElementType::float32;
    std::filesystem::path data_file;  ///< resolved relative to the header
    std::optional<IntensityKind> kind;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <class T>
std::vector<T> parse_numbers(const std::string& key, const std::string& value, std::size_t expected) {
    std::vector<T> out;
    std::istringstream in(value);
    std::string token;
    while (in >> token) {
        T v{};
        auto res = std::from_chars(token.data(), token.data() + token.size(), v);
        if (res.ec != std::errc{} || res.ptr != token.data() + token.size()) {
            throw DataError("header field " + key + " has a malformed number '" + token + "'");
        }
        out.push_back(v);
    }
    if (out.size() != expected) {
        throw DataError("header field " + key + " expects " + std::to_string(expected) + " values");
    }
    return out;
}

}  // namespace detail

inline MetaHeader read_meta_header(const std::filesystem::path& header_path) {
    std::ifstream in(header_path);
    if (!in) {
        throw DataError("cannot open header " + header_path.string());
    }
    std::map<std::string, std::string> fields;
    std::string line;
    while (std::getline(in, line)) {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw DataError("malformed header line: " + line);
        }
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (!fields.emplace(key, value).second) {
            throw DataError("duplicate header field " + key);
        }
    }
    auto need = [&](const char* key) -> const std::string& {
        auto it = fields.find(key);
        if (it == fields.end()) {
            throw DataError(std::string("missing header field ") + key);
        }
        return it->second;
    };

    MetaHeader h;
    if (need("NDims") != "3") {
        throw DataError("only 3D images are supported (NDims = 3)");
    }
    const auto dims = detail::parse_numbers<long long>("DimSize", need("DimSize"), 3);
    for (long long d : dims) {
        if (d <= 0 || d > (1LL << 30)) {
            throw DataError("non-positive dims");
        }
    }
    h.dims = {static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2])};
    const auto sp = detail::parse_numbers<double>("ElementSpacing", need("ElementSpacing"), 3);
    h.spacing = {sp[0], sp[1], sp[2]};
    if (!h.spacing.positive()) {
        throw DataError("non-positive spacing");
    }
    const std::string& type = need("ElementType");
    if (type == "MET_FLOAT") {
        h.type = ElementType::float32;
    } else if (type == "MET_UCHAR") {
        h.type = ElementType::uint8;
    } else if (type == "MET_INT") {
        h.type = ElementType::int32;
    } else {
        throw DataError("unsupported ElementType " + type);
    }
    for (const char* key : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB"}) {
        auto it = fields.find(key);
        if (it != fields.end() && it->second != "False") {
            throw DataError("only little-endian payloads are supported");
        }
    }
    const std::string& file = need("ElementDataFile");
    if (file == "LOCAL" || file.empty()) {
        throw DataError("ElementDataFile must name a separate raw file");
    }
    h.data_file = header_path.parent_path() / file;
    if (auto it = fields.find("IntensityKind"); it != fields.end()) {
        if (it->second == "HU") {
            h.kind = IntensityKind::hu;
        } else if (it->second == "normalized") {
            h.kind = IntensityKind::normalized;
        } else {
            throw DataError("unknown IntensityKind " + it->second);
        }
    }
    return h;
}

/// Reads the raw payload named by a header. The element type must match T.
template <class T>
Grid3<T> read_meta(const std::filesystem::path& header_path, MetaHeader* header_out = nullptr) {
    MetaHeader h = read_meta_header(header_path);
    if (h.type != element_type_of<T>()) {
        throw DataError(header_path.string() + ": element type " + element_type_name(h.type) +
                        " where " + element_type_name(element_type_of<T>()) + " was expected");
    }
    std::error_code ec;
    const auto bytes = std::filesystem::file_size(h.data_file, ec);
    if (ec) {
        throw DataError("cannot open payload " + h.data_file.string());
    }
    if (bytes != h.dims.count() * sizeof(T)) {
        throw DataError("payload size mismatch: " + h.data_file.string() + " has " + std::to_string(bytes) +
                        " bytes, header declares " + std::to_string(h.dims.count() * sizeof(T)));
    }
    std::ifstream in(h.data_file, std::ios::binary);
    if (!in) {
        throw DataError("cannot open payload " + h.data_file.string());
    }
    auto values = binary::read_array<T>(in, h.dims.count());
    if (header_out) {
        *header_out = h;
    }
    return Grid3<T>(h.dims, std::move(values));
}

/// Writes `<stem>.mhd` style header at `header_path` and the payload next to
/// it with the extension replaced by `.raw`.
template <class T>
void write_meta(const std::filesystem::path& header_path, const Grid3<T>& grid, const Spacing3& spacing,
                std::optional<IntensityKind> kind = std::nullopt) {
    if (!spacing.positive()) {
        throw DataError("non-positive spacing");
    }
    std::filesystem::path raw = header_path;
    raw.replace_extension(".raw");
    {
        std::ofstream out(raw, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot write " + raw.string());
        }
        binary::write_array(out, grid.vector());
        if (!out) {
            throw DataError("cannot write " + raw.string());
        }
    }
    std::ofstream out(header_path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + header_path.string());
    }
    const Dims3& d = grid.dims();
    out << "ObjectType = Image\n"
        << "NDims = 3\n"
        << "BinaryData = True\n"
        << "BinaryDataByteOrderMSB = False\n"
        << "DimSize = " << d.nx << ' ' << d.ny << ' ' << d.nz << '\n'
        << "ElementSpacing = " << detail::format_double(spacing.sx) << ' ' << detail::format_double(spacing.sy)
        << ' ' << detail::format_double(spacing.sz) << '\n'
        << "ElementType = " << element_type_name(element_type_of<T>()) << '\n';
    if (kind) {
        out << "IntensityKind = " << (*kind == IntensityKind::hu ? "HU" : "normalized") << '\n';
    }
    out << "ElementDataFile = " << raw.filename().string() << '\n';
    if (!out) {
        throw DataError("cannot write " + header_path.string());
    }
}

inline Volume load_volume(const std::filesystem::path& path) {
    MetaHeader h;
    Grid3<float> grid = read_meta<float>(path, &h);
    return Volume(std::move(grid), h.spacing, h.kind.value_or(IntensityKind::hu));
}

inline void save_volume(const Volume& v, const std::filesystem::path& path) {
    write_meta(path, v.voxels(), v.spacing(), v.kind());
}

inline LabelMask load_mask(const std::filesystem::path& path, Spacing3* spacing = nullptr) {
    MetaHeader h;
    LabelMask mask = read_meta<std::uint8_t>(path, &h);
    check_binary(mask);
    if (spacing) {
        *spacing = h.spacing;
    }
    return mask;
}

inline void save_mask(const LabelMask& mask, const std::filesystem::path& path, const Spacing3& spacing = {}) {
    check_binary(mask);
    write_meta(path, mask, spacing);
}

// ---------------------------------------------------------------------------

/// Linear HU window to [0, 1] with clamping.
inline Volume window_hu(const Volume& v, double lo, double hi) {
    require(lo < hi, "window_hu: lo must be below hi");
    std::vector<float> out(v.voxels().size());
    const double scale = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double t = (static_cast<double>(v.voxels()[i]) - lo) * scale;
        out[i] = static_cast<float>(std::clamp(t, 0.0, 1.0));
    }
    return Volume(Grid3<float>(v.dims(), std::move(out)), v.spacing(), IntensityKind::normalized);
}

// ---------------------------------------------------------------------------
// Synthetic phantoms

struct PhantomConfig {
    Dims3 dims{96, 96, 32};
    Spacing3 spacing{0.8, 0.8, 2.0};
    std::uint64_t seed = 1;
    double blob_count = 6;           ///< organ-like distractor structures without a fat layer
    double blob_elongation = 4.0;    ///< organ half-length over its in-plane radius
    double texture_amplitude = 0.15; ///< relative multiplicative texture on the organ
    double contrast_gap = 55.0;      ///< organ mean minus background mean, HU
    double fat_margin_fraction = 0.7;///< share of the organ surface wrapped in fat
    double speckle_count = 150;      ///< small organ-bright nodules scattered through the body
    double lobule_fraction = 0.2;    ///< share of the organ taken by small fatty lobules

    void validate() const {
        require(dims.nx >= 32 && dims.ny >= 32 && dims.nz >= 8, "phantom dims must be at least 32x32x8");
        require(spacing.positive(), "phantom spacing must be positive");
        require(contrast_gap >= 0.0, "contrast_gap must be non-negative");
        require(fat_margin_fraction >= 0.0 && fat_margin_fraction <= 1.0, "fat_margin_fraction must be in [0,1]");
        require(blob_count >= 0.0, "blob_count must be non-negative");
        require(blob_elongation >= 1.0, "blob_elongation must be at least 1");
        require(texture_amplitude >= 0.0 && texture_amplitude < 1.0, "texture_amplitude must be in [0,1)");
        require(speckle_count >= 0.0, "speckle_count must be non-negative");
        require(lobule_fraction >= 0.0 && lobule_fraction < 0.5, "lobule_fraction must be in [0,0.5)");
    }
};

namespace detail {

/// Smooth lattice value noise in [-1, 1].
class ValueNoise {
public:
    ValueNoise(std::uint64_t seed, double cell) : seed_(seed), inv_cell_(1.0 / cell) {}

    double operator()(double x, double y, double z) const {
        x *= inv_cell_;
        y *= inv_cell_;
        z *= inv_cell_;
        const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
        const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy),
                   iz = static_cast<std::int64_t>(fz);
        const double tx = fade(x - fx), ty = fade(y - fy), tz = fade(z - fz);
        double acc = 0.0;
        for (int c = 0; c < 8; ++c) {
            const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
            const double w = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) * (dz ? tz : 1.0 - tz);
            acc += w * lattice(ix + dx, iy + dy, iz + dz);
        }
        return acc;
    }

private:
    static double fade(double t) { return t * t * (3.0 - 2.0 * t); }
    double lattice(std::int64_t x, std::int64_t y, std::int64_t z) const {
        const std::uint64_t h = derive_seed(seed_, x, y, z);
        return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
    }

    std::uint64_t seed_;
    double inv_cell_;
};

/// Keeps the largest 6-connected foreground component.
inline void keep_largest_component(LabelMask& mask) {
    const Dims3 d = mask.dims();
    std::vector<int> comp(mask.size(), -1);
    std::vector<std::size_t> sizes;
    std::vector<std::size_t> stack;
    for (std::size_t seed = 0; seed < mask.size(); ++seed) {
        if (!mask[seed] || comp[seed] >= 0) {
            continue;
        }
        const int id = static_cast<int>(sizes.size());
        sizes.push_back(0);
        stack.push_back(seed);
        comp[seed] = id;
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            ++sizes.back();
            const int x = static_cast<int>(i % static_cast<std::size_t>(d.nx));
            const int y = static_cast<int>((i / static_cast<std::size_t>(d.nx)) % static_cast<std::size_t>(d.ny));
            const int z = static_cast<int>(i / (static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)));
            const int nb[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
            for (const auto& o : nb) {
                const int xx = x + o[0], yy = y + o[1], zz = z + o[2];
                if (xx < 0 || yy < 0 || zz < 0 || xx >= d.nx || yy >= d.ny || zz >= d.nz) {
                    continue;
                }
                const std::size_t j = mask.index(xx, yy, zz);
                if (mask[j] && comp[j] < 0) {
                    comp[j] = id;
                    stack.push_back(j);
                }
            }
        }
    }
    if (sizes.size() <= 1) {
        return;
    }
    const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] && comp[i] != best) {
            mask[i] = 0;
        }
    }
}

}  // namespace detail

/// Generates a (volume, mask) pair in HU. The organ is a superellipsoid bent
/// along a parabolic spine with a tapered cross-section, partly wrapped in a
/// low-intensity fat layer. The background is textured soft tissue inside a
/// body ellipse, with bright distractor blobs.
inline std::pair<Volume, LabelMask> make_phantom(const PhantomConfig& cfg) {
    cfg.validate();
    const Dims3 d = cfg.dims;
    Rng rng(derive_seed(cfg.seed, 0x9a17));

    const double cx = (0.5 + uniform(rng, -0.08, 0.08)) * d.nx;
    const double cy = (0.5 + uniform(rng, -0.12, 0.12)) * d.ny;
    const double cz = (0.5 + uniform(rng, -0.08, 0.08)) * d.nz;
    const double angle = uniform(rng, -0.35, 0.35);
    const double bend = uniform(rng, -0.3, 0.3);
    const double tilt = uniform(rng, -0.12, 0.12);
    const double exponent = uniform(rng, 2.2, 3.0);
    const double taper = uniform(rng, 0.2, 0.45);
    double radius_xy = uniform(rng, 0.075, 0.095) * std::min(d.nx, d.ny);
    double radius_z = uniform(rng, 0.18, 0.26) * d.nz;
    double half_length = cfg.blob_elongation * uniform(rng, 0.9, 1.1) * radius_xy;
    half_length = std::min(half_length, 0.42 * d.nx);

    const double ca = std::cos(angle), sa = std::sin(angle);
    // Superellipsoid level: <= 1 inside the organ.
    auto level = [&](double x, double y, double z, double scale) {
        const double dx = x - cx, dy = y - cy;
        const double a = ca * dx + sa * dy;
        double b = -sa * dx + ca * dy;
        const double L = half_length * scale;
        const double t = a / L;
        b -= bend * L * t * t;
        const double dz = z - (cz + tilt * a);
        const double shrink = 1.0 - taper * 0.5 * (t + 1.0);
        const double ry = radius_xy * scale * std::max(shrink, 0.2);
        const double rz = radius_z * scale * std::max(shrink, 0.2);
        return std::pow(std::abs(t), exponent) + std::pow(std::abs(b / ry), exponent) +
               std::pow(std::abs(dz / rz), exponent);
    };

    LabelMask mask(d, 0);
    double scale = 1.0;
    for (int attempt = 0; attempt < 8; ++attempt) {
        std::size_t count = 0;
        for (int z = 0; z < d.nz; ++z) {
            for (int y = 0; y < d.ny; ++y) {
                for (int x = 0; x < d.nx; ++x) {
                    const bool inside = level(x, y, z, scale) <= 1.0;
                    mask(x, y, z) = inside ? 1 : 0;
                    count += inside;
                }
            }
        }
        detail::keep_largest_component(mask);
        count = 0;
        for (auto v : mask.values()) {
            count += v;
        }
        const double fraction = static_cast<double>(count) / static_cast<double>(d.count());
        if (fraction >= 0.03 && fraction <= 0.048) {
            break;
        }
        scale *= std::cbrt(0.038 / std::max(fraction, 1e-6));
    }

    // Organ-like distractor blobs kept clear of the organ; about half carry
    // a partial fat layer too, so only their shape tells them apart.
    struct Blob {
        double x, y, z, rx, ry, rz;
        bool fat;
    };
    std::vector<Blob> blobs;
    const int blob_target = static_cast<int>(std::lround(cfg.blob_count));
    for (int tries = 0; static_cast<int>(blobs.size()) < blob_target && tries < 400; ++tries) {
        const double r = uniform(rng, 0.085, 0.125) * std::min(d.nx, d.ny);
        Blob b{cx + uniform(rng, -0.32, 0.32) * d.nx, cy + uniform(rng, -0.3, 0.3) * d.ny,
               cz + uniform(rng, -0.3, 0.3) * d.nz, r * uniform(rng, 0.8, 1.3), r * uniform(rng, 0.8, 1.3),
               uniform(rng, 0.15, 0.25) * d.nz, uniform01(rng) < 0.5};
        bool clear = std::hypot((b.x - 0.5 * d.nx) / (0.48 * d.nx), (b.y - 0.5 * d.ny) / (0.46 * d.ny)) < 0.8;
        for (double u = -1.0; u <= 1.0 && clear; u += 0.5) {
            for (double v = -1.0; v <= 1.0 && clear; v += 0.5) {
                for (double w = -1.0; w <= 1.0 && clear; w += 0.5) {
                    clear = level(b.x + u * (b.rx + 2), b.y + v * (b.ry + 2), b.z + w * b.rz, scale) > 1.3;
                }
            }
        }
        for (const Blob& o : blobs) {
            clear = clear && (std::hypot(b.x - o.x, b.y - o.y) > b.rx + o.rx + 3 || std::abs(b.z - o.z) > b.rz + o.rz);
        }
        if (clear) {
            blobs.push_back(b);
        }
    }

    // Small ellipsoids: bright nodules outside the organ (vessels, bowel
    // content) and fatty lobules inside it. Both are short in z, so they
    // change from slice to slice.
    struct Spot {
        double x, y, z, rx, ry, rz;
    };
    auto spot_contains = [](const Spot& s, double x, double y, double z) {
        const double u = (x - s.x) / s.rx, v = (y - s.y) / s.ry, w = (z - s.z) / s.rz;
        return u * u + v * v + w * w <= 1.0;
    };
    std::vector<Spot> nodules;
    const int nodule_target = static_cast<int>(std::lround(cfg.speckle_count));
    for (int tries = 0; static_cast<int>(nodules.size()) < nodule_target && tries < 20 * nodule_target + 20; ++tries) {
        Spot sp{uniform(rng, 0.1, 0.9) * d.nx, uniform(rng, 0.1, 0.9) * d.ny, uniform(rng, 0.0, 1.0) * (d.nz - 1),
                uniform(rng, 1.5, 3.5), uniform(rng, 1.5, 3.5), uniform(rng, 0.6, 1.6)};
        const bool in_body = std::hypot((sp.x - 0.5 * d.nx) / (0.48 * d.nx), (sp.y - 0.5 * d.ny) / (0.46 * d.ny)) < 0.9;
        if (in_body && level(sp.x, sp.y, sp.z, scale) > 1.15) {
            nodules.push_back(sp);
        }
    }
    std::vector<Spot> lobules;
    {
        std::vector<std::size_t> organ;
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (mask[i]) organ.push_back(i);
        }
        double covered = 0.0;
        const double target = cfg.lobule_fraction * static_cast<double>(organ.size());
        while (!organ.empty() && covered < target) {
            const std::size_t i = organ[uniform_index(rng, organ.size())];
            const int x = static_cast<int>(i % static_cast<std::size_t>(d.nx));
            const int y = static_cast<int>((i / static_cast<std::size_t>(d.nx)) % static_cast<std::size_t>(d.ny));
            const int z = static_cast<int>(i / (static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)));
            Spot sp{x + uniform(rng, -0.5, 0.5), y + uniform(rng, -0.5, 0.5), static_cast<double>(z),
                    uniform(rng, 1.5, 3.2), uniform(rng, 1.5, 3.2), uniform(rng, 0.5, 1.2)};
            covered += 4.18879 * sp.rx * sp.ry * sp.rz;
            lobules.push_back(sp);
        }
    }

    const detail::ValueNoise tissue(derive_seed(cfg.seed, 1), 14.0);
    const detail::ValueNoise tissue_fine(derive_seed(cfg.seed, 2), 5.0);
    const detail::ValueNoise organ_texture(derive_seed(cfg.seed, 3), 3.0);
    const detail::ValueNoise fat_coverage(derive_seed(cfg.seed, 4), 10.0);
    const double fat_cut = 2.0 * cfg.fat_margin_fraction - 1.0;  // noise is roughly uniform on [-1,1]
    // Distance (in-plane pixels) from each voxel near the organ to the
    // nearest organ voxel, capped at kFatReach; drives the fat margin.
    constexpr int kFatReach = 4;
    const double z_ratio = cfg.spacing.sz / cfg.spacing.sx;
    std::vector<float> organ_distance(d.count(), static_cast<float>(kFatReach + 1));
    {
        const int rz = static_cast<int>(std::floor(kFatReach / z_ratio));
        for (int z = 0; z < d.nz; ++z) {
            for (int y = 0; y < d.ny; ++y) {
                for (int x = 0; x < d.nx; ++x) {
                    if (!mask(x, y, z)) continue;
                    for (int dz = -rz; dz <= rz; ++dz) {
                        for (int dy = -kFatReach; dy <= kFatReach; ++dy) {
                            for (int dx = -kFatReach; dx <= kFatReach; ++dx) {
                                const int X = x + dx, Y = y + dy, Z = z + dz;
                                if (X < 0 || Y < 0 || Z < 0 || X >= d.nx || Y >= d.ny || Z >= d.nz) continue;
                                const double dist = std::sqrt(dx * dx + dy * dy + dz * z_ratio * dz * z_ratio);
                                float& slot = organ_distance[mask.index(X, Y, Z)];
                                slot = std::min(slot, static_cast<float>(dist));
                            }
                        }
                    }
                }
            }
        }
    }
    const detail::ValueNoise fat_thickness(derive_seed(cfg.seed, 6), 12.0);
    const double background_hu = 30.0;

    std::vector<float> voxels(d.count());
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                const std::size_t i = mask.index(x, y, z);
                const double zz = z * cfg.spacing.sz / cfg.spacing.sx;  // isotropic texture
                double hu;
                const double bx = (x - 0.5 * d.nx) / (0.48 * d.nx);
                const double by = (y - 0.5 * d.ny) / (0.46 * d.ny);
                if (bx * bx + by * by > 1.0) {
                    hu = -1000.0;
                } else if (mask[i]) {
                    hu = (background_hu + cfg.contrast_gap) *
                         (1.0 + cfg.texture_amplitude * organ_texture(x, y, zz));
                    for (const Spot& sp : lobules) {
                        if (spot_contains(sp, x, y, z)) {
                            hu = -50.0 + 15.0 * tissue_fine(x, y, zz);
                            break;
                        }
                    }
                } else {
                    hu = background_hu + 35.0 * tissue(x, y, zz) + 15.0 * tissue_fine(x, y, zz);
                    const double margin = 2.5 + 1.0 * fat_thickness(x, y, zz);
                    if (organ_distance[i] <= margin && fat_coverage(x, y, zz) < fat_cut) {
                        hu = -90.0 + 15.0 * tissue_fine(x, y, zz);
                    }
                    for (const Blob& b : blobs) {
                        const double u = (x - b.x) / b.rx, v = (y - b.y) / b.ry, w = (z - b.z) / b.rz;
                        const double q = u * u + v * v + w * w;
                        const double shell = 1.0 + 2.5 / std::min(b.rx, b.ry);
                        if (q <= 1.0) {
                            hu = (background_hu + cfg.contrast_gap) *
                                 (1.0 + cfg.texture_amplitude * organ_texture(x, y, zz));
                        } else if (b.fat && q <= shell * shell && fat_coverage(x, y, zz) < fat_cut) {
                            hu = -90.0 + 15.0 * tissue_fine(x, y, zz);
                        }
                    }
                    for (const Spot& sp : nodules) {
                        if (spot_contains(sp, x, y, z)) {
                            hu = (background_hu + cfg.contrast_gap) *
                                 (1.0 + cfg.texture_amplitude * organ_texture(x, y, zz));
                            break;
                        }
                    }
                }
                const std::uint64_t h = derive_seed(cfg.seed, 5, static_cast<std::int64_t>(i));
                hu += 24.0 * (static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5);
                voxels[i] = static_cast<float>(hu);
            }
        }
    }
    return {Volume(Grid3<float>(d, std::move(voxels)), cfg.spacing, IntensityKind::hu), std::move(mask)};
}

}  // namespace pancseg

#endif  // PANCSEG_VOLUME_HPP
