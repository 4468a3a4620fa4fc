#ifndef PANCSEG_GRID_HPP
#define PANCSEG_GRID_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pancseg/core.hpp"

namespace pancseg {

struct Dims3 {
    int nx = 0;
    int ny = 0;
    int nz = 0;

    std::size_t count() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
               static_cast<std::size_t>(nz);
    }
    bool positive() const { return nx > 0 && ny > 0 && nz > 0; }
    friend bool operator==(const Dims3&, const Dims3&) = default;
};

inline std::string to_string(const Dims3& d) {
    return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

/// Dense 2D image, x fastest.
template <class T>
class Image2D {
public:
    Image2D() = default;
    Image2D(int nx, int ny, T fill = T{}) : nx_(nx), ny_(ny) {
        require(nx > 0 && ny > 0, "image dims must be positive");
        data_.assign(static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny), fill);
    }
    Image2D(int nx, int ny, std::vector<T> values) : nx_(nx), ny_(ny), data_(std::move(values)) {
        require(nx > 0 && ny > 0, "image dims must be positive");
        if (data_.size() != static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny)) {
            throw DataError("image value count does not match dims");
        }
    }

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(int x, int y) { return data_[index(x, y)]; }
    const T& operator()(int x, int y) const { return data_[index(x, y)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Edge-replicated access.
    const T& clamped(int x, int y) const {
        return (*this)(std::clamp(x, 0, nx_ - 1), std::clamp(y, 0, ny_ - 1));
    }

    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(nx_) + static_cast<std::size_t>(x);
    }
    bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < nx_ && y < ny_; }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    const std::vector<T>& vector() const { return data_; }

    friend bool operator==(const Image2D&, const Image2D&) = default;

private:
    int nx_ = 0;
    int ny_ = 0;
    std::vector<T> data_;
};

/// Bilinear sample at continuous pixel-center coordinates (pixel k is at k),
/// with edge clamping.
template <class T>
double sample_bilinear(const Image2D<T>& img, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(img.nx() - 1));
    y = std::clamp(y, 0.0, static_cast<double>(img.ny() - 1));
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, img.nx() - 1);
    const int y1 = std::min(y0 + 1, img.ny() - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    const double top = (1.0 - fx) * static_cast<double>(img(x0, y0)) + fx * static_cast<double>(img(x1, y0));
    const double bottom = (1.0 - fx) * static_cast<double>(img(x0, y1)) + fx * static_cast<double>(img(x1, y1));
    return (1.0 - fy) * top + fy * bottom;
}

/// Dense 3D grid, x fastest, then y, then z.
template <class T>
class Grid3 {
public:
    Grid3() = default;
    explicit Grid3(Dims3 dims, T fill = T{}) : dims_(dims) {
        require(dims.positive(), "grid dims must be positive");
        data_.assign(dims.count(), fill);
    }
    Grid3(Dims3 dims, std::vector<T> values) : dims_(dims), data_(std::move(values)) {
        require(dims.positive(), "grid dims must be positive");
        if (data_.size() != dims.count()) {
            throw DataError("grid value count does not match dims");
        }
    }

    const Dims3& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }

    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * static_cast<std::size_t>(dims_.ny) + static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(dims_.nx) +
               static_cast<std::size_t>(x);
    }
    T& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }
    const T& operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    const std::vector<T>& vector() const { return data_; }

    Image2D<T> slice(int z) const {
        require(z >= 0 && z < dims_.nz, "slice index out of range");
        const std::size_t n = static_cast<std::size_t>(dims_.nx) * static_cast<std::size_t>(dims_.ny);
        auto first = data_.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(z));
        return Image2D<T>(dims_.nx, dims_.ny, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(n)));
    }

    void set_slice(int z, const Image2D<T>& img) {
        require(z >= 0 && z < dims_.nz, "slice index out of range");
        if (img.nx() != dims_.nx || img.ny() != dims_.ny) {
            throw DataError("slice dims do not match grid");
        }
        std::copy(img.values().begin(), img.values().end(),
                  data_.begin() + static_cast<std::ptrdiff_t>(img.size() * static_cast<std::size_t>(z)));
    }

    friend bool operator==(const Grid3&, const Grid3&) = default;

private:
    Dims3 dims_;
    std::vector<T> data_;
};

}  // namespace pancseg

#endif  // PANCSEG_GRID_HPP
