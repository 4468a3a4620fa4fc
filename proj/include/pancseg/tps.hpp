#ifndef PANCSEG_TPS_HPP
#define PANCSEG_TPS_HPP

/// \file tps.hpp
/// Thin-plate-spline warps in 2D: fitting to control-point pairs, image
/// warping, and random fold-free deformations for augmentation.
///
/// A fitted warp maps a point x to
///
///     t(x) = a0 + A x + sum_i c_i phi(|x - w_i|),   phi(r) = r^2 log r,
///
/// with the side conditions sum_i c_i = 0 and sum_i c_i w_i^T = 0.

#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "pancseg/core.hpp"
#include "pancseg/grid.hpp"

namespace pancseg {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

/// phi(r) = r^2 log r with phi(0) = 0, evaluated from r^2.
inline double tps_kernel_sq(double r2) {
    return r2 > 0.0 ? 0.5 * r2 * std::log(r2) : 0.0;
}

class TpsWarp {
public:
    TpsWarp() = default;
    TpsWarp(std::vector<Point2> control, std::vector<Point2> coefficients, Eigen::Matrix<double, 2, 3> affine)
        : control_(std::move(control)), coeffs_(std::move(coefficients)), affine_(affine) {}

    Point2 operator()(Point2 p) const {
        double x = affine_(0, 0) + affine_(0, 1) * p.x + affine_(0, 2) * p.y;
        double y = affine_(1, 0) + affine_(1, 1) * p.x + affine_(1, 2) * p.y;
        for (std::size_t i = 0; i < control_.size(); ++i) {
            const double dx = p.x - control_[i].x, dy = p.y - control_[i].y;
            const double k = tps_kernel_sq(dx * dx + dy * dy);
            x += coeffs_[i].x * k;
            y += coeffs_[i].y * k;
        }
        return {x, y};
    }

    const std::vector<Point2>& control_points() const { return control_; }
    const std::vector<Point2>& coefficients() const { return coeffs_; }
    /// Rows are output x and y; columns are constant, x and y terms.
    const Eigen::Matrix<double, 2, 3>& affine() const { return affine_; }

    /// Largest absolute violation of sum c_i = 0 and sum c_i w_i = 0.
    double side_condition_residual() const {
        double s[6] = {};
        for (std::size_t i = 0; i < control_.size(); ++i) {
            s[0] += coeffs_[i].x;
            s[1] += coeffs_[i].y;
            s[2] += coeffs_[i].x * control_[i].x;
            s[3] += coeffs_[i].x * control_[i].y;
            s[4] += coeffs_[i].y * control_[i].x;
            s[5] += coeffs_[i].y * control_[i].y;
        }
        double worst = 0.0;
        for (double v : s) {
            worst = std::max(worst, std::abs(v));
        }
        return worst;
    }

private:
    std::vector<Point2> control_;
    std::vector<Point2> coeffs_;
    Eigen::Matrix<double, 2, 3> affine_ = (Eigen::Matrix<double, 2, 3>() << 0, 1, 0, 0, 0, 1).finished();
};

/// Fits the interpolating thin-plate spline taking `source[i]` to `target[i]`.
/// Throws on fewer than three points, duplicates, or collinear sources.
inline TpsWarp fit_tps(const std::vector<Point2>& source, const std::vector<Point2>& target) {
    const auto k = static_cast<Eigen::Index>(source.size());
    if (source.size() != target.size()) {
        throw UsageError("fit_tps: source and target sizes differ");
    }
    if (k < 3) {
        throw UsageError("fit_tps: at least three control points are required");
    }
    // Centering and scaling the control points keeps the system well
    // conditioned; TPS interpolation is invariant to this up to the affine
    // part, which is mapped back below.
    double mx = 0, my = 0;
    for (const auto& p : source) {
        mx += p.x;
        my += p.y;
    }
    mx /= static_cast<double>(k);
    my /= static_cast<double>(k);
    double spread = 0.0;
    for (const auto& p : source) {
        spread = std::max({spread, std::abs(p.x - mx), std::abs(p.y - my)});
    }
    if (spread == 0.0) {
        throw DataError("fit_tps: control points coincide");
    }
    const double inv = 1.0 / spread;

    Eigen::MatrixXd p(k, 3);
    for (Eigen::Index i = 0; i < k; ++i) {
        p(i, 0) = 1.0;
        p(i, 1) = (source[static_cast<std::size_t>(i)].x - mx) * inv;
        p(i, 2) = (source[static_cast<std::size_t>(i)].y - my) * inv;
    }
    if (Eigen::FullPivLU<Eigen::MatrixXd>(p).rank() < 3) {
        throw DataError("fit_tps: control points are collinear");
    }
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(k + 3, k + 3);
    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) {
            const double dx = p(i, 1) - p(j, 1), dy = p(i, 2) - p(j, 2);
            if (i != j && dx == 0.0 && dy == 0.0) {
                throw DataError("fit_tps: duplicate control points");
            }
            l(i, j) = tps_kernel_sq(dx * dx + dy * dy);
        }
    }
    l.block(0, k, k, 3) = p;
    l.block(k, 0, 3, k) = p.transpose();

    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(k + 3, 2);
    for (Eigen::Index i = 0; i < k; ++i) {
        rhs(i, 0) = target[static_cast<std::size_t>(i)].x;
        rhs(i, 1) = target[static_cast<std::size_t>(i)].y;
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(l);
    if (lu.rank() < k + 3) {
        throw DataError("fit_tps: singular system");
    }
    Eigen::MatrixXd sol = lu.solve(rhs);
    sol += lu.solve(rhs - l * sol);  // one step of iterative refinement

    // Back to input coordinates. With u = (x - m) / s,
    //   phi(|u - u_i|) = (phi(r_i) - r_i^2 log s) / s^2,
    // and under the side conditions sum_i c_i r_i^2 = sum_i c_i |u_i|^2 s^2,
    // a constant. Coefficients scale by 1/s^2 and the affine part absorbs
    // the shift and that constant.
    std::vector<Point2> coeffs(static_cast<std::size_t>(k));
    const double inv2 = inv * inv;
    for (Eigen::Index i = 0; i < k; ++i) {
        coeffs[static_cast<std::size_t>(i)] = {sol(i, 0) * inv2, sol(i, 1) * inv2};
    }
    const double log_s = std::log(spread);
    Eigen::Matrix<double, 2, 3> affine;
    for (int d = 0; d < 2; ++d) {
        const double a0 = sol(k, d), ax = sol(k + 1, d) * inv, ay = sol(k + 2, d) * inv;
        double constant = 0.0;
        for (Eigen::Index i = 0; i < k; ++i) {
            constant -= sol(i, d) * (p(i, 1) * p(i, 1) + p(i, 2) * p(i, 2)) * log_s;
        }
        affine(d, 0) = a0 - ax * mx - ay * my + constant;
        affine(d, 1) = ax;
        affine(d, 2) = ay;
    }
    return TpsWarp(source, std::move(coeffs), affine);
}

/// Backward warp: output(x) = image(t(x)), bilinear with edge clamping.
inline Image2D<float> warp_image(const Image2D<float>& image, const TpsWarp& warp) {
    require(!image.empty(), "warp_image: empty image");
    Image2D<float> out(image.nx(), image.ny(), 0.0f);
    for (int y = 0; y < image.ny(); ++y) {
        for (int x = 0; x < image.nx(); ++x) {
            const Point2 q = warp({static_cast<double>(x), static_cast<double>(y)});
            out(x, y) = static_cast<float>(sample_bilinear(image, q.x, q.y));
        }
    }
    return out;
}

/// Regular gx x gy grid spanning [0, extent_x] x [0, extent_y].
inline std::vector<Point2> control_grid(int gx, int gy, double extent_x, double extent_y) {
    require(gx >= 2 && gy >= 2, "control grid needs at least 2x2 points");
    std::vector<Point2> pts;
    for (int j = 0; j < gy; ++j) {
        for (int i = 0; i < gx; ++i) {
            pts.push_back({extent_x * i / (gx - 1), extent_y * j / (gy - 1)});
        }
    }
    return pts;
}

/// True when the finite-difference Jacobian determinant of the warp is
/// positive at every point of a samples x samples grid over the extent.
inline bool is_fold_free(const TpsWarp& warp, double extent_x, double extent_y, int samples = 33) {
    const double h = 1e-3 * std::max(extent_x, extent_y);
    for (int j = 0; j < samples; ++j) {
        for (int i = 0; i < samples; ++i) {
            const double x = extent_x * i / (samples - 1), y = extent_y * j / (samples - 1);
            const Point2 xp = warp({x + h, y}), xm = warp({x - h, y});
            const Point2 yp = warp({x, y + h}), ym = warp({x, y - h});
            const double j11 = (xp.x - xm.x) / (2 * h), j21 = (xp.y - xm.y) / (2 * h);
            const double j12 = (yp.x - ym.x) / (2 * h), j22 = (yp.y - ym.y) / (2 * h);
            if (!(j11 * j22 - j12 * j21 > 0.0)) {
                return false;
            }
        }
    }
    return true;
}

struct TpsDeformConfig {
    int grid_x = 4;
    int grid_y = 4;
    double max_displacement = 0.25;  ///< fraction of the control-grid spacing

    void validate() const {
        require(grid_x >= 2 && grid_y >= 2, "deformation grid needs at least 2x2 points");
        require(max_displacement >= 0.0 && max_displacement <= 0.5, "max_displacement must be in [0,0.5]");
    }
};

/// Random warp over [0, extent_x] x [0, extent_y]: each control point moves
/// uniformly within [-d, d]^2, d = max_displacement * grid spacing. Draws
/// that fold are rejected and redrawn from the same stream.
inline TpsWarp random_tps(const TpsDeformConfig& cfg, double extent_x, double extent_y, Rng& rng) {
    cfg.validate();
    const auto source = control_grid(cfg.grid_x, cfg.grid_y, extent_x, extent_y);
    const double dx = cfg.max_displacement * extent_x / (cfg.grid_x - 1);
    const double dy = cfg.max_displacement * extent_y / (cfg.grid_y - 1);
    for (int attempt = 0;; ++attempt) {
        std::vector<Point2> target = source;
        for (auto& p : target) {
            p.x += uniform(rng, -dx, dx);
            p.y += uniform(rng, -dy, dy);
        }
        TpsWarp warp = fit_tps(source, target);
        if (attempt >= 100 || is_fold_free(warp, extent_x, extent_y)) {
            return warp;
        }
    }
}

}  // namespace pancseg

#endif  // PANCSEG_TPS_HPP
