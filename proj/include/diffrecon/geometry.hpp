#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "diffrecon/core.hpp"
#include "diffrecon/rng.hpp"

namespace diffrecon {

// Ray-driven line-integral projection model. One ray per (angle, bin),
// angles at (k + 0.5) * pi / n_angles, bins centered on the radial axis.
// The sparse intersection-length matrix is built once per geometry with a
// Siddon-style traversal; forward and back projection share the same
// weights, so the pair is adjoint by construction.
class Projector {
public:
    Projector(const GridSpec& grid, const ProjSpec& proj) : grid_(grid), proj_(proj) {
        grid.validate();
        proj.validate();
        build();
    }

    const GridSpec& grid() const { return grid_; }
    const ProjSpec& proj() const { return proj_; }

    static double angle_of(int k, int n_angles) { return (k + 0.5) * M_PI / n_angles; }

    double bin_offset(int b) const { return (b - 0.5 * (proj_.n_bins - 1)) * proj_.bin_width; }

    Sinogram forward(const Image& img) const {
        if (!(img.grid == grid_))
            throw ConfigError("forward_project: image grid does not match session geometry");
        Sinogram out(proj_);
        for (int i = 0; i < proj_.size(); ++i) {
            double s = 0.0;
            for (uint32_t k = row_start_[i]; k < row_start_[i + 1]; ++k)
                s += weight_[k] * img.values[col_[k]];
            out.values[i] = s;
        }
        return out;
    }

    Image back(const Sinogram& sino) const {
        if (!(sino.proj == proj_))
            throw ConfigError("back_project: sinogram does not match session geometry");
        Image out(grid_);
        for (int i = 0; i < proj_.size(); ++i) {
            const double s = sino.values[i];
            if (s == 0.0) continue;
            for (uint32_t k = row_start_[i]; k < row_start_[i + 1]; ++k)
                out.values[col_[k]] += weight_[k] * s;
        }
        return out;
    }

    // S_j = sum_i A_ij
    Image sensitivity() const {
        Sinogram ones(proj_, 1.0);
        return back(ones);
    }

    // Row access for oracle tests.
    std::vector<std::pair<int, double>> row(int ray) const {
        std::vector<std::pair<int, double>> r;
        for (uint32_t k = row_start_[ray]; k < row_start_[ray + 1]; ++k)
            r.emplace_back(static_cast<int>(col_[k]), weight_[k]);
        return r;
    }

private:
    void build() {
        const int n_rays = proj_.size();
        row_start_.assign(n_rays + 1, 0);
        const double hx = 0.5 * grid_.nx * grid_.voxel_size;
        const double hy = 0.5 * grid_.ny * grid_.voxel_size;
        for (int ia = 0; ia < proj_.n_angles; ++ia) {
            const double th = angle_of(ia, proj_.n_angles);
            const double c = std::cos(th), s = std::sin(th);
            // ray direction perpendicular to the radial axis
            const double dx = -s, dy = c;
            for (int ib = 0; ib < proj_.n_bins; ++ib) {
                const double off = bin_offset(ib);
                const double px = off * c, py = off * s;
                trace(px, py, dx, dy, hx, hy);
                row_start_[ia * proj_.n_bins + ib + 1] = static_cast<uint32_t>(col_.size());
            }
        }
    }

    void trace(double px, double py, double dx, double dy, double hx, double hy) {
        // clip p + t*d to the grid box
        double t0 = -std::numeric_limits<double>::infinity();
        double t1 = std::numeric_limits<double>::infinity();
        auto clip = [&](double p, double d, double lo, double hi) {
            if (std::abs(d) < 1e-15) return p >= lo && p <= hi;
            double ta = (lo - p) / d, tb = (hi - p) / d;
            if (ta > tb) std::swap(ta, tb);
            t0 = std::max(t0, ta);
            t1 = std::min(t1, tb);
            return true;
        };
        if (!clip(px, dx, -hx, hx) || !clip(py, dy, -hy, hy) || t0 >= t1) return;

        const double v = grid_.voxel_size;
        double t = t0;
        // voxel containing the entry point (nudged inward)
        const double eps = 1e-9 * v;
        while (t < t1 - eps) {
            const double mx = px + (t + eps) * dx;
            const double my = py + (t + eps) * dy;
            int ix = static_cast<int>(std::floor((mx + hx) / v));
            int iy = static_cast<int>(std::floor((my + hy) / v));
            ix = std::clamp(ix, 0, grid_.nx - 1);
            iy = std::clamp(iy, 0, grid_.ny - 1);
            // exit parameter from this voxel
            double t_next = t1;
            if (std::abs(dx) > 1e-15) {
                const double bx = -hx + (dx > 0 ? ix + 1 : ix) * v;
                t_next = std::min(t_next, (bx - px) / dx);
            }
            if (std::abs(dy) > 1e-15) {
                const double by = -hy + (dy > 0 ? iy + 1 : iy) * v;
                t_next = std::min(t_next, (by - py) / dy);
            }
            if (t_next <= t + eps) t_next = t + eps;  // guard against stalls on corners
            const double len = std::min(t_next, t1) - t;
            if (len > 0) {
                col_.push_back(static_cast<uint32_t>(iy * grid_.nx + ix));
                weight_.push_back(len);
            }
            t = t_next;
        }
    }

    GridSpec grid_;
    ProjSpec proj_;
    std::vector<uint32_t> row_start_;
    std::vector<uint32_t> col_;
    std::vector<double> weight_;
};

// Eq.-style Poisson log-likelihood: sum_i y_i log(ybar_i) - ybar_i with
// ybar = Ax + b. Zero-mean bins with zero counts contribute nothing.
inline double poisson_log_likelihood(const Sinogram& y, const Sinogram& axb) {
    if (y.size() != axb.size())
        throw ConfigError("poisson_log_likelihood: sinogram size mismatch");
    double L = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        const double m = axb.values[i];
        const double yi = y.values[i];
        if (m <= 0.0) {
            if (yi > 0.0)
                throw DomainError("poisson_log_likelihood: zero mean with positive counts");
            continue;
        }
        L += yi * std::log(m) - m;
    }
    return L;
}

inline double poisson_log_likelihood(const Sinogram& y, const Image& x, const Sinogram& b,
                                     const Projector& A) {
    Sinogram axb = A.forward(x);
    for (size_t i = 0; i < axb.size(); ++i) axb.values[i] += b.values[i];
    return poisson_log_likelihood(y, axb);
}

struct CountData {
    Sinogram counts;
    double scale = 1.0;  // counts = Poisson(scale * ybar)
};

// Scales the noiseless sinogram to the requested total and draws Poisson
// counts per bin. The scale is returned so results can be mapped back to
// the original activity units.
inline CountData simulate_counts(const Sinogram& ybar, double count_target, Rng& rng) {
    const double total = ybar.sum();
    if (!(total > 0))
        throw ConfigError("simulate_counts: noiseless sinogram is all zero");
    if (!(count_target > 0))
        throw ConfigError("simulate_counts: count_target must be > 0");
    CountData out;
    out.scale = count_target / total;
    out.counts = Sinogram(ybar.proj);
    for (size_t i = 0; i < ybar.size(); ++i) {
        const double m = out.scale * ybar.values[i];
        out.counts.values[i] = m > 0 ? static_cast<double>(rng.poisson(m)) : 0.0;
    }
    return out;
}

}  // namespace diffrecon
