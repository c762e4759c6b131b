#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "diffrecon/core.hpp"
#include "diffrecon/geometry.hpp"

namespace diffrecon {

// One multiplicative MLEM update. Voxels with zero sensitivity stay at 0.
inline Image mlem_update(const Image& x, const Sinogram& y, const Sinogram& b, const Image& S,
                         const Projector& A) {
    Sinogram fp = A.forward(x);
    Sinogram ratio(fp.proj);
    for (size_t i = 0; i < fp.size(); ++i) {
        const double denom = fp.values[i] + b.values[i];
        const double yi = y.values[i];
        if (denom <= 0.0) {
            if (yi > 0.0) throw DomainError("mlem_update: zero projection with positive counts");
            ratio.values[i] = 0.0;
        } else {
            ratio.values[i] = yi / denom;
        }
    }
    Image bp = A.back(ratio);
    Image out(x.grid);
    for (size_t j = 0; j < out.size(); ++j)
        out.values[j] = S.values[j] > 0 ? x.values[j] / S.values[j] * bp.values[j] : 0.0;
    return out;
}

// Uniform start scaled so sum_j S_j x0_j = sum_i y_i.
inline Image mlem_default_init(const Sinogram& y, const Image& S) {
    const double sS = S.sum();
    const double val = sS > 0 ? y.sum() / sS : 1.0;
    return Image(S.grid, val > 0 ? val : 1.0);
}

inline Image mlem(const Sinogram& y, const Sinogram& b, int n_iter, const Projector& A,
                  const Image* x_init = nullptr,
                  const std::function<void(int, const Image&)>& on_iter = nullptr) {
    if (n_iter < 1) throw ConfigError("mlem: n_iter must be >= 1");
    const Image S = A.sensitivity();
    Image x = x_init ? *x_init : mlem_default_init(y, S);
    for (int n = 0; n < n_iter; ++n) {
        x = mlem_update(x, y, b, S, A);
        if (on_iter) on_iter(n + 1, x);
    }
    return x;
}

// Relative difference penalty over the 8-neighborhood, both directions of
// each pair counted.
inline double rdp_penalty(const Image& x, double gamma) {
    const int nx = x.grid.nx, ny = x.grid.ny;
    double R = 0.0;
    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            const double xj = x(ix, iy);
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    const int kx = ix + dx, ky = iy + dy;
                    if (kx < 0 || ky < 0 || kx >= nx || ky >= ny) continue;
                    const double xk = x(kx, ky);
                    const double d = xj - xk;
                    const double denom = xj + xk + gamma * std::abs(d);
                    if (denom > 0) R += d * d / denom;
                }
            }
        }
    }
    return R;
}

// dR/dx_j of the RDP, with the 0/0 limit defined as 0.
inline Image rdp_gradient(const Image& x, double gamma) {
    const int nx = x.grid.nx, ny = x.grid.ny;
    Image g(x.grid);
    // d/dxj of (xj-xk)^2 / (xj+xk+g|xj-xk|), summed over neighbors; the
    // pair appears once as (j,k) and once as (k,j), both depend on xj.
    auto pair_grad = [gamma](double xj, double xk) {
        const double d = xj - xk;
        const double a = xj + xk + gamma * std::abs(d);
        if (a <= 0) return 0.0;
        const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        return (2 * d * a - d * d * (1 + gamma * sgn)) / (a * a);
    };
    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            double s = 0.0;
            const double xj = x(ix, iy);
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    const int kx = ix + dx, ky = iy + dy;
                    if (kx < 0 || ky < 0 || kx >= nx || ky >= ny) continue;
                    const double xk = x(kx, ky);
                    // term (j,k): d/dxj; term (k,j): symmetric, same derivative
                    s += 2.0 * pair_grad(xj, xk);
                }
            }
            g(ix, iy) = s;
        }
    }
    return g;
}

struct MapemDiagnostics {
    int clamped_voxels = 0;  // denominator clamps triggered across the run
};

// One-step-late MAPEM with the relative difference penalty. weight = 0
// reduces exactly to MLEM. The OSL denominator is clamped at eps to guard
// against negative penalty gradients.
inline Image mapem(const Sinogram& y, const Sinogram& b, int n_iter, double gamma, double weight,
                   const Projector& A, MapemDiagnostics* diag = nullptr,
                   const std::function<void(int, const Image&)>& on_iter = nullptr) {
    if (n_iter < 1) throw ConfigError("mapem: n_iter must be >= 1");
    if (weight < 0) throw ConfigError("mapem: weight must be >= 0");
    const Image S = A.sensitivity();
    Image x = mlem_default_init(y, S);
    constexpr double kEps = 1e-12;
    for (int n = 0; n < n_iter; ++n) {
        Sinogram fp = A.forward(x);
        Sinogram ratio(fp.proj);
        for (size_t i = 0; i < fp.size(); ++i) {
            const double denom = fp.values[i] + b.values[i];
            const double yi = y.values[i];
            if (denom <= 0.0) {
                if (yi > 0.0) throw DomainError("mapem: zero projection with positive counts");
                ratio.values[i] = 0.0;
            } else {
                ratio.values[i] = yi / denom;
            }
        }
        Image bp = A.back(ratio);
        Image grad = weight > 0 ? rdp_gradient(x, gamma) : Image(x.grid);
        for (size_t j = 0; j < x.size(); ++j) {
            if (S.values[j] <= 0) {
                x.values[j] = 0.0;
                continue;
            }
            double denom = S.values[j] + weight * grad.values[j];
            if (denom < kEps) {
                denom = kEps;
                if (diag) ++diag->clamped_voxels;
            }
            x.values[j] = x.values[j] * bp.values[j] / denom;
        }
        if (on_iter) on_iter(n + 1, x);
    }
    return x;
}

}  // namespace diffrecon
