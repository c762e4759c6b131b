#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffrecon {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GridSpec {
    int nx = 64;
    int ny = 64;
    double voxel_size = 2.0;  // mm

    int size() const { return nx * ny; }
    bool operator==(const GridSpec&) const = default;

    void validate() const {
        if (nx < 8 || ny < 8)
            throw ConfigError("GridSpec: nx and ny must be >= 8");
        if (!(voxel_size > 0))
            throw ConfigError("GridSpec: voxel_size must be > 0");
    }
};

struct ProjSpec {
    int n_angles = 60;
    int n_bins = 95;
    double bin_width = 2.0;  // mm

    int size() const { return n_angles * n_bins; }
    bool operator==(const ProjSpec&) const = default;

    void validate() const {
        if (n_angles < 1 || n_bins < 1)
            throw ConfigError("ProjSpec: n_angles and n_bins must be >= 1");
        if (!(bin_width > 0))
            throw ConfigError("ProjSpec: bin_width must be > 0");
    }
};

// 2D image on a GridSpec, row-major (iy * nx + ix).
struct Image {
    GridSpec grid;
    std::vector<double> values;

    Image() = default;
    explicit Image(const GridSpec& g, double fill = 0.0)
        : grid(g), values(static_cast<size_t>(g.size()), fill) {}

    double& operator()(int ix, int iy) { return values[static_cast<size_t>(iy) * grid.nx + ix]; }
    double operator()(int ix, int iy) const { return values[static_cast<size_t>(iy) * grid.nx + ix]; }
    size_t size() const { return values.size(); }

    double sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }
    double max() const { return *std::max_element(values.begin(), values.end()); }

    void clamp_nonneg() {
        for (double& v : values) v = std::max(v, 0.0);
    }
};

// Sinogram over (angle, radial bin), row-major (angle * n_bins + bin).
struct Sinogram {
    ProjSpec proj;
    std::vector<double> values;

    Sinogram() = default;
    explicit Sinogram(const ProjSpec& p, double fill = 0.0)
        : proj(p), values(static_cast<size_t>(p.size()), fill) {}

    double& operator()(int ia, int ib) { return values[static_cast<size_t>(ia) * proj.n_bins + ib]; }
    double operator()(int ia, int ib) const { return values[static_cast<size_t>(ia) * proj.n_bins + ib]; }
    size_t size() const { return values.size(); }

    double sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace diffrecon
