#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffrecon/core.hpp"
#include "diffrecon/io.hpp"
#include "diffrecon/rng.hpp"

namespace diffrecon {

// Tissue label codes used in DRLB maps.
enum Tissue : uint8_t {
    kBackground = 0,
    kCsf = 1,
    kGm = 2,
    kWm = 3,
    kPutamen = 4,  // GM subtype, kept separate for the CR ROI
};

struct TissueMasks {
    std::vector<bool> gm, wm, csf, background, putamen;
};

inline TissueMasks masks_from_labels(const std::vector<uint8_t>& labels) {
    TissueMasks m;
    const size_t n = labels.size();
    m.gm.resize(n);
    m.wm.resize(n);
    m.csf.resize(n);
    m.background.resize(n);
    m.putamen.resize(n);
    for (size_t i = 0; i < n; ++i) {
        m.gm[i] = labels[i] == kGm || labels[i] == kPutamen;
        m.wm[i] = labels[i] == kWm;
        m.csf[i] = labels[i] == kCsf;
        m.background[i] = labels[i] == kBackground;
        m.putamen[i] = labels[i] == kPutamen;
    }
    return m;
}

inline double mask_mean(const Image& img, const std::vector<bool>& mask) {
    double s = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) {
            s += img.values[i];
            ++n;
        }
    if (n == 0) throw DomainError("mask_mean: empty mask");
    return s / static_cast<double>(n);
}

struct ContrastSpec {
    double gm_level = 1.0;
    double wm_level = 0.25;
    double csf_level = 0.05;

    void validate() const {
        if (gm_level < 0 || wm_level < 0 || csf_level < 0)
            throw ConfigError("ContrastSpec: levels must be >= 0");
        if (gm_level == wm_level)
            throw ConfigError("ContrastSpec: gm_level must differ from wm_level");
    }
};

struct PhantomSample {
    Image activity;
    Image mr_prior;
    std::vector<uint8_t> labels;

    TissueMasks masks() const { return masks_from_labels(labels); }
};

namespace detail {

struct Ellipse {
    double cx, cy, ax, ay, rot;
    bool contains(double u, double v) const {
        const double du = u - cx, dv = v - cy;
        const double c = std::cos(rot), s = std::sin(rot);
        const double eu = (c * du + s * dv) / ax;
        const double ev = (-s * du + c * dv) / ay;
        return eu * eu + ev * ev <= 1.0;
    }
};

}  // namespace detail

// Procedural brain-like phantom: elliptical head, CSF ventricles, a folded
// GM ribbon around a WM interior, and a putamen-like GM subregion. Shape is
// jittered per seed; the MR prior carries anatomy-only intensities plus a
// mild smooth bias field and is independent of the activity contrast.
inline PhantomSample make_phantom(uint64_t seed, const ContrastSpec& contrast,
                                  const GridSpec& grid) {
    grid.validate();
    contrast.validate();
    Rng rng(mix_seed(seed, 0x9e37));

    const double head_a = 0.88 + rng.uniform(-0.04, 0.04);
    const double head_b = 0.72 + rng.uniform(-0.04, 0.04);
    const double p1 = rng.uniform(0, 2 * M_PI), p2 = rng.uniform(0, 2 * M_PI);
    const double p3 = rng.uniform(0, 2 * M_PI);
    const double vx = 0.13 + rng.uniform(-0.02, 0.02);
    const double py = 0.10 + rng.uniform(-0.03, 0.03);
    const double bias_cu = rng.uniform(0.5, 1.5), bias_cv = rng.uniform(0.5, 1.5);
    const double bias_ph = rng.uniform(0, 2 * M_PI);

    const detail::Ellipse vent_l{-vx, -0.04, 0.095, 0.21, 0.25};
    const detail::Ellipse vent_r{vx, -0.04, 0.095, 0.21, -0.25};
    const detail::Ellipse put_l{-0.37, py, 0.095, 0.16, 0.5};
    const detail::Ellipse put_r{0.37, py, 0.095, 0.16, -0.5};

    PhantomSample s;
    s.activity = Image(grid);
    s.mr_prior = Image(grid);
    s.labels.assign(static_cast<size_t>(grid.size()), kBackground);

    for (int iy = 0; iy < grid.ny; ++iy) {
        for (int ix = 0; ix < grid.nx; ++ix) {
            const double u = (ix + 0.5 - 0.5 * grid.nx) / (0.5 * grid.nx);
            const double v = (iy + 0.5 - 0.5 * grid.ny) / (0.5 * grid.ny);
            const size_t idx = static_cast<size_t>(iy) * grid.nx + ix;
            const double eu = u / head_a, ev = v / head_b;
            const double rho = std::sqrt(eu * eu + ev * ev);
            if (rho > 1.0) continue;  // background
            uint8_t lab;
            if (vent_l.contains(u, v) || vent_r.contains(u, v)) {
                lab = kCsf;
            } else if (put_l.contains(u, v) || put_r.contains(u, v)) {
                lab = kPutamen;
            } else {
                const double phi = std::atan2(ev, eu);
                const double gm_inner = 0.74 + 0.05 * std::sin(3 * phi + p1) +
                                        0.04 * std::sin(5 * phi + p2) +
                                        0.03 * std::sin(7 * phi + p3);
                lab = rho >= gm_inner ? kGm : kWm;
            }
            s.labels[idx] = lab;
        }
    }

    for (size_t i = 0; i < s.labels.size(); ++i) {
        double act = 0.0, mr = 0.0;
        switch (s.labels[i]) {
            case kCsf: act = contrast.csf_level; mr = 0.15; break;
            case kGm:
            case kPutamen: act = contrast.gm_level; mr = 0.55; break;
            case kWm: act = contrast.wm_level; mr = 0.9; break;
            default: break;
        }
        s.activity.values[i] = act;
        if (mr > 0) {
            const int ix = static_cast<int>(i) % grid.nx;
            const int iy = static_cast<int>(i) / grid.nx;
            const double u = (ix + 0.5 - 0.5 * grid.nx) / (0.5 * grid.nx);
            const double v = (iy + 0.5 - 0.5 * grid.ny) / (0.5 * grid.ny);
            mr *= 1.0 + 0.05 * std::sin(M_PI * (bias_cu * u + bias_cv * v) + bias_ph);
        }
        s.mr_prior.values[i] = std::clamp(mr, 0.0, 1.0);
    }
    return s;
}

struct AugmentParams {
    double gm_uptake = 1.0;      // [0.8, 1.2]
    double wm_uptake = 1.0;      // [0.8, 1.2]
    double spatial_scale = 1.0;  // [0.9, 1.05]
    double rotation_deg = 0.0;   // [-15, 15]
    double shear = 0.0;          // [-0.15, 0.15]
};

inline AugmentParams draw_augment(Rng& rng) {
    AugmentParams p;
    p.gm_uptake = rng.uniform(0.8, 1.2);
    p.wm_uptake = rng.uniform(0.8, 1.2);
    p.spatial_scale = rng.uniform(0.9, 1.05);
    p.rotation_deg = rng.uniform(-15.0, 15.0);
    p.shear = rng.uniform(-0.15, 0.15);
    return p;
}

// Uptake scaling first, then one shared affine warp (scale * rotation *
// shear) applied to activity, MR prior, and labels. Bilinear for images,
// nearest neighbor for the label map, activity clipped at zero.
inline PhantomSample apply_augment(const PhantomSample& in, const AugmentParams& p) {
    const GridSpec& grid = in.activity.grid;
    Image act = in.activity;
    for (size_t i = 0; i < act.size(); ++i) {
        if (in.labels[i] == kGm || in.labels[i] == kPutamen) act.values[i] *= p.gm_uptake;
        else if (in.labels[i] == kWm) act.values[i] *= p.wm_uptake;
    }

    const double th = p.rotation_deg * M_PI / 180.0;
    const double c = std::cos(th), sn = std::sin(th);
    // forward map M = S * R * K, sampling uses M^-1
    const double m00 = p.spatial_scale * c, m01 = p.spatial_scale * (c * p.shear - sn);
    const double m10 = p.spatial_scale * sn, m11 = p.spatial_scale * (sn * p.shear + c);
    const double det = m00 * m11 - m01 * m10;
    const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;

    PhantomSample out;
    out.activity = Image(grid);
    out.mr_prior = Image(grid);
    out.labels.assign(static_cast<size_t>(grid.size()), kBackground);

    const double cx = 0.5 * (grid.nx - 1), cy = 0.5 * (grid.ny - 1);
    auto bilinear = [&](const Image& img, double x, double y) {
        if (x < 0 || y < 0 || x > grid.nx - 1 || y > grid.ny - 1) return 0.0;
        const int x0 = static_cast<int>(std::floor(x));
        const int y0 = static_cast<int>(std::floor(y));
        const int x1 = std::min(x0 + 1, grid.nx - 1);
        const int y1 = std::min(y0 + 1, grid.ny - 1);
        const double fx = x - x0, fy = y - y0;
        return (1 - fy) * ((1 - fx) * img(x0, y0) + fx * img(x1, y0)) +
               fy * ((1 - fx) * img(x0, y1) + fx * img(x1, y1));
    };

    for (int iy = 0; iy < grid.ny; ++iy) {
        for (int ix = 0; ix < grid.nx; ++ix) {
            const double dx = ix - cx, dy = iy - cy;
            const double sx = i00 * dx + i01 * dy + cx;
            const double sy = i10 * dx + i11 * dy + cy;
            const size_t idx = static_cast<size_t>(iy) * grid.nx + ix;
            out.activity.values[idx] = std::max(0.0, bilinear(act, sx, sy));
            out.mr_prior.values[idx] = bilinear(in.mr_prior, sx, sy);
            const int nxi = static_cast<int>(std::lround(sx));
            const int nyi = static_cast<int>(std::lround(sy));
            if (nxi >= 0 && nyi >= 0 && nxi < grid.nx && nyi < grid.ny)
                out.labels[idx] = in.labels[static_cast<size_t>(nyi) * grid.nx + nxi];
        }
    }
    return out;
}

inline PhantomSample augment(const PhantomSample& in, uint64_t rng_seed) {
    Rng rng(rng_seed);
    return apply_augment(in, draw_augment(rng));
}

inline std::vector<PhantomSample> make_training_set(int n_base, int expansion,
                                                    const ContrastSpec& contrast,
                                                    const GridSpec& grid, uint64_t seed) {
    if (n_base < 1 || expansion < 1)
        throw ConfigError("make_training_set: n_base and expansion must be >= 1");
    std::vector<PhantomSample> out;
    out.reserve(static_cast<size_t>(n_base) * expansion);
    for (int b = 0; b < n_base; ++b) {
        PhantomSample base = make_phantom(mix_seed(seed, static_cast<uint64_t>(b)), contrast, grid);
        if (expansion == 1) {
            out.push_back(base);
            continue;
        }
        for (int e = 0; e < expansion; ++e)
            out.push_back(augment(base, mix_seed(seed, 0x10000u + static_cast<uint64_t>(b) *
                                                              expansion + e)));
    }
    return out;
}

inline void save_phantom(const PhantomSample& s, const std::string& dir) {
    std::filesystem::create_directories(dir);
    save_image(s.activity, dir + "/activity.drim");
    save_image(s.mr_prior, dir + "/mr.drim");
    save_labels(s.labels, s.activity.grid, dir + "/labels.drlb");
}

inline PhantomSample load_phantom(const std::string& dir) {
    PhantomSample s;
    s.activity = load_image(dir + "/activity.drim");
    s.mr_prior = load_image(dir + "/mr.drim");
    GridSpec g;
    s.labels = load_labels(dir + "/labels.drlb", g);
    if (!(g == s.activity.grid)) throw IoError("phantom bundle grids disagree");
    return s;
}

}  // namespace diffrecon
