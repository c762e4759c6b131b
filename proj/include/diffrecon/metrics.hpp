#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "diffrecon/core.hpp"
#include "diffrecon/phantom.hpp"

namespace diffrecon {

// Peak taken over the ground truth.
inline double psnr(const Image& truth, const Image& est) {
    if (!(truth.grid == est.grid)) throw ConfigError("psnr: grid mismatch");
    const double peak = truth.max();
    if (!(peak > 0)) throw DomainError("psnr: all-zero ground truth");
    double mse = 0.0;
    for (size_t i = 0; i < truth.size(); ++i) {
        const double d = truth.values[i] - est.values[i];
        mse += d * d;
    }
    mse /= static_cast<double>(truth.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

// (GM_t/WM_t - 1) / (GM_p/WM_p - 1) * 100
inline double percent_contrast(const Image& est, const Image& truth, const TissueMasks& rois) {
    const double gm_t = mask_mean(est, rois.gm), wm_t = mask_mean(est, rois.wm);
    const double gm_p = mask_mean(truth, rois.gm), wm_p = mask_mean(truth, rois.wm);
    if (!(wm_t > 0) || !(wm_p > 0)) throw DomainError("percent_contrast: WM mean must be > 0");
    const double denom = gm_p / wm_p - 1.0;
    if (denom == 0.0) throw DomainError("percent_contrast: degenerate truth contrast");
    return (gm_t / wm_t - 1.0) / denom * 100.0;
}

// Population SD over WM divided by its mean.
inline double cv(const Image& est, const TissueMasks& rois) {
    double s = 0.0, s2 = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < rois.wm.size(); ++i)
        if (rois.wm[i]) {
            s += est.values[i];
            s2 += est.values[i] * est.values[i];
            ++n;
        }
    if (n == 0) throw DomainError("cv: empty WM mask");
    const double mean = s / static_cast<double>(n);
    if (!(mean > 0)) throw DomainError("cv: zero WM mean");
    const double var = std::max(s2 / static_cast<double>(n) - mean * mean, 0.0);
    return std::sqrt(var) / mean;
}

// Ratio of ROI means, target over reference.
inline double contrast_recovery(const Image& est, const Image& reference,
                                const std::vector<bool>& roi) {
    const double ref = mask_mean(reference, roi);
    if (!(ref > 0)) throw DomainError("contrast_recovery: zero reference ROI mean");
    return mask_mean(est, roi) / ref;
}

struct EnsembleStats {
    Image mean;
    Image bias;  // mean - truth
    Image std;   // population
    int n = 0;
};

inline EnsembleStats ensemble_stats(const std::vector<Image>& realizations, const Image& truth) {
    if (realizations.size() < 2) throw ConfigError("ensemble_stats: need >= 2 realizations");
    EnsembleStats st;
    st.n = static_cast<int>(realizations.size());
    st.mean = Image(truth.grid);
    st.bias = Image(truth.grid);
    st.std = Image(truth.grid);
    for (const Image& r : realizations) {
        if (!(r.grid == truth.grid)) throw ConfigError("ensemble_stats: grid mismatch");
        for (size_t i = 0; i < r.size(); ++i) st.mean.values[i] += r.values[i];
    }
    for (size_t i = 0; i < st.mean.size(); ++i) st.mean.values[i] /= st.n;
    for (const Image& r : realizations)
        for (size_t i = 0; i < r.size(); ++i) {
            const double d = r.values[i] - st.mean.values[i];
            st.std.values[i] += d * d;
        }
    for (size_t i = 0; i < st.mean.size(); ++i) {
        st.std.values[i] = std::sqrt(st.std.values[i] / st.n);
        st.bias.values[i] = st.mean.values[i] - truth.values[i];
    }
    return st;
}

struct CurvePoint {
    double sweep_value = 0.0;
    double percent_contrast = 0.0;
    double cv = 0.0;
};

// Mean (%contrast, CV) per sweep point over realizations.
inline std::vector<CurvePoint> contrast_cv_curve(
    const std::vector<double>& sweep_values,
    const std::vector<std::vector<Image>>& images_per_point,  // [point][realization]
    const Image& truth, const TissueMasks& rois) {
    if (sweep_values.size() != images_per_point.size())
        throw ConfigError("contrast_cv_curve: sweep/image count mismatch");
    std::vector<CurvePoint> curve;
    for (size_t p = 0; p < sweep_values.size(); ++p) {
        CurvePoint pt;
        pt.sweep_value = sweep_values[p];
        for (const Image& img : images_per_point[p]) {
            pt.percent_contrast += percent_contrast(img, truth, rois);
            pt.cv += cv(img, rois);
        }
        const double n = static_cast<double>(images_per_point[p].size());
        pt.percent_contrast /= n;
        pt.cv /= n;
        curve.push_back(pt);
    }
    return curve;
}

}  // namespace diffrecon
