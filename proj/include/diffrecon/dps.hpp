#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "diffrecon/classical.hpp"
#include "diffrecon/core.hpp"
#include "diffrecon/ddip.hpp"
#include "diffrecon/geometry.hpp"
#include "diffrecon/schedule.hpp"
#include "diffrecon/score.hpp"

namespace diffrecon {

struct DpsConfig {
    double lambda_step = 1.0;
    double eta = 1.0;
    int T_start = 100;
    int mlem_init_iters = 20;
    double norm_scale = 0.0;      // 0 = estimate from the MLEM initializer
    bool exact_jacobian = false;  // pull the gradient through the network

    void validate(const NoiseSchedule& sched) const {
        if (!(lambda_step >= 0)) throw ConfigError("DpsConfig: lambda_step must be >= 0");
        if (T_start < 1 || T_start > sched.T)
            throw ConfigError("DpsConfig: T_start must be in [1, T]");
    }
};

struct DpsDiagnostics {
    int excluded_bins = 0;  // zero-mean bins with positive counts
    double norm_scale = 1.0;
};

// Preconditioned Poisson likelihood direction
// (x0_hat / S) .* (A^T (y / (A x0_hat + b)) - S),
// with the ratio evaluated in count space (x0_hat_cnt = scale * x0_hat).
inline Image dps_likelihood_grad(const Image& x0_hat, double scale, const Sinogram& y,
                                 const Sinogram& b, const Image& S, const Projector& A,
                                 DpsDiagnostics* diag = nullptr) {
    Image x_cnt(x0_hat.grid);
    for (size_t i = 0; i < x_cnt.size(); ++i)
        x_cnt.values[i] = std::max(x0_hat.values[i], 0.0) * scale;
    Sinogram fp = A.forward(x_cnt);
    Sinogram ratio(fp.proj);
    for (size_t i = 0; i < fp.size(); ++i) {
        const double denom = fp.values[i] + b.values[i];
        if (denom <= 0.0) {
            ratio.values[i] = 0.0;
            if (y.values[i] > 0.0 && diag) ++diag->excluded_bins;
        } else {
            ratio.values[i] = y.values[i] / denom;
        }
    }
    const Image bp = A.back(ratio);
    Image grad(x0_hat.grid);
    for (size_t j = 0; j < grad.size(); ++j) {
        const double xs = std::max(x0_hat.values[j], 0.0);
        grad.values[j] =
            S.values[j] > 0 ? xs / S.values[j] * (bp.values[j] - S.values[j]) : 0.0;
    }
    return grad;
}

// Diffusion posterior sampling baseline: sampling steps with a scaled
// likelihood-gradient correction, no network fine-tuning. `net_for_jvp`
// enables the exact Jacobian-vector product through the network and must
// be the network behind `pred` when cfg.exact_jacobian is set.
inline Image dps_reconstruct(const Sinogram& y, const Sinogram& b, const Image& g,
                             const NoisePredictor& pred, const Projector& A,
                             const NoiseSchedule& sched, const DpsConfig& cfg, Rng& rng,
                             DpsDiagnostics* diag = nullptr,
                             const ConvScoreNet* net_for_jvp = nullptr) {
    cfg.validate(sched);
    if (cfg.exact_jacobian && !net_for_jvp)
        throw ConfigError("dps_reconstruct: exact_jacobian requires the network");
    const Image S = A.sensitivity();
    double scale = cfg.norm_scale;
    DdipConfig init_cfg;
    init_cfg.T_start = cfg.T_start;
    init_cfg.mlem_init_iters = cfg.mlem_init_iters;
    auto [x_t, x_em_init] = init_x_Tprime(y, b, A, sched, init_cfg, scale, rng);
    (void)x_em_init;
    if (diag) diag->norm_scale = scale;

    Image x0_hat(g.grid);
    for (int t = cfg.T_start; t >= 1; --t) {
        ConvScoreNet::Cache cache;
        Image eps;
        if (cfg.exact_jacobian) {
            net_for_jvp->forward(x_t, t, g, nullptr, cache);
            eps = Image(x_t.grid);
            for (size_t i = 0; i < eps.size(); ++i)
                eps.values[i] = cache.out(0, static_cast<int>(i));
        } else {
            eps = pred.predict(x_t, t, g);
        }
        x0_hat = tweedie_x0(x_t, t, eps, sched);
        for (double v : x0_hat.values)
            if (!std::isfinite(v))
                throw DomainError("dps_reconstruct: NaN at t=" + std::to_string(t));

        if (t > 1) {
            Image noise(x_t.grid);
            for (double& v : noise.values) v = rng.normal();
            Image x_prev = ddim_step(x_t, t, eps, x0_hat, cfg.eta, noise, sched);
            if (cfg.lambda_step > 0) {
                Image grad = dps_likelihood_grad(x0_hat, scale, y, b, S, A, diag);
                if (cfg.exact_jacobian) {
                    // VJP through Tweedie: d x0/d x_t = (I - sqrt(bb) J_eps) / sqrt(ab)
                    nn::MatrixXd dout(1, static_cast<int>(grad.size()));
                    for (size_t i = 0; i < grad.size(); ++i)
                        dout(0, static_cast<int>(i)) = grad.values[i];
                    std::vector<double> dx;
                    net_for_jvp->backward(cache, dout, nullptr, nullptr, nullptr, &dx);
                    const double sa = sched.sqrt_ab(t), sb = sched.sqrt_bb(t);
                    for (size_t i = 0; i < grad.size(); ++i)
                        grad.values[i] = (grad.values[i] - sb * dx[i]) / sa;
                }
                for (size_t i = 0; i < x_prev.size(); ++i)
                    x_prev.values[i] += cfg.lambda_step * grad.values[i];
            }
            x_t = x_prev;
        }
    }

    Image out(x0_hat.grid);
    for (size_t i = 0; i < out.size(); ++i)
        out.values[i] = std::max(x0_hat.values[i], 0.0) * scale;
    return out;
}

}  // namespace diffrecon
