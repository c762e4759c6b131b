#pragma once

#include <cmath>
#include <vector>

#include "diffrecon/core.hpp"

namespace diffrecon {

// Precomputed variance schedule. Arrays are indexed by t in [0, T] with the
// t = 0 convention alpha_bar_0 = 1 (beta_0 and alpha_0 are unused padding).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[t], t in 1..T
    std::vector<double> alpha;      // 1 - beta[t]
    std::vector<double> alpha_bar;  // prod_{s<=t} alpha[s], alpha_bar[0] = 1
    std::vector<double> beta_bar;   // 1 - alpha_bar[t]

    double sqrt_ab(int t) const { return std::sqrt(alpha_bar[t]); }
    double sqrt_bb(int t) const { return std::sqrt(beta_bar[t]); }

    void check_t(int t, int lo = 0) const {
        if (t < lo || t > T) throw ConfigError("schedule: time step out of range");
    }
};

inline NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T < 1) throw ConfigError("make_schedule: T must be >= 1");
    if (!(beta_start > 0) || !(beta_start <= beta_end) || !(beta_end < 1))
        throw ConfigError("make_schedule: require 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.alpha_bar.assign(T + 1, 1.0);
    s.beta_bar.assign(T + 1, 0.0);
    for (int t = 1; t <= T; ++t) {
        s.beta[t] = T == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
        s.beta_bar[t] = 1.0 - s.alpha_bar[t];
    }
    return s;
}

// x_t = sqrt(alpha_bar_t) x0 + sqrt(beta_bar_t) noise
inline Image forward_diffuse(const Image& x0, int t, const Image& noise,
                             const NoiseSchedule& sched) {
    sched.check_t(t);
    Image out(x0.grid);
    const double a = sched.sqrt_ab(t), b = sched.sqrt_bb(t);
    for (size_t i = 0; i < out.size(); ++i)
        out.values[i] = a * x0.values[i] + b * noise.values[i];
    return out;
}

// Clean-image estimate from the noise prediction:
// x0_hat = (x_t - sqrt(beta_bar_t) eps) / sqrt(alpha_bar_t)
inline Image tweedie_x0(const Image& x_t, int t, const Image& eps_pred,
                        const NoiseSchedule& sched) {
    sched.check_t(t, 1);
    Image out(x_t.grid);
    const double a = sched.sqrt_ab(t), b = sched.sqrt_bb(t);
    for (size_t i = 0; i < out.size(); ++i)
        out.values[i] = (x_t.values[i] - b * eps_pred.values[i]) / a;
    return out;
}

// DDIM noise scale: sigma_t = eta * sqrt(beta_bar_{t-1}/beta_bar_t) *
// sqrt(1 - alpha_bar_t/alpha_bar_{t-1}); eta = 1 recovers the DDPM
// posterior std, eta = 0 is deterministic.
inline double ddim_sigma(int t, double eta, const NoiseSchedule& sched) {
    sched.check_t(t, 1);
    if (sched.beta_bar[t] <= 0) return 0.0;
    return eta * std::sqrt(sched.beta_bar[t - 1] / sched.beta_bar[t]) *
           std::sqrt(1.0 - sched.alpha_bar[t] / sched.alpha_bar[t - 1]);
}

// x_{t-1} = sqrt(ab_{t-1}) x0_hat + sqrt(bb_{t-1} - sigma^2) eps + sigma u
inline Image ddim_step(const Image& x_t, int t, const Image& eps_pred, const Image& x0_hat,
                       double eta, const Image& noise, const NoiseSchedule& sched) {
    sched.check_t(t, 1);
    if (eta < 0 || eta > 1) throw ConfigError("ddim_step: eta must be in [0, 1]");
    (void)x_t;
    const double sig = ddim_sigma(t, eta, sched);
    const double a = sched.sqrt_ab(t - 1);
    const double c = std::sqrt(std::max(sched.beta_bar[t - 1] - sig * sig, 0.0));
    Image out(x0_hat.grid);
    for (size_t i = 0; i < out.size(); ++i)
        out.values[i] = a * x0_hat.values[i] + c * eps_pred.values[i] + sig * noise.values[i];
    return out;
}

// DDPM ancestral step with posterior variance beta_t * bb_{t-1} / bb_t.
inline Image ddpm_step(const Image& x_t, int t, const Image& eps_pred, const Image& noise,
                       const NoiseSchedule& sched) {
    sched.check_t(t, 1);
    const double inv_sa = 1.0 / std::sqrt(sched.alpha[t]);
    const double coef = sched.beta[t] / sched.sqrt_bb(t);
    const double sigma =
        sched.beta_bar[t] > 0
            ? std::sqrt(sched.beta[t] * sched.beta_bar[t - 1] / sched.beta_bar[t])
            : 0.0;
    Image out(x_t.grid);
    for (size_t i = 0; i < out.size(); ++i)
        out.values[i] = inv_sa * (x_t.values[i] - coef * eps_pred.values[i]) +
                        sigma * noise.values[i];
    return out;
}

}  // namespace diffrecon
