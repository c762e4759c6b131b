#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "diffrecon/classical.hpp"
#include "diffrecon/core.hpp"
#include "diffrecon/geometry.hpp"
#include "diffrecon/schedule.hpp"
#include "diffrecon/score.hpp"

namespace diffrecon {

struct DdipConfig {
    int N = 2;                // outer rounds per time step
    int M1 = 5;               // EM/closed-form inner iterations
    int M2 = 1;               // network-update steps
    int T_start = 100;        // T'
    double beta = 0.01;       // HQS coupling
    double eta = 0.0;         // DDIM stochasticity
    int lora_rank = 4;        // 0 = full fine-tuning without LoRA
    int mlem_init_iters = 20;
    double ft_lr = 1e-2;  // the adapters only see T_start * N update steps
    double ft_weight_decay = 1e-4;
    double norm_scale = 0.0;  // count-space / network-space; 0 = estimate
    int snapshot_every = 0;   // x0_hat snapshot cadence in time steps

    void validate(const NoiseSchedule& sched) const {
        if (N < 1 || M1 < 1 || M2 < 1 || mlem_init_iters < 1)
            throw ConfigError("DdipConfig: iteration counts must be >= 1");
        if (!(beta > 0)) throw ConfigError("DdipConfig: beta must be > 0");
        if (T_start < 1 || T_start > sched.T)
            throw ConfigError("DdipConfig: T_start must be in [1, T]");
        if (lora_rank < 0) throw ConfigError("DdipConfig: lora_rank must be >= 0");
        if (!(ft_lr >= 0)) throw ConfigError("DdipConfig: ft_lr must be >= 0");
    }
};

// Closed-form minimizer of the per-voxel penalized EM surrogate:
// beta x^2 + (S - beta a) x - S x_em = 0, positive root. Always >= 0 for
// non-negative inputs; voxels without sensitivity stay at 0.
inline double hqs_closed_form_voxel(double anchor, double s_over_beta, double x_em) {
    if (s_over_beta <= 0.0) return 0.0;
    const double d = anchor - s_over_beta;
    return 0.5 * d + 0.5 * std::sqrt(d * d + 4.0 * x_em * s_over_beta);
}

// True penalized objective -L(y|x) + (beta/2)||x - anchor||^2, used by the
// monotonicity checks around the surrogate solve.
inline double hqs_objective(const Sinogram& y, const Sinogram& b, const Projector& A,
                            const Image& x, const Image& anchor, double beta) {
    double pen = 0.0;
    for (size_t j = 0; j < x.size(); ++j) {
        const double d = x.values[j] - anchor.values[j];
        pen += d * d;
    }
    return -poisson_log_likelihood(y, x, b, A) + 0.5 * beta * pen;
}

// M1 chained rounds of (MLEM sub-update, closed-form voxel solve) against a
// fixed anchor. Everything in count space.
inline Image hqs_image_update(const Image& x_anchor, const Image& x_start, const Sinogram& y,
                              const Sinogram& b, const Image& S, const Projector& A,
                              double beta, int M1) {
    if (!(beta > 0)) throw ConfigError("hqs_image_update: beta must be > 0");
    Image x = x_start;
    for (int m = 0; m < M1; ++m) {
        const Image x_em = mlem_update(x, y, b, S, A);
        for (size_t j = 0; j < x.size(); ++j)
            x.values[j] = hqs_closed_form_voxel(x_anchor.values[j], S.values[j] / beta,
                                                x_em.values[j]);
    }
    return x;
}

struct DdipDiagnostics {
    struct Record {
        int t = 0;
        int n = 0;
        double loglik = 0.0;
        double hqs_objective = 0.0;
        double finetune_loss = 0.0;
    };
    std::vector<Record> records;
    std::vector<std::pair<int, Image>> snapshots;  // (t, x0_hat in count space)
    double norm_scale = 1.0;
    Image x_em_init;
};

// Count-to-network normalization when the simulation scale is not handed
// down: treat the 95th percentile of the MLEM initializer as unit activity.
inline double estimate_norm_scale(const Image& x) {
    std::vector<double> v = x.values;
    std::sort(v.begin(), v.end());
    const double p95 = v[static_cast<size_t>(0.95 * (v.size() - 1))];
    return p95 > 0 ? p95 : 1.0;
}

// MLEM warm start followed by forward diffusion to t = T'.
// Returns x_{T'} in network space and the MLEM image in count space.
inline std::pair<Image, Image> init_x_Tprime(const Sinogram& y, const Sinogram& b,
                                             const Projector& A, const NoiseSchedule& sched,
                                             const DdipConfig& cfg, double& scale_io, Rng& rng) {
    Image x_em = mlem(y, b, cfg.mlem_init_iters, A);
    if (!(scale_io > 0)) scale_io = estimate_norm_scale(x_em);
    Image x0n(x_em.grid);
    for (size_t i = 0; i < x0n.size(); ++i) x0n.values[i] = x_em.values[i] / scale_io;
    Image noise(x0n.grid);
    for (double& v : noise.values) v = rng.normal();
    return {forward_diffuse(x0n, cfg.T_start, noise, sched), x_em};
}

// One fine-tuning call: M2 optimizer steps on || x_target - x0_hat ||^2 with
// gradients flowing through Tweedie. LoRA parameters only when adapters are
// attached, otherwise the full network. Returns the last loss value.
inline double fine_tune_step(ConvScoreNet& net, LoraAdapters& adapters, const Image& x_target,
                             const Image& x_t, int t, const Image& g, int M2, AdamW& opt,
                             const NoiseSchedule& sched) {
    const size_t npix = x_t.size();
    const double sa = sched.sqrt_ab(t), sb = sched.sqrt_bb(t);
    double loss = 0.0;
    for (int step = 0; step < M2; ++step) {
        ConvScoreNet::Cache c;
        const LoraAdapters* ad = adapters.attached() ? &adapters : nullptr;
        net.forward(x_t, t, g, ad, c);
        nn::MatrixXd dout(1, static_cast<int>(npix));
        loss = 0.0;
        for (size_t i = 0; i < npix; ++i) {
            const double eps = c.out(0, static_cast<int>(i));
            const double x0 = (x_t.values[i] - sb * eps) / sa;
            const double r = x0 - x_target.values[i];
            loss += r * r;
            // dL/deps = 2 r * d x0/d eps = -2 r sb/sa
            dout(0, static_cast<int>(i)) = -2.0 * r * sb / sa;
        }
        if (!std::isfinite(loss))
            throw DomainError("fine_tune_step: NaN loss at t=" + std::to_string(t) +
                              " step=" + std::to_string(step));
        if (opt.lr() == 0.0) return loss;
        if (adapters.attached()) {
            LoraAdapters grads = ConvScoreNet::zeros_like(adapters);
            net.backward(c, dout, ad, nullptr, &grads);
            opt.step(param_refs(adapters), param_refs(grads));
        } else {
            ConvScoreNet grads = ConvScoreNet::zeros_like(net);
            net.backward(c, dout, nullptr, &grads, nullptr);
            opt.step(param_refs(net), param_refs(grads));
        }
    }
    return loss;
}

// The full reconstruction loop: MLEM-seeded start at T', then per time step
// N rounds of { Tweedie anchor -> M1 HQS image steps -> M2 fine-tune steps }
// followed by a DDIM step, with adapters carried across t.
inline Image ddip_reconstruct(const Sinogram& y, const Sinogram& b, const Image& g,
                              const ConvScoreNet& pretrained, const Projector& A,
                              const NoiseSchedule& sched, const DdipConfig& cfg, Rng& rng,
                              DdipDiagnostics* diag = nullptr) {
    cfg.validate(sched);
    const Image S = A.sensitivity();
    double scale = cfg.norm_scale;
    auto [x_t, x_em_init] = init_x_Tprime(y, b, A, sched, cfg, scale, rng);
    if (diag) {
        diag->norm_scale = scale;
        diag->x_em_init = x_em_init;
    }

    // local copy: full fine-tuning (rank 0) must not touch the caller's net
    ConvScoreNet net = pretrained;
    LoraAdapters adapters = net.make_adapters(cfg.lora_rank, rng.integer());
    AdamW opt(cfg.ft_lr, cfg.ft_weight_decay);
    const LoraAdapters* ad = adapters.attached() ? &adapters : nullptr;

    Image x0_hat_net(g.grid);
    for (int t = cfg.T_start; t >= 1; --t) {
        for (int n = 1; n <= cfg.N; ++n) {
            const Image eps = net.predict(x_t, t, g, ad);
            Image anchor = tweedie_x0(x_t, t, eps, sched);
            anchor.clamp_nonneg();
            Image anchor_cnt(anchor.grid);
            for (size_t i = 0; i < anchor.size(); ++i)
                anchor_cnt.values[i] = anchor.values[i] * scale;
            // zero is absorbing for the multiplicative EM sub-update, and at
            // large t the clamped anchor legitimately contains zeros: start
            // the chain from a floored copy (the anchor itself stays exact)
            Image x_start = anchor_cnt;
            for (double& v : x_start.values) v = std::max(v, 1e-6 * scale);
            const Image x_data =
                hqs_image_update(anchor_cnt, x_start, y, b, S, A, cfg.beta, cfg.M1);
            Image x_target(x_data.grid);
            for (size_t i = 0; i < x_target.size(); ++i)
                x_target.values[i] = x_data.values[i] / scale;
            const double ft_loss =
                fine_tune_step(net, adapters, x_target, x_t, t, g, cfg.M2, opt, sched);
            if (diag) {
                DdipDiagnostics::Record rec;
                rec.t = t;
                rec.n = n;
                rec.loglik = poisson_log_likelihood(y, x_data, b, A);
                rec.hqs_objective = hqs_objective(y, b, A, x_data, anchor_cnt, cfg.beta);
                rec.finetune_loss = ft_loss;
                diag->records.push_back(rec);
            }
        }
        const Image eps = net.predict(x_t, t, g, ad);
        x0_hat_net = tweedie_x0(x_t, t, eps, sched);
        if (diag && cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0) {
            Image snap(x0_hat_net.grid);
            for (size_t i = 0; i < snap.size(); ++i)
                snap.values[i] = std::max(x0_hat_net.values[i], 0.0) * scale;
            diag->snapshots.emplace_back(t, snap);
        }
        if (t > 1) {
            Image noise(x_t.grid);
            for (double& v : noise.values) v = rng.normal();
            x_t = ddim_step(x_t, t, eps, x0_hat_net, cfg.eta, noise, sched);
        }
    }

    Image out(x0_hat_net.grid);
    for (size_t i = 0; i < out.size(); ++i)
        out.values[i] = std::max(x0_hat_net.values[i], 0.0) * scale;
    return out;
}

}  // namespace diffrecon
