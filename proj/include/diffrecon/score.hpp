#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "diffrecon/core.hpp"
#include "diffrecon/io.hpp"
#include "diffrecon/rng.hpp"
#include "diffrecon/schedule.hpp"

namespace diffrecon {

// Abstract noise predictor eps(x_t, t, g).
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual Image predict(const Image& x_t, int t, const Image& g) const = 0;
};

// Exact DSM minimizer for data ~ N(mean, var I); test double with a
// closed-form score.
class GaussianOracle : public NoisePredictor {
public:
    GaussianOracle(Image mean, double var, const NoiseSchedule& sched)
        : mean_(std::move(mean)), var_(var), sched_(&sched) {
        if (!(var > 0)) throw ConfigError("GaussianOracle: var must be > 0");
    }

    Image predict(const Image& x_t, int t, const Image& /*g*/) const override {
        sched_->check_t(t, 1);
        const double ab = sched_->alpha_bar[t], bb = sched_->beta_bar[t];
        const double denom = ab * var_ + bb;
        Image out(x_t.grid);
        for (size_t i = 0; i < out.size(); ++i)
            out.values[i] = std::sqrt(bb) *
                            (x_t.values[i] - std::sqrt(ab) * mean_.values[i]) / denom;
        return out;
    }

    // Analytic posterior mean E[x0 | x_t] for cross-checks.
    Image posterior_mean(const Image& x_t, int t) const {
        const double ab = sched_->alpha_bar[t], bb = sched_->beta_bar[t];
        const double denom = ab * var_ + bb;
        Image out(x_t.grid);
        for (size_t i = 0; i < out.size(); ++i)
            out.values[i] =
                (std::sqrt(ab) * var_ * x_t.values[i] + bb * mean_.values[i]) / denom;
        return out;
    }

private:
    Image mean_;
    double var_;
    const NoiseSchedule* sched_;
};

// ---- small conditional conv denoiser ----

namespace nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

struct Conv3x3 {
    int in_ch = 0, out_ch = 0;
    MatrixXd W;  // out_ch x (in_ch*9)
    VectorXd b;  // out_ch

    void init(int in, int out, Rng& rng, double scale = 1.0) {
        in_ch = in;
        out_ch = out;
        W.resize(out, in * 9);
        b = VectorXd::Zero(out);
        const double std_dev = scale * std::sqrt(2.0 / (in * 9));
        for (int i = 0; i < W.rows(); ++i)
            for (int j = 0; j < W.cols(); ++j) W(i, j) = std_dev * rng.normal();
    }

    void zero_like(const Conv3x3& o) {
        in_ch = o.in_ch;
        out_ch = o.out_ch;
        W = MatrixXd::Zero(o.W.rows(), o.W.cols());
        b = VectorXd::Zero(o.b.size());
    }
};

// Zero-padded 3x3 im2col: out is (in_ch*9) x npix.
inline void im2col(const MatrixXd& feat, int nx, int ny, MatrixXd& out) {
    const int ch = static_cast<int>(feat.rows());
    const int npix = nx * ny;
    out.resize(ch * 9, npix);
    out.setZero();
    for (int c = 0; c < ch; ++c) {
        for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
                const int krow = c * 9 + (ky + 1) * 3 + (kx + 1);
                for (int y = 0; y < ny; ++y) {
                    const int sy = y + ky;
                    if (sy < 0 || sy >= ny) continue;
                    const int x0 = std::max(0, -kx), x1 = std::min(nx, nx - kx);
                    for (int x = x0; x < x1; ++x)
                        out(krow, y * nx + x) = feat(c, sy * nx + (x + kx));
                }
            }
        }
    }
}

// Adjoint of im2col; accumulates into feat_grad (must be pre-sized/zeroed).
inline void col2im(const MatrixXd& cols, int nx, int ny, MatrixXd& feat_grad) {
    const int ch = static_cast<int>(feat_grad.rows());
    for (int c = 0; c < ch; ++c) {
        for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
                const int krow = c * 9 + (ky + 1) * 3 + (kx + 1);
                for (int y = 0; y < ny; ++y) {
                    const int sy = y + ky;
                    if (sy < 0 || sy >= ny) continue;
                    const int x0 = std::max(0, -kx), x1 = std::min(nx, nx - kx);
                    for (int x = x0; x < x1; ++x)
                        feat_grad(c, sy * nx + (x + kx)) += cols(krow, y * nx + x);
                }
            }
        }
    }
}

}  // namespace nn

// Low-rank factors per adapted conv layer: W_eff = W0 + U V.
struct LoraAdapters {
    int rank = 0;
    std::vector<nn::MatrixXd> U;  // out_ch x r
    std::vector<nn::MatrixXd> V;  // r x (in_ch*9)

    bool attached() const { return rank > 0 && !U.empty(); }
};

// Conditional conv denoiser: channels 2 -> 32 -> 32 -> 32 -> 32 -> 1 with a
// skip from the layer-1 activation into the layer-3 input, SiLU activations,
// and a sinusoidal time embedding mapped through a 2-layer FC block whose
// output is added per-channel after layers 1 and 3.
class ConvScoreNet {
public:
    static constexpr int kHidden = 32;
    static constexpr int kTembDim = 32;
    static constexpr int kNumConv = 5;

    std::array<nn::Conv3x3, kNumConv> conv;
    nn::MatrixXd fc1_W;  // 64 x 32
    nn::VectorXd fc1_b;
    nn::MatrixXd fc2_W;  // 64 x 64
    nn::VectorXd fc2_b;

    ConvScoreNet() = default;

    static ConvScoreNet create(uint64_t seed) {
        ConvScoreNet net;
        Rng rng(seed);
        net.conv[0].init(2, kHidden, rng);
        net.conv[1].init(kHidden, kHidden, rng);
        net.conv[2].init(kHidden, kHidden, rng);
        net.conv[3].init(kHidden, kHidden, rng);
        net.conv[4].init(kHidden, 1, rng, 0.1);
        net.fc1_W.resize(2 * kHidden, kTembDim);
        net.fc2_W.resize(2 * kHidden, 2 * kHidden);
        auto fill = [&](nn::MatrixXd& m, double std_dev) {
            for (int i = 0; i < m.rows(); ++i)
                for (int j = 0; j < m.cols(); ++j) m(i, j) = std_dev * rng.normal();
        };
        fill(net.fc1_W, std::sqrt(2.0 / kTembDim));
        fill(net.fc2_W, std::sqrt(2.0 / (2 * kHidden)));
        net.fc1_b = nn::VectorXd::Zero(2 * kHidden);
        net.fc2_b = nn::VectorXd::Zero(2 * kHidden);
        return net;
    }

    static ConvScoreNet zeros_like(const ConvScoreNet& o) {
        ConvScoreNet g;
        for (int l = 0; l < kNumConv; ++l) g.conv[l].zero_like(o.conv[l]);
        g.fc1_W = nn::MatrixXd::Zero(o.fc1_W.rows(), o.fc1_W.cols());
        g.fc2_W = nn::MatrixXd::Zero(o.fc2_W.rows(), o.fc2_W.cols());
        g.fc1_b = nn::VectorXd::Zero(o.fc1_b.size());
        g.fc2_b = nn::VectorXd::Zero(o.fc2_b.size());
        return g;
    }

    LoraAdapters make_adapters(int r, uint64_t seed) const {
        LoraAdapters a;
        a.rank = r;
        if (r == 0) return a;
        Rng rng(seed);
        for (int l = 0; l < kNumConv; ++l) {
            const int d = conv[l].out_ch, k = conv[l].in_ch * 9;
            nn::MatrixXd U(d, r), V = nn::MatrixXd::Zero(r, k);
            const double std_dev = 1.0 / std::sqrt(static_cast<double>(k));
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < r; ++j) U(i, j) = std_dev * rng.normal();
            a.U.push_back(std::move(U));
            a.V.push_back(std::move(V));
        }
        return a;
    }

    static LoraAdapters zeros_like(const LoraAdapters& o) {
        LoraAdapters g;
        g.rank = o.rank;
        for (size_t l = 0; l < o.U.size(); ++l) {
            g.U.push_back(nn::MatrixXd::Zero(o.U[l].rows(), o.U[l].cols()));
            g.V.push_back(nn::MatrixXd::Zero(o.V[l].rows(), o.V[l].cols()));
        }
        return g;
    }

    // Sinusoidal features of the raw time index.
    static nn::VectorXd time_features(int t) {
        nn::VectorXd e(kTembDim);
        const int half = kTembDim / 2;
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / (half - 1));
            e[i] = std::sin(t * freq);
            e[half + i] = std::cos(t * freq);
        }
        return e;
    }

    struct Cache {
        int nx = 0, ny = 0, t = 0;
        nn::MatrixXd in;                      // 2 x npix
        std::array<nn::MatrixXd, kNumConv> P; // im2col inputs
        nn::MatrixXd h1, a1, h2, a2, s3, h3, a3, h4, a4, out;
        nn::VectorXd e, fc_pre, fc_h, fc_o;
    };

    // Forward pass; fills the cache for a subsequent backward().
    void forward(const Image& x_t, int t, const Image& g, const LoraAdapters* adapters,
                 Cache& c) const {
        if (!(x_t.grid == g.grid))
            throw ConfigError("ConvScoreNet: x_t and g must share a grid");
        const int nx = x_t.grid.nx, ny = x_t.grid.ny, npix = nx * ny;
        c.nx = nx;
        c.ny = ny;
        c.t = t;
        c.in.resize(2, npix);
        for (int i = 0; i < npix; ++i) {
            c.in(0, i) = x_t.values[i];
            c.in(1, i) = g.values[i];
        }

        c.e = time_features(t);
        c.fc_pre = fc1_W * c.e + fc1_b;
        c.fc_h = c.fc_pre.unaryExpr([](double v) { return nn::silu(v); });
        c.fc_o = fc2_W * c.fc_h + fc2_b;

        auto eff_W = [&](int l) -> nn::MatrixXd {
            if (adapters && adapters->attached()) return conv[l].W + adapters->U[l] * adapters->V[l];
            return conv[l].W;
        };

        nn::im2col(c.in, nx, ny, c.P[0]);
        c.h1 = eff_W(0) * c.P[0];
        c.h1.colwise() += conv[0].b;
        for (int ch = 0; ch < kHidden; ++ch) c.h1.row(ch).array() += c.fc_o[ch];
        c.a1 = c.h1.unaryExpr([](double v) { return nn::silu(v); });

        nn::im2col(c.a1, nx, ny, c.P[1]);
        c.h2 = eff_W(1) * c.P[1];
        c.h2.colwise() += conv[1].b;
        c.a2 = c.h2.unaryExpr([](double v) { return nn::silu(v); });

        c.s3 = c.a2 + c.a1;  // skip from layer 1
        nn::im2col(c.s3, nx, ny, c.P[2]);
        c.h3 = eff_W(2) * c.P[2];
        c.h3.colwise() += conv[2].b;
        for (int ch = 0; ch < kHidden; ++ch) c.h3.row(ch).array() += c.fc_o[kHidden + ch];
        c.a3 = c.h3.unaryExpr([](double v) { return nn::silu(v); });

        nn::im2col(c.a3, nx, ny, c.P[3]);
        c.h4 = eff_W(3) * c.P[3];
        c.h4.colwise() += conv[3].b;
        c.a4 = c.h4.unaryExpr([](double v) { return nn::silu(v); });

        nn::im2col(c.a4, nx, ny, c.P[4]);
        c.out = eff_W(4) * c.P[4];
        c.out.colwise() += conv[4].b;
    }

    Image predict(const Image& x_t, int t, const Image& g,
                  const LoraAdapters* adapters = nullptr) const {
        Cache c;
        forward(x_t, t, g, adapters, c);
        Image out(x_t.grid);
        for (size_t i = 0; i < out.size(); ++i) out.values[i] = c.out(0, static_cast<int>(i));
        return out;
    }

    // Reverse pass from d(loss)/d(out). Accumulates into whichever of
    // base_grads / lora_grads is non-null; optionally returns the gradient
    // with respect to the x_t input channel.
    void backward(const Cache& c, const nn::MatrixXd& dout, const LoraAdapters* adapters,
                  ConvScoreNet* base_grads, LoraAdapters* lora_grads,
                  std::vector<double>* dx_t = nullptr) const {
        const int nx = c.nx, ny = c.ny;
        auto eff_W = [&](int l) -> nn::MatrixXd {
            if (adapters && adapters->attached()) return conv[l].W + adapters->U[l] * adapters->V[l];
            return conv[l].W;
        };
        nn::VectorXd dfc_o = nn::VectorXd::Zero(2 * kHidden);

        auto conv_backward = [&](int l, const nn::MatrixXd& dY, nn::MatrixXd* dX_prev,
                                 int prev_ch) {
            if (base_grads) {
                base_grads->conv[l].W.noalias() += dY * c.P[l].transpose();
                base_grads->conv[l].b += dY.rowwise().sum();
            }
            if (lora_grads && adapters && adapters->attached()) {
                const nn::MatrixXd dW = dY * c.P[l].transpose();
                lora_grads->U[l].noalias() += dW * adapters->V[l].transpose();
                lora_grads->V[l].noalias() += adapters->U[l].transpose() * dW;
            }
            if (dX_prev) {
                const nn::MatrixXd dP = eff_W(l).transpose() * dY;
                *dX_prev = nn::MatrixXd::Zero(prev_ch, nx * ny);
                nn::col2im(dP, nx, ny, *dX_prev);
            }
        };

        nn::MatrixXd da4;
        conv_backward(4, dout, &da4, kHidden);
        nn::MatrixXd dh4 = da4.cwiseProduct(c.h4.unaryExpr([](double v) { return nn::silu_grad(v); }));

        nn::MatrixXd da3;
        conv_backward(3, dh4, &da3, kHidden);
        nn::MatrixXd dh3 = da3.cwiseProduct(c.h3.unaryExpr([](double v) { return nn::silu_grad(v); }));
        for (int ch = 0; ch < kHidden; ++ch) dfc_o[kHidden + ch] += dh3.row(ch).sum();

        nn::MatrixXd ds3;
        conv_backward(2, dh3, &ds3, kHidden);
        // s3 = a2 + a1
        nn::MatrixXd dh2 = ds3.cwiseProduct(c.h2.unaryExpr([](double v) { return nn::silu_grad(v); }));

        nn::MatrixXd da1_from2;
        conv_backward(1, dh2, &da1_from2, kHidden);
        nn::MatrixXd da1 = da1_from2 + ds3;  // skip path
        nn::MatrixXd dh1 = da1.cwiseProduct(c.h1.unaryExpr([](double v) { return nn::silu_grad(v); }));
        for (int ch = 0; ch < kHidden; ++ch) dfc_o[ch] += dh1.row(ch).sum();

        if (dx_t) {
            nn::MatrixXd din;
            conv_backward(0, dh1, &din, 2);
            dx_t->assign(static_cast<size_t>(nx) * ny, 0.0);
            for (int i = 0; i < nx * ny; ++i) (*dx_t)[static_cast<size_t>(i)] = din(0, i);
        } else {
            conv_backward(0, dh1, nullptr, 2);
        }

        if (base_grads) {
            // time-embedding FC block
            base_grads->fc2_W.noalias() += dfc_o * c.fc_h.transpose();
            base_grads->fc2_b += dfc_o;
            nn::VectorXd dfc_h = fc2_W.transpose() * dfc_o;
            nn::VectorXd dfc_pre =
                dfc_h.cwiseProduct(c.fc_pre.unaryExpr([](double v) { return nn::silu_grad(v); }));
            base_grads->fc1_W.noalias() += dfc_pre * c.e.transpose();
            base_grads->fc1_b += dfc_pre;
        }
    }
};

inline long lora_param_count(const ConvScoreNet& net, int r) {
    if (r < 0) throw ConfigError("lora_param_count: r must be >= 0");
    long n = 0;
    for (const auto& c : net.conv) n += static_cast<long>(r) * (c.out_ch + c.in_ch * 9);
    return n;
}

// Wraps net (+ optional adapters) behind the NoisePredictor interface.
class NetPredictor : public NoisePredictor {
public:
    NetPredictor(const ConvScoreNet& net, const LoraAdapters* adapters = nullptr)
        : net_(&net), adapters_(adapters) {}
    Image predict(const Image& x_t, int t, const Image& g) const override {
        return net_->predict(x_t, t, g, adapters_);
    }

private:
    const ConvScoreNet* net_;
    const LoraAdapters* adapters_;
};

// ---- parameter flattening + AdamW ----

struct ParamRef {
    double* p;
    size_t n;
};

inline std::vector<ParamRef> param_refs(ConvScoreNet& net) {
    std::vector<ParamRef> r;
    for (auto& c : net.conv) {
        r.push_back({c.W.data(), static_cast<size_t>(c.W.size())});
        r.push_back({c.b.data(), static_cast<size_t>(c.b.size())});
    }
    r.push_back({net.fc1_W.data(), static_cast<size_t>(net.fc1_W.size())});
    r.push_back({net.fc1_b.data(), static_cast<size_t>(net.fc1_b.size())});
    r.push_back({net.fc2_W.data(), static_cast<size_t>(net.fc2_W.size())});
    r.push_back({net.fc2_b.data(), static_cast<size_t>(net.fc2_b.size())});
    return r;
}

inline std::vector<ParamRef> param_refs(LoraAdapters& a) {
    std::vector<ParamRef> r;
    for (size_t l = 0; l < a.U.size(); ++l) {
        r.push_back({a.U[l].data(), static_cast<size_t>(a.U[l].size())});
        r.push_back({a.V[l].data(), static_cast<size_t>(a.V[l].size())});
    }
    return r;
}

// Adam with decoupled weight decay.
class AdamW {
public:
    AdamW(double lr, double weight_decay = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads) {
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.n, 0.0);
                v_.emplace_back(p.n, 0.0);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (size_t k = 0; k < params.size(); ++k) {
            double* p = params[k].p;
            const double* g = grads[k].p;
            for (size_t i = 0; i < params[k].n; ++i) {
                m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g[i];
                v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g[i] * g[i];
                const double mhat = m_[k][i] / bc1;
                const double vhat = v_[k][i] / bc2;
                p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[i]);
            }
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, wd_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---- denoising score matching ----

// Per-image sum of squared residuals between the drawn noise and the
// prediction, averaged over the batch.
inline double dsm_loss(const NoisePredictor& pred,
                       const std::vector<std::pair<Image, Image>>& batch,
                       const std::vector<int>& ts, const std::vector<Image>& noises,
                       const NoiseSchedule& sched) {
    if (batch.empty()) throw ConfigError("dsm_loss: empty batch");
    double loss = 0.0;
    for (size_t k = 0; k < batch.size(); ++k) {
        const Image x_t = forward_diffuse(batch[k].first, ts[k], noises[k], sched);
        const Image eps = pred.predict(x_t, ts[k], batch[k].second);
        for (size_t i = 0; i < eps.size(); ++i) {
            const double d = noises[k].values[i] - eps.values[i];
            loss += d * d;
        }
    }
    return loss / static_cast<double>(batch.size());
}

struct TrainConfig {
    int epochs = 200;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    uint64_t rng_seed = 0;

    void validate() const {
        if (epochs < 1 || batch_size < 1 || !(learning_rate > 0) || weight_decay < 0)
            throw ConfigError("TrainConfig: values must be positive");
    }
};

// DSM pretraining of the base network. Returns the per-epoch mean per-pixel
// loss curve through the optional callback.
inline void train_score(ConvScoreNet& net,
                        const std::vector<std::pair<Image, Image>>& dataset,
                        const TrainConfig& cfg, const NoiseSchedule& sched,
                        const std::function<void(int, double)>& on_epoch = nullptr) {
    cfg.validate();
    if (dataset.empty()) throw ConfigError("train_score: empty dataset");
    Rng rng(mix_seed(cfg.rng_seed, 0x7261u));
    AdamW opt(cfg.learning_rate, cfg.weight_decay);
    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    const size_t npix = dataset[0].first.size();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with our own draws for reproducibility
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double epoch_loss = 0.0;
        size_t seen = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            ConvScoreNet grads = ConvScoreNet::zeros_like(net);
            double batch_loss = 0.0;
            for (size_t k = start; k < end; ++k) {
                const auto& [x0, g] = dataset[order[k]];
                const int t = 1 + static_cast<int>(rng.index(static_cast<size_t>(sched.T)));
                Image noise(x0.grid);
                for (double& v : noise.values) v = rng.normal();
                const Image x_t = forward_diffuse(x0, t, noise, sched);
                ConvScoreNet::Cache c;
                net.forward(x_t, t, g, nullptr, c);
                nn::MatrixXd dout(1, static_cast<int>(npix));
                for (size_t i = 0; i < npix; ++i) {
                    const double r = c.out(0, static_cast<int>(i)) - noise.values[i];
                    batch_loss += r * r;
                    dout(0, static_cast<int>(i)) = 2.0 * r;
                }
                net.backward(c, dout, nullptr, &grads, nullptr);
            }
            const double scale = 1.0 / (static_cast<double>(end - start) * npix);
            auto grefs = param_refs(grads);
            for (auto& gr : grefs)
                for (size_t i = 0; i < gr.n; ++i) gr.p[i] *= scale;
            if (!std::isfinite(batch_loss))
                throw DomainError("train_score: loss diverged (NaN/inf) at epoch " +
                                  std::to_string(epoch));
            opt.step(param_refs(net), grefs);
            epoch_loss += batch_loss;
            seen += (end - start);
        }
        if (on_epoch) on_epoch(epoch + 1, epoch_loss / (static_cast<double>(seen) * npix));
    }
}

// ---- checkpoint formats ----

// "DRNN": architecture descriptor then f32 parameter blobs.
inline void save_checkpoint(const ConvScoreNet& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    detail::write_bytes(os, "DRNN", 4);
    detail::write_pod<uint32_t>(os, 1u);
    detail::write_pod<uint32_t>(os, ConvScoreNet::kNumConv);
    for (const auto& c : net.conv) {
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(c.in_ch));
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(c.out_ch));
    }
    detail::write_pod<uint32_t>(os, ConvScoreNet::kTembDim);
    auto dump = [&](const double* p, size_t n) {
        for (size_t i = 0; i < n; ++i) detail::write_pod<float>(os, static_cast<float>(p[i]));
    };
    for (const auto& pr : param_refs(const_cast<ConvScoreNet&>(net))) dump(pr.p, pr.n);
}

inline ConvScoreNet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    detail::read_bytes(is, magic, 4);
    if (std::memcmp(magic, "DRNN", 4) != 0) throw IoError("not a DRNN checkpoint: " + path);
    if (detail::read_pod<uint32_t>(is) != 1) throw IoError("unsupported checkpoint version");
    const uint32_t n_conv = detail::read_pod<uint32_t>(is);
    if (n_conv != ConvScoreNet::kNumConv) throw IoError("unexpected layer count");
    ConvScoreNet net = ConvScoreNet::create(0);
    for (auto& c : net.conv) {
        const uint32_t in = detail::read_pod<uint32_t>(is);
        const uint32_t out = detail::read_pod<uint32_t>(is);
        if (static_cast<int>(in) != c.in_ch || static_cast<int>(out) != c.out_ch)
            throw IoError("checkpoint architecture mismatch");
    }
    if (detail::read_pod<uint32_t>(is) != ConvScoreNet::kTembDim)
        throw IoError("checkpoint time-embedding mismatch");
    for (auto& pr : param_refs(net))
        for (size_t i = 0; i < pr.n; ++i) pr.p[i] = detail::read_pod<float>(is);
    return net;
}

// "DRLA": LoRA adapters tied to a base checkpoint by content hash.
inline void save_adapters(const LoraAdapters& a, uint64_t base_hash, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    detail::write_bytes(os, "DRLA", 4);
    detail::write_pod<uint32_t>(os, 1u);
    detail::write_pod<uint64_t>(os, base_hash);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(a.rank));
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(a.U.size()));
    for (size_t l = 0; l < a.U.size(); ++l) {
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(a.U[l].rows()));
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(a.V[l].cols()));
        auto dump = [&](const nn::MatrixXd& m) {
            for (int i = 0; i < m.size(); ++i)
                detail::write_pod<float>(os, static_cast<float>(m.data()[i]));
        };
        dump(a.U[l]);
        dump(a.V[l]);
    }
}

inline LoraAdapters load_adapters(const std::string& path, uint64_t* base_hash = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    detail::read_bytes(is, magic, 4);
    if (std::memcmp(magic, "DRLA", 4) != 0) throw IoError("not a DRLA adapter file: " + path);
    if (detail::read_pod<uint32_t>(is) != 1) throw IoError("unsupported adapter version");
    const uint64_t hash = detail::read_pod<uint64_t>(is);
    if (base_hash) *base_hash = hash;
    LoraAdapters a;
    a.rank = static_cast<int>(detail::read_pod<uint32_t>(is));
    const uint32_t n_layers = detail::read_pod<uint32_t>(is);
    for (uint32_t l = 0; l < n_layers; ++l) {
        const uint32_t d = detail::read_pod<uint32_t>(is);
        const uint32_t k = detail::read_pod<uint32_t>(is);
        nn::MatrixXd U(d, a.rank), V(a.rank, k);
        for (int i = 0; i < U.size(); ++i) U.data()[i] = detail::read_pod<float>(is);
        for (int i = 0; i < V.size(); ++i) V.data()[i] = detail::read_pod<float>(is);
        a.U.push_back(std::move(U));
        a.V.push_back(std::move(V));
    }
    return a;
}

}  // namespace diffrecon
