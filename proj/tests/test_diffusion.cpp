#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "diffrecon/schedule.hpp"
#include "diffrecon/score.hpp"

using namespace diffrecon;

namespace {
GridSpec g8{8, 8, 2.0};
}

TEST_CASE("schedule invariants", "[diffusion]") {
    NoiseSchedule s = make_schedule(400);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.beta[1] == Catch::Approx(1e-4));
    CHECK(s.beta[400] == Catch::Approx(0.02));
    for (int t = 1; t <= 400; ++t) {
        CHECK(s.beta[t] > 0.0);
        CHECK(s.beta[t] < 1.0);
        CHECK(s.alpha[t] == Catch::Approx(1.0 - s.beta[t]).margin(1e-15));
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        CHECK(s.alpha_bar[t] == Catch::Approx(s.alpha_bar[t - 1] * s.alpha[t]).margin(1e-15));
        CHECK(s.beta_bar[t] == Catch::Approx(1.0 - s.alpha_bar[t]).margin(1e-15));
    }

    NoiseSchedule s1000 = make_schedule(1000);
    CHECK(s1000.alpha_bar[1000] < 0.01);

    NoiseSchedule s1 = make_schedule(1);
    CHECK(s1.beta[1] == Catch::Approx(1e-4));
    CHECK(s1.alpha_bar[1] == Catch::Approx(1.0 - 1e-4));

    CHECK_THROWS_AS(make_schedule(0), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.5, 0.1), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), ConfigError);
}

TEST_CASE("forward diffusion limits and variance", "[diffusion]") {
    NoiseSchedule s = make_schedule(100);
    Rng rng(5);
    Image x0(g8);
    for (auto& v : x0.values) v = rng.uniform();
    Image z(g8);  // zero noise

    Image at0 = forward_diffuse(x0, 0, z, s);
    CHECK(at0.values == x0.values);

    Image noiseless = forward_diffuse(x0, 60, z, s);
    for (size_t i = 0; i < x0.size(); ++i)
        CHECK(noiseless.values[i] == Catch::Approx(s.sqrt_ab(60) * x0.values[i]).margin(1e-15));

    // sample variance around the scaled mean matches beta_bar_t
    for (int t : {10, 60, 100}) {
        double ss = 0.0;
        size_t n = 0;
        for (int k = 0; k < 200; ++k) {
            Image noise(g8);
            for (auto& v : noise.values) v = rng.normal();
            Image xt = forward_diffuse(x0, t, noise, s);
            for (size_t i = 0; i < xt.size(); ++i) {
                const double d = xt.values[i] - s.sqrt_ab(t) * x0.values[i];
                ss += d * d;
                ++n;
            }
        }
        CHECK(ss / n == Catch::Approx(s.beta_bar[t]).epsilon(0.05));
    }
}

TEST_CASE("clean image estimate inverts forward diffusion", "[diffusion]") {
    NoiseSchedule s = make_schedule(100);
    Rng rng(6);
    Image x0(g8), eps(g8);
    for (auto& v : x0.values) v = rng.uniform();
    for (auto& v : eps.values) v = rng.normal();
    for (int t : {1, 13, 50, 100}) {
        Image xt = forward_diffuse(x0, t, eps, s);
        Image rec = tweedie_x0(xt, t, eps, s);
        for (size_t i = 0; i < rec.size(); ++i)
            CHECK(rec.values[i] == Catch::Approx(x0.values[i]).margin(1e-9));
    }
    // zero predicted noise divides out the signal attenuation only
    Image xt = forward_diffuse(x0, 40, eps, s);
    Image rec0 = tweedie_x0(xt, 40, Image(g8), s);
    for (size_t i = 0; i < rec0.size(); ++i)
        CHECK(rec0.values[i] == Catch::Approx(xt.values[i] / s.sqrt_ab(40)).margin(1e-12));
}

TEST_CASE("ddim noise scale brackets", "[diffusion]") {
    NoiseSchedule s = make_schedule(100);
    for (int t = 1; t <= 100; ++t) {
        CHECK(ddim_sigma(t, 0.0, s) == 0.0);
        const double sig = ddim_sigma(t, 1.0, s);
        CHECK(sig >= 0.0);
        CHECK(sig * sig <= s.beta_bar[t - 1] + 1e-15);
        // eta = 1 reproduces the ancestral posterior variance
        const double post = s.beta[t] * s.beta_bar[t - 1] / s.beta_bar[t];
        CHECK(sig * sig == Catch::Approx(post).margin(1e-15));
        CHECK(ddim_sigma(t, 0.5, s) == Catch::Approx(0.5 * sig).margin(1e-15));
    }
}

TEST_CASE("deterministic ddim step and final step", "[diffusion]") {
    NoiseSchedule s = make_schedule(100);
    Rng rng(9);
    Image xt(g8), eps(g8), u(g8);
    for (auto& v : xt.values) v = rng.normal();
    for (auto& v : eps.values) v = rng.normal();
    for (auto& v : u.values) v = rng.normal();

    Image x0h = tweedie_x0(xt, 30, eps, s);
    Image a = ddim_step(xt, 30, eps, x0h, 0.0, u, s);
    Image b = ddim_step(xt, 30, eps, x0h, 0.0, Image(g8), s);
    CHECK(a.values == b.values);  // eta = 0 ignores the injected noise

    // at t = 1 the target is alpha_bar_0 = 1 and beta_bar_0 = 0: returns x0_hat
    Image x0h1 = tweedie_x0(xt, 1, eps, s);
    Image last = ddim_step(xt, 1, eps, x0h1, 0.0, u, s);
    for (size_t i = 0; i < last.size(); ++i)
        CHECK(last.values[i] == Catch::Approx(x0h1.values[i]).margin(1e-12));
    Image last1 = ddim_step(xt, 1, eps, x0h1, 1.0, u, s);
    for (size_t i = 0; i < last1.size(); ++i)
        CHECK(last1.values[i] == Catch::Approx(x0h1.values[i]).margin(1e-12));

    CHECK_THROWS_AS(ddim_step(xt, 30, eps, x0h, 1.5, u, s), ConfigError);
}

TEST_CASE("stochastic ddim matches the ancestral step", "[diffusion]") {
    NoiseSchedule s = make_schedule(100);
    Rng rng(12);
    Image xt(g8), eps(g8);
    for (auto& v : xt.values) v = rng.normal();
    for (auto& v : eps.values) v = rng.normal();

    for (int t : {2, 30, 77, 100}) {
        Image x0h = tweedie_x0(xt, t, eps, s);
        // means (zero injected noise) must coincide exactly
        Image ddim_mean = ddim_step(xt, t, eps, x0h, 1.0, Image(g8), s);
        Image ddpm_mean = ddpm_step(xt, t, eps, Image(g8), s);
        for (size_t i = 0; i < ddim_mean.size(); ++i)
            CHECK(ddim_mean.values[i] == Catch::Approx(ddpm_mean.values[i]).margin(1e-10));
        // and with the same unit noise the samples coincide too
        Image u(g8, 1.0);
        Image a = ddim_step(xt, t, eps, x0h, 1.0, u, s);
        Image b = ddpm_step(xt, t, eps, u, s);
        for (size_t i = 0; i < a.size(); ++i)
            CHECK(a.values[i] == Catch::Approx(b.values[i]).margin(1e-10));
    }
}

TEST_CASE("oracle driven sampling recovers the prior moments", "[diffusion]") {
    // Gaussian prior N(mu, s^2) with a closed-form optimal noise predictor:
    // both the deterministic transport and the stochastic sampler should
    // reproduce the prior's mean and spread when started from N(0, 1).
    NoiseSchedule sched = make_schedule(1000);
    const double mu = 0.7, sd = 0.3;
    GaussianOracle oracle(Image(g8, mu), sd * sd, sched);
    Image g(g8);  // unused conditioning channel
    Rng rng(31);

    double det_mean = 0.0, det_m2 = 0.0;
    double sto_mean = 0.0, sto_m2 = 0.0;
    const int n_chains = 60;
    for (int k = 0; k < n_chains; ++k) {
        Image x_det(g8), x_sto(g8);
        for (auto& v : x_det.values) v = rng.normal();
        x_sto = x_det;
        for (int t = sched.T; t >= 1; --t) {
            Image e1 = oracle.predict(x_det, t, g);
            x_det = ddim_step(x_det, t, e1, tweedie_x0(x_det, t, e1, sched), 0.0, Image(g8), sched);
            Image e2 = oracle.predict(x_sto, t, g);
            Image u(g8);
            for (auto& v : u.values) v = rng.normal();
            x_sto = ddim_step(x_sto, t, e2, tweedie_x0(x_sto, t, e2, sched), 1.0, u, sched);
        }
        for (double v : x_det.values) {
            det_mean += v;
            det_m2 += v * v;
        }
        for (double v : x_sto.values) {
            sto_mean += v;
            sto_m2 += v * v;
        }
    }
    const double n = static_cast<double>(n_chains) * g8.size();
    const double dm = det_mean / n;
    const double dvar = det_m2 / n - dm * dm;
    CHECK(dm == Catch::Approx(mu).margin(0.05));
    CHECK(std::sqrt(dvar) == Catch::Approx(sd).epsilon(0.15));
    const double m = sto_mean / n;
    const double var = sto_m2 / n - m * m;
    CHECK(m == Catch::Approx(mu).margin(0.05));
    CHECK(std::sqrt(var) == Catch::Approx(sd).epsilon(0.15));
}
