#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "diffrecon/score.hpp"

using namespace diffrecon;

namespace {

GridSpec g6{6, 6, 2.0};

struct ZeroPredictor : NoisePredictor {
    Image predict(const Image& x_t, int, const Image&) const override {
        return Image(x_t.grid);
    }
};

struct BiasedPredictor : NoisePredictor {
    Image predict(const Image& x_t, int, const Image&) const override {
        return Image(x_t.grid, 5.0);
    }
};

double scalar_loss(const nn::MatrixXd& out) {
    double s = 0.0;
    for (int i = 0; i < out.size(); ++i) s += out.data()[i] * out.data()[i];
    return s;
}

}  // namespace

TEST_CASE("gaussian oracle closed forms", "[score]") {
    NoiseSchedule sched = make_schedule(100);
    const double mu = 0.4, var = 0.25;
    GaussianOracle oracle(Image(g6, mu), var, sched);
    Image g(g6);

    // at the noiseless point x_t = sqrt(ab) mu the prediction is zero
    for (int t : {1, 40, 100}) {
        Image x_t(g6, sched.sqrt_ab(t) * mu);
        Image eps = oracle.predict(x_t, t, g);
        for (double v : eps.values) CHECK(std::abs(v) < 1e-12);
    }

    // plugging the oracle into the clean-image estimate reproduces the
    // analytic posterior mean
    Rng rng(2);
    for (int t : {1, 17, 63, 100}) {
        Image x_t(g6);
        for (auto& v : x_t.values) v = rng.normal();
        Image eps = oracle.predict(x_t, t, g);
        Image x0 = tweedie_x0(x_t, t, eps, sched);
        Image pm = oracle.posterior_mean(x_t, t);
        for (size_t i = 0; i < x0.size(); ++i)
            CHECK(x0.values[i] == Catch::Approx(pm.values[i]).margin(1e-9));
    }

    CHECK_THROWS_AS(GaussianOracle(Image(g6, mu), 0.0, sched), ConfigError);
}

TEST_CASE("denoising loss separates predictors", "[score]") {
    NoiseSchedule sched = make_schedule(100);
    const double mu = 0.5, var = 0.04;
    GaussianOracle oracle(Image(g6, mu), var, sched);
    ZeroPredictor zero;
    BiasedPredictor biased;

    Rng rng(3);
    std::vector<std::pair<Image, Image>> batch;
    std::vector<int> ts;
    std::vector<Image> noises;
    for (int k = 0; k < 400; ++k) {
        Image x0(g6);
        for (auto& v : x0.values) v = mu + std::sqrt(var) * rng.normal();
        batch.emplace_back(x0, Image(g6));
        ts.push_back(1 + static_cast<int>(rng.index(100)));
        Image n(g6);
        for (auto& v : n.values) v = rng.normal();
        noises.push_back(n);
    }

    const double L_oracle = dsm_loss(oracle, batch, ts, noises, sched);
    const double L_zero = dsm_loss(zero, batch, ts, noises, sched);
    const double L_biased = dsm_loss(biased, batch, ts, noises, sched);
    CHECK(L_oracle >= 0.0);
    CHECK(L_oracle < L_zero);
    CHECK(L_zero < L_biased);
    // a zero predictor scores the raw noise energy, one per pixel
    CHECK(L_zero == Catch::Approx(static_cast<double>(g6.size())).epsilon(0.05));

    CHECK_THROWS_AS(dsm_loss(zero, {}, {}, {}, sched), ConfigError);
}

TEST_CASE("fresh adapters do not change the output", "[score]") {
    ConvScoreNet net = ConvScoreNet::create(11);
    LoraAdapters a = net.make_adapters(4, 5);
    REQUIRE(a.attached());
    Rng rng(4);
    Image x_t(g6), g(g6);
    for (auto& v : x_t.values) v = rng.normal();
    for (auto& v : g.values) v = rng.uniform();
    Image base = net.predict(x_t, 10, g);
    Image with = net.predict(x_t, 10, g, &a);
    CHECK(base.values == with.values);

    // a rank-0 request detaches cleanly
    LoraAdapters none = net.make_adapters(0, 5);
    CHECK_FALSE(none.attached());
}

TEST_CASE("base parameter gradients match finite differences", "[score]") {
    ConvScoreNet net = ConvScoreNet::create(21);
    Rng rng(6);
    Image x_t(g6), g(g6);
    for (auto& v : x_t.values) v = rng.normal();
    for (auto& v : g.values) v = rng.uniform();
    const int t = 25;

    ConvScoreNet grads = ConvScoreNet::zeros_like(net);
    ConvScoreNet::Cache c;
    net.forward(x_t, t, g, nullptr, c);
    nn::MatrixXd dout = 2.0 * c.out;
    std::vector<double> dx;
    net.backward(c, dout, nullptr, &grads, nullptr, &dx);

    auto prefs = param_refs(net);
    auto grefs = param_refs(grads);
    const double h = 1e-5;
    Rng pick(7);
    for (int trial = 0; trial < 20; ++trial) {
        const size_t blk = pick.index(prefs.size());
        const size_t idx = pick.index(prefs[blk].n);
        const double save = prefs[blk].p[idx];
        ConvScoreNet::Cache cp, cm;
        prefs[blk].p[idx] = save + h;
        net.forward(x_t, t, g, nullptr, cp);
        prefs[blk].p[idx] = save - h;
        net.forward(x_t, t, g, nullptr, cm);
        prefs[blk].p[idx] = save;
        const double fd = (scalar_loss(cp.out) - scalar_loss(cm.out)) / (2 * h);
        const double an = grefs[blk].p[idx];
        CHECK(std::abs(fd - an) <= 1e-3 * std::max(1.0, std::abs(fd)));
    }

    // input gradient too
    for (int trial = 0; trial < 10; ++trial) {
        const size_t i = pick.index(x_t.size());
        Image xp = x_t, xm = x_t;
        xp.values[i] += h;
        xm.values[i] -= h;
        ConvScoreNet::Cache cp, cm;
        net.forward(xp, t, g, nullptr, cp);
        net.forward(xm, t, g, nullptr, cm);
        const double fd = (scalar_loss(cp.out) - scalar_loss(cm.out)) / (2 * h);
        CHECK(std::abs(fd - dx[i]) <= 1e-3 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("low rank factor gradients match finite differences", "[score]") {
    ConvScoreNet net = ConvScoreNet::create(31);
    LoraAdapters a = net.make_adapters(4, 9);
    // move V off zero so both factor gradients are non-trivial
    Rng rr(10);
    for (auto& V : a.V)
        for (int i = 0; i < V.size(); ++i) V.data()[i] = 0.01 * rr.normal();

    Rng rng(8);
    Image x_t(g6), g(g6);
    for (auto& v : x_t.values) v = rng.normal();
    for (auto& v : g.values) v = rng.uniform();
    const int t = 40;

    LoraAdapters grads = ConvScoreNet::zeros_like(a);
    ConvScoreNet::Cache c;
    net.forward(x_t, t, g, &a, c);
    nn::MatrixXd dout = 2.0 * c.out;
    net.backward(c, dout, &a, nullptr, &grads);

    auto prefs = param_refs(a);
    auto grefs = param_refs(grads);
    const double h = 1e-5;
    Rng pick(12);
    for (int trial = 0; trial < 20; ++trial) {
        const size_t blk = pick.index(prefs.size());
        const size_t idx = pick.index(prefs[blk].n);
        const double save = prefs[blk].p[idx];
        ConvScoreNet::Cache cp, cm;
        prefs[blk].p[idx] = save + h;
        net.forward(x_t, t, g, &a, cp);
        prefs[blk].p[idx] = save - h;
        net.forward(x_t, t, g, &a, cm);
        prefs[blk].p[idx] = save;
        const double fd = (scalar_loss(cp.out) - scalar_loss(cm.out)) / (2 * h);
        const double an = grefs[blk].p[idx];
        CHECK(std::abs(fd - an) <= 1e-3 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("zero V factors kill the U gradient", "[score]") {
    ConvScoreNet net = ConvScoreNet::create(41);
    LoraAdapters a = net.make_adapters(4, 13);  // V = 0 at init
    Rng rng(14);
    Image x_t(g6), g(g6);
    for (auto& v : x_t.values) v = rng.normal();
    for (auto& v : g.values) v = rng.uniform();

    LoraAdapters grads = ConvScoreNet::zeros_like(a);
    ConvScoreNet::Cache c;
    net.forward(x_t, 7, g, &a, c);
    nn::MatrixXd dout = 2.0 * c.out;
    net.backward(c, dout, &a, nullptr, &grads);
    for (const auto& U : grads.U)
        for (int i = 0; i < U.size(); ++i) CHECK(U.data()[i] == 0.0);
    // while the V gradient is live
    double vmax = 0.0;
    for (const auto& V : grads.V)
        for (int i = 0; i < V.size(); ++i) vmax = std::max(vmax, std::abs(V.data()[i]));
    CHECK(vmax > 0.0);
}

TEST_CASE("adapter count", "[score]") {
    ConvScoreNet net = ConvScoreNet::create(1);
    // r (d + 9c) per layer: 4*(32+18) + 3*4*(32+288) + 4*(1+288)
    CHECK(lora_param_count(net, 4) == 200 + 3 * 1280 + 1156);
    CHECK(lora_param_count(net, 0) == 0);
    CHECK_THROWS_AS(lora_param_count(net, -1), ConfigError);
    // a rank-4 middle layer carries far fewer parameters than its dense W
    CHECK(4 * (32 + 32 * 9) < 32 * 32 * 9);
}

TEST_CASE("one epoch of training lowers a fixed evaluation loss", "[score]") {
    NoiseSchedule sched = make_schedule(50);
    Rng rng(16);
    std::vector<std::pair<Image, Image>> data;
    for (int k = 0; k < 8; ++k) {
        Image x0(g6), g(g6);
        for (auto& v : x0.values) v = rng.uniform();
        for (auto& v : g.values) v = rng.uniform();
        data.emplace_back(x0, g);
    }
    std::vector<int> ts;
    std::vector<Image> noises;
    for (size_t k = 0; k < data.size(); ++k) {
        ts.push_back(1 + static_cast<int>(rng.index(50)));
        Image n(g6);
        for (auto& v : n.values) v = rng.normal();
        noises.push_back(n);
    }

    ConvScoreNet net = ConvScoreNet::create(99);
    const double before = dsm_loss(NetPredictor(net), data, ts, noises, sched);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.rng_seed = 3;
    std::vector<double> curve;
    train_score(net, data, cfg, sched, [&](int, double l) { curve.push_back(l); });
    REQUIRE(curve.size() == 5u);
    const double after = dsm_loss(NetPredictor(net), data, ts, noises, sched);
    CHECK(after < before);
    CHECK(curve.back() < curve.front());

    // same seed, same data: bit-identical result
    ConvScoreNet net2 = ConvScoreNet::create(99);
    train_score(net2, data, cfg, sched);
    auto r1 = param_refs(net), r2 = param_refs(net2);
    for (size_t b = 0; b < r1.size(); ++b)
        for (size_t i = 0; i < r1[b].n; ++i) CHECK(r1[b].p[i] == r2[b].p[i]);

    CHECK_THROWS_AS(train_score(net, {}, cfg, sched), ConfigError);
}

TEST_CASE("checkpoint round trips", "[score]") {
    ConvScoreNet net = ConvScoreNet::create(55);
    const std::string path = "net_rt_test.drnn";
    save_checkpoint(net, path);
    ConvScoreNet back = load_checkpoint(path);
    auto r1 = param_refs(net), r2 = param_refs(back);
    for (size_t b = 0; b < r1.size(); ++b)
        for (size_t i = 0; i < r1[b].n; ++i)
            CHECK(r2[b].p[i] == Catch::Approx(r1[b].p[i]).margin(1e-6));
    // outputs survive the f32 trip
    Rng rng(5);
    Image x_t(g6), g(g6);
    for (auto& v : x_t.values) v = rng.normal();
    for (auto& v : g.values) v = rng.uniform();
    Image a = net.predict(x_t, 9, g);
    Image b = back.predict(x_t, 9, g);
    for (size_t i = 0; i < a.size(); ++i)
        CHECK(b.values[i] == Catch::Approx(a.values[i]).margin(1e-4));
    std::filesystem::remove(path);

    LoraAdapters ad = net.make_adapters(4, 77);
    Rng rr(6);
    for (auto& V : ad.V)
        for (int i = 0; i < V.size(); ++i) V.data()[i] = 0.05 * rr.normal();
    const std::string apath = "adapters_rt_test.drla";
    save_adapters(ad, 0xDEADBEEFu, apath);
    uint64_t hash = 0;
    LoraAdapters ab = load_adapters(apath, &hash);
    CHECK(hash == 0xDEADBEEFu);
    CHECK(ab.rank == 4);
    REQUIRE(ab.U.size() == ad.U.size());
    for (size_t l = 0; l < ad.U.size(); ++l) {
        for (int i = 0; i < ad.U[l].size(); ++i)
            CHECK(ab.U[l].data()[i] == Catch::Approx(ad.U[l].data()[i]).margin(1e-6));
        for (int i = 0; i < ad.V[l].size(); ++i)
            CHECK(ab.V[l].data()[i] == Catch::Approx(ad.V[l].data()[i]).margin(1e-6));
    }
    std::filesystem::remove(apath);
}
