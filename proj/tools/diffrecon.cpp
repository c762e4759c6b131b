// Experiment runner: phantom/data generation, score pretraining,
// reconstruction (mlem | mapem | dps | ddip | ddim-sample), and metrics.
#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include "diffrecon/classical.hpp"
#include "diffrecon/config.hpp"
#include "diffrecon/ddip.hpp"
#include "diffrecon/dps.hpp"
#include "diffrecon/geometry.hpp"
#include "diffrecon/io.hpp"
#include "diffrecon/metrics.hpp"
#include "diffrecon/phantom.hpp"
#include "diffrecon/plot.hpp"
#include "diffrecon/schedule.hpp"
#include "diffrecon/score.hpp"

namespace fs = std::filesystem;
using namespace diffrecon;

namespace {

struct CliOpts {
    std::string config_path;
    std::string out_override;
    std::string method = "mlem";
    int jobs = 1;
    uint64_t seed = 1;
};

int effective_jobs(int requested) {
    // DIFFRECON_THREADS caps parallelism regardless of --jobs
    if (const char* env = std::getenv("DIFFRECON_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) requested = std::min(requested, cap);
    }
    return std::max(1, requested);
}

void write_manifest(const std::string& path, const ExperimentConfig& cfg, uint64_t seed,
                    const std::vector<std::pair<std::string, std::string>>& extra) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest: " + path);
    os << "[run]\n";
    os << "seed = " << seed << "\n";
    for (const auto& [k, v] : extra) os << k << " = " << v << "\n";
    os << "\n# --- config echo (verbatim) ---\n";
    std::istringstream is(cfg.raw_text);
    for (std::string line; std::getline(is, line);) os << "# " << line << "\n";
}

// For-each over realization indices with a bounded worker pool.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    jobs = std::min(jobs, n);
    if (jobs <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(jobs));
    for (int w = 0; w < jobs; ++w)
        pool.emplace_back([&, w] {
            try {
                for (int i = next++; i < n; i = next++) fn(i);
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string real_name(int k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "real_%03d", k);
    return buf;
}

// ---- subcommands ----

int cmd_phantom(const ExperimentConfig& cfg, const std::string& out, uint64_t seed) {
    const fs::path dir = fs::path(out) / "phantoms";
    fs::create_directories(dir);
    auto train = make_training_set(cfg.n_base, cfg.expansion, cfg.train_contrast, cfg.grid, seed);
    for (size_t k = 0; k < train.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "train_%04zu", k);
        save_phantom(train[k], (dir / name).string());
    }
    // held-out subject at the test contrast, disjoint seed stream
    PhantomSample test = make_phantom(mix_seed(seed, 0x7E57u), cfg.test_contrast, cfg.grid);
    save_phantom(test, (dir / "test").string());
    save_image_png(test.activity, (dir / "test_activity.png").string());
    write_manifest((dir / "manifest.txt").string(), cfg, seed,
                   {{"n_train", std::to_string(train.size())}});
    std::cout << "phantom: wrote " << train.size() << " training samples + 1 test subject to "
              << dir << "\n";
    return 0;
}

int cmd_simulate(const ExperimentConfig& cfg, const std::string& out, uint64_t seed) {
    const fs::path pdir = fs::path(out) / "phantoms" / "test";
    const fs::path sdir = fs::path(out) / "sino";
    fs::create_directories(sdir);
    PhantomSample test = load_phantom(pdir.string());
    Projector A(cfg.grid, cfg.proj);
    Sinogram ybar = A.forward(test.activity);
    const double raw_sum = ybar.sum();
    if (!(raw_sum > 0)) throw DomainError("simulate: empty projection");
    // background randoms are added after scaling to the count target
    const double bg = cfg.simulate.background;
    double scale = 0.0;
    for (int k = 0; k < cfg.simulate.n_realizations; ++k) {
        Rng rng(seed, static_cast<uint64_t>(k));
        auto r = simulate_counts(ybar, cfg.simulate.count_target, rng);
        scale = r.scale;
        if (bg > 0)
            for (auto& v : r.counts.values) v += static_cast<double>(rng.poisson(bg));
        save_sinogram(r.counts, (sdir / (real_name(k) + ".drsn")).string());
    }
    std::ofstream sc((sdir / "scale.txt").string());
    sc << scale << "\n" << bg << "\n";
    write_manifest((sdir / "manifest.txt").string(), cfg, seed,
                   {{"count_scale", std::to_string(scale)},
                    {"background", std::to_string(bg)},
                    {"n_realizations", std::to_string(cfg.simulate.n_realizations)}});
    std::cout << "simulate: wrote " << cfg.simulate.n_realizations << " realizations (scale "
              << scale << ") to " << sdir << "\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& out, uint64_t seed) {
    const fs::path pdir = fs::path(out) / "phantoms";
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(pdir))
        if (e.is_directory() && e.path().filename().string().rfind("train_", 0) == 0)
            dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    std::vector<std::pair<Image, Image>> data;
    for (const auto& d : dirs) {
        PhantomSample s = load_phantom(d);
        data.emplace_back(s.activity, cfg.use_prior ? s.mr_prior : Image(s.activity.grid));
    }
    if (data.empty()) throw ConfigError("train: no training phantoms under " + pdir.string());

    NoiseSchedule sched = make_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end);
    TrainConfig tc = cfg.train;
    tc.rng_seed = seed;
    ConvScoreNet net = ConvScoreNet::create(mix_seed(seed, 0x1217u));
    std::ofstream curve((fs::path(out) / "train_curve.csv").string());
    curve << "epoch,loss\n";
    train_score(net, data, tc, sched, [&](int epoch, double loss) {
        curve << epoch << "," << loss << "\n";
        if (epoch % 10 == 0 || epoch == 1)
            std::cout << "train: epoch " << epoch << " loss " << loss << "\n";
    });
    const std::string ckpt = (fs::path(out) / "model.drnn").string();
    save_checkpoint(net, ckpt);
    write_manifest((fs::path(out) / "train_manifest.txt").string(), cfg, seed,
                   {{"n_samples", std::to_string(data.size())},
                    {"checkpoint_hash", std::to_string(fnv1a_file(ckpt))}});
    std::cout << "train: checkpoint " << ckpt << "\n";
    return 0;
}

int cmd_recon(const ExperimentConfig& cfg, const std::string& out, uint64_t seed,
              const std::string& method, int jobs) {
    const fs::path sdir = fs::path(out) / "sino";
    const fs::path rdir = fs::path(out) / "recon" / method;
    fs::create_directories(rdir);

    double scale = 0.0, bg = 0.0;
    {
        std::ifstream sc((sdir / "scale.txt").string());
        if (!(sc >> scale >> bg)) throw IoError("recon: missing " + (sdir / "scale.txt").string());
    }
    PhantomSample test = load_phantom((fs::path(out) / "phantoms" / "test").string());
    const Image g = cfg.use_prior ? test.mr_prior : Image(cfg.grid);
    Projector A(cfg.grid, cfg.proj);
    NoiseSchedule sched = make_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end);
    const Sinogram b(cfg.proj, bg);

    const bool needs_net = method == "dps" || method == "ddip" || method == "ddim-sample";
    ConvScoreNet net;
    uint64_t ckpt_hash = 0;
    if (needs_net) {
        const std::string ckpt = (fs::path(out) / "model.drnn").string();
        net = load_checkpoint(ckpt);
        ckpt_hash = fnv1a_file(ckpt);
    }

    std::vector<std::string> sinos;
    for (const auto& e : fs::directory_iterator(sdir))
        if (e.path().extension() == ".drsn") sinos.push_back(e.path().string());
    std::sort(sinos.begin(), sinos.end());
    if (sinos.empty() && method != "ddim-sample")
        throw ConfigError("recon: no sinograms under " + sdir.string());
    const int n = method == "ddim-sample" ? cfg.simulate.n_realizations
                                          : static_cast<int>(sinos.size());

    std::mutex io_mutex;
    parallel_for(n, effective_jobs(jobs), [&](int k) {
        Rng rng(seed, 0x5EC0 + static_cast<uint64_t>(k));
        Image result(cfg.grid);
        std::string diag_csv;
        if (method == "ddim-sample") {
            // prior sample, no data coupling
            Image x_t(cfg.grid);
            for (auto& v : x_t.values) v = rng.normal();
            Image x0(cfg.grid);
            for (int t = sched.T; t >= 1; --t) {
                const Image eps = net.predict(x_t, t, g);
                x0 = tweedie_x0(x_t, t, eps, sched);
                if (t > 1) {
                    Image u(cfg.grid);
                    for (auto& v : u.values) v = rng.normal();
                    x_t = ddim_step(x_t, t, eps, x0, cfg.ddim.eta, u, sched);
                }
            }
            x0.clamp_nonneg();
            for (size_t i = 0; i < x0.size(); ++i) result.values[i] = x0.values[i] * scale;
        } else {
            const Sinogram y = load_sinogram(sinos[static_cast<size_t>(k)]);
            if (method == "mlem") {
                result = mlem(y, b, cfg.mlem.n_iter, A);
            } else if (method == "mapem") {
                result = mapem(y, b, cfg.mapem.n_iter, cfg.mapem.gamma, cfg.mapem.weight, A);
            } else if (method == "dps") {
                DpsConfig dc = cfg.dps;
                dc.norm_scale = scale;
                NetPredictor pred(net);
                result = dps_reconstruct(y, b, g, pred, A, sched, dc, rng, nullptr,
                                         dc.exact_jacobian ? &net : nullptr);
            } else if (method == "ddip") {
                DdipConfig dc = cfg.ddip;
                dc.norm_scale = scale;
                DdipDiagnostics diag;
                result = ddip_reconstruct(y, b, g, net, A, sched, dc, rng, &diag);
                std::ostringstream csv;
                csv << "t,n,loglik,hqs_objective,finetune_loss\n";
                for (const auto& r : diag.records)
                    csv << r.t << "," << r.n << "," << r.loglik << "," << r.hqs_objective << ","
                        << r.finetune_loss << "\n";
                diag_csv = csv.str();
            } else {
                throw ConfigError("recon: unknown method '" + method + "'");
            }
        }
        std::lock_guard<std::mutex> lk(io_mutex);
        save_image(result, (rdir / (real_name(k) + ".drim")).string());
        save_image_png(result, (rdir / (real_name(k) + ".png")).string());
        if (!diag_csv.empty()) {
            std::ofstream os((rdir / (real_name(k) + "_diag.csv")).string());
            os << diag_csv;
        }
    });

    write_manifest((rdir / "manifest.txt").string(), cfg, seed,
                   {{"method", method},
                    {"count_scale", std::to_string(scale)},
                    {"checkpoint_hash", std::to_string(ckpt_hash)},
                    {"n_images", std::to_string(n)}});
    std::cout << "recon(" << method << "): wrote " << n << " images to " << rdir << "\n";
    return 0;
}

int cmd_metrics(const ExperimentConfig& cfg, const std::string& out, uint64_t seed) {
    const fs::path rroot = fs::path(out) / "recon";
    const fs::path mdir = fs::path(out) / "metrics";
    if (!fs::exists(rroot)) throw ConfigError("metrics: no reconstructions under " + rroot.string());
    PhantomSample test = load_phantom((fs::path(out) / "phantoms" / "test").string());
    double scale = 1.0, bg = 0.0;
    {
        std::ifstream sc((fs::path(out) / "sino" / "scale.txt").string());
        sc >> scale >> bg;
    }
    Image truth = test.activity;
    for (auto& v : truth.values) v *= scale;  // count-space ground truth
    const TissueMasks rois = test.masks();

    struct Row {
        std::string method, realization;
        double psnr, contrast, cv, cr;
    };
    std::vector<Row> rows;
    struct Summary {
        std::string method;
        double psnr = 0, contrast = 0, cv = 0, cr = 0;
        int n = 0;
    };
    std::vector<Summary> summaries;

    for (const auto& me : fs::directory_iterator(rroot)) {
        if (!me.is_directory()) continue;
        Summary sum;
        sum.method = me.path().filename().string();
        std::vector<Image> imgs;
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(me.path()))
            if (e.path().extension() == ".drim") files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            Image img = load_image(f);
            Row r;
            r.method = sum.method;
            r.realization = fs::path(f).stem().string();
            r.psnr = psnr(truth, img);
            r.contrast = percent_contrast(img, truth, rois);
            r.cv = cv(img, rois);
            r.cr = contrast_recovery(img, truth, rois.putamen);
            rows.push_back(r);
            sum.psnr += r.psnr;
            sum.contrast += r.contrast;
            sum.cv += r.cv;
            sum.cr += r.cr;
            ++sum.n;
            imgs.push_back(std::move(img));
        }
        if (sum.n == 0) continue;
        sum.psnr /= sum.n;
        sum.contrast /= sum.n;
        sum.cv /= sum.n;
        sum.cr /= sum.n;
        summaries.push_back(sum);
        if (imgs.size() >= 2) {
            EnsembleStats st = ensemble_stats(imgs, truth);
            fs::create_directories(mdir);
            save_image_png(st.mean, (mdir / (sum.method + "_mean.png")).string());
            save_image_png(st.std, (mdir / (sum.method + "_std.png")).string());
            save_image(st.bias, (mdir / (sum.method + "_bias.drim")).string());
        }
    }
    if (rows.empty()) throw ConfigError("metrics: no reconstructed images found");
    fs::create_directories(mdir);

    std::ofstream csv((mdir / "metrics.csv").string());
    csv << "method,realization,psnr,percent_contrast,cv,putamen_cr\n";
    for (const auto& r : rows)
        csv << r.method << "," << r.realization << "," << r.psnr << "," << r.contrast << ","
            << r.cv << "," << r.cr << "\n";
    std::ofstream scsv((mdir / "summary.csv").string());
    scsv << "method,n,psnr,percent_contrast,cv,putamen_cr\n";
    for (const auto& s : summaries) {
        scsv << s.method << "," << s.n << "," << s.psnr << "," << s.contrast << "," << s.cv << ","
             << s.cr << "\n";
        std::cout << "metrics: " << s.method << " psnr " << s.psnr << " contrast% " << s.contrast
                  << " cv " << s.cv << " putamen_cr " << s.cr << "\n";
    }

    // one (%contrast, CV) marker cloud per method
    LinePlot plot;
    for (const auto& s : summaries) {
        std::vector<double> xs, ys;
        for (const auto& r : rows)
            if (r.method == s.method) {
                xs.push_back(r.contrast);
                ys.push_back(r.cv);
            }
        plot.add_series(xs, ys);
    }
    plot.save((mdir / "contrast_cv.png").string());
    write_manifest((mdir / "manifest.txt").string(), cfg, seed,
                   {{"n_rows", std::to_string(rows.size())}});
    std::cout << "metrics: wrote " << (mdir / "metrics.csv") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale PET reconstruction laboratory"};
    app.require_subcommand(1);

    CliOpts opt;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "experiment config file")->required();
        sub->add_option("--jobs", opt.jobs, "parallel realizations");
        sub->add_option("--seed", opt.seed, "master RNG seed");
        sub->add_option("--out", opt.out_override, "output directory (overrides config)");
    };
    CLI::App* c_phantom = app.add_subcommand("phantom", "generate phantom sets");
    CLI::App* c_sim = app.add_subcommand("simulate", "simulate noisy sinograms");
    CLI::App* c_train = app.add_subcommand("train", "pretrain the score network");
    CLI::App* c_recon = app.add_subcommand("recon", "run a reconstruction method");
    CLI::App* c_metrics = app.add_subcommand("metrics", "compute metrics and plots");
    for (CLI::App* sub : {c_phantom, c_sim, c_train, c_recon, c_metrics}) add_common(sub);
    c_recon->add_option("--method", opt.method, "mlem|mapem|dps|ddip|ddim-sample");

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = ExperimentConfig::load(opt.config_path);
        const std::string out = opt.out_override.empty() ? cfg.output_dir : opt.out_override;
        fs::create_directories(out);
        if (c_phantom->parsed()) return cmd_phantom(cfg, out, opt.seed);
        if (c_sim->parsed()) return cmd_simulate(cfg, out, opt.seed);
        if (c_train->parsed()) return cmd_train(cfg, out, opt.seed);
        if (c_recon->parsed()) return cmd_recon(cfg, out, opt.seed, opt.method, opt.jobs);
        if (c_metrics->parsed()) return cmd_metrics(cfg, out, opt.seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
