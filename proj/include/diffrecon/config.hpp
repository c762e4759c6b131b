#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "diffrecon/core.hpp"
#include "diffrecon/ddip.hpp"
#include "diffrecon/dps.hpp"
#include "diffrecon/phantom.hpp"
#include "diffrecon/score.hpp"

namespace diffrecon {

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat sectioned key=value grammar. '#' and ';' start comments; keys are
// validated against the schema below and unknown keys are rejected with
// their line number.
class ConfigDoc {
public:
    static ConfigDoc parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ParseError("cannot open config: " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        return parse_text(ss.str());
    }

    static ConfigDoc parse_text(const std::string& text) {
        ConfigDoc doc;
        doc.raw_ = text;
        std::istringstream is(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const size_t cpos = line.find_first_of("#;");
            if (cpos != std::string::npos) line = line.substr(0, cpos);
            const size_t b = line.find_first_not_of(" \t\r");
            if (b == std::string::npos) continue;
            const size_t e = line.find_last_not_of(" \t\r");
            line = line.substr(b, e - b + 1);
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ParseError("line " + std::to_string(lineno) + ": malformed section header");
                section = line.substr(1, line.size() - 2);
                continue;
            }
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ParseError("line " + std::to_string(lineno) + ": expected key = value");
            std::string key = line.substr(0, eq);
            std::string val = line.substr(eq + 1);
            auto trim = [](std::string& s) {
                const size_t a = s.find_first_not_of(" \t");
                const size_t z = s.find_last_not_of(" \t");
                s = a == std::string::npos ? "" : s.substr(a, z - a + 1);
            };
            trim(key);
            trim(val);
            if (key.empty())
                throw ParseError("line " + std::to_string(lineno) + ": empty key");
            doc.entries_[section][key] = {val, lineno};
        }
        return doc;
    }

    bool has(const std::string& sec, const std::string& key) const {
        auto s = entries_.find(sec);
        return s != entries_.end() && s->second.count(key) > 0;
    }

    std::string get(const std::string& sec, const std::string& key, const std::string& dflt) {
        mark_known(sec, key);
        auto s = entries_.find(sec);
        if (s == entries_.end()) return dflt;
        auto k = s->second.find(key);
        return k == s->second.end() ? dflt : k->second.value;
    }

    double get_real(const std::string& sec, const std::string& key, double dflt) {
        const std::string v = get(sec, key, "");
        if (v.empty()) return dflt;
        try {
            size_t pos = 0;
            const double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ParseError("line " + std::to_string(line_of(sec, key)) + ": '" + v +
                             "' is not a number (" + sec + "." + key + ")");
        }
    }

    long get_int(const std::string& sec, const std::string& key, long dflt) {
        const std::string v = get(sec, key, "");
        if (v.empty()) return dflt;
        try {
            size_t pos = 0;
            const long r = std::stol(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ParseError("line " + std::to_string(line_of(sec, key)) + ": '" + v +
                             "' is not an integer (" + sec + "." + key + ")");
        }
    }

    bool get_bool(const std::string& sec, const std::string& key, bool dflt) {
        const std::string v = get(sec, key, "");
        if (v.empty()) return dflt;
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ParseError("line " + std::to_string(line_of(sec, key)) + ": '" + v +
                         "' is not a boolean (" + sec + "." + key + ")");
    }

    // After schema extraction, any remaining key is unknown.
    void reject_unknown() const {
        for (const auto& [sec, keys] : entries_)
            for (const auto& [key, ent] : keys)
                if (!known_.count(sec + "\n" + key))
                    throw ParseError("line " + std::to_string(ent.line) + ": unknown key '" + key +
                                     "' in section [" + sec + "]");
    }

    const std::string& raw_text() const { return raw_; }

private:
    struct Entry {
        std::string value;
        int line = 0;
    };

    int line_of(const std::string& sec, const std::string& key) const {
        auto s = entries_.find(sec);
        if (s == entries_.end()) return 0;
        auto k = s->second.find(key);
        return k == s->second.end() ? 0 : k->second.line;
    }

    void mark_known(const std::string& sec, const std::string& key) {
        known_.insert(sec + "\n" + key);
    }

    std::map<std::string, std::map<std::string, Entry>> entries_;
    std::set<std::string> known_;
    std::string raw_;
};

struct SimulateConfig {
    double count_target = 1e6;
    double background = 0.0;  // uniform randoms level per bin, count units
    int n_realizations = 10;
};

struct MlemConfig {
    int n_iter = 100;
};

struct MapemConfig {
    int n_iter = 60;
    double gamma = 2.0;
    double weight = 1.0;
};

struct DdimSampleConfig {
    double eta = 0.0;
};

struct ExperimentConfig {
    GridSpec grid;
    ProjSpec proj;
    ContrastSpec train_contrast{1.0, 0.25, 0.05};
    ContrastSpec test_contrast{1.0, 3.3, 0.05};
    int n_base = 8;
    int expansion = 25;
    uint64_t phantom_seed = 1;
    int schedule_T = 400;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    TrainConfig train;
    SimulateConfig simulate;
    MlemConfig mlem;
    MapemConfig mapem;
    DpsConfig dps;
    DdipConfig ddip;
    DdimSampleConfig ddim;
    bool use_prior = true;  // false: g = 0 image (unconditional ablation)
    std::string output_dir = "out";
    std::string raw_text;

    static ExperimentConfig from_doc(ConfigDoc doc) {
        ExperimentConfig c;
        c.grid.nx = static_cast<int>(doc.get_int("geometry", "nx", c.grid.nx));
        c.grid.ny = static_cast<int>(doc.get_int("geometry", "ny", c.grid.ny));
        c.grid.voxel_size = doc.get_real("geometry", "voxel_size", c.grid.voxel_size);
        c.proj.n_angles = static_cast<int>(doc.get_int("geometry", "n_angles", c.proj.n_angles));
        c.proj.n_bins = static_cast<int>(doc.get_int("geometry", "n_bins", c.proj.n_bins));
        c.proj.bin_width = doc.get_real("geometry", "bin_width", c.proj.bin_width);
        c.simulate.count_target = doc.get_real("geometry", "count_target", c.simulate.count_target);
        c.simulate.background = doc.get_real("geometry", "background", c.simulate.background);

        c.n_base = static_cast<int>(doc.get_int("phantom", "n_base", c.n_base));
        c.expansion = static_cast<int>(doc.get_int("phantom", "expansion", c.expansion));
        c.phantom_seed = static_cast<uint64_t>(doc.get_int("phantom", "seed", 1));
        c.train_contrast.gm_level = doc.get_real("phantom", "gm_level", c.train_contrast.gm_level);
        c.train_contrast.wm_level = doc.get_real("phantom", "wm_level", c.train_contrast.wm_level);
        c.train_contrast.csf_level =
            doc.get_real("phantom", "csf_level", c.train_contrast.csf_level);
        c.test_contrast.gm_level =
            doc.get_real("phantom", "test_gm_level", c.test_contrast.gm_level);
        c.test_contrast.wm_level =
            doc.get_real("phantom", "test_wm_level", c.test_contrast.wm_level);
        c.test_contrast.csf_level =
            doc.get_real("phantom", "test_csf_level", c.test_contrast.csf_level);

        c.schedule_T = static_cast<int>(doc.get_int("schedule", "T", c.schedule_T));
        c.beta_start = doc.get_real("schedule", "beta_start", c.beta_start);
        c.beta_end = doc.get_real("schedule", "beta_end", c.beta_end);

        c.train.epochs = static_cast<int>(doc.get_int("train", "epochs", c.train.epochs));
        c.train.batch_size = static_cast<int>(doc.get_int("train", "batch_size", c.train.batch_size));
        c.train.learning_rate = doc.get_real("train", "learning_rate", c.train.learning_rate);
        c.train.weight_decay = doc.get_real("train", "weight_decay", c.train.weight_decay);
        c.train.rng_seed = static_cast<uint64_t>(doc.get_int("train", "seed", 0));

        c.mlem.n_iter = static_cast<int>(doc.get_int("recon.mlem", "n_iter", c.mlem.n_iter));

        c.mapem.n_iter = static_cast<int>(doc.get_int("recon.mapem", "n_iter", c.mapem.n_iter));
        c.mapem.gamma = doc.get_real("recon.mapem", "gamma", c.mapem.gamma);
        c.mapem.weight = doc.get_real("recon.mapem", "weight", c.mapem.weight);

        c.dps.lambda_step = doc.get_real("recon.dps", "lambda", c.dps.lambda_step);
        c.dps.eta = doc.get_real("recon.dps", "eta", c.dps.eta);
        c.dps.T_start = static_cast<int>(doc.get_int("recon.dps", "t_start", c.schedule_T / 4));
        c.dps.mlem_init_iters =
            static_cast<int>(doc.get_int("recon.dps", "mlem_init_iters", c.dps.mlem_init_iters));
        c.dps.exact_jacobian = doc.get_bool("recon.dps", "exact_jacobian", false);

        c.ddip.N = static_cast<int>(doc.get_int("recon.ddip", "n_outer", c.ddip.N));
        c.ddip.M1 = static_cast<int>(doc.get_int("recon.ddip", "m1", c.ddip.M1));
        c.ddip.M2 = static_cast<int>(doc.get_int("recon.ddip", "m2", c.ddip.M2));
        c.ddip.T_start = static_cast<int>(doc.get_int("recon.ddip", "t_start", c.schedule_T / 4));
        c.ddip.beta = doc.get_real("recon.ddip", "beta", c.ddip.beta);
        c.ddip.eta = doc.get_real("recon.ddip", "eta", c.ddip.eta);
        c.ddip.lora_rank = static_cast<int>(doc.get_int("recon.ddip", "lora_rank", c.ddip.lora_rank));
        c.ddip.mlem_init_iters = static_cast<int>(
            doc.get_int("recon.ddip", "mlem_init_iters", c.ddip.mlem_init_iters));
        c.ddip.ft_lr = doc.get_real("recon.ddip", "ft_lr", c.ddip.ft_lr);
        c.ddip.ft_weight_decay =
            doc.get_real("recon.ddip", "ft_weight_decay", c.ddip.ft_weight_decay);
        c.ddip.snapshot_every =
            static_cast<int>(doc.get_int("recon.ddip", "snapshot_every", c.ddip.snapshot_every));
        c.use_prior = doc.get_bool("recon.ddip", "use_prior", c.use_prior);

        c.ddim.eta = doc.get_real("recon.ddim", "eta", c.ddim.eta);

        c.simulate.n_realizations = static_cast<int>(
            doc.get_int("metrics", "n_realizations", c.simulate.n_realizations));

        c.output_dir = doc.get("output", "dir", c.output_dir);

        doc.reject_unknown();
        c.raw_text = doc.raw_text();
        c.grid.validate();
        c.proj.validate();
        return c;
    }

    static ExperimentConfig load(const std::string& path) {
        return from_doc(ConfigDoc::parse_file(path));
    }
};

}  // namespace diffrecon
