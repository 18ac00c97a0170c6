#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mvamp/ensembles.hpp"
#include "mvamp/errors.hpp"
#include "mvamp/rng.hpp"
#include "mvamp/scalar_models.hpp"
#include "mvamp/stability.hpp"
#include "mvamp/state_evolution.hpp"
#include "mvamp/vamp_engine.hpp"

#ifndef MVAMP_VERSION
#define MVAMP_VERSION "0.1.0"
#endif

namespace mvamp::harness {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int schema_version = 1;

enum ExitCode : int { exit_ok = 0, exit_config = 2, exit_numerical = 3, exit_nonconvergence = 4 };

// ---------------------------------------------------------------- config

struct MatrixConfig {
    std::string type = "row_orthogonal";
    double scale = 1.0;
    GaussianSampling sampling = GaussianSampling::direct;
    json spectrum;  // haar_spectrum only
};

struct EnsembleConfig {
    MatrixConfig matrix;
    std::vector<int> N{1024};
    std::vector<double> delta;
    int trials = 100;
    std::uint64_t seed = 1;
};

struct RunConfig {
    RunOptions options{};
    double init_h_variance = 1.0;
    double init_Q1x = 1.0;
    double init_Q1z = 1.0;
    bool require_convergence = false;
};

struct SEConfig {
    int T = 100;
    double trajectory_damping = 1.0;
    double damping = 0.5;
    double tol = 1e-11;
    int max_iter = 20000;
    int gh_nodes = 121;
    bool verify = false;
};

struct StabilityConfig {
    std::optional<std::pair<double, double>> bracket;
    double tol = 1e-3;
};

struct ExperimentConfig {
    json raw;
    json model;
    EnsembleConfig ensemble;
    RunConfig run;
    SEConfig se;
    StabilityConfig stability;
    std::string out_dir = "out";
};

namespace detail {

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline void allow_keys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [k, v] : j.items())
        if (!ok.count(k)) throw ConfigError("unknown key '" + join(path, k) + "'");
}

inline const json& require(const json& j, const std::string& path, const char* key) {
    if (!j.contains(key)) throw ConfigError("missing key '" + join(path, key) + "'");
    return j.at(key);
}

inline double num(const json& j, const std::string& path) {
    if (!j.is_number()) throw ConfigError(path + ": expected a number");
    return j.get<double>();
}

inline long long integer(const json& j, const std::string& path) {
    if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
    return j.get<long long>();
}

inline bool boolean(const json& j, const std::string& path) {
    if (!j.is_boolean()) throw ConfigError(path + ": expected true or false");
    return j.get<bool>();
}

inline std::string str(const json& j, const std::string& path) {
    if (!j.is_string()) throw ConfigError(path + ": expected a string");
    return j.get<std::string>();
}

template <class T, class F>
T opt(const json& j, const std::string& path, const char* key, T def, F&& conv) {
    return j.contains(key) ? T(conv(j.at(key), join(path, key))) : def;
}

inline double positive(double v, const std::string& path) {
    if (!(v > 0.0)) throw ConfigError(path + ": must be > 0");
    return v;
}

}  // namespace detail

inline void validate_model_section(const json& m) {
    using namespace detail;
    allow_keys(m, "model", {"prior", "channel", "postulated_prior", "postulated_channel"});
    const json& p = require(m, "model", "prior");
    const std::string pn = str(require(p, "model.prior", "name"), "model.prior.name");
    if (pn == "bernoulli_gauss") {
        allow_keys(p, "model.prior", {"name", "rho"});
        const double rho = num(require(p, "model.prior", "rho"), "model.prior.rho");
        if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("model.prior.rho: must lie in (0, 1]");
    } else if (pn == "gaussian") {
        allow_keys(p, "model.prior", {"name", "variance"});
        positive(num(require(p, "model.prior", "variance"), "model.prior.variance"), "model.prior.variance");
    } else if (pn == "rademacher") {
        allow_keys(p, "model.prior", {"name"});
    } else if (pn == "mixture") {
        allow_keys(p, "model.prior", {"name", "atoms", "gaussians"});
    } else {
        throw ConfigError("model.prior.name: unknown prior '" + pn + "'");
    }
    const json& c = require(m, "model", "channel");
    const std::string cn = str(require(c, "model.channel", "name"), "model.channel.name");
    if (cn == "sign" || cn == "random_label") {
        allow_keys(c, "model.channel", {"name"});
    } else if (cn == "gaussian") {
        allow_keys(c, "model.channel", {"name", "variance"});
        positive(num(require(c, "model.channel", "variance"), "model.channel.variance"), "model.channel.variance");
    } else {
        throw ConfigError("model.channel.name: unknown channel '" + cn + "'");
    }
    const json& pp = require(m, "model", "postulated_prior");
    const std::string ppn = str(require(pp, "model.postulated_prior", "name"), "model.postulated_prior.name");
    if (ppn == "gaussian") {
        allow_keys(pp, "model.postulated_prior", {"name", "variance"});
        positive(num(require(pp, "model.postulated_prior", "variance"), "model.postulated_prior.variance"),
                 "model.postulated_prior.variance");
    } else if (ppn == "laplace_map") {
        allow_keys(pp, "model.postulated_prior", {"name", "gamma"});
        positive(num(require(pp, "model.postulated_prior", "gamma"), "model.postulated_prior.gamma"),
                 "model.postulated_prior.gamma");
    } else if (ppn == "ising") {
        allow_keys(pp, "model.postulated_prior", {"name"});
    } else {
        throw ConfigError("model.postulated_prior.name: unknown denoiser '" + ppn + "'");
    }
    const json& pc = require(m, "model", "postulated_channel");
    const std::string pcn = str(require(pc, "model.postulated_channel", "name"), "model.postulated_channel.name");
    if (pcn == "gaussian_map") {
        allow_keys(pc, "model.postulated_channel", {"name", "variance"});
        positive(num(require(pc, "model.postulated_channel", "variance"), "model.postulated_channel.variance"),
                 "model.postulated_channel.variance");
    } else if (pcn == "probit_theta") {
        allow_keys(pc, "model.postulated_channel", {"name"});
    } else {
        throw ConfigError("model.postulated_channel.name: unknown denoiser '" + pcn + "'");
    }
}

inline ScalarModelPair build_models(const json& m) {
    validate_model_section(m);
    ScalarModelPair out;
    const json& p = m.at("prior");
    const std::string pn = p.at("name");
    try {
        if (pn == "bernoulli_gauss") {
            out.prior = bernoulli_gauss_prior(p.at("rho").get<double>());
        } else if (pn == "gaussian") {
            out.prior = gaussian_prior(p.at("variance").get<double>());
        } else if (pn == "rademacher") {
            out.prior = rademacher_prior();
        } else {
            std::vector<std::pair<double, double>> atoms;
            std::vector<GaussComponent> gs;
            if (p.contains("atoms"))
                for (const auto& a : p.at("atoms")) atoms.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
            if (p.contains("gaussians"))
                for (const auto& g : p.at("gaussians"))
                    gs.push_back({g.at(0).get<double>(), g.at(1).get<double>(), g.at(2).get<double>()});
            out.prior = mixture_prior(std::move(atoms), std::move(gs));
            out.prior.params = p;
        }
        const json& c = m.at("channel");
        const std::string cn = c.at("name");
        if (cn == "sign")
            out.channel = sign_channel();
        else if (cn == "random_label")
            out.channel = random_label_channel();
        else
            out.channel = gaussian_noise_channel(c.at("variance").get<double>());
        const json& pp = m.at("postulated_prior");
        const std::string ppn = pp.at("name");
        if (ppn == "gaussian")
            out.x_denoiser = gaussian_prior_denoiser(pp.at("variance").get<double>());
        else if (ppn == "laplace_map")
            out.x_denoiser = laplace_map_denoiser(pp.at("gamma").get<double>());
        else
            out.x_denoiser = ising_denoiser();
        const json& pc = m.at("postulated_channel");
        if (pc.at("name") == "gaussian_map")
            out.z_denoiser = gaussian_channel_map_denoiser(pc.at("variance").get<double>());
        else
            out.z_denoiser = probit_theta_denoiser();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model: ") + e.what());
    } catch (const InvalidParameter& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    return out;
}

inline ExperimentConfig parse_config(const json& j) {
    using namespace detail;
    ExperimentConfig c;
    c.raw = j;
    allow_keys(j, "", {"schema_version", "model", "ensemble", "run", "se", "stability", "output"});
    const long long ver = integer(require(j, "", "schema_version"), "schema_version");
    if (ver != schema_version)
        throw ConfigError("schema_version " + std::to_string(ver) + " is not supported (expected " +
                          std::to_string(schema_version) + ")");
    c.model = require(j, "", "model");
    build_models(c.model);

    const json& e = require(j, "", "ensemble");
    allow_keys(e, "ensemble", {"matrix", "N", "delta", "trials", "seed"});
    const json& mx = require(e, "ensemble", "matrix");
    c.ensemble.matrix.type = str(require(mx, "ensemble.matrix", "type"), "ensemble.matrix.type");
    if (c.ensemble.matrix.type == "row_orthogonal") {
        allow_keys(mx, "ensemble.matrix", {"type", "scale"});
        c.ensemble.matrix.scale =
            positive(opt(mx, "ensemble.matrix", "scale", 1.0, num), "ensemble.matrix.scale");
    } else if (c.ensemble.matrix.type == "iid_gaussian") {
        allow_keys(mx, "ensemble.matrix", {"type", "sampling"});
        const std::string s = opt(mx, "ensemble.matrix", "sampling", std::string("direct"), str);
        if (s == "direct")
            c.ensemble.matrix.sampling = GaussianSampling::direct;
        else if (s == "rotational")
            c.ensemble.matrix.sampling = GaussianSampling::rotational;
        else
            throw ConfigError("ensemble.matrix.sampling: expected 'direct' or 'rotational'");
    } else if (c.ensemble.matrix.type == "haar_spectrum") {
        allow_keys(mx, "ensemble.matrix", {"type", "spectrum"});
        c.ensemble.matrix.spectrum = require(mx, "ensemble.matrix", "spectrum");
        try {
            spectral_measure_from_json(c.ensemble.matrix.spectrum).validate();
        } catch (const Error& err) {
            throw ConfigError(std::string("ensemble.matrix.spectrum: ") + err.what());
        }
    } else {
        throw ConfigError("ensemble.matrix.type: unknown ensemble '" + c.ensemble.matrix.type + "'");
    }
    c.ensemble.N.clear();
    const json& ns = require(e, "ensemble", "N");
    if (!ns.is_array() || ns.empty()) throw ConfigError("ensemble.N: expected a non-empty array");
    for (const auto& v : ns) {
        const long long n = integer(v, "ensemble.N[]");
        if (n < 1) throw ConfigError("ensemble.N: sizes must be >= 1");
        c.ensemble.N.push_back(int(n));
    }
    const json& ds = require(e, "ensemble", "delta");
    if (!ds.is_array() || ds.empty()) throw ConfigError("ensemble.delta: expected a non-empty array");
    for (const auto& v : ds) c.ensemble.delta.push_back(positive(num(v, "ensemble.delta[]"), "ensemble.delta[]"));
    if (c.ensemble.matrix.type == "row_orthogonal")
        for (double d : c.ensemble.delta)
            if (d > 1.0) throw ConfigError("ensemble.delta: row_orthogonal needs delta <= 1");
    c.ensemble.trials = int(opt(e, "ensemble", "trials", 100LL, integer));
    if (c.ensemble.trials < 1) throw ConfigError("ensemble.trials: must be >= 1");
    const long long seed = opt(e, "ensemble", "seed", 1LL, integer);
    if (seed < 0) throw ConfigError("ensemble.seed: must be >= 0");
    c.ensemble.seed = std::uint64_t(seed);

    if (j.contains("run")) {
        const json& r = j.at("run");
        allow_keys(r, "run",
                   {"T_iter", "conv_tol", "damping", "chi_floor", "init", "require_convergence", "trace_check"});
        c.run.options.T_iter = int(opt(r, "run", "T_iter", 10000LL, integer));
        c.run.options.conv_tol = positive(opt(r, "run", "conv_tol", 1e-15, num), "run.conv_tol");
        c.run.options.damping = opt(r, "run", "damping", 1.0, num);
        c.run.options.chi_floor = positive(opt(r, "run", "chi_floor", 1e-12, num), "run.chi_floor");
        c.run.options.check_trace_identity = opt(r, "run", "trace_check", false, boolean);
        c.run.require_convergence = opt(r, "run", "require_convergence", false, boolean);
        if (c.run.options.T_iter < 1) throw ConfigError("run.T_iter: must be >= 1");
        if (!(c.run.options.damping > 0.0 && c.run.options.damping <= 1.0))
            throw ConfigError("run.damping: must lie in (0, 1]");
        if (r.contains("init")) {
            const json& in = r.at("init");
            allow_keys(in, "run.init", {"h_variance", "Q1x", "Q1z"});
            c.run.init_h_variance = opt(in, "run.init", "h_variance", 1.0, num);
            c.run.init_Q1x = positive(opt(in, "run.init", "Q1x", 1.0, num), "run.init.Q1x");
            c.run.init_Q1z = positive(opt(in, "run.init", "Q1z", 1.0, num), "run.init.Q1z");
            if (!(c.run.init_h_variance >= 0.0)) throw ConfigError("run.init.h_variance: must be >= 0");
        }
    }
    if (j.contains("se")) {
        const json& s = j.at("se");
        allow_keys(s, "se", {"T", "trajectory_damping", "damping", "tol", "max_iter", "gh_nodes", "verify"});
        c.se.T = int(opt(s, "se", "T", 100LL, integer));
        c.se.trajectory_damping = opt(s, "se", "trajectory_damping", 1.0, num);
        c.se.damping = opt(s, "se", "damping", 0.5, num);
        c.se.tol = positive(opt(s, "se", "tol", 1e-11, num), "se.tol");
        c.se.max_iter = int(opt(s, "se", "max_iter", 20000LL, integer));
        c.se.gh_nodes = int(opt(s, "se", "gh_nodes", 121LL, integer));
        c.se.verify = opt(s, "se", "verify", false, boolean);
        if (c.se.T < 1 || c.se.max_iter < 1) throw ConfigError("se.T and se.max_iter must be >= 1");
        if (c.se.gh_nodes < 21 || c.se.gh_nodes > 500) throw ConfigError("se.gh_nodes: must lie in [21, 500]");
        for (double d : {c.se.trajectory_damping, c.se.damping})
            if (!(d > 0.0 && d <= 1.0)) throw ConfigError("se damping values must lie in (0, 1]");
    }
    if (j.contains("stability")) {
        const json& s = j.at("stability");
        allow_keys(s, "stability", {"bracket", "tol"});
        if (s.contains("bracket")) {
            const json& b = s.at("bracket");
            if (!b.is_array() || b.size() != 2) throw ConfigError("stability.bracket: expected [lo, hi]");
            c.stability.bracket = {num(b[0], "stability.bracket[0]"), num(b[1], "stability.bracket[1]")};
        }
        c.stability.tol = positive(opt(s, "stability", "tol", 1e-3, num), "stability.tol");
    }
    if (j.contains("output")) {
        const json& o = j.at("output");
        allow_keys(o, "output", {"dir"});
        c.out_dir = opt(o, "output", "dir", std::string("out"), str);
    }
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_config(j);
}

inline int rows_for(int N, double delta) { return std::max(1, int(std::lround(delta * N))); }

inline SpectralMeasure limiting_measure(const MatrixConfig& m, double delta) {
    if (m.type == "row_orthogonal") {
        if (delta > 1.0) throw ConfigError("row_orthogonal needs delta <= 1");
        const double s2 = m.scale * m.scale;
        if (delta == 1.0) return SpectralMeasure::from_atoms({{s2, 1.0}});
        return SpectralMeasure::from_atoms({{s2, delta}, {0.0, 1.0 - delta}});
    }
    if (m.type == "iid_gaussian") return marchenko_pastur_measure(delta);
    return spectral_measure_from_json(m.spectrum);
}

inline MeasurementMatrix sample_matrix(const MatrixConfig& m, int M, int N, RngStream& rng) {
    if (m.type == "row_orthogonal") return sample_row_orthogonal(M, N, m.scale, rng);
    if (m.type == "iid_gaussian") return sample_iid_gaussian(M, N, rng, m.sampling);
    return sample_haar_with_spectrum(spectral_measure_from_json(m.spectrum), M, N, rng);
}

inline SEOptions se_options(const SEConfig& s) {
    SEOptions o;
    o.quad.gh_nodes = s.gh_nodes;
    o.verify = s.verify;
    return o;
}

inline SEInputs se_init(const RunConfig& r) {
    SEInputs in;
    in.chih1x = r.init_h_variance;
    in.chih1z = r.init_h_variance;
    in.Q1x = r.init_Q1x;
    in.Q1z = r.init_Q1z;
    return in;
}

// ---------------------------------------------------------------- output

inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
    if (s == "nan") return NAN;
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw SchemaMismatch("not a number: '" + s + "'");
    return v;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string o = "\"";
    for (char ch : s) {
        if (ch == '"') o += '"';
        o += ch;
    }
    return o + "\"";
}

class CsvWriter {
public:
    CsvWriter(const fs::path& path, const std::vector<std::string>& header) : f_(path, std::ios::binary) {
        if (!f_) throw IoError("cannot write " + path.string());
        row(header);
    }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) f_ << (i ? "," : "") << csv_field(cells[i]);
        f_ << "\r\n";
    }
    void row(const std::vector<double>& vals) {
        std::vector<std::string> c;
        for (double v : vals) c.push_back(fmt(v));
        row(c);
    }

private:
    std::ofstream f_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw SchemaMismatch("missing column '" + name + "'");
        return int(it - header.begin());
    }
};

inline CsvTable read_csv(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string s = ss.str();
    std::vector<std::vector<std::string>> recs;
    std::vector<std::string> rec;
    std::string cell;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char ch = s[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < s.size() && s[i + 1] == '"') {
                    cell += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cell += ch;
            }
        } else if (ch == '"') {
            quoted = true;
            any = true;
        } else if (ch == ',') {
            rec.push_back(cell);
            cell.clear();
            any = true;
        } else if (ch == '\r' || ch == '\n') {
            if (ch == '\r' && i + 1 < s.size() && s[i + 1] == '\n') ++i;
            if (any || !cell.empty()) {
                rec.push_back(cell);
                recs.push_back(rec);
            }
            rec.clear();
            cell.clear();
            any = false;
        } else {
            cell += ch;
            any = true;
        }
    }
    if (any || !cell.empty()) {
        rec.push_back(cell);
        recs.push_back(rec);
    }
    if (recs.empty()) throw SchemaMismatch("empty CSV: " + path.string());
    CsvTable t;
    t.header = recs.front();
    for (std::size_t i = 1; i < recs.size(); ++i) {
        if (recs[i].size() != t.header.size()) throw SchemaMismatch("ragged row in " + path.string());
        t.rows.push_back(recs[i]);
    }
    return t;
}

inline std::string config_hash(const json& raw) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : raw.dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline json base_metadata(const ExperimentConfig& c, const std::string& command, std::uint64_t seed) {
    return {{"software", std::string("mvamp ") + MVAMP_VERSION},
            {"command", command},
            {"config_hash", config_hash(c.raw)},
            {"master_seed", seed},
            {"config", c.raw}};
}

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

inline void write_sidecar(const fs::path& file, const json& meta) {
    write_json(fs::path(file.string() + ".meta.json"), meta);
}

inline std::string tag(int N, double delta) { return "N" + std::to_string(N) + "_delta" + fmt(delta); }

inline void write_trajectory_csv(const fs::path& path, const std::vector<TrajectoryRow>& rows) {
    CsvWriter w(path, trajectory_columns());
    for (const auto& r : rows) w.row(row_values(r));
}

inline TrajectoryRow se_row(const MacroState& s, int t) {
    return {t,       s.m1x, s.q1x, s.chi1x, s.m1z, s.q1z, s.chi1z, s.m2x, s.q2x,
            s.chi2x, s.m2z, s.q2z, s.chi2z, NAN,   s.Q1x, s.Q1z,   s.Q2x, s.Q2z};
}

inline json to_json(const MacroState& s) {
    json j;
    auto names = MacroState::field_names();
    auto vals = s.fields();
    for (std::size_t i = 0; i < names.size(); ++i) j[names[i]] = vals[i];
    j["Tx"] = s.Tx;
    j["Tz"] = s.Tz;
    j["chix2"] = s.chix2;
    j["chiz2"] = s.chiz2;
    return j;
}

// ---------------------------------------------------------------- trials

struct TrialOutcome {
    int N = 0;
    double delta = 0;
    int trial = 0;
    Trajectory traj;
};

inline RngStream trial_stream(std::uint64_t seed, int N, double delta, int trial) {
    return RngStream(seed, {std::uint64_t(N), real_key(delta), std::uint64_t(trial)});
}

inline TrialOutcome run_trial(const ExperimentConfig& c, const ScalarModelPair& models, std::uint64_t seed, int N,
                              double delta, int trial) {
    RngStream root = trial_stream(seed, N, delta, trial);
    RngStream rm = root.split(0), rp = root.split(1), ri = root.split(2);
    const int M = rows_for(N, delta);
    auto A = std::make_shared<const MeasurementMatrix>(sample_matrix(c.ensemble.matrix, M, N, rm));
    ProblemInstance p = make_problem(A, models, rp);
    EngineState s0 = default_init(p, ri, c.run.init_h_variance, c.run.init_Q1x, c.run.init_Q1z);
    TrialOutcome o;
    o.N = N;
    o.delta = delta;
    o.trial = trial;
    o.traj = run_vamp(p, s0, c.run.options);
    return o;
}

inline json trajectory_metadata(const Trajectory& t) {
    return {{"converged", t.converged},
            {"iterations", int(t.rows.size())},
            {"abort_reason", to_string(t.abort)},
            {"abort_message", t.abort_message},
            {"abort_iteration", t.abort_iteration},
            {"final_d", t.rows.empty() ? json(nullptr) : json(t.rows.back().d)},
            {"trace_identity_error", t.trace_identity_error},
            {"fixed_point_z_gap", std::isnan(t.fixed_point_z_gap) ? json(nullptr) : json(t.fixed_point_z_gap)},
            {"fixed_point_chi_gap", std::isnan(t.fixed_point_chi_gap) ? json(nullptr) : json(t.fixed_point_chi_gap)}};
}

inline json init_metadata(const RunConfig& r) {
    return {{"h_distribution", "iid normal"}, {"h_variance", r.init_h_variance}, {"Q1x", r.init_Q1x}, {"Q1z", r.init_Q1z}};
}

// ---------------------------------------------------------------- commands

inline int cmd_run(const ExperimentConfig& c, std::uint64_t seed, const fs::path& out) {
    fs::create_directories(out);
    const ScalarModelPair models = build_models(c.model);
    const int N = c.ensemble.N.front();
    const double delta = c.ensemble.delta.front();
    TrialOutcome o = run_trial(c, models, seed, N, delta, 0);
    const fs::path file = out / ("run_" + tag(N, delta) + ".csv");
    write_trajectory_csv(file, o.traj.rows);
    json meta = base_metadata(c, "run", seed);
    meta["N"] = N;
    meta["M"] = rows_for(N, delta);
    meta["delta"] = delta;
    meta["trial"] = 0;
    meta["init"] = init_metadata(c.run);
    meta["result"] = trajectory_metadata(o.traj);
    meta["columns"] = trajectory_columns();
    write_sidecar(file, meta);
    if (o.traj.abort != AbortReason::none) return exit_numerical;
    if (!o.traj.converged && c.run.require_convergence) return exit_nonconvergence;
    return exit_ok;
}

inline int cmd_se(const ExperimentConfig& c, const fs::path& out) {
    fs::create_directories(out);
    const ScalarModelPair models = build_models(c.model);
    const SEOptions so = se_options(c.se);
    int code = exit_ok;
    for (double delta : c.ensemble.delta) {
        SEProblem pb{models, limiting_measure(c.ensemble.matrix, delta), delta};
        const fs::path tfile = out / ("se_delta" + fmt(delta) + ".csv");
        const fs::path ffile = out / ("se_fixed_point_delta" + fmt(delta) + ".json");
        json meta = base_metadata(c, "se", c.ensemble.seed);
        meta["delta"] = delta;
        meta["measure"] = to_json(pb.measure);
        meta["init"] = {{"mh1x", 0.0}, {"chih1x", c.run.init_h_variance}, {"Q1x", c.run.init_Q1x},
                        {"mh1z", 0.0}, {"chih1z", c.run.init_h_variance}, {"Q1z", c.run.init_Q1z}};
        meta["columns"] = trajectory_columns();
        try {
            auto traj = se_trajectory(pb, se_init(c.run), c.se.T, c.se.trajectory_damping, so);
            std::vector<TrajectoryRow> rows;
            for (std::size_t i = 0; i < traj.size(); ++i) rows.push_back(se_row(traj[i], int(i) + 1));
            write_trajectory_csv(tfile, rows);
            write_sidecar(tfile, meta);
        } catch (const SETrajectoryError& e) {
            meta["error"] = e.what();
            meta["error_iteration"] = e.t;
            write_json(ffile, meta);
            return exit_numerical;
        }
        SEFixedPoint fp = se_fixed_point(pb, se_init(c.run), c.se.damping, c.se.tol, c.se.max_iter, so);
        json rec = meta;
        rec.erase("columns");
        rec["converged"] = fp.converged;
        rec["iterations"] = fp.iterations;
        rec["last_change"] = fp.change;
        rec["part_gap"] = fp.part_gap;
        rec["rs_saddle_residual"] = fp.residual;
        rec["state"] = to_json(fp.state);
        if (fp.converged) {
            try {
                rec["stability"] = to_json(stability_report(fp.state, pb.measure, delta));
            } catch (const SingularMeasure& e) {
                rec["stability"] = {{"error", e.what()}};
            }
        } else {
            rec["non_convergence"] = true;
            code = exit_nonconvergence;
        }
        write_json(ffile, rec);
    }
    return code;
}

// Mean trajectories across trials. A converged trial holds its final row
// for later iterations; an aborted trial stops contributing after its abort.
struct MeanTrajectory {
    std::vector<int> t, n;
    std::map<std::string, std::vector<double>> mean, stderr_;
};

inline MeanTrajectory aggregate(const std::vector<const Trajectory*>& trials) {
    MeanTrajectory out;
    std::size_t T = 0;
    for (auto* tr : trials) T = std::max(T, tr->rows.size());
    const auto& cols = trajectory_columns();
    for (std::size_t k = 0; k < T; ++k) {
        std::vector<const TrajectoryRow*> rows;
        for (auto* tr : trials) {
            if (k < tr->rows.size())
                rows.push_back(&tr->rows[k]);
            else if (tr->converged && !tr->rows.empty())
                rows.push_back(&tr->rows.back());
        }
        out.t.push_back(int(k) + 1);
        out.n.push_back(int(rows.size()));
        for (std::size_t c = 1; c < cols.size(); ++c) {
            double s = 0.0, s2 = 0.0;
            for (auto* r : rows) s += row_values(*r)[c];
            const double n = double(rows.size());
            const double m = n > 0 ? s / n : NAN;
            for (auto* r : rows) s2 += (row_values(*r)[c] - m) * (row_values(*r)[c] - m);
            out.mean[cols[c]].push_back(m);
            out.stderr_[cols[c]].push_back(n > 1 ? std::sqrt(s2 / (n - 1.0) / n) : 0.0);
        }
    }
    return out;
}

inline void write_mean_csv(const fs::path& path, const MeanTrajectory& m) {
    std::vector<std::string> header{"t", "n"};
    const auto& cols = trajectory_columns();
    for (std::size_t c = 1; c < cols.size(); ++c) {
        header.push_back(cols[c] + "_mean");
        header.push_back(cols[c] + "_stderr");
    }
    CsvWriter w(path, header);
    for (std::size_t k = 0; k < m.t.size(); ++k) {
        std::vector<double> v{double(m.t[k]), double(m.n[k])};
        for (std::size_t c = 1; c < cols.size(); ++c) {
            v.push_back(m.mean.at(cols[c])[k]);
            v.push_back(m.stderr_.at(cols[c])[k]);
        }
        w.row(v);
    }
}

struct SweepPoint {
    int N;
    double delta;
    int trials = 0, converged = 0;
    double probability = 0, stderr_ = 0;
    std::map<std::string, int> aborts;
};

inline std::vector<TrialOutcome> run_ensemble_trials(const ExperimentConfig& c, std::uint64_t seed, int jobs) {
    const ScalarModelPair models = build_models(c.model);
    struct Task {
        int N;
        double delta;
        int trial;
    };
    std::vector<Task> tasks;
    for (int N : c.ensemble.N)
        for (double d : c.ensemble.delta)
            for (int t = 0; t < c.ensemble.trials; ++t) tasks.push_back({N, d, t});
    std::vector<TrialOutcome> results(tasks.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors(tasks.size());
    auto worker = [&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
            try {
                results[i] = run_trial(c, models, seed, tasks[i].N, tasks[i].delta, tasks[i].trial);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    const int nj = std::max(1, jobs);
    std::vector<std::thread> pool;
    for (int j = 1; j < nj; ++j) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    for (std::size_t i = 0; i < tasks.size(); ++i)
        if (!errors[i].empty()) throw Error("trial " + std::to_string(tasks[i].trial) + " failed: " + errors[i]);
    return results;
}

inline std::vector<SweepPoint> summarize(const ExperimentConfig& c, const std::vector<TrialOutcome>& results) {
    std::vector<SweepPoint> pts;
    for (int N : c.ensemble.N)
        for (double d : c.ensemble.delta) {
            SweepPoint p{N, d};
            for (const auto& r : results)
                if (r.N == N && r.delta == d) {
                    ++p.trials;
                    if (r.traj.converged) ++p.converged;
                    if (r.traj.abort != AbortReason::none) ++p.aborts[to_string(r.traj.abort)];
                }
            p.probability = double(p.converged) / double(p.trials);
            p.stderr_ = std::sqrt(p.probability * (1.0 - p.probability) / double(p.trials));
            pts.push_back(p);
        }
    return pts;
}

inline int cmd_ensemble(const ExperimentConfig& c, std::uint64_t seed, int jobs, const fs::path& out) {
    fs::create_directories(out);
    auto results = run_ensemble_trials(c, seed, jobs);
    auto pts = summarize(c, results);
    json meta = base_metadata(c, "ensemble", seed);
    meta["init"] = init_metadata(c.run);
    for (const auto& p : pts) {
        std::vector<const Trajectory*> tr;
        for (const auto& r : results)
            if (r.N == p.N && r.delta == p.delta) tr.push_back(&r.traj);
        const fs::path mfile = out / ("ensemble_" + tag(p.N, p.delta) + ".csv");
        write_mean_csv(mfile, aggregate(tr));
        json m = meta;
        m["N"] = p.N;
        m["delta"] = p.delta;
        m["trials"] = p.trials;
        write_sidecar(mfile, m);
        const fs::path tfile = out / ("trials_" + tag(p.N, p.delta) + ".csv");
        CsvWriter w(tfile, {"trial", "converged", "iterations", "final_d", "abort_reason", "abort_iteration",
                            "trace_identity_error"});
        for (const auto& r : results)
            if (r.N == p.N && r.delta == p.delta)
                w.row(std::vector<std::string>{std::to_string(r.trial), r.traj.converged ? "1" : "0",
                                               std::to_string(r.traj.rows.size()),
                                               r.traj.rows.empty() ? "nan" : fmt(r.traj.rows.back().d),
                                               to_string(r.traj.abort), std::to_string(r.traj.abort_iteration),
                                               fmt(r.traj.trace_identity_error)});
        write_sidecar(tfile, m);
    }
    const fs::path sfile = out / "summary.csv";
    CsvWriter w(sfile, {"N", "delta", "trials", "converged", "convergence_probability", "stderr",
                        "aborts_degenerate_divergence", "aborts_indefinite_precision", "aborts_non_finite"});
    for (const auto& p : pts) {
        auto ab = [&](const char* k) { return std::to_string(p.aborts.count(k) ? p.aborts.at(k) : 0); };
        w.row(std::vector<std::string>{std::to_string(p.N), fmt(p.delta), std::to_string(p.trials),
                                       std::to_string(p.converged), fmt(p.probability), fmt(p.stderr_),
                                       ab("degenerate_divergence"), ab("indefinite_precision"), ab("non_finite")});
    }
    write_sidecar(sfile, meta);
    return exit_ok;
}

struct CompareRow {
    int t;
    std::string observable;
    double mean, stderr_, se, z;
};

struct CompareResult {
    std::vector<CompareRow> rows;
    double max_abs_z = 0;
    int undefined = 0;
};

// vamp: a mean-trajectory CSV, or a directory holding exactly one.
inline CompareResult compare_tables(const fs::path& vamp, const fs::path& se_file,
                                    const std::vector<std::string>& observables, int t_max) {
    fs::path vfile = vamp;
    if (fs::is_directory(vamp)) {
        std::vector<fs::path> found;
        for (const auto& e : fs::directory_iterator(vamp)) {
            const std::string n = e.path().filename().string();
            if (n.rfind("ensemble_", 0) == 0 && e.path().extension() == ".csv") found.push_back(e.path());
        }
        if (found.size() != 1)
            throw SchemaMismatch("expected exactly one ensemble_*.csv in " + vamp.string() + ", found " +
                                 std::to_string(found.size()));
        vfile = found.front();
    }
    CsvTable v = read_csv(vfile), s = read_csv(se_file);
    const int vt = v.column("t"), st = s.column("t");
    std::map<int, std::size_t> se_by_t;
    for (std::size_t i = 0; i < s.rows.size(); ++i) se_by_t[int(parse_double(s.rows[i][st]))] = i;
    CompareResult out;
    for (const auto& obs : observables) {
        const int vm = v.column(obs + "_mean"), vs = v.column(obs + "_stderr"), sc = s.column(obs);
        for (const auto& row : v.rows) {
            const int t = int(parse_double(row[vt]));
            if (t_max > 0 && t > t_max) continue;
            auto it = se_by_t.find(t);
            if (it == se_by_t.end()) continue;
            CompareRow r{t, obs, parse_double(row[vm]), parse_double(row[vs]), parse_double(s.rows[it->second][sc]), NAN};
            if (r.stderr_ > 0.0 && std::isfinite(r.stderr_)) {
                r.z = (r.mean - r.se) / r.stderr_;
                out.max_abs_z = std::max(out.max_abs_z, std::abs(r.z));
            } else {
                ++out.undefined;
            }
            out.rows.push_back(r);
        }
    }
    if (out.rows.empty()) throw SchemaMismatch("no common iterations between the two files");
    return out;
}

inline int cmd_compare(const fs::path& vamp, const fs::path& se_file, const fs::path& out,
                       const std::vector<std::string>& observables, int t_max) {
    fs::create_directories(out);
    CompareResult r = compare_tables(vamp, se_file, observables, t_max);
    const fs::path file = out / "compare.csv";
    CsvWriter w(file, {"t", "observable", "vamp_mean", "vamp_stderr", "se", "z"});
    for (const auto& row : r.rows)
        w.row(std::vector<std::string>{std::to_string(row.t), row.observable, fmt(row.mean), fmt(row.stderr_),
                                       fmt(row.se), fmt(row.z)});
    json meta{{"software", std::string("mvamp ") + MVAMP_VERSION},
              {"command", "compare"},
              {"vamp", vamp.string()},
              {"se", se_file.string()},
              {"observables", observables},
              {"t_max", t_max},
              {"max_abs_z", r.max_abs_z},
              {"undefined_z", r.undefined}};
    write_sidecar(file, meta);
    return r.undefined > 0 ? exit_numerical : exit_ok;
}

inline int cmd_stability(const ExperimentConfig& c, bool find_threshold,
                         std::optional<std::pair<double, double>> bracket, const fs::path& out) {
    fs::create_directories(out);
    const ScalarModelPair models = build_models(c.model);
    const SEOptions so = se_options(c.se);
    int code = exit_ok;
    json reports = json::array();
    for (double delta : c.ensemble.delta) {
        SEProblem pb{models, limiting_measure(c.ensemble.matrix, delta), delta};
        SEFixedPoint fp = se_fixed_point(pb, se_init(c.run), c.se.damping, c.se.tol, c.se.max_iter, so);
        json r{{"delta", delta}, {"se_converged", fp.converged}, {"iterations", fp.iterations},
               {"rs_saddle_residual", fp.residual}, {"state", to_json(fp.state)}};
        if (fp.converged)
            r["report"] = to_json(stability_report(fp.state, pb.measure, delta));
        else
            code = exit_nonconvergence;
        reports.push_back(r);
    }
    json doc = base_metadata(c, "stability", c.ensemble.seed);
    doc["points"] = reports;
    if (find_threshold) {
        auto br = bracket ? bracket : c.stability.bracket;
        if (!br) throw ConfigError("--find-threshold needs --bracket LO HI or stability.bracket in the config");
        ThresholdOptions to;
        to.tol = c.stability.tol;
        to.damping = c.se.damping;
        to.se_tol = c.se.tol;
        to.max_iter = c.se.max_iter;
        to.se = so;
        const MatrixConfig mc = c.ensemble.matrix;
        ThresholdResult th = find_at_threshold(
            [&](double d) { return SEProblem{models, limiting_measure(mc, d), d}; }, br->first, br->second, to);
        doc["threshold"] = {{"delta_at", th.delta_at}, {"lo", th.lo},           {"hi", th.hi},
                            {"at_lo", th.at_lo},       {"at_hi", th.at_hi},     {"evaluations", th.evaluations},
                            {"tol", to.tol},           {"bracket", {br->first, br->second}}};
    }
    write_json(out / "stability.json", doc);
    return code;
}

}  // namespace mvamp::harness
