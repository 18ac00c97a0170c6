#include <CLI11.hpp>
#include <iostream>

#include "mvamp/harness.hpp"

namespace h = mvamp::harness;

int main(int argc, char** argv) {
    CLI::App app{"VAMP for GLMs under model mismatch: engine, state evolution, stability"};
    app.set_version_flag("--version", std::string("mvamp ") + MVAMP_VERSION);
    app.require_subcommand(1);

    std::string config, out, vamp_path, se_path;
    std::optional<std::uint64_t> seed;
    int jobs = 1, t_max = 0;
    bool find = false;
    std::vector<double> bracket;
    std::vector<std::string> observables{"m1x", "q1x"};

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "output directory (overrides output.dir)");
    };
    auto* run = app.add_subcommand("run", "one VAMP trajectory at the first N and delta");
    add_common(run);
    run->add_option("--seed", seed, "master seed (overrides ensemble.seed)");
    auto* se = app.add_subcommand("se", "SE trajectory and fixed point per delta");
    add_common(se);
    auto* ens = app.add_subcommand("ensemble", "independent trials over the N x delta grid");
    add_common(ens);
    ens->add_option("--seed", seed, "master seed (overrides ensemble.seed)");
    ens->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    auto* st = app.add_subcommand("stability", "stability diagnostics at the SE fixed points");
    add_common(st);
    st->add_flag("--find-threshold", find, "bisect for the AT threshold");
    st->add_option("--bracket", bracket, "threshold bracket LO HI")->expected(2);
    auto* cmp = app.add_subcommand("compare", "z-scores of ensemble means against an SE trajectory");
    cmp->add_option("--vamp", vamp_path, "ensemble mean CSV, or a directory holding one")->required();
    cmp->add_option("--se", se_path, "SE trajectory CSV")->required()->check(CLI::ExistingFile);
    cmp->add_option("--out", out, "output directory")->required();
    cmp->add_option("--observables", observables, "columns to compare");
    cmp->add_option("--t-max", t_max, "last iteration compared (0 = all)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmp->parsed()) return h::cmd_compare(vamp_path, se_path, out, observables, t_max);
        h::ExperimentConfig c = h::load_config(config);
        const std::string dir = out.empty() ? c.out_dir : out;
        const std::uint64_t s = seed.value_or(c.ensemble.seed);
        if (run->parsed()) return h::cmd_run(c, s, dir);
        if (se->parsed()) return h::cmd_se(c, dir);
        if (ens->parsed()) return h::cmd_ensemble(c, s, jobs, dir);
        std::optional<std::pair<double, double>> br;
        if (bracket.size() == 2) br = std::make_pair(bracket[0], bracket[1]);
        return h::cmd_stability(c, find, br, dir);
    } catch (const mvamp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return h::exit_config;
    } catch (const mvamp::SchemaMismatch& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return h::exit_config;
    } catch (const mvamp::NonConvergence& e) {
        std::cerr << "non-convergence: " << e.what() << "\n";
        return h::exit_nonconvergence;
    } catch (const mvamp::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return h::exit_numerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return h::exit_numerical;
    }
}
