// SPDX-License-Identifier: Apache-2.0
// udarts command-line front end.

#include <chrono>
#include <iostream>

#include "CLI11.hpp"
#include "udarts/experiment.hpp"

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kRuntime = 2, kCheckFailed = 3 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "run this seed instead of the configured list");
    sub->add_option("--out", o.out, "output root, overrides output_dir");
}

// Per-run wall-clock log, kept apart from the reproducible artifacts.
void log_timing(const udarts::fs::path& dir, const std::string& what, double seconds) {
    udarts::fs::create_directories(dir);
    std::ofstream log(dir / "run.log", std::ios::app);
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
    log << stamp << ' ' << what << ' ' << seconds << "s\n";
}

int run(const std::string& cmd, const Options& o) {
    using namespace udarts;
    ExperimentConfig cfg = load_config(o.config);
    if (o.seed) cfg.seeds = {*o.seed};
    if (!o.out.empty()) cfg.output_dir = o.out;
    const fs::path root = cfg.output_dir;

    if (cmd == "verify-lemmas") {
        fs::create_directories(root);
        LemmaReport rep = run_verify_lemmas(cfg.lemmas);
        write_json(root / "lemmas.json", rep.report);
        std::cout << "verify-lemmas: " << (rep.passed ? "all gated checks passed" : "gated check FAILED") << " ("
                  << (root / "lemmas.json").string() << ")\n";
        return rep.passed ? kOk : kCheckFailed;
    }

    std::function<void(const ExperimentConfig&, std::uint64_t, const fs::path&)> job;
    if (cmd == "search")
        job = [](const ExperimentConfig& c, std::uint64_t s, const fs::path& d) { run_search(c, s, d); };
    else if (cmd == "train-final")
        job = [](const ExperimentConfig& c, std::uint64_t s, const fs::path& d) { run_train_final(c, s, d); };
    else if (cmd == "evaluate")
        job = run_evaluate;
    else if (cmd == "spectra")
        job = run_spectra;
    else if (cmd == "noise-sweep")
        job = run_noise_sweep;
    else
        throw ConfigError("unknown subcommand '" + cmd + "'");

    const std::size_t workers = worker_count();
    for_each_seed(cfg.seeds, workers, [&](std::uint64_t seed) {
        const fs::path dir = run_dir(cfg, seed, root);
        const auto t0 = std::chrono::steady_clock::now();
        job(cfg, seed, dir);
        log_timing(dir, cmd, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    });
    for (auto s : cfg.seeds) std::cout << cmd << ": " << run_dir(cfg, s, root).string() << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"uncertainty-aware differentiable architecture search"};
    app.require_subcommand(1);
    Options opts;
    const std::vector<std::pair<std::string, std::string>> cmds{
        {"search", "bilevel search; writes losses, spectra, checkpoint and architecture"},
        {"train-final", "retrain the discretised architecture"},
        {"evaluate", "accuracy, predictive variance and NLL of the latest checkpoint"},
        {"spectra", "dominant Hessian eigenvalues for every saved checkpoint"},
        {"verify-lemmas", "numerical checks on the linear logistic model"},
        {"noise-sweep", "accuracy and variance over an SNR x parameter-noise grid"}};
    for (const auto& [name, help] : cmds) add_common(app.add_subcommand(name, help), opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        return run(cmd, opts);
    } catch (const udarts::ConfigError& e) {
        std::cerr << "udarts: config error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "udarts: " << e.what() << '\n';
        return kRuntime;
    }
}
