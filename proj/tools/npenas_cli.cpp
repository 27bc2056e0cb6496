#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "npenas/runner.hpp"

namespace {

npenas::SpaceSource source_from_flags(const std::string& bench_path, std::uint64_t micro_seed) {
    if (!bench_path.empty()) return npenas::SpaceSource::tabular(bench_path);
    return npenas::SpaceSource::micro(micro_seed);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Neural-predictor-guided evolutionary search over tabular cell spaces"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::string out_dir;
    int jobs = 0;
    std::uint64_t seed = 0;
    app.add_option("--config", config_path, "experiment config (JSON)");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--jobs", jobs, "worker threads (0 = all cores)");
    app.add_option("--seed", seed, "base seed");

    std::string bench_path;
    std::uint64_t micro_seed = 7;

    auto* search = app.add_subcommand("search", "run seeded search trials and aggregate");

    auto* sampler = app.add_subcommand("sampler-study", "path-distribution bias of the samplers");
    std::size_t n_samples = 5000;
    sampler->add_option("--samples", n_samples, "samples per pipeline");
    sampler->add_option("--bench", bench_path, "imported benchmark file");
    sampler->add_option("--micro-seed", micro_seed, "synthetic space seed");

    auto* pred = app.add_subcommand("predictor-study", "predictor comparison table");
    std::vector<int> sizes = {20, 100, 150};
    int repeats = 50;
    pred->add_option("--sizes", sizes, "training set sizes")->delimiter(',');
    pred->add_option("--repeats", repeats, "repeats per cell");
    pred->add_option("--bench", bench_path, "imported benchmark file");
    pred->add_option("--micro-seed", micro_seed, "synthetic space seed");

    auto* fanout = app.add_subcommand("fanout-study", "one-to-many mutation comparison");
    std::vector<int> ks = {1, 10, 20, 30};
    int trials = 600;
    int budget = 150;
    fanout->add_option("--k", ks, "offspring per parent")->delimiter(',');
    fanout->add_option("--trials", trials, "trials per k");
    fanout->add_option("--budget", budget, "query budget");
    fanout->add_option("--bench", bench_path, "imported benchmark file");
    fanout->add_option("--micro-seed", micro_seed, "synthetic space seed");

    auto* export_bench = app.add_subcommand("export-bench", "write the synthetic space as a file");
    std::string export_path;
    export_bench->add_option("--micro-seed", micro_seed, "synthetic space seed");
    export_bench->add_option("file", export_path, "output file")->required();

    auto* validate = app.add_subcommand("validate-bench", "schema-check a benchmark file");
    std::string validate_path;
    validate->add_option("file", validate_path, "benchmark file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (search->parsed()) {
            if (config_path.empty()) {
                std::fprintf(stderr, "search needs --config\n");
                return 1;
            }
            npenas::ExperimentConfig cfg = npenas::load_experiment_config(config_path);
            if (!out_dir.empty()) cfg.out_dir = out_dir;
            if (jobs > 0) cfg.jobs = jobs;
            if (app.count("--seed") > 0) cfg.base_seed = seed;
            npenas::cmd_search(cfg);
            std::printf("wrote %s/summary.csv\n", cfg.out_dir.c_str());
        } else if (sampler->parsed()) {
            if (out_dir.empty()) {
                std::fprintf(stderr, "sampler-study needs --out\n");
                return 1;
            }
            auto space = source_from_flags(bench_path, micro_seed).load();
            const auto report = npenas::sampler_study(space.spec, n_samples, seed, out_dir);
            std::printf("KL(direct||truth) = %.6f\nKL(prune||truth)  = %.6f\n",
                        report.direct_vs_truth, report.prune_vs_truth);
        } else if (pred->parsed()) {
            if (out_dir.empty()) {
                std::fprintf(stderr, "predictor-study needs --out\n");
                return 1;
            }
            auto space = source_from_flags(bench_path, micro_seed).load();
            npenas::predictor_study(space.spec, space.oracle, sizes, repeats, seed, jobs, out_dir);
            std::printf("wrote %s/predictor_study.csv\n", out_dir.c_str());
        } else if (fanout->parsed()) {
            if (out_dir.empty()) {
                std::fprintf(stderr, "fanout-study needs --out\n");
                return 1;
            }
            auto space = source_from_flags(bench_path, micro_seed).load();
            npenas::fanout_study(space.spec, space.oracle, ks, trials, seed, budget, jobs,
                                 out_dir);
            std::printf("wrote %s/fanout_curves.csv\n", out_dir.c_str());
        } else if (export_bench->parsed()) {
            auto space = npenas::SpaceSource::micro(micro_seed).load();
            npenas::export_tabular(space.spec, space.oracle, export_path);
            std::printf("wrote %s (%zu rows)\n", export_path.c_str(), space.spec.size());
        } else if (validate->parsed()) {
            const auto result = npenas::validate_bench(validate_path);
            if (!result.ok) {
                std::fprintf(stderr, "%s\n", result.message.c_str());
                return 1;
            }
            std::printf("%s\n", result.message.c_str());
        }
    } catch (const npenas::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const npenas::BenchFormatError& e) {
        std::fprintf(stderr, "benchmark error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
