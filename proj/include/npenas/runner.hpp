#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "npenas/evolve.hpp"

namespace npenas {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct SpaceSource {
    enum class Kind { micro, tabular };
    Kind kind = Kind::micro;
    std::uint64_t micro_seed = 0;
    std::string path;

    static SpaceSource micro(std::uint64_t seed);
    static SpaceSource tabular(std::string path);
    SpaceWithOracle load() const;
};

struct AlgoSpec {
    std::string name;  // npenas-np | npenas-bo | npenas-oracle | random-search | ea-fanout
    NpenasConfig cfg;
    int k = 10;  // ea-fanout fan-out

    std::string label() const;  // unique output-directory name
};

struct ExperimentConfig {
    SpaceSource space;
    std::vector<AlgoSpec> algorithms;
    int trials = 1;
    std::uint64_t base_seed = 0;
    std::string out_dir;
    int jobs = 0;  // 0 = all hardware threads
};

ExperimentConfig parse_experiment_config_text(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

RunRecord run_single_trial(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                           const AlgoSpec& algo, std::uint64_t seed);

// Runs `trials` seeded trials (seed = base_seed + trial index), optionally in
// parallel; per-trial files land under <out_dir>/<label>/ when out_dir is set.
// Results come back in trial order regardless of scheduling.
std::vector<RunRecord> run_trials(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                                  const AlgoSpec& algo, int trials, std::uint64_t base_seed,
                                  int jobs, const std::string& out_dir = "",
                                  bool log_progress = false);

// Best-so-far test error after at most `queries` evaluations.
double best_test_at(const RunRecord& rec, int queries);
const TracePoint& trace_at(const RunRecord& rec, int queries);

struct AggregateRow {
    std::string algo;
    int queries = 0;
    double mean_test_err = 0.0;
    double p30 = 0.0;
    double p70 = 0.0;
    int trials = 0;
};

// Mean and 30/70 percentiles of best-so-far test error at every multiple of
// `checkpoint_every` from the first trace point to the budget.
std::vector<AggregateRow> aggregate_records(const std::string& algo_label,
                                            const std::vector<RunRecord>& records,
                                            int checkpoint_every);
void write_summary_csv(const std::vector<AggregateRow>& rows, const std::string& path);

// search subcommand: all (algorithm x trial) cells plus summary.csv.
void cmd_search(const ExperimentConfig& cfg);

struct KlReport {
    double direct_vs_truth = 0.0;
    double prune_vs_truth = 0.0;
};

// Emits truth/direct/prune path-distribution CSVs plus kl.json; the direct
// sample is n_samples independent single draws, the prune sample n_samples
// pipeline draws.
KlReport sampler_study(const SearchSpaceSpec& spec, std::size_t n_samples, std::uint64_t seed,
                       const std::string& out_dir);

struct PredictorStudyRow {
    std::string sampler;  // direct | prune
    std::string method;   // NPGE | NPUGE | MNPE | MNAE
    int train_size = 0;
    int repeats = 0;
    double mae_mean_pct = 0.0;
    double mae_std_pct = 0.0;
    double kl_mean = 0.0;
    double kl_std = 0.0;
};

std::vector<PredictorStudyRow> predictor_study(const SearchSpaceSpec& spec,
                                               const FitnessOracle& oracle,
                                               const std::vector<int>& train_sizes, int repeats,
                                               std::uint64_t base_seed, int jobs,
                                               const std::string& out_dir = "",
                                               int test_size = 500);

// Per-k best-so-far curves for the mutation fan-out comparison.
void fanout_study(const SearchSpaceSpec& spec, const FitnessOracle& oracle,
                  const std::vector<int>& ks, int trials, std::uint64_t base_seed, int budget,
                  int jobs, const std::string& out_dir);

struct BenchValidation {
    bool ok = false;
    std::string message;
    long line = 0;
    std::size_t rows = 0;
};
BenchValidation validate_bench(const std::string& path);

}  // namespace npenas
