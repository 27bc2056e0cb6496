#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "npenas/predictor.hpp"
#include "npenas/space.hpp"

namespace npenas {

struct NpenasConfig {
    enum class Variant { bo, np };

    int n0 = 10;
    int total_num = 150;
    int mu_num = 100;
    int t = 10;
    Variant variant = Variant::np;
    std::uint64_t seed = 0;
    int parent_cap = 10;    // elite parents cycled per generation
    int train_epochs = -1;  // -1: variant default (1000 uncertainty, 300 point)

    void check() const;  // n0 >= 2, t <= mu_num, n0 <= total_num
};

// Evaluated architectures in query order; keys stay unique for the whole run.
struct Pool {
    std::vector<EvalRecord> records;
    KeySet keys;

    void append(EvalRecord rec);
    std::size_t size() const { return records.size(); }
    // Earliest record on val-err ties (stable argmin).
    const EvalRecord& val_argmin() const;
};

struct TracePoint {
    int queries = 0;
    GraphKey best_key;
    double best_val_err = 0.0;
    double best_test_err = 0.0;
};

struct IterationLog {
    int iteration = 0;
    int pool_size_before = 0;
    std::vector<std::string> selected_keys;
    std::vector<double> scores;         // predicted errors of the selected offspring
    std::vector<double> evaluated_val;  // their evaluated validation errors
    double train_loss_first = 0.0;
    double train_loss_last = 0.0;
};

struct RunRecord {
    std::string algo;
    std::string config_json;
    std::vector<IterationLog> iterations;
    std::vector<TracePoint> trace;  // best-so-far after every pool update
    std::string best_key;
    double best_val_err = 0.0;
    double best_test_err = 0.0;
    int queries = 0;
    double wall_ms = 0.0;
};

// JSON Lines: config, one line per iteration/trace point, summary.
// Written to a temp file and renamed, so partial failures never corrupt it.
void write_run_record(const RunRecord& rec, const std::string& path);
RunRecord read_run_record(const std::string& path);

Pool init_pool(const SearchSpaceSpec& space, const FitnessOracle& oracle, int n0, Rng& rng);

// One-to-many candidate generation: elite parents in ascending val-err order
// (capped, cycling) each contribute ceil(mu_num/#parents) mutants, all
// distinct from the pool and from each other.
std::vector<ArchGraph> generate_candidates(const Pool& pool, const SearchSpaceSpec& space,
                                           int mu_num, Rng& rng, int parent_cap = 10);

// Indices of the `t` smallest scores; ties keep generation order.
std::vector<std::size_t> select_top(std::size_t num_candidates,
                                    const std::vector<double>& scores, int t);

RunRecord npenas_bo(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                    const NpenasConfig& cfg);
RunRecord npenas_np(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                    const NpenasConfig& cfg);

// NPENAS loop scored by the true oracle means: the reference upper bound used
// by the sandwich check.
RunRecord npenas_oracle_scores(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                               const NpenasConfig& cfg);

RunRecord random_search(const SearchSpaceSpec& space, const FitnessOracle& oracle, int budget,
                        Rng& rng);

// Plain EA with binary tournament parent selection and k offspring per
// parent, all evaluated by the oracle; the top 10 join the population.
RunRecord ea_fanout(const SearchSpaceSpec& space, const FitnessOracle& oracle, int budget, int k,
                    Rng& rng, int n0 = 10);

}  // namespace npenas
