#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "npenas/archgraph.hpp"
#include "npenas/rng.hpp"

namespace npenas {

struct SampleError : std::runtime_error {
    explicit SampleError(const std::string& what) : std::runtime_error(what) {}
};
struct NeighborhoodExhausted : std::runtime_error {
    explicit NeighborhoodExhausted(const std::string& what) : std::runtime_error(what) {}
};
struct UnknownArchitecture : std::runtime_error {
    explicit UnknownArchitecture(const std::string& what) : std::runtime_error(what) {}
};
struct BenchFormatError : std::runtime_error {
    BenchFormatError(const std::string& what, long line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_number(line) {}
    long line_number;
};

using KeySet = std::unordered_set<GraphKey, GraphKeyHash>;

// Enumerable search space: every valid normalized cell, indexed by its
// canonical key. Enumeration order is the sorted key order, so it is stable
// across runs and platforms. Immutable after construction.
struct SearchSpaceSpec {
    std::string name;
    int cell_size = 0;
    OpVocab vocab;
    int max_edges = -1;  // -1 = unlimited
    PathUniverse universe;
    std::vector<GraphKey> keys;  // sorted by digest
    std::unordered_map<std::uint64_t, ArchGraph> index;

    std::size_t size() const { return keys.size(); }
    bool contains(const GraphKey& k) const { return index.count(k.digest) > 0; }
    const ArchGraph& at(const GraphKey& k) const;

    // Normalized, structurally clean, right-sized, inside the edge cap, and
    // known to the index.
    bool is_member(const ArchGraph& g) const;

    // Builds a space over an explicit cell list (used by imports and by
    // restricted-space tests). Normalizes, deduplicates, derives the universe.
    static SearchSpaceSpec from_cells(std::string name, int cell_size, OpVocab vocab,
                                      const std::vector<ArchGraph>& cells, int max_edges = -1);
};

// (architecture, validation error, test error, query index)
struct EvalRecord {
    ArchGraph arch;
    GraphKey key;
    double val_err = 0.0;
    double test_err = 0.0;
    int query_index = 0;
};

// Deterministic fitness oracle. The synthetic kind computes the mean
// validation error as a logistic of a linear score over the cell's path
// encoding; the tabular kind looks metrics up from an imported table.
class FitnessOracle {
  public:
    enum class Kind { micro_synthetic, tabular };

    struct TableRow {
        double val_err_mean = 0.0;
        double val_noise = 0.0;
        double test_err = 0.0;
    };

    static FitnessOracle synthetic(std::uint64_t seed, const PathUniverse& universe);
    static FitnessOracle tabular(std::unordered_map<std::uint64_t, TableRow> table);

    Kind kind() const { return kind_; }
    std::uint64_t seed() const { return seed_; }

    // True mean validation error (no query noise).
    double mean_val_err(const ArchGraph& arch) const;
    // Fixed per-architecture test error.
    double test_err(const ArchGraph& arch) const;
    // Noisy validation-error draw; pure function of (canonical key, query_seed).
    EvalRecord evaluate(const ArchGraph& arch, std::uint64_t query_seed) const;

    const std::unordered_map<std::uint64_t, TableRow>& table() const { return table_; }

  private:
    Kind kind_ = Kind::micro_synthetic;
    std::uint64_t seed_ = 0;
    PathUniverse universe_;          // synthetic only
    std::vector<double> weights_;    // synthetic only
    double bias_ = 0.0;              // synthetic only
    std::unordered_map<std::uint64_t, TableRow> table_;

    TableRow row_for(const ArchGraph& arch, const GraphKey& key) const;
};

struct SpaceWithOracle {
    SearchSpaceSpec spec;
    FitnessOracle oracle;
};

// Path-occurrence distribution over a universe (frequency of each path among
// the sampled architectures' path encodings), smoothed onto the simplex.
struct PathDistribution {
    std::vector<double> probs;
    std::vector<long> raw_counts;
    long total = 0;  // T: total set bits across the sample
    double alpha = 0.5;
    std::uint64_t universe_id = 0;

    // log(count/T) per index; -inf where the count is zero (plotting form).
    std::vector<double> log_form() const;
};

// Exhaustive synthetic benchmark: 5-node cells over interior ops {a,b,c},
// every valid normalized cell enumerated and indexed.
SpaceWithOracle build_microbench(std::uint64_t seed);

// Deterministic enumeration (sorted key order).
std::vector<ArchGraph> enumerate(const SearchSpaceSpec& spec);

// n distinct keys drawn uniformly without replacement.
std::vector<ArchGraph> sample_direct(const SearchSpaceSpec& spec, std::size_t n, Rng& rng);

// The default NASBench-style pipeline: random matrix + random ops, prune,
// validate the pruned cell, keep the normalized original. Duplicates under
// pruning are kept on purpose.
std::vector<ArchGraph> sample_prune(const SearchSpaceSpec& spec, std::size_t n, Rng& rng,
                                    std::size_t retry_cap = 10000);

// Up to `limit` distinct in-space neighbors of `parent` (1-edit first, then
// 2-edit), never the parent itself nor anything in `forbidden`.
std::vector<ArchGraph> mutate_neighborhood(const SearchSpaceSpec& spec, const ArchGraph& parent,
                                           std::size_t limit, Rng& rng, const KeySet& forbidden);

// Exactly k neighbors or NeighborhoodExhausted.
std::vector<ArchGraph> mutate(const SearchSpaceSpec& spec, const ArchGraph& parent, std::size_t k,
                              Rng& rng, const KeySet& forbidden);

EvalRecord evaluate(const FitnessOracle& oracle, const ArchGraph& arch, std::uint64_t query_seed);

PathDistribution path_distribution(const std::vector<ArchGraph>& archs,
                                   const PathUniverse& universe, double alpha = 0.5);

double kl_divergence(const PathDistribution& p, const PathDistribution& q);

// npenas-bench/1 JSON Lines import/export.
SpaceWithOracle import_tabular(const std::string& path);
void export_tabular(const SearchSpaceSpec& spec, const FitnessOracle& oracle,
                    const std::string& path);

}  // namespace npenas
