#include "npenas/space.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

namespace npenas {

namespace {

constexpr double kMicroValNoise = 0.003;
constexpr double kMicroTestOffsetSigma = 0.002;
constexpr double kMicroWeightScale = 0.8;
constexpr double kMicroBiasScale = 0.5;
constexpr std::uint64_t kSaltWeights = 0x77656967687473ULL;
constexpr std::uint64_t kSaltTest = 0x74657374ULL;
constexpr std::uint64_t kSaltVal = 0x76616cULL;

double clamp_unit(double x) {
    const double lo = 1e-12, hi = 1.0 - 1e-12;
    return x < lo ? lo : (x > hi ? hi : x);
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t h) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

const ArchGraph& SearchSpaceSpec::at(const GraphKey& k) const {
    auto it = index.find(k.digest);
    if (it == index.end()) throw UnknownArchitecture("key " + k.hex() + " is not in the space");
    return it->second;
}

bool SearchSpaceSpec::is_member(const ArchGraph& g) const {
    if (g.num_nodes != cell_size) return false;
    if (max_edges >= 0 && g.edge_count() > max_edges) return false;
    if (!validate(g, vocab).ok()) return false;
    return contains(canonical_key(g));
}

SearchSpaceSpec SearchSpaceSpec::from_cells(std::string name, int cell_size, OpVocab vocab,
                                            const std::vector<ArchGraph>& cells, int max_edges) {
    SearchSpaceSpec spec;
    spec.name = std::move(name);
    spec.cell_size = cell_size;
    spec.vocab = std::move(vocab);
    spec.max_edges = max_edges;

    std::vector<std::vector<int>> seqs;
    for (const ArchGraph& cell : cells) {
        ArchGraph norm = insert_isolated_nodes(cell, cell_size, spec.vocab);
        if (!validate(norm, spec.vocab).ok()) continue;
        if (max_edges >= 0 && norm.edge_count() > max_edges) continue;
        const GraphKey key = canonical_key(norm);
        if (spec.index.emplace(key.digest, std::move(norm)).second) {
            spec.keys.push_back(key);
        }
    }
    std::sort(spec.keys.begin(), spec.keys.end());
    for (const GraphKey& key : spec.keys) {
        for (auto& seq : enumerate_paths(spec.index.at(key.digest))) {
            seqs.push_back(std::move(seq));
        }
    }
    spec.universe = PathUniverse::from_sequences(std::move(seqs));
    return spec;
}

FitnessOracle FitnessOracle::synthetic(std::uint64_t seed, const PathUniverse& universe) {
    FitnessOracle o;
    o.kind_ = Kind::micro_synthetic;
    o.seed_ = seed;
    o.universe_ = universe;
    Rng rng(mix64(seed, kSaltWeights));
    o.weights_.resize(universe.size());
    for (double& w : o.weights_) w = kMicroWeightScale * rng.normal();
    o.bias_ = kMicroBiasScale * rng.normal();
    return o;
}

FitnessOracle FitnessOracle::tabular(std::unordered_map<std::uint64_t, TableRow> table) {
    FitnessOracle o;
    o.kind_ = Kind::tabular;
    o.table_ = std::move(table);
    return o;
}

FitnessOracle::TableRow FitnessOracle::row_for(const ArchGraph& arch, const GraphKey& key) const {
    if (kind_ == Kind::tabular) {
        auto it = table_.find(key.digest);
        if (it == table_.end()) {
            throw UnknownArchitecture("architecture " + key.hex() + " is not in the table");
        }
        return it->second;
    }
    const PathEncoding enc = path_encode(arch, universe_);
    double z = bias_;
    for (std::size_t j = 0; j < enc.bits.size(); ++j) {
        if (enc.bits[j]) z += weights_[j];
    }
    const double mean = 0.05 + 0.9 / (1.0 + std::exp(-z));
    TableRow row;
    row.val_err_mean = clamp_unit(mean);
    row.val_noise = kMicroValNoise;
    Rng trng(mix64(key.digest, seed_, kSaltTest));
    row.test_err = clamp_unit(mean + kMicroTestOffsetSigma * trng.normal());
    return row;
}

double FitnessOracle::mean_val_err(const ArchGraph& arch) const {
    return row_for(arch, canonical_key(arch)).val_err_mean;
}

double FitnessOracle::test_err(const ArchGraph& arch) const {
    return row_for(arch, canonical_key(arch)).test_err;
}

EvalRecord FitnessOracle::evaluate(const ArchGraph& arch, std::uint64_t query_seed) const {
    const GraphKey key = canonical_key(arch);
    const TableRow row = row_for(arch, key);
    Rng vrng(mix64(key.digest, query_seed, mix64(seed_, kSaltVal)));
    EvalRecord rec;
    rec.arch = arch;
    rec.key = key;
    rec.val_err = clamp_unit(row.val_err_mean + row.val_noise * vrng.normal());
    rec.test_err = row.test_err;
    return rec;
}

EvalRecord evaluate(const FitnessOracle& oracle, const ArchGraph& arch, std::uint64_t query_seed) {
    return oracle.evaluate(arch, query_seed);
}

SpaceWithOracle build_microbench(std::uint64_t seed) {
    const OpVocab vocab = OpVocab::with_interior({"op_a", "op_b", "op_c"});
    const int n = 5;
    const auto interior = vocab.interior_kinds();

    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    }

    std::vector<ArchGraph> cells;
    std::vector<int> assign(3, 0);
    for (std::uint32_t bits = 0; bits < (1u << pairs.size()); ++bits) {
        ArchGraph base(n, {vocab.input, 0, 0, 0, vocab.output});
        for (std::size_t b = 0; b < pairs.size(); ++b) {
            if (bits >> b & 1u) base.set_edge(pairs[b].first, pairs[b].second, true);
        }
        for (int a0 = 0; a0 < 3; ++a0) {
            for (int a1 = 0; a1 < 3; ++a1) {
                for (int a2 = 0; a2 < 3; ++a2) {
                    ArchGraph g = base;
                    g.ops[1] = interior[static_cast<std::size_t>(a0)];
                    g.ops[2] = interior[static_cast<std::size_t>(a1)];
                    g.ops[3] = interior[static_cast<std::size_t>(a2)];
                    cells.push_back(std::move(g));
                }
            }
        }
    }
    SpaceWithOracle out{SearchSpaceSpec::from_cells("microbench-5", n, vocab, cells), {}};
    out.oracle = FitnessOracle::synthetic(seed, out.spec.universe);
    return out;
}

std::vector<ArchGraph> enumerate(const SearchSpaceSpec& spec) {
    std::vector<ArchGraph> out;
    out.reserve(spec.size());
    for (const GraphKey& key : spec.keys) out.push_back(spec.index.at(key.digest));
    return out;
}

std::vector<ArchGraph> sample_direct(const SearchSpaceSpec& spec, std::size_t n, Rng& rng) {
    if (n > spec.size()) {
        throw SampleError("cannot draw " + std::to_string(n) + " distinct cells from a space of " +
                          std::to_string(spec.size()));
    }
    std::vector<std::size_t> order(spec.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<ArchGraph> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.index(order.size() - i));
        std::swap(order[i], order[j]);
        out.push_back(spec.index.at(spec.keys[order[i]].digest));
    }
    return out;
}

std::vector<ArchGraph> sample_prune(const SearchSpaceSpec& spec, std::size_t n, Rng& rng,
                                    std::size_t retry_cap) {
    const auto interior = spec.vocab.interior_kinds();
    const int cn = spec.cell_size;
    std::vector<ArchGraph> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
        bool accepted = false;
        for (std::size_t attempt = 0; attempt < retry_cap; ++attempt) {
            ArchGraph raw(cn, std::vector<int>(static_cast<std::size_t>(cn), 0));
            raw.ops[0] = spec.vocab.input;
            raw.ops[static_cast<std::size_t>(cn) - 1] = spec.vocab.output;
            for (int v = 1; v < cn - 1; ++v) {
                raw.ops[static_cast<std::size_t>(v)] =
                    interior[static_cast<std::size_t>(rng.index(interior.size()))];
            }
            for (int i = 0; i < cn; ++i) {
                for (int j = i + 1; j < cn; ++j) raw.set_edge(i, j, rng.bernoulli(0.5));
            }
            ArchGraph pruned;
            try {
                pruned = prune_extraneous(raw);
            } catch (const NoPathError&) {
                continue;
            }
            if (spec.max_edges >= 0 && pruned.edge_count() > spec.max_edges) continue;
            ArchGraph normalized = insert_isolated_nodes(raw, cn, spec.vocab);
            if (!spec.is_member(normalized)) continue;
            out.push_back(std::move(normalized));
            accepted = true;
            break;
        }
        if (!accepted) {
            throw SampleError("prune sampler exhausted its retry cap of " +
                              std::to_string(retry_cap));
        }
    }
    return out;
}

namespace {

// All single atomic edits as raw graphs: one adjacency bit flipped, or one
// interior slot's op changed to another interior kind.
std::vector<ArchGraph> single_edits(const ArchGraph& g, const OpVocab& vocab) {
    std::vector<ArchGraph> out;
    for (int i = 0; i < g.num_nodes; ++i) {
        for (int j = i + 1; j < g.num_nodes; ++j) {
            ArchGraph e = g;
            e.set_edge(i, j, !e.edge(i, j));
            out.push_back(std::move(e));
        }
    }
    for (int v = 1; v < g.num_nodes - 1; ++v) {
        for (int kind : vocab.interior_kinds()) {
            if (kind == g.ops[static_cast<std::size_t>(v)]) continue;
            ArchGraph e = g;
            e.ops[static_cast<std::size_t>(v)] = kind;
            out.push_back(std::move(e));
        }
    }
    return out;
}

}  // namespace

std::vector<ArchGraph> mutate_neighborhood(const SearchSpaceSpec& spec, const ArchGraph& parent,
                                           std::size_t limit, Rng& rng, const KeySet& forbidden) {
    KeySet seen = forbidden;
    seen.insert(canonical_key(parent));

    std::vector<ArchGraph> out;
    auto try_accept = [&](const ArchGraph& raw) {
        if (out.size() >= limit) return;
        ArchGraph norm = insert_isolated_nodes(raw, spec.cell_size, spec.vocab);
        if (!validate(norm, spec.vocab).ok()) return;
        if (spec.max_edges >= 0 && norm.edge_count() > spec.max_edges) return;
        const GraphKey key = canonical_key(norm);
        if (!spec.contains(key)) return;
        if (!seen.insert(key).second) return;
        out.push_back(std::move(norm));
    };

    std::vector<ArchGraph> level1 = single_edits(parent, spec.vocab);
    rng.shuffle(level1);
    for (const ArchGraph& raw : level1) {
        try_accept(raw);
        if (out.size() >= limit) return out;
    }
    for (const ArchGraph& raw : level1) {
        std::vector<ArchGraph> level2 = single_edits(raw, spec.vocab);
        rng.shuffle(level2);
        for (const ArchGraph& raw2 : level2) {
            try_accept(raw2);
            if (out.size() >= limit) return out;
        }
    }
    return out;
}

std::vector<ArchGraph> mutate(const SearchSpaceSpec& spec, const ArchGraph& parent, std::size_t k,
                              Rng& rng, const KeySet& forbidden) {
    auto out = mutate_neighborhood(spec, parent, k, rng, forbidden);
    if (out.size() < k) {
        throw NeighborhoodExhausted("2-edit neighborhood provides only " +
                                    std::to_string(out.size()) + " of " + std::to_string(k) +
                                    " requested candidates");
    }
    return out;
}

PathDistribution path_distribution(const std::vector<ArchGraph>& archs,
                                   const PathUniverse& universe, double alpha) {
    if (archs.empty()) throw SampleError("path_distribution needs a nonempty sample");
    PathDistribution dist;
    dist.alpha = alpha;
    dist.universe_id = universe.universe_id;
    dist.raw_counts.assign(universe.size(), 0);
    for (const ArchGraph& g : archs) {
        const PathEncoding enc = path_encode(g, universe);
        for (std::size_t j = 0; j < enc.bits.size(); ++j) {
            if (enc.bits[j]) {
                ++dist.raw_counts[j];
                ++dist.total;
            }
        }
    }
    dist.probs.resize(universe.size());
    const double denom = static_cast<double>(dist.total) +
                         alpha * static_cast<double>(universe.size());
    for (std::size_t j = 0; j < universe.size(); ++j) {
        dist.probs[j] = (static_cast<double>(dist.raw_counts[j]) + alpha) / denom;
    }
    return dist;
}

std::vector<double> PathDistribution::log_form() const {
    std::vector<double> out(raw_counts.size());
    for (std::size_t j = 0; j < raw_counts.size(); ++j) {
        out[j] = raw_counts[j] > 0
                     ? std::log(static_cast<double>(raw_counts[j]) / static_cast<double>(total))
                     : -std::numeric_limits<double>::infinity();
    }
    return out;
}

double kl_divergence(const PathDistribution& p, const PathDistribution& q) {
    if (p.universe_id != q.universe_id || p.probs.size() != q.probs.size()) {
        throw SampleError("kl_divergence: path universes do not match");
    }
    double kl = 0.0;
    for (std::size_t j = 0; j < p.probs.size(); ++j) {
        if (p.probs[j] <= 0.0) continue;
        if (q.probs[j] <= 0.0) throw SampleError("kl_divergence: q has unsupported entries");
        kl += p.probs[j] * std::log(p.probs[j] / q.probs[j]);
    }
    return kl;
}

SpaceWithOracle import_tabular(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw BenchFormatError("cannot open " + path, 0);

    std::string line;
    long line_no = 0;
    if (!std::getline(in, line)) throw BenchFormatError("empty file", 1);
    ++line_no;

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw BenchFormatError(std::string("header parse error: ") + e.what(), line_no);
    }
    if (!header.is_object() || header.value("format", "") != "npenas-bench/1") {
        throw BenchFormatError("header must declare format npenas-bench/1", line_no);
    }
    OpVocab vocab;
    std::string space_name;
    try {
        vocab = OpVocab::from_names(header.at("vocab").get<std::vector<std::string>>());
        space_name = header.at("space").get<std::string>();
    } catch (const std::exception& e) {
        throw BenchFormatError(std::string("bad header: ") + e.what(), line_no);
    }
    const std::string expected_checksum = header.value("checksum", "");

    std::vector<ArchGraph> cells;
    std::unordered_map<std::uint64_t, FitnessOracle::TableRow> table;
    std::uint64_t checksum = 0xcbf29ce484222325ULL;
    int cell_size = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) throw BenchFormatError("blank line", line_no);
        checksum = fnv1a(line + "\n", checksum);
        nlohmann::json row;
        try {
            row = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw BenchFormatError(std::string("row parse error: ") + e.what(), line_no);
        }
        ArchGraph arch;
        FitnessOracle::TableRow metrics;
        try {
            arch = row.at("arch").get<ArchGraph>();
            metrics.val_err_mean = row.at("val_err_mean").get<double>();
            metrics.val_noise = row.at("val_noise").get<double>();
            metrics.test_err = row.at("test_err").get<double>();
        } catch (const std::exception& e) {
            throw BenchFormatError(std::string("bad row: ") + e.what(), line_no);
        }
        if (!(metrics.val_err_mean > 0.0 && metrics.val_err_mean < 1.0)) {
            throw BenchFormatError("val_err_mean out of (0,1)", line_no);
        }
        if (!(metrics.test_err > 0.0 && metrics.test_err < 1.0)) {
            throw BenchFormatError("test_err out of (0,1)", line_no);
        }
        if (!(metrics.val_noise >= 0.0 && metrics.val_noise < 1.0)) {
            throw BenchFormatError("val_noise out of [0,1)", line_no);
        }
        if (cell_size < 0) cell_size = arch.num_nodes;
        if (arch.num_nodes != cell_size) {
            throw BenchFormatError("inconsistent cell size", line_no);
        }
        const auto report = validate(arch, vocab);
        if (!report.ok()) {
            throw BenchFormatError("invalid architecture: " + report.violations.front(), line_no);
        }
        const GraphKey key = canonical_key(arch);
        if (!table.emplace(key.digest, metrics).second) {
            throw BenchFormatError("duplicate key " + key.hex(), line_no);
        }
        cells.push_back(std::move(arch));
    }
    if (cells.empty()) throw BenchFormatError("file has no data rows", line_no);

    if (!expected_checksum.empty()) {
        const GraphKey recomputed{checksum};
        if (recomputed.hex() != expected_checksum) {
            throw BenchFormatError("checksum mismatch: header " + expected_checksum + " vs data " +
                                   recomputed.hex(), 1);
        }
    }

    SpaceWithOracle out{
        SearchSpaceSpec::from_cells(space_name, cell_size, vocab, cells),
        FitnessOracle::tabular(std::move(table))};
    if (out.spec.size() != cells.size()) {
        throw BenchFormatError("rows collapse under normalization (non-canonical cells)", 0);
    }
    return out;
}

void export_tabular(const SearchSpaceSpec& spec, const FitnessOracle& oracle,
                    const std::string& path) {
    std::vector<std::string> lines;
    lines.reserve(spec.size());
    std::uint64_t checksum = 0xcbf29ce484222325ULL;
    for (const GraphKey& key : spec.keys) {
        const ArchGraph& arch = spec.index.at(key.digest);
        nlohmann::json row;
        row["arch"] = arch;
        if (oracle.kind() == FitnessOracle::Kind::tabular) {
            const auto& metrics = oracle.table().at(key.digest);
            row["val_err_mean"] = metrics.val_err_mean;
            row["val_noise"] = metrics.val_noise;
            row["test_err"] = metrics.test_err;
        } else {
            row["val_err_mean"] = oracle.mean_val_err(arch);
            row["val_noise"] = kMicroValNoise;
            row["test_err"] = oracle.test_err(arch);
        }
        std::string text = row.dump();
        checksum = fnv1a(text + "\n", checksum);
        lines.push_back(std::move(text));
    }

    nlohmann::json header;
    header["format"] = "npenas-bench/1";
    header["space"] = spec.name;
    std::vector<std::string> names = spec.vocab.names;
    header["vocab"] = names;
    header["checksum"] = GraphKey{checksum}.hex();

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw BenchFormatError("cannot open " + path + " for writing", 0);
    out << header.dump() << "\n";
    for (const std::string& l : lines) out << l << "\n";
}

}  // namespace npenas
