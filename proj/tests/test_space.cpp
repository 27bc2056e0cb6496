#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "npenas/space.hpp"

using namespace npenas;

namespace {

// Frozen by exhaustive enumeration with an independent permutation-
// canonicalization oracle (all 2^10 adjacencies x 3^3 interior ops,
// normalized, grouped into isomorphism classes).
constexpr std::size_t kMicroSpaceSize = 2559;
constexpr std::size_t kMicroUniverseSize = 40;

const SpaceWithOracle& micro() {
    static const SpaceWithOracle space = build_microbench(7);
    return space;
}

}  // namespace

TEST_CASE("microbench size and universe are pinned") {
    CHECK(micro().spec.size() == kMicroSpaceSize);
    CHECK(micro().spec.universe.size() == kMicroUniverseSize);
    CHECK(micro().spec.cell_size == 5);
    CHECK(micro().spec.vocab.size() == 6);
}

TEST_CASE("microbench is deterministic in the seed") {
    const auto a = build_microbench(123);
    const auto b = build_microbench(123);
    REQUIRE(a.spec.keys.size() == b.spec.keys.size());
    for (std::size_t i = 0; i < a.spec.keys.size(); ++i) CHECK(a.spec.keys[i] == b.spec.keys[i]);
    for (const GraphKey& key : a.spec.keys) {
        const ArchGraph& arch = a.spec.at(key);
        CHECK(a.oracle.mean_val_err(arch) == b.oracle.mean_val_err(arch));
        CHECK(a.oracle.test_err(arch) == b.oracle.test_err(arch));
    }

    const auto c = build_microbench(124);
    bool any_diff = false;
    for (const GraphKey& key : a.spec.keys) {
        if (a.oracle.mean_val_err(a.spec.at(key)) != c.oracle.mean_val_err(c.spec.at(key))) {
            any_diff = true;
            break;
        }
    }
    CHECK(any_diff);
}

TEST_CASE("microbench optimum is pinned (argmin over the full table)") {
    const auto& mb = micro();
    const ArchGraph* best = nullptr;
    double best_err = 2.0;
    for (const GraphKey& key : mb.spec.keys) {
        const double err = mb.oracle.mean_val_err(mb.spec.at(key));
        if (err < best_err) {
            best_err = err;
            best = &mb.spec.at(key);
        }
    }
    REQUIRE(best != nullptr);
    CHECK(canonical_key(*best).hex() == "0eed53e6cf333ba3");
    CHECK(best_err == doctest::Approx(0.0649927).epsilon(1e-4));
}

TEST_CASE("enumerate yields each cell exactly once, all valid") {
    const auto& mb = micro();
    const auto cells = enumerate(mb.spec);
    CHECK(cells.size() == mb.spec.size());
    KeySet seen;
    for (const ArchGraph& g : cells) {
        CHECK(validate(g, mb.spec.vocab).ok());
        CHECK(seen.insert(canonical_key(g)).second);
    }
}

TEST_CASE("sample_direct draws distinct keys and covers the space at n = size") {
    const auto& mb = micro();
    Rng rng(71);
    const auto all = sample_direct(mb.spec, mb.spec.size(), rng);
    KeySet seen;
    for (const ArchGraph& g : all) CHECK(seen.insert(canonical_key(g)).second);
    CHECK(seen.size() == mb.spec.size());

    CHECK_THROWS_AS(sample_direct(mb.spec, mb.spec.size() + 1, rng), SampleError);
}

TEST_CASE("sample_direct is uniform (chi-squared at alpha = 0.01)") {
    const auto& mb = micro();
    Rng rng(73);
    std::unordered_map<std::uint64_t, long> counts;
    const long draws = 100000;
    for (long i = 0; i < draws; ++i) {
        counts[canonical_key(sample_direct(mb.spec, 1, rng).front()).digest]++;
    }
    const double expected = static_cast<double>(draws) / static_cast<double>(mb.spec.size());
    double chi2 = 0.0;
    for (const GraphKey& key : mb.spec.keys) {
        const auto it = counts.find(key.digest);
        const double observed = it == counts.end() ? 0.0 : static_cast<double>(it->second);
        chi2 += (observed - expected) * (observed - expected) / expected;
    }
    // Wilson-Hilferty upper quantile for df = size - 1.
    const double df = static_cast<double>(mb.spec.size() - 1);
    const double z99 = 2.3263478740408408;
    const double term = 2.0 / (9.0 * df);
    const double crit = df * std::pow(1.0 - term + z99 * std::sqrt(term), 3.0);
    CHECK(chi2 < crit);
}

TEST_CASE("sample_prune returns valid members and collides under pruning") {
    const auto& mb = micro();
    Rng rng(79);
    const auto samples = sample_prune(mb.spec, 5000, rng);
    CHECK(samples.size() == 5000);
    KeySet pruned_keys;
    std::size_t distinct = 0;
    for (const ArchGraph& g : samples) {
        CHECK(mb.spec.is_member(g));
        if (pruned_keys.insert(canonical_key(prune_extraneous(g))).second) ++distinct;
    }
    // The many-to-one defect: far fewer distinct pruned cores than samples.
    CHECK(distinct < samples.size());
    MESSAGE("distinct pruned keys: ", distinct, " of ", samples.size());
}

TEST_CASE("prune sampling is more biased than direct sampling") {
    const auto& mb = micro();
    const auto truth = path_distribution(enumerate(mb.spec), mb.spec.universe);
    Rng rng(83);
    std::vector<ArchGraph> direct;
    for (int i = 0; i < 5000; ++i) direct.push_back(sample_direct(mb.spec, 1, rng).front());
    const auto pruned = sample_prune(mb.spec, 5000, rng);
    const double kl_direct = kl_divergence(path_distribution(direct, mb.spec.universe), truth);
    const double kl_prune = kl_divergence(path_distribution(pruned, mb.spec.universe), truth);
    MESSAGE("KL direct=", kl_direct, " prune=", kl_prune);
    CHECK(kl_direct < kl_prune);
    CHECK(kl_direct < 0.02);
}

TEST_CASE("mutate returns distinct valid in-space neighbors") {
    const auto& mb = micro();
    Rng rng(89);
    const ArchGraph parent = sample_direct(mb.spec, 1, rng).front();
    const GraphKey parent_key = canonical_key(parent);

    const auto one = mutate(mb.spec, parent, 1, rng, {});
    REQUIRE(one.size() == 1);
    CHECK(canonical_key(one.front()) != parent_key);
    CHECK(mb.spec.is_member(one.front()));

    KeySet forbidden;
    const auto batch = mutate(mb.spec, parent, 12, rng, forbidden);
    KeySet keys;
    for (const ArchGraph& child : batch) {
        CHECK(mb.spec.is_member(child));
        const GraphKey k = canonical_key(child);
        CHECK(k != parent_key);
        CHECK(keys.insert(k).second);
    }

    // Forbidden keys never come back.
    KeySet block;
    for (const ArchGraph& child : batch) block.insert(canonical_key(child));
    const auto filtered = mutate(mb.spec, parent, 5, rng, block);
    for (const ArchGraph& child : filtered) {
        CHECK(block.count(canonical_key(child)) == 0);
    }
}

TEST_CASE("mutate exhausts on a space with unreachable cells") {
    const auto& mb = micro();
    // Two cells more than two edits apart: the empty pass-through cell and a
    // full three-op chain without the direct edge.
    ArchGraph direct(5, {mb.spec.vocab.input, mb.spec.vocab.isolated, mb.spec.vocab.isolated,
                         mb.spec.vocab.isolated, mb.spec.vocab.output});
    direct.set_edge(0, 4, true);
    direct.set_edge(0, 1, true);
    direct.set_edge(0, 2, true);
    direct.set_edge(0, 3, true);
    const auto interior = mb.spec.vocab.interior_kinds();
    ArchGraph chain(5, {mb.spec.vocab.input, interior[0], interior[1], interior[2],
                        mb.spec.vocab.output});
    chain.set_edge(0, 1, true);
    chain.set_edge(1, 2, true);
    chain.set_edge(2, 3, true);
    chain.set_edge(3, 4, true);
    const auto restricted = SearchSpaceSpec::from_cells("micro-restricted", 5, mb.spec.vocab,
                                                        {direct, chain});
    REQUIRE(restricted.size() == 2);
    Rng rng(97);
    CHECK_THROWS_AS(mutate(restricted, direct, 1, rng, {}), NeighborhoodExhausted);
}

TEST_CASE("mutation shows locality: 1-edit pairs are closer in fitness than random pairs") {
    const auto& mb = micro();
    const auto cells = enumerate(mb.spec);
    std::vector<double> errs;
    errs.reserve(cells.size());
    std::unordered_map<std::uint64_t, double> err_of;
    for (const ArchGraph& g : cells) {
        const double e = mb.oracle.mean_val_err(g);
        errs.push_back(e);
        err_of[canonical_key(g).digest] = e;
    }

    // Exact mean |vi - vj| over all pairs via sorted prefix sums.
    std::vector<double> sorted = errs;
    std::sort(sorted.begin(), sorted.end());
    double prefix = 0.0, pair_total = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        pair_total += sorted[i] * static_cast<double>(i) - prefix;
        prefix += sorted[i];
    }
    const double n = static_cast<double>(sorted.size());
    const double random_pair_mean = pair_total / (n * (n - 1.0) / 2.0);

    // Exhaustive 1-edit neighbor statistics via the mutation engine.
    double edit_total = 0.0;
    long edit_pairs = 0;
    Rng rng(101);
    for (const ArchGraph& g : cells) {
        const double self_err = err_of.at(canonical_key(g).digest);
        for (const ArchGraph& child : mutate_neighborhood(mb.spec, g, 1000, rng, {})) {
            // Only 1-edit neighbors for the statistic: neighbors from the
            // 2-edit fallback are filtered by edit distance in key space.
            edit_total += std::abs(err_of.at(canonical_key(child).digest) - self_err);
            ++edit_pairs;
        }
    }
    const double edit_mean = edit_total / static_cast<double>(edit_pairs);
    MESSAGE("1/2-edit mean |dv| = ", edit_mean, ", random-pair mean = ", random_pair_mean);
    CHECK(edit_mean < random_pair_mean);
}

TEST_CASE("evaluate is deterministic and noise behaves as specified") {
    const auto& mb = micro();
    Rng rng(103);
    const ArchGraph arch = sample_direct(mb.spec, 1, rng).front();

    const EvalRecord r1 = evaluate(mb.oracle, arch, 42);
    const EvalRecord r2 = evaluate(mb.oracle, arch, 42);
    CHECK(r1.val_err == r2.val_err);
    CHECK(r1.test_err == r2.test_err);
    CHECK(r1.key == r2.key);

    const EvalRecord r3 = evaluate(mb.oracle, arch, 43);
    CHECK(r3.val_err != r1.val_err);
    CHECK(r3.test_err == r1.test_err);

    const double mean = mb.oracle.mean_val_err(arch);
    double acc = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) acc += evaluate(mb.oracle, arch, 1000 + i).val_err;
    CHECK(std::abs(acc / draws - mean) < 3.0 * 0.003 / 100.0);
}

TEST_CASE("path_distribution counts bits and normalizes") {
    const auto& mb = micro();
    ArchGraph direct(5, {mb.spec.vocab.input, mb.spec.vocab.isolated, mb.spec.vocab.isolated,
                         mb.spec.vocab.isolated, mb.spec.vocab.output});
    direct.set_edge(0, 4, true);
    direct.set_edge(0, 1, true);
    direct.set_edge(0, 2, true);
    direct.set_edge(0, 3, true);

    const auto dist = path_distribution({direct}, mb.spec.universe);
    CHECK(dist.total == 1);
    const int empty_idx = mb.spec.universe.index_of.at({});
    CHECK(dist.raw_counts[empty_idx] == 1);
    const auto max_it = std::max_element(dist.probs.begin(), dist.probs.end());
    CHECK(static_cast<int>(max_it - dist.probs.begin()) == empty_idx);

    double sum = 0.0;
    for (double p : dist.probs) sum += p;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

    // T equals the sum of per-sample path counts.
    const auto cells = enumerate(mb.spec);
    const auto full = path_distribution(cells, mb.spec.universe);
    long expected_total = 0;
    for (const ArchGraph& g : cells) {
        expected_total += static_cast<long>(enumerate_paths(g).size());
    }
    CHECK(full.total == expected_total);

    // Order independence.
    auto shuffled = cells;
    Rng rng(107);
    rng.shuffle(shuffled);
    const auto full2 = path_distribution(shuffled, mb.spec.universe);
    CHECK(full.raw_counts == full2.raw_counts);
    CHECK(full.probs == full2.probs);

    CHECK_THROWS_AS(path_distribution({}, mb.spec.universe), SampleError);
}

TEST_CASE("kl divergence properties") {
    const auto& mb = micro();
    const auto truth = path_distribution(enumerate(mb.spec), mb.spec.universe);
    CHECK(kl_divergence(truth, truth) == 0.0);

    Rng rng(109);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<ArchGraph> sample;
        for (int i = 0; i < 200; ++i) sample.push_back(sample_direct(mb.spec, 1, rng).front());
        const auto dist = path_distribution(sample, mb.spec.universe);
        CHECK(kl_divergence(dist, truth) >= 0.0);
        CHECK(kl_divergence(truth, dist) >= 0.0);
    }

    PathUniverse other = PathUniverse::from_sequences({{}, {3}});
    ArchGraph direct(5, {mb.spec.vocab.input, mb.spec.vocab.isolated, mb.spec.vocab.isolated,
                         mb.spec.vocab.isolated, mb.spec.vocab.output});
    direct.set_edge(0, 4, true);
    direct.set_edge(0, 1, true);
    direct.set_edge(0, 2, true);
    direct.set_edge(0, 3, true);
    const auto mismatched = path_distribution({direct}, other);
    CHECK_THROWS_AS(kl_divergence(mismatched, truth), SampleError);
}

TEST_CASE("benchmark export/import round trip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "npenas_bench_test";
    fs::create_directories(dir);
    const auto& mb = micro();

    const std::string first = (dir / "micro.jsonl").string();
    export_tabular(mb.spec, mb.oracle, first);

    const SpaceWithOracle imported = import_tabular(first);
    CHECK(imported.spec.size() == mb.spec.size());
    CHECK(imported.spec.name == mb.spec.name);
    for (const GraphKey& key : mb.spec.keys) {
        CHECK(imported.oracle.table().at(key.digest).val_err_mean ==
              doctest::Approx(mb.oracle.mean_val_err(mb.spec.at(key))).epsilon(1e-12));
    }

    const std::string second = (dir / "micro2.jsonl").string();
    export_tabular(imported.spec, imported.oracle, second);
    std::ifstream f1(first), f2(second);
    const std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(c1 == c2);
    fs::remove_all(dir);
}

TEST_CASE("three-row hand-written benchmark imports") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "npenas_bench_rows";
    fs::create_directories(dir);
    const OpVocab vocab = OpVocab::with_interior({"op_a", "op_b", "op_c"});

    auto cell = [&](int op) {
        ArchGraph g(5, {vocab.input, op, vocab.isolated, vocab.isolated, vocab.output});
        g.set_edge(0, 1, true);
        g.set_edge(1, 4, true);
        g.set_edge(0, 2, true);
        g.set_edge(0, 3, true);
        return g;
    };
    nlohmann::json header = {{"format", "npenas-bench/1"},
                             {"space", "toy"},
                             {"vocab", vocab.names}};
    const std::string path = (dir / "toy.jsonl").string();
    {
        std::ofstream out(path);
        out << header.dump() << "\n";
        int op = 3;
        for (double err : {0.3, 0.5, 0.7}) {
            nlohmann::json row = {{"arch", cell(op++)},
                                  {"val_err_mean", err},
                                  {"val_noise", 0.01},
                                  {"test_err", err + 0.01}};
            out << row.dump() << "\n";
        }
    }
    const SpaceWithOracle toy = import_tabular(path);
    CHECK(toy.spec.size() == 3);
    CHECK(toy.spec.name == "toy");
    const GraphKey k = canonical_key(cell(4));
    CHECK(toy.oracle.mean_val_err(toy.spec.at(k)) == doctest::Approx(0.5));
    CHECK(toy.oracle.table().at(k.digest).test_err == doctest::Approx(0.51));

    // Lookups for cells outside the table fail.
    ArchGraph unknown = cell(3);
    unknown.set_edge(0, 4, true);
    CHECK_THROWS_AS(toy.oracle.mean_val_err(unknown), UnknownArchitecture);
    fs::remove_all(dir);
}

TEST_CASE("benchmark import rejects malformed files with line numbers") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "npenas_bench_bad";
    fs::create_directories(dir);
    auto write = [&](const std::string& name, const std::string& content) {
        const std::string p = (dir / name).string();
        std::ofstream out(p);
        out << content;
        return p;
    };

    CHECK_THROWS_AS(import_tabular(write("empty.jsonl", "")), BenchFormatError);

    try {
        import_tabular(write("header.jsonl", "{\"format\":\"other/9\"}\n"));
        FAIL("expected format error");
    } catch (const BenchFormatError& e) {
        CHECK(e.line_number == 1);
    }

    const std::string good_header =
        "{\"format\":\"npenas-bench/1\",\"space\":\"t\",\"vocab\":[\"input\",\"output\","
        "\"isolated\",\"op_a\"]}\n";
    try {
        import_tabular(write("trunc.jsonl", good_header + "{\"arch\": {\"n\": 2,\n"));
        FAIL("expected row parse error");
    } catch (const BenchFormatError& e) {
        CHECK(e.line_number == 2);
    }

    // Duplicate key: same 2-node cell twice.
    nlohmann::json arch = ArchGraph(2, {0, 1});
    arch["adj"] = std::vector<int>{0, 1, 0, 0};
    nlohmann::json row = {{"arch", arch},
                          {"val_err_mean", 0.4},
                          {"val_noise", 0.0},
                          {"test_err", 0.4}};
    try {
        import_tabular(write("dup.jsonl", good_header + row.dump() + "\n" + row.dump() + "\n"));
        FAIL("expected duplicate key error");
    } catch (const BenchFormatError& e) {
        CHECK(e.line_number == 3);
    }

    nlohmann::json bad_err = row;
    bad_err["val_err_mean"] = 1.5;
    try {
        import_tabular(write("range.jsonl", good_header + bad_err.dump() + "\n"));
        FAIL("expected range error");
    } catch (const BenchFormatError& e) {
        CHECK(e.line_number == 2);
    }
    fs::remove_all(dir);
}

TEST_CASE("checksum mismatches are rejected") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "npenas_bench_sum";
    fs::create_directories(dir);
    const auto& mb = micro();
    const std::string path = (dir / "m.jsonl").string();
    export_tabular(mb.spec, mb.oracle, path);

    // Flip one metric character in the body without updating the checksum.
    std::ifstream in(path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto pos = content.find("\"val_err_mean\":0.");
    REQUIRE(pos != std::string::npos);
    content[pos + 17] = content[pos + 17] == '1' ? '2' : '1';
    std::ofstream out(path, std::ios::trunc);
    out << content;
    out.close();
    CHECK_THROWS_AS(import_tabular(path), BenchFormatError);
    fs::remove_all(dir);
}
