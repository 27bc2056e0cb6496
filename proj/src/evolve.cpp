#include "npenas/evolve.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace npenas {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void push_trace(RunRecord& rec, const Pool& pool) {
    const EvalRecord& best = pool.val_argmin();
    rec.trace.push_back(
        TracePoint{static_cast<int>(pool.size()), best.key, best.val_err, best.test_err});
}

void finalize(RunRecord& rec, const Pool& pool, Clock::time_point start) {
    const EvalRecord& best = pool.val_argmin();
    rec.best_key = best.key.hex();
    rec.best_val_err = best.val_err;
    rec.best_test_err = best.test_err;
    rec.queries = static_cast<int>(pool.size());
    rec.wall_ms = elapsed_ms(start);
}

nlohmann::json npenas_config_json(const NpenasConfig& cfg, const std::string& algo,
                                  const std::string& space_name) {
    return nlohmann::json{{"algo", algo},
                          {"space", space_name},
                          {"n0", cfg.n0},
                          {"total_num", cfg.total_num},
                          {"mu_num", cfg.mu_num},
                          {"t", cfg.t},
                          {"parent_cap", cfg.parent_cap},
                          {"train_epochs", cfg.train_epochs},
                          {"seed", cfg.seed}};
}

// Scores a candidate set with predicted validation errors (lower is better).
// Returns scores plus the training-loss endpoints for the iteration log.
struct ScorerResult {
    std::vector<double> scores;
    double loss_first = 0.0;
    double loss_last = 0.0;
};

template <typename ScoreFn>
RunRecord run_npenas(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                     const NpenasConfig& cfg, const std::string& algo, ScoreFn&& score_candidates) {
    cfg.check();
    const auto start = Clock::now();
    RunRecord rec;
    rec.algo = algo;
    rec.config_json = npenas_config_json(cfg, algo, space.name).dump();

    Rng rng(cfg.seed);
    Pool pool = init_pool(space, oracle, cfg.n0, rng);
    push_trace(rec, pool);

    int iteration = 0;
    while (static_cast<int>(pool.size()) < cfg.total_num) {
        ++iteration;
        const int want = std::min(cfg.t, cfg.total_num - static_cast<int>(pool.size()));
        std::vector<ArchGraph> candidates =
            generate_candidates(pool, space, cfg.mu_num, rng, cfg.parent_cap);

        ScorerResult scored = score_candidates(pool, candidates, rng);
        const std::vector<std::size_t> top = select_top(candidates.size(), scored.scores, want);

        IterationLog log;
        log.iteration = iteration;
        log.pool_size_before = static_cast<int>(pool.size());
        log.train_loss_first = scored.loss_first;
        log.train_loss_last = scored.loss_last;
        for (std::size_t idx : top) {
            EvalRecord eval = evaluate(oracle, candidates[idx], rng.u64());
            log.selected_keys.push_back(eval.key.hex());
            log.scores.push_back(scored.scores[idx]);
            log.evaluated_val.push_back(eval.val_err);
            pool.append(std::move(eval));
        }
        rec.iterations.push_back(std::move(log));
        push_trace(rec, pool);
    }
    finalize(rec, pool, start);
    return rec;
}

}  // namespace

void NpenasConfig::check() const {
    if (n0 < 2) throw SampleError("npenas: n0 must be at least 2");
    if (t < 1 || t > mu_num) throw SampleError("npenas: need 1 <= t <= mu_num");
    if (total_num < n0) throw SampleError("npenas: total_num must be >= n0");
    if (parent_cap < 1) throw SampleError("npenas: parent_cap must be positive");
}

void Pool::append(EvalRecord rec) {
    if (!keys.insert(rec.key).second) {
        throw SampleError("pool already contains key " + rec.key.hex());
    }
    rec.query_index = static_cast<int>(records.size());
    records.push_back(std::move(rec));
}

const EvalRecord& Pool::val_argmin() const {
    if (records.empty()) throw SampleError("empty pool has no best record");
    const EvalRecord* best = &records.front();
    for (const EvalRecord& rec : records) {
        if (rec.val_err < best->val_err) best = &rec;
    }
    return *best;
}

Pool init_pool(const SearchSpaceSpec& space, const FitnessOracle& oracle, int n0, Rng& rng) {
    Pool pool;
    for (ArchGraph& arch : sample_direct(space, static_cast<std::size_t>(n0), rng)) {
        pool.append(evaluate(oracle, arch, rng.u64()));
    }
    return pool;
}

std::vector<ArchGraph> generate_candidates(const Pool& pool, const SearchSpaceSpec& space,
                                           int mu_num, Rng& rng, int parent_cap) {
    if (pool.size() == 0) throw SampleError("generate_candidates: empty pool");

    std::vector<const EvalRecord*> parents;
    parents.reserve(pool.size());
    for (const EvalRecord& rec : pool.records) parents.push_back(&rec);
    std::stable_sort(parents.begin(), parents.end(),
                     [](const EvalRecord* a, const EvalRecord* b) {
                         return a->val_err < b->val_err;
                     });
    if (static_cast<int>(parents.size()) > parent_cap) {
        parents.resize(static_cast<std::size_t>(parent_cap));
    }

    const std::size_t per_parent = (static_cast<std::size_t>(mu_num) + parents.size() - 1) /
                                   parents.size();
    KeySet forbidden = pool.keys;
    std::vector<ArchGraph> out;
    out.reserve(static_cast<std::size_t>(mu_num));

    std::size_t stall = 0, pi = 0;
    while (out.size() < static_cast<std::size_t>(mu_num)) {
        const EvalRecord& parent = *parents[pi % parents.size()];
        const std::size_t want =
            std::min(per_parent, static_cast<std::size_t>(mu_num) - out.size());
        std::vector<ArchGraph> batch =
            mutate_neighborhood(space, parent.arch, want, rng, forbidden);
        if (batch.empty()) {
            if (++stall >= parents.size()) {
                throw NeighborhoodExhausted(
                    "candidate generation stalled with " + std::to_string(out.size()) + " of " +
                    std::to_string(mu_num) + " candidates");
            }
        } else {
            stall = 0;
            for (ArchGraph& g : batch) {
                forbidden.insert(canonical_key(g));
                out.push_back(std::move(g));
            }
        }
        ++pi;
    }
    return out;
}

std::vector<std::size_t> select_top(std::size_t num_candidates, const std::vector<double>& scores,
                                    int t) {
    if (scores.size() != num_candidates) {
        throw SampleError("select_top: scores length does not match candidates");
    }
    if (t < 0 || static_cast<std::size_t>(t) > num_candidates) {
        throw SampleError("select_top: t out of range");
    }
    std::vector<std::size_t> order(num_candidates);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    order.resize(static_cast<std::size_t>(t));
    return order;
}

RunRecord npenas_bo(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                    const NpenasConfig& cfg) {
    const int vocab_size = space.vocab.size();
    return run_npenas(
        space, oracle, cfg, "npenas-bo",
        [&](const Pool& pool, const std::vector<ArchGraph>& candidates, Rng& rng) {
            TrainConfig tc = TrainConfig::uncertainty_defaults(rng.u64());
            if (cfg.train_epochs > 0) tc.epochs = cfg.train_epochs;
            TrainCurve curve;
            UncertaintyPredictor g_u = train_uncertainty(pool.records, tc, vocab_size, &curve);
            ScorerResult res;
            res.loss_first = curve.first();
            res.loss_last = curve.last();
            res.scores.reserve(candidates.size());
            for (const ArchGraph& cand : candidates) {
                const auto [mu, sigma] = predict_uncertainty(g_u, cand);
                res.scores.push_back(thompson_sample(mu, sigma, rng));
            }
            return res;
        });
}

RunRecord npenas_np(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                    const NpenasConfig& cfg) {
    const int vocab_size = space.vocab.size();
    return run_npenas(
        space, oracle, cfg, "npenas-np",
        [&](const Pool& pool, const std::vector<ArchGraph>& candidates, Rng& rng) {
            TrainConfig tc = TrainConfig::point_defaults(rng.u64());
            if (cfg.train_epochs > 0) tc.epochs = cfg.train_epochs;
            TrainCurve curve;
            PointPredictor g = train_point(pool.records, tc, vocab_size, &curve);
            ScorerResult res;
            res.loss_first = curve.first();
            res.loss_last = curve.last();
            res.scores.reserve(candidates.size());
            for (const ArchGraph& cand : candidates) {
                res.scores.push_back(predict_point(g, cand));
            }
            return res;
        });
}

RunRecord npenas_oracle_scores(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                               const NpenasConfig& cfg) {
    return run_npenas(space, oracle, cfg, "npenas-oracle",
                      [&](const Pool&, const std::vector<ArchGraph>& candidates, Rng&) {
                          ScorerResult res;
                          res.scores.reserve(candidates.size());
                          for (const ArchGraph& cand : candidates) {
                              res.scores.push_back(oracle.mean_val_err(cand));
                          }
                          return res;
                      });
}

RunRecord random_search(const SearchSpaceSpec& space, const FitnessOracle& oracle, int budget,
                        Rng& rng) {
    if (budget < 1) throw SampleError("random_search: budget must be positive");
    const auto start = Clock::now();
    RunRecord rec;
    rec.algo = "random-search";
    rec.config_json =
        nlohmann::json{{"algo", "random-search"}, {"space", space.name}, {"budget", budget}}
            .dump();
    Pool pool;
    for (ArchGraph& arch : sample_direct(space, static_cast<std::size_t>(budget), rng)) {
        pool.append(evaluate(oracle, arch, rng.u64()));
        push_trace(rec, pool);
    }
    finalize(rec, pool, start);
    return rec;
}

RunRecord ea_fanout(const SearchSpaceSpec& space, const FitnessOracle& oracle, int budget, int k,
                    Rng& rng, int n0) {
    if (k < 1) throw SampleError("ea_fanout: k must be positive");
    if (budget < n0) throw SampleError("ea_fanout: budget smaller than the initial population");
    const auto start = Clock::now();
    RunRecord rec;
    rec.algo = "ea-fanout";
    rec.config_json = nlohmann::json{{"algo", "ea-fanout"},
                                     {"space", space.name},
                                     {"budget", budget},
                                     {"k", k},
                                     {"n0", n0}}
                          .dump();

    Pool pool;
    for (ArchGraph& arch : sample_direct(space, static_cast<std::size_t>(n0), rng)) {
        pool.append(evaluate(oracle, arch, rng.u64()));
        push_trace(rec, pool);
    }

    int queries = n0;
    while (queries < budget) {
        // Binary tournament over the whole pool.
        std::vector<ArchGraph> children;
        for (int attempt = 0; attempt < 50 && children.empty(); ++attempt) {
            const EvalRecord& a =
                pool.records[static_cast<std::size_t>(rng.index(pool.size()))];
            const EvalRecord& b =
                pool.records[static_cast<std::size_t>(rng.index(pool.size()))];
            const EvalRecord& parent = a.val_err <= b.val_err ? a : b;
            const int want = std::min(k, budget - queries);
            children = mutate_neighborhood(space, parent.arch, static_cast<std::size_t>(want),
                                           rng, pool.keys);
        }
        if (children.empty()) {
            throw NeighborhoodExhausted("ea_fanout: no parent can produce new offspring");
        }
        std::vector<EvalRecord> evals;
        evals.reserve(children.size());
        for (ArchGraph& child : children) {
            evals.push_back(evaluate(oracle, child, rng.u64()));
            ++queries;
        }
        std::stable_sort(evals.begin(), evals.end(), [](const EvalRecord& a, const EvalRecord& b) {
            return a.val_err < b.val_err;
        });
        const std::size_t keep = std::min<std::size_t>(10, evals.size());
        for (std::size_t i = 0; i < evals.size(); ++i) {
            if (i < keep) {
                pool.append(std::move(evals[i]));
            }
        }
        // Discarded candidates can never carry the best val err because the
        // kept set is selected by val err itself.
        const EvalRecord& best = pool.val_argmin();
        const int first_q = queries - static_cast<int>(evals.size()) + 1;
        for (int q = first_q; q <= queries; ++q) {
            rec.trace.push_back(TracePoint{q, best.key, best.val_err, best.test_err});
        }
    }
    finalize(rec, pool, start);
    rec.queries = queries;
    return rec;
}

void write_run_record(const RunRecord& rec, const std::string& path) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << rec.config_json << "\n";
        if (!rec.iterations.empty()) {
            for (const IterationLog& it : rec.iterations) {
                nlohmann::json j{{"iter", it.iteration},
                                 {"pool_size", it.pool_size_before},
                                 {"selected", it.selected_keys},
                                 {"scores", it.scores},
                                 {"evaluated_val", it.evaluated_val},
                                 {"train_loss_first", it.train_loss_first},
                                 {"train_loss_last", it.train_loss_last}};
                out << j.dump() << "\n";
            }
        }
        for (const TracePoint& tp : rec.trace) {
            nlohmann::json j{{"queries", tp.queries},
                             {"best_key", tp.best_key.hex()},
                             {"best_val_err", tp.best_val_err},
                             {"best_test_err", tp.best_test_err}};
            out << j.dump() << "\n";
        }
        nlohmann::json summary{{"best_key", rec.best_key},
                               {"best_val_err", rec.best_val_err},
                               {"best_test_err", rec.best_test_err},
                               {"queries", rec.queries},
                               {"wall_ms", rec.wall_ms}};
        out << summary.dump() << "\n";
    }
    fs::rename(tmp, target);
}

RunRecord read_run_record(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    RunRecord rec;
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    if (lines.size() < 2) throw std::runtime_error("run record too short: " + path);
    rec.config_json = lines.front();
    const nlohmann::json config = nlohmann::json::parse(rec.config_json);
    rec.algo = config.value("algo", "");
    const nlohmann::json summary = nlohmann::json::parse(lines.back());
    rec.best_key = summary.at("best_key").get<std::string>();
    rec.best_val_err = summary.at("best_val_err").get<double>();
    rec.best_test_err = summary.at("best_test_err").get<double>();
    rec.queries = summary.at("queries").get<int>();
    rec.wall_ms = summary.value("wall_ms", 0.0);
    for (std::size_t i = 1; i + 1 < lines.size(); ++i) {
        const nlohmann::json j = nlohmann::json::parse(lines[i]);
        if (j.contains("queries")) {
            TracePoint tp;
            tp.queries = j.at("queries").get<int>();
            tp.best_key = GraphKey::from_hex(j.at("best_key").get<std::string>());
            tp.best_val_err = j.at("best_val_err").get<double>();
            tp.best_test_err = j.at("best_test_err").get<double>();
            rec.trace.push_back(tp);
        } else if (j.contains("iter")) {
            IterationLog it;
            it.iteration = j.at("iter").get<int>();
            it.pool_size_before = j.at("pool_size").get<int>();
            it.selected_keys = j.at("selected").get<std::vector<std::string>>();
            it.scores = j.at("scores").get<std::vector<double>>();
            it.evaluated_val = j.at("evaluated_val").get<std::vector<double>>();
            it.train_loss_first = j.value("train_loss_first", 0.0);
            it.train_loss_last = j.value("train_loss_last", 0.0);
            rec.iterations.push_back(std::move(it));
        }
    }
    return rec;
}

}  // namespace npenas
