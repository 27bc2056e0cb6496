#include "npenas/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

namespace npenas {

namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
}

// Runs tasks 0..count-1 on `jobs` workers; rethrows the first failure after
// every worker has drained.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& task) {
    if (jobs <= 0) {
        jobs = static_cast<int>(std::thread::hardware_concurrency());
        if (jobs <= 0) jobs = 1;
    }
    if (jobs == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                task(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> threads;
    const int spawn = std::min<int>(jobs, static_cast<int>(count));
    threads.reserve(static_cast<std::size_t>(spawn));
    for (int i = 0; i < spawn; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

double percentile(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    if (values.size() == 1) return values.front();
    const double rank = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    const double frac = rank - static_cast<double>(lo);
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

void write_distribution_csv(const PathDistribution& dist, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "path_index,count,prob,log_prob\n";
    const auto logs = dist.log_form();
    for (std::size_t j = 0; j < dist.probs.size(); ++j) {
        out << j << "," << dist.raw_counts[j] << "," << fmt_double(dist.probs[j]) << ",";
        if (std::isinf(logs[j])) {
            out << "-inf";
        } else {
            out << fmt_double(logs[j]);
        }
        out << "\n";
    }
}

}  // namespace

SpaceSource SpaceSource::micro(std::uint64_t seed) {
    SpaceSource s;
    s.kind = Kind::micro;
    s.micro_seed = seed;
    return s;
}

SpaceSource SpaceSource::tabular(std::string path) {
    SpaceSource s;
    s.kind = Kind::tabular;
    s.path = std::move(path);
    return s;
}

SpaceWithOracle SpaceSource::load() const {
    if (kind == Kind::micro) return build_microbench(micro_seed);
    return import_tabular(path);
}

std::string AlgoSpec::label() const {
    if (name == "ea-fanout") return name + "-k" + std::to_string(k);
    return name;
}

namespace {

const std::vector<std::string> kKnownAlgos = {"npenas-np", "npenas-bo", "npenas-oracle",
                                              "random-search", "ea-fanout"};

AlgoSpec parse_algo(const nlohmann::json& j) {
    AlgoSpec algo;
    if (!j.is_object() || !j.contains("name")) {
        throw ConfigError("algorithm entries need a \"name\"");
    }
    algo.name = j.at("name").get<std::string>();
    if (std::find(kKnownAlgos.begin(), kKnownAlgos.end(), algo.name) == kKnownAlgos.end()) {
        throw ConfigError("unknown algorithm \"" + algo.name + "\"");
    }
    algo.cfg.n0 = j.value("n0", 10);
    algo.cfg.total_num = j.value("total_num", 150);
    algo.cfg.mu_num = j.value("mu_num", 100);
    algo.cfg.t = j.value("t", 10);
    algo.cfg.parent_cap = j.value("parent_cap", 10);
    algo.cfg.train_epochs = j.value("train_epochs", -1);
    algo.k = j.value("k", 10);
    algo.cfg.variant =
        algo.name == "npenas-bo" ? NpenasConfig::Variant::bo : NpenasConfig::Variant::np;
    return algo;
}

}  // namespace

ExperimentConfig parse_experiment_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");

    ExperimentConfig cfg;
    const auto space = j.value("space", nlohmann::json::object());
    const std::string kind = space.value("kind", "micro");
    if (kind == "micro") {
        cfg.space = SpaceSource::micro(space.value("seed", 0ULL));
    } else if (kind == "tabular") {
        if (!space.contains("path")) throw ConfigError("tabular space needs a \"path\"");
        const std::string path = space.at("path").get<std::string>();
        if (!fs::exists(path)) throw ConfigError("benchmark file does not exist: " + path);
        cfg.space = SpaceSource::tabular(path);
    } else {
        throw ConfigError("space kind must be \"micro\" or \"tabular\"");
    }

    if (!j.contains("algorithms") || !j.at("algorithms").is_array() ||
        j.at("algorithms").empty()) {
        throw ConfigError("config needs a nonempty \"algorithms\" array");
    }
    for (const auto& a : j.at("algorithms")) cfg.algorithms.push_back(parse_algo(a));

    cfg.trials = j.value("trials", 1);
    if (cfg.trials < 1) throw ConfigError("trials must be positive");
    cfg.base_seed = j.value("base_seed", 0ULL);
    cfg.out_dir = j.value("out", "");
    cfg.jobs = j.value("jobs", 0);
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_experiment_config_text(text);
}

RunRecord run_single_trial(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                           const AlgoSpec& algo, std::uint64_t seed) {
    NpenasConfig cfg = algo.cfg;
    cfg.seed = seed;
    if (algo.name == "npenas-np") return npenas_np(space, oracle, cfg);
    if (algo.name == "npenas-bo") return npenas_bo(space, oracle, cfg);
    if (algo.name == "npenas-oracle") return npenas_oracle_scores(space, oracle, cfg);
    if (algo.name == "random-search") {
        Rng rng(seed);
        return random_search(space, oracle, cfg.total_num, rng);
    }
    if (algo.name == "ea-fanout") {
        Rng rng(seed);
        return ea_fanout(space, oracle, cfg.total_num, algo.k, rng, cfg.n0);
    }
    throw ConfigError("unknown algorithm \"" + algo.name + "\"");
}

std::vector<RunRecord> run_trials(const SearchSpaceSpec& space, const FitnessOracle& oracle,
                                  const AlgoSpec& algo, int trials, std::uint64_t base_seed,
                                  int jobs, const std::string& out_dir, bool log_progress) {
    std::vector<RunRecord> records(static_cast<std::size_t>(trials));
    std::atomic<int> done{0};
    parallel_for(static_cast<std::size_t>(trials), jobs, [&](std::size_t i) {
        RunRecord rec =
            run_single_trial(space, oracle, algo, base_seed + static_cast<std::uint64_t>(i));
        if (!out_dir.empty()) {
            const fs::path dir = fs::path(out_dir) / algo.label();
            write_run_record(rec, (dir / ("trial_" + std::to_string(i) + ".jsonl")).string());
        }
        records[i] = std::move(rec);
        const int d = done.fetch_add(1) + 1;
        if (log_progress && (d % 25 == 0 || d == trials)) {
            std::fprintf(stderr, "[%s] %d/%d trials\n", algo.label().c_str(), d, trials);
        }
    });
    return records;
}

const TracePoint& trace_at(const RunRecord& rec, int queries) {
    if (rec.trace.empty()) throw std::runtime_error("run record has no trace");
    const TracePoint* best = nullptr;
    for (const TracePoint& tp : rec.trace) {
        if (tp.queries <= queries) best = &tp;
    }
    if (!best) throw std::runtime_error("no trace point at or before the requested query count");
    return *best;
}

double best_test_at(const RunRecord& rec, int queries) { return trace_at(rec, queries).best_test_err; }

std::vector<AggregateRow> aggregate_records(const std::string& algo_label,
                                            const std::vector<RunRecord>& records,
                                            int checkpoint_every) {
    if (records.empty()) return {};
    int budget = 0;
    int first = records.front().trace.front().queries;
    for (const RunRecord& rec : records) {
        budget = std::max(budget, rec.trace.back().queries);
        first = std::min(first, rec.trace.front().queries);
    }
    std::vector<int> checkpoints;
    for (int q = checkpoint_every; q <= budget; q += checkpoint_every) {
        if (q >= first) checkpoints.push_back(q);
    }
    if (checkpoints.empty() || checkpoints.front() != first) {
        checkpoints.insert(checkpoints.begin(), first);
    }

    std::vector<AggregateRow> rows;
    for (int q : checkpoints) {
        std::vector<double> values;
        values.reserve(records.size());
        for (const RunRecord& rec : records) values.push_back(best_test_at(rec, q));
        AggregateRow row;
        row.algo = algo_label;
        row.queries = q;
        row.mean_test_err =
            std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
        row.p30 = percentile(values, 0.30);
        row.p70 = percentile(values, 0.70);
        row.trials = static_cast<int>(records.size());
        rows.push_back(row);
    }
    return rows;
}

void write_summary_csv(const std::vector<AggregateRow>& rows, const std::string& path) {
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    std::ofstream out(target, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "algo,queries,mean_test_err,p30,p70,trials\n";
    for (const AggregateRow& r : rows) {
        out << r.algo << "," << r.queries << "," << fmt_double(r.mean_test_err) << ","
            << fmt_double(r.p30) << "," << fmt_double(r.p70) << "," << r.trials << "\n";
    }
}

void cmd_search(const ExperimentConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("search needs an output directory");
    SpaceWithOracle space = cfg.space.load();
    fs::create_directories(cfg.out_dir);

    std::vector<AggregateRow> all_rows;
    for (const AlgoSpec& algo : cfg.algorithms) {
        const auto records = run_trials(space.spec, space.oracle, algo, cfg.trials, cfg.base_seed,
                                        cfg.jobs, cfg.out_dir, true);
        const auto rows = aggregate_records(algo.label(), records, algo.cfg.t);
        all_rows.insert(all_rows.end(), rows.begin(), rows.end());
    }
    write_summary_csv(all_rows, (fs::path(cfg.out_dir) / "summary.csv").string());
}

KlReport sampler_study(const SearchSpaceSpec& spec, std::size_t n_samples, std::uint64_t seed,
                       const std::string& out_dir) {
    const PathDistribution truth = path_distribution(enumerate(spec), spec.universe);

    Rng direct_rng(mix64(seed, 0x646972ULL));
    std::vector<ArchGraph> direct;
    direct.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        direct.push_back(sample_direct(spec, 1, direct_rng).front());
    }
    Rng prune_rng(mix64(seed, 0x707275ULL));
    const std::vector<ArchGraph> pruned = sample_prune(spec, n_samples, prune_rng);

    const PathDistribution direct_dist = path_distribution(direct, spec.universe);
    const PathDistribution prune_dist = path_distribution(pruned, spec.universe);

    KlReport report;
    report.direct_vs_truth = kl_divergence(direct_dist, truth);
    report.prune_vs_truth = kl_divergence(prune_dist, truth);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_distribution_csv(truth, (fs::path(out_dir) / "truth.csv").string());
        write_distribution_csv(direct_dist, (fs::path(out_dir) / "direct.csv").string());
        write_distribution_csv(prune_dist, (fs::path(out_dir) / "prune.csv").string());
        nlohmann::json kl{{"direct_vs_truth", report.direct_vs_truth},
                          {"prune_vs_truth", report.prune_vs_truth}};
        std::ofstream out(fs::path(out_dir) / "kl.json", std::ios::trunc);
        out << kl.dump(2) << "\n";
    }
    return report;
}

namespace {

struct StudyCell {
    std::string sampler;
    std::string method;
    int size = 0;
    int rep = 0;
    double mae_pct = 0.0;
    double kl = 0.0;
};

std::vector<ArchGraph> draw_train_set(const SearchSpaceSpec& spec, const std::string& sampler,
                                      int size, Rng& rng) {
    if (sampler == "direct") return sample_direct(spec, static_cast<std::size_t>(size), rng);
    return sample_prune(spec, static_cast<std::size_t>(size), rng);
}

std::vector<ArchGraph> draw_test_set(const SearchSpaceSpec& spec, const std::string& sampler,
                                     int size, const KeySet& exclude, Rng& rng) {
    KeySet seen = exclude;
    std::vector<ArchGraph> out;
    std::size_t guard = 0;
    while (out.size() < static_cast<std::size_t>(size)) {
        if (++guard > 1000u * static_cast<std::size_t>(size)) {
            throw SampleError("test-set rejection sampling stalled");
        }
        ArchGraph g = sampler == "direct" ? sample_direct(spec, 1, rng).front()
                                          : sample_prune(spec, 1, rng).front();
        if (seen.insert(canonical_key(g)).second) out.push_back(std::move(g));
    }
    return out;
}

}  // namespace

std::vector<PredictorStudyRow> predictor_study(const SearchSpaceSpec& spec,
                                               const FitnessOracle& oracle,
                                               const std::vector<int>& train_sizes, int repeats,
                                               std::uint64_t base_seed, int jobs,
                                               const std::string& out_dir, int test_size) {
    const int max_size = *std::max_element(train_sizes.begin(), train_sizes.end());
    if (spec.size() < static_cast<std::size_t>(max_size + test_size)) {
        throw SampleError("space too small for the requested train/test split");
    }
    const std::vector<std::string> samplers = {"direct", "prune"};
    const std::vector<std::string> methods = {"NPGE", "NPUGE", "MNPE", "MNAE"};

    struct Task {
        std::string sampler;
        int size;
        int rep;
    };
    std::vector<Task> tasks;
    for (const auto& sampler : samplers) {
        for (int size : train_sizes) {
            for (int rep = 0; rep < repeats; ++rep) tasks.push_back({sampler, size, rep});
        }
    }

    std::vector<std::vector<StudyCell>> results(tasks.size());
    parallel_for(tasks.size(), jobs, [&](std::size_t ti) {
        const Task& task = tasks[ti];
        const std::uint64_t cell_seed =
            mix64(base_seed, mix64(task.sampler == "direct" ? 1 : 2,
                                   static_cast<std::uint64_t>(task.size)),
                  static_cast<std::uint64_t>(task.rep));
        Rng rng(cell_seed);

        const std::vector<ArchGraph> train_archs =
            draw_train_set(spec, task.sampler, task.size, rng);
        KeySet train_keys;
        for (const ArchGraph& g : train_archs) train_keys.insert(canonical_key(g));
        const std::vector<ArchGraph> test_archs =
            draw_test_set(spec, task.sampler, test_size, train_keys, rng);

        std::vector<EvalRecord> pool;
        pool.reserve(train_archs.size());
        for (const ArchGraph& g : train_archs) pool.push_back(evaluate(oracle, g, rng.u64()));

        std::vector<double> truth;
        truth.reserve(test_archs.size());
        for (const ArchGraph& g : test_archs) truth.push_back(oracle.mean_val_err(g));

        const double kl = kl_divergence(path_distribution(train_archs, spec.universe),
                                        path_distribution(test_archs, spec.universe));

        auto mae_pct = [&](const std::vector<double>& preds) {
            double total = 0.0;
            for (std::size_t i = 0; i < preds.size(); ++i) total += std::abs(preds[i] - truth[i]);
            return 100.0 * total / static_cast<double>(preds.size());
        };

        std::vector<StudyCell> cells;
        for (const std::string& method : methods) {
            std::vector<double> preds;
            preds.reserve(test_archs.size());
            if (method == "NPGE") {
                PointPredictor p = train_point(pool, TrainConfig::point_defaults(rng.u64()),
                                               spec.vocab.size());
                for (const ArchGraph& g : test_archs) preds.push_back(predict_point(p, g));
            } else if (method == "NPUGE") {
                UncertaintyPredictor p = train_uncertainty(
                    pool, TrainConfig::uncertainty_defaults(rng.u64()), spec.vocab.size());
                for (const ArchGraph& g : test_archs) {
                    preds.push_back(predict_uncertainty(p, g).first);
                }
            } else {
                const auto enc = method == "MNPE" ? MlpPredictor::Encoding::path
                                                  : MlpPredictor::Encoding::adjacency;
                MlpPredictor p =
                    train_baseline_mlp(enc, pool, TrainConfig::point_defaults(rng.u64()), spec);
                for (const ArchGraph& g : test_archs) preds.push_back(p.predict_arch(spec, g));
            }
            cells.push_back(StudyCell{task.sampler, method, task.size, task.rep, mae_pct(preds),
                                      kl});
        }
        results[ti] = std::move(cells);
    });

    std::vector<PredictorStudyRow> rows;
    for (const auto& sampler : samplers) {
        for (const auto& method : methods) {
            for (int size : train_sizes) {
                std::vector<double> maes, kls;
                for (const auto& cells : results) {
                    for (const StudyCell& c : cells) {
                        if (c.sampler == sampler && c.method == method && c.size == size) {
                            maes.push_back(c.mae_pct);
                            kls.push_back(c.kl);
                        }
                    }
                }
                PredictorStudyRow row;
                row.sampler = sampler;
                row.method = method;
                row.train_size = size;
                row.repeats = static_cast<int>(maes.size());
                const double n = static_cast<double>(maes.size());
                row.mae_mean_pct = std::accumulate(maes.begin(), maes.end(), 0.0) / n;
                row.kl_mean = std::accumulate(kls.begin(), kls.end(), 0.0) / n;
                double var_mae = 0.0, var_kl = 0.0;
                for (double m : maes) var_mae += (m - row.mae_mean_pct) * (m - row.mae_mean_pct);
                for (double k : kls) var_kl += (k - row.kl_mean) * (k - row.kl_mean);
                row.mae_std_pct = maes.size() > 1 ? std::sqrt(var_mae / (n - 1.0)) : 0.0;
                row.kl_std = kls.size() > 1 ? std::sqrt(var_kl / (n - 1.0)) : 0.0;
                rows.push_back(row);
            }
        }
    }

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream out(fs::path(out_dir) / "predictor_study.csv", std::ios::trunc);
        out << "sampler,method,train_size,repeats,mae_mean_pct,mae_std_pct,kl_mean,kl_std\n";
        for (const auto& r : rows) {
            out << r.sampler << "," << r.method << "," << r.train_size << "," << r.repeats << ","
                << fmt_double(r.mae_mean_pct) << "," << fmt_double(r.mae_std_pct) << ","
                << fmt_double(r.kl_mean) << "," << fmt_double(r.kl_std) << "\n";
        }
    }
    return rows;
}

void fanout_study(const SearchSpaceSpec& spec, const FitnessOracle& oracle,
                  const std::vector<int>& ks, int trials, std::uint64_t base_seed, int budget,
                  int jobs, const std::string& out_dir) {
    if (!out_dir.empty()) fs::create_directories(out_dir);
    std::vector<AggregateRow> all_rows;
    for (int k : ks) {
        AlgoSpec algo;
        algo.name = "ea-fanout";
        algo.k = k;
        algo.cfg.total_num = budget;
        const auto records =
            run_trials(spec, oracle, algo, trials, base_seed, jobs, "", true);
        auto rows = aggregate_records("k=" + std::to_string(k), records, 10);
        all_rows.insert(all_rows.end(), rows.begin(), rows.end());
    }
    if (!out_dir.empty()) {
        std::ofstream out(fs::path(out_dir) / "fanout_curves.csv", std::ios::trunc);
        out << "k,queries,mean_test_err,p30,p70,trials\n";
        for (const AggregateRow& r : all_rows) {
            out << r.algo.substr(2) << "," << r.queries << "," << fmt_double(r.mean_test_err)
                << "," << fmt_double(r.p30) << "," << fmt_double(r.p70) << "," << r.trials
                << "\n";
        }
    }
}

BenchValidation validate_bench(const std::string& path) {
    BenchValidation result;
    try {
        const SpaceWithOracle loaded = import_tabular(path);
        result.ok = true;
        result.rows = loaded.spec.size();
        result.message = "ok: " + std::to_string(result.rows) + " rows";
    } catch (const BenchFormatError& e) {
        result.ok = false;
        result.line = e.line_number;
        result.message = e.what();
    }
    return result;
}

}  // namespace npenas
