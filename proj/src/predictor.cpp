#include "npenas/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace npenas {

namespace {

constexpr std::uint64_t kSaltInit = 0x696e6974ULL;
constexpr std::uint64_t kSaltTrain = 0x747261696eULL;
constexpr int kGinWidth = 32;
constexpr int kFcWidth = 16;
constexpr int kMlpWidth = 64;

ng::Tensor uniform_fan_in(Rng& rng, std::size_t fan_in, std::vector<std::size_t> shape) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    ng::Tensor t = ng::Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = (rng.uniform() * 2.0 - 1.0) * bound;
    return t;
}

GinLayer init_gin_layer(Rng& rng, int in_dim, int out_dim) {
    GinLayer layer;
    layer.W = uniform_fan_in(rng, static_cast<std::size_t>(in_dim),
                             {static_cast<std::size_t>(in_dim), static_cast<std::size_t>(out_dim)});
    layer.b = uniform_fan_in(rng, static_cast<std::size_t>(in_dim),
                             {static_cast<std::size_t>(out_dim)});
    layer.gamma = ng::Tensor::full({static_cast<std::size_t>(out_dim)}, 1.0);
    layer.beta = ng::Tensor::zeros({static_cast<std::size_t>(out_dim)});
    layer.bn = ng::BatchNormState(static_cast<std::size_t>(out_dim));
    return layer;
}

GinEmbedderParams init_embedder(int vocab_size, ng::Activation act, Rng& rng) {
    GinEmbedderParams emb;
    emb.act = act;
    emb.vocab_size = vocab_size;
    emb.layers[0] = init_gin_layer(rng, vocab_size, kGinWidth);
    emb.layers[1] = init_gin_layer(rng, kGinWidth, kGinWidth);
    emb.layers[2] = init_gin_layer(rng, kGinWidth, kGinWidth);
    return emb;
}

// Registers `t` as a leaf when gradient tracking is requested; otherwise the
// raw tensor flows through as a constant.
ng::Tensor track(ng::Tape& tape, ng::Tensor& t, std::vector<ng::Tensor>* leaves) {
    if (!leaves) return t;
    ng::Tensor leaf = tape.leaf(t);
    leaves->push_back(leaf);
    return leaf;
}

ng::Tensor embedder_forward(GinEmbedderParams& emb, ng::Tape& tape, const GraphBatch& batch,
                            bool train, std::vector<ng::Tensor>* leaves) {
    ng::Tensor h = batch.features;
    const bool symmetric = emb.mode == NeighborMode::symmetric;
    for (GinLayer& layer : emb.layers) {
        ng::Tensor w = track(tape, layer.W, leaves);
        ng::Tensor b = track(tape, layer.b, leaves);
        ng::Tensor gamma = track(tape, layer.gamma, leaves);
        ng::Tensor beta = track(tape, layer.beta, leaves);
        h = tape.aggregate_neighbors(h, batch.adj, batch.total_nodes, emb.gin_eps, symmetric);
        h = tape.linear(h, w, b);
        h = tape.activation(h, emb.act);
        h = tape.batch_norm(h, gamma, beta, layer.bn, train);
    }
    return tape.global_mean_pool(h, batch.graph_of_row, batch.num_graphs);
}

std::vector<std::size_t> batch_starts(std::size_t n, std::size_t batch_size) {
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s < n; s += batch_size) starts.push_back(s);
    // A trailing singleton is merged into the previous batch so batch norm
    // always sees at least two graphs.
    if (starts.size() > 1 && n - starts.back() == 1) starts.pop_back();
    return starts;
}

}  // namespace

GraphBatch make_batch(const std::vector<const ArchGraph*>& graphs, int vocab_size) {
    if (graphs.empty()) throw std::invalid_argument("make_batch: empty graph list");
    GraphBatch batch;
    batch.num_graphs = graphs.size();
    for (const ArchGraph* g : graphs) {
        batch.total_nodes += static_cast<std::size_t>(g->num_nodes);
    }
    batch.features = ng::Tensor::zeros({batch.total_nodes, static_cast<std::size_t>(vocab_size)});
    batch.adj.assign(batch.total_nodes * batch.total_nodes, 0);
    batch.graph_of_row.resize(batch.total_nodes);

    std::size_t row = 0;
    for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
        const ArchGraph& g = *graphs[gi];
        for (int v = 0; v < g.num_nodes; ++v) {
            const int kind = g.ops[static_cast<std::size_t>(v)];
            if (kind < 0 || kind >= vocab_size) {
                throw std::invalid_argument("make_batch: op kind outside the vocabulary");
            }
            batch.features.data[(row + static_cast<std::size_t>(v)) *
                                    static_cast<std::size_t>(vocab_size) +
                                static_cast<std::size_t>(kind)] = 1.0;
            batch.graph_of_row[row + static_cast<std::size_t>(v)] = static_cast<int>(gi);
        }
        for (int u = 0; u < g.num_nodes; ++u) {
            for (int v = 0; v < g.num_nodes; ++v) {
                if (g.edge(u, v)) {
                    batch.adj[(row + static_cast<std::size_t>(u)) * batch.total_nodes + row +
                              static_cast<std::size_t>(v)] = 1;
                }
            }
        }
        row += static_cast<std::size_t>(g.num_nodes);
    }
    return batch;
}

UncertaintyPredictor UncertaintyPredictor::init(int vocab_size, std::uint64_t seed) {
    Rng rng(mix64(seed, kSaltInit));
    UncertaintyPredictor p;
    p.emb = init_embedder(vocab_size, ng::Activation::celu, rng);
    p.fc_W = uniform_fan_in(rng, kGinWidth, {kGinWidth, kFcWidth});
    p.fc_b = uniform_fan_in(rng, kGinWidth, {kFcWidth});
    p.mu_W = uniform_fan_in(rng, kFcWidth, {kFcWidth, 1});
    p.mu_b = uniform_fan_in(rng, kFcWidth, {1});
    p.sigma_W = uniform_fan_in(rng, kFcWidth, {kFcWidth, 1});
    p.sigma_b = uniform_fan_in(rng, kFcWidth, {1});
    return p;
}

PointPredictor PointPredictor::init(int vocab_size, std::uint64_t seed) {
    Rng rng(mix64(seed, kSaltInit));
    PointPredictor p;
    p.emb = init_embedder(vocab_size, ng::Activation::relu, rng);
    p.fc_W = uniform_fan_in(rng, kGinWidth, {kGinWidth, kFcWidth});
    p.fc_b = uniform_fan_in(rng, kGinWidth, {kFcWidth});
    p.out_W = uniform_fan_in(rng, kFcWidth, {kFcWidth, 1});
    p.out_b = uniform_fan_in(rng, kFcWidth, {1});
    return p;
}

namespace {

std::vector<ng::NamedTensor> embedder_named(GinEmbedderParams& emb, const std::string& prefix) {
    std::vector<ng::NamedTensor> out;
    for (std::size_t i = 0; i < emb.layers.size(); ++i) {
        const std::string base = prefix + "gin" + std::to_string(i) + ".";
        out.push_back({base + "W", &emb.layers[i].W});
        out.push_back({base + "b", &emb.layers[i].b});
        out.push_back({base + "gamma", &emb.layers[i].gamma});
        out.push_back({base + "beta", &emb.layers[i].beta});
    }
    return out;
}

std::vector<ng::Tensor*> embedder_params(GinEmbedderParams& emb) {
    std::vector<ng::Tensor*> out;
    for (GinLayer& layer : emb.layers) {
        out.push_back(&layer.W);
        out.push_back(&layer.b);
        out.push_back(&layer.gamma);
        out.push_back(&layer.beta);
    }
    return out;
}

}  // namespace

std::vector<ng::NamedTensor> UncertaintyPredictor::named_params() {
    auto out = embedder_named(emb, "");
    out.push_back({"fc.W", &fc_W});
    out.push_back({"fc.b", &fc_b});
    out.push_back({"mu.W", &mu_W});
    out.push_back({"mu.b", &mu_b});
    out.push_back({"sigma.W", &sigma_W});
    out.push_back({"sigma.b", &sigma_b});
    return out;
}

std::vector<ng::Tensor*> UncertaintyPredictor::param_list() {
    auto out = embedder_params(emb);
    out.insert(out.end(), {&fc_W, &fc_b, &mu_W, &mu_b, &sigma_W, &sigma_b});
    return out;
}

std::vector<ng::NamedTensor> PointPredictor::named_params() {
    auto out = embedder_named(emb, "");
    out.push_back({"fc.W", &fc_W});
    out.push_back({"fc.b", &fc_b});
    out.push_back({"out.W", &out_W});
    out.push_back({"out.b", &out_b});
    return out;
}

std::vector<ng::Tensor*> PointPredictor::param_list() {
    auto out = embedder_params(emb);
    out.insert(out.end(), {&fc_W, &fc_b, &out_W, &out_b});
    return out;
}

namespace detail {

ng::Tensor uncertainty_batch_loss(UncertaintyPredictor& p, ng::Tape& tape, const GraphBatch& batch,
                                  const std::vector<double>& targets, bool train, Rng& dropout_rng,
                                  std::vector<ng::Tensor>* leaves) {
    ng::Tensor pooled = embedder_forward(p.emb, tape, batch, train, leaves);
    ng::Tensor fw = track(tape, p.fc_W, leaves);
    ng::Tensor fb = track(tape, p.fc_b, leaves);
    ng::Tensor mw = track(tape, p.mu_W, leaves);
    ng::Tensor mb = track(tape, p.mu_b, leaves);
    ng::Tensor sw = track(tape, p.sigma_W, leaves);
    ng::Tensor sb = track(tape, p.sigma_b, leaves);

    ng::Tensor f = tape.activation(tape.linear(pooled, fw, fb), ng::Activation::celu);
    f = tape.dropout(f, kDropoutRate, train, dropout_rng);
    ng::Tensor mu = tape.linear(f, mw, mb);
    ng::Tensor sigma = tape.add_const(
        tape.activation(tape.linear(f, sw, sb), ng::Activation::softplus), kSigmaFloor);
    ng::Tensor y = ng::Tensor::vector(targets);
    return tape.gaussian_nll(mu, sigma, y);
}

ng::Tensor point_batch_loss(PointPredictor& p, ng::Tape& tape, const GraphBatch& batch,
                            const std::vector<double>& targets, bool train, Rng& dropout_rng,
                            std::vector<ng::Tensor>* leaves) {
    ng::Tensor pooled = embedder_forward(p.emb, tape, batch, train, leaves);
    ng::Tensor fw = track(tape, p.fc_W, leaves);
    ng::Tensor fb = track(tape, p.fc_b, leaves);
    ng::Tensor ow = track(tape, p.out_W, leaves);
    ng::Tensor ob = track(tape, p.out_b, leaves);

    ng::Tensor f = tape.activation(tape.linear(pooled, fw, fb), ng::Activation::relu);
    f = tape.dropout(f, kDropoutRate, train, dropout_rng);
    ng::Tensor pred = tape.activation(tape.linear(f, ow, ob), ng::Activation::sigmoid);
    ng::Tensor y = ng::Tensor::vector(targets);
    return tape.mse(pred, y);
}

}  // namespace detail

std::vector<double> embed(const GinEmbedderParams& params, const ArchGraph& arch) {
    if (arch.num_nodes == 0) throw std::invalid_argument("embed: empty graph");
    const ArchGraph canon = canonical_relabel(arch);
    const GraphBatch batch = make_batch({&canon}, params.vocab_size);
    ng::Tape tape;
    Rng unused(0);
    // Eval mode never writes the batch-norm state.
    auto& mut = const_cast<GinEmbedderParams&>(params);
    ng::Tensor pooled = embedder_forward(mut, tape, batch, false, nullptr);
    return pooled.data;
}

std::pair<double, double> predict_uncertainty(const UncertaintyPredictor& p,
                                              const ArchGraph& arch) {
    const ArchGraph canon = canonical_relabel(arch);
    const GraphBatch batch = make_batch({&canon}, p.emb.vocab_size);
    ng::Tape tape;
    Rng unused(0);
    auto& mut = const_cast<UncertaintyPredictor&>(p);
    ng::Tensor pooled = embedder_forward(mut.emb, tape, batch, false, nullptr);
    ng::Tensor f = tape.activation(tape.linear(pooled, mut.fc_W, mut.fc_b), ng::Activation::celu);
    ng::Tensor mu = tape.linear(f, mut.mu_W, mut.mu_b);
    ng::Tensor sigma = tape.add_const(
        tape.activation(tape.linear(f, mut.sigma_W, mut.sigma_b), ng::Activation::softplus),
        kSigmaFloor);
    return {mu.data[0], sigma.data[0]};
}

double predict_point(const PointPredictor& p, const ArchGraph& arch) {
    const ArchGraph canon = canonical_relabel(arch);
    const GraphBatch batch = make_batch({&canon}, p.emb.vocab_size);
    ng::Tape tape;
    auto& mut = const_cast<PointPredictor&>(p);
    ng::Tensor pooled = embedder_forward(mut.emb, tape, batch, false, nullptr);
    ng::Tensor f = tape.activation(tape.linear(pooled, mut.fc_W, mut.fc_b), ng::Activation::relu);
    ng::Tensor pred =
        tape.activation(tape.linear(f, mut.out_W, mut.out_b), ng::Activation::sigmoid);
    return pred.data[0];
}

namespace {

template <typename Predictor, typename LossFn>
Predictor train_graph_predictor(Predictor seed_predictor, const std::vector<EvalRecord>& pool,
                                const TrainConfig& cfg, TrainCurve* curve, LossFn&& batch_loss) {
    if (pool.size() < 2) {
        throw std::invalid_argument("training needs at least 2 evaluated architectures");
    }
    Predictor p = std::move(seed_predictor);
    Rng rng(mix64(cfg.seed, kSaltTrain));

    std::vector<ArchGraph> canon;
    std::vector<double> targets;
    canon.reserve(pool.size());
    targets.reserve(pool.size());
    for (const EvalRecord& rec : pool) {
        canon.push_back(canonical_relabel(rec.arch));
        targets.push_back(rec.val_err);
    }

    ng::Adam adam(ng::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const auto params = p.param_list();
    if (curve) curve->epoch_loss.clear();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        const auto starts = batch_starts(order.size(), static_cast<std::size_t>(cfg.batch_size));
        double epoch_loss = 0.0;
        for (std::size_t bi = 0; bi < starts.size(); ++bi) {
            const std::size_t begin = starts[bi];
            const std::size_t end = bi + 1 < starts.size() ? starts[bi + 1] : order.size();
            std::vector<const ArchGraph*> graphs;
            std::vector<double> y;
            graphs.reserve(end - begin);
            y.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                graphs.push_back(&canon[order[i]]);
                y.push_back(targets[order[i]]);
            }
            const GraphBatch batch = make_batch(graphs, p.emb.vocab_size);
            ng::Tape tape;
            std::vector<ng::Tensor> leaves;
            ng::Tensor loss = batch_loss(p, tape, batch, y, rng, &leaves);
            tape.backward(loss);
            std::vector<const std::vector<double>*> grads;
            grads.reserve(leaves.size());
            for (const ng::Tensor& leaf : leaves) grads.push_back(&tape.grad(leaf));
            adam.step(params, grads);
            epoch_loss += loss.scalar() * static_cast<double>(end - begin);
        }
        if (curve) curve->epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    return p;
}

}  // namespace

UncertaintyPredictor train_uncertainty(const std::vector<EvalRecord>& pool, const TrainConfig& cfg,
                                       int vocab_size, TrainCurve* curve) {
    return train_graph_predictor(
        UncertaintyPredictor::init(vocab_size, cfg.seed), pool, cfg, curve,
        [](UncertaintyPredictor& p, ng::Tape& tape, const GraphBatch& batch,
           const std::vector<double>& y, Rng& rng, std::vector<ng::Tensor>* leaves) {
            return detail::uncertainty_batch_loss(p, tape, batch, y, true, rng, leaves);
        });
}

PointPredictor train_point(const std::vector<EvalRecord>& pool, const TrainConfig& cfg,
                           int vocab_size, TrainCurve* curve) {
    return train_graph_predictor(
        PointPredictor::init(vocab_size, cfg.seed), pool, cfg, curve,
        [](PointPredictor& p, ng::Tape& tape, const GraphBatch& batch,
           const std::vector<double>& y, Rng& rng, std::vector<ng::Tensor>* leaves) {
            return detail::point_batch_loss(p, tape, batch, y, true, rng, leaves);
        });
}

double thompson_sample(double mu, double sigma, Rng& rng) {
    if (!(sigma > 0.0)) throw ng::NumericError("thompson_sample: sigma must be positive");
    return mu + sigma * rng.normal();
}

MlpPredictor MlpPredictor::init(Encoding enc, std::size_t input_dim, std::uint64_t seed) {
    Rng rng(mix64(seed, kSaltInit));
    MlpPredictor p;
    p.encoding = enc;
    p.W1 = uniform_fan_in(rng, input_dim, {input_dim, kMlpWidth});
    p.b1 = uniform_fan_in(rng, input_dim, {kMlpWidth});
    p.W2 = uniform_fan_in(rng, kMlpWidth, {kMlpWidth, kMlpWidth});
    p.b2 = uniform_fan_in(rng, kMlpWidth, {kMlpWidth});
    p.W3 = uniform_fan_in(rng, kMlpWidth, {kMlpWidth, 1});
    p.b3 = uniform_fan_in(rng, kMlpWidth, {1});
    return p;
}

std::vector<double> encode_for_mlp(MlpPredictor::Encoding enc, const SearchSpaceSpec& space,
                                   const ArchGraph& arch) {
    if (enc == MlpPredictor::Encoding::path) {
        const PathEncoding pe = path_encode(arch, space.universe);
        return std::vector<double>(pe.bits.begin(), pe.bits.end());
    }
    return flat_adjacency_encoding(arch, space.vocab);
}

double MlpPredictor::predict(const std::vector<double>& enc) const {
    ng::Tape tape;
    ng::Tensor x = ng::Tensor::row_vector(enc);
    auto& mut = const_cast<MlpPredictor&>(*this);
    ng::Tensor h = tape.activation(tape.linear(x, mut.W1, mut.b1), ng::Activation::relu);
    h = tape.activation(tape.linear(h, mut.W2, mut.b2), ng::Activation::relu);
    return tape.linear(h, mut.W3, mut.b3).data[0];
}

double MlpPredictor::predict_arch(const SearchSpaceSpec& space, const ArchGraph& arch) const {
    return predict(encode_for_mlp(encoding, space, arch));
}

MlpPredictor train_baseline_mlp(MlpPredictor::Encoding enc, const std::vector<EvalRecord>& pool,
                                const TrainConfig& cfg, const SearchSpaceSpec& space,
                                TrainCurve* curve) {
    if (pool.size() < 2) {
        throw std::invalid_argument("training needs at least 2 evaluated architectures");
    }
    std::vector<std::vector<double>> encodings;
    std::vector<double> targets;
    encodings.reserve(pool.size());
    for (const EvalRecord& rec : pool) {
        encodings.push_back(encode_for_mlp(enc, space, rec.arch));
        targets.push_back(rec.val_err);
    }
    const std::size_t dim = encodings.front().size();
    MlpPredictor p = MlpPredictor::init(enc, dim, cfg.seed);
    Rng rng(mix64(cfg.seed, kSaltTrain));
    ng::Adam adam(ng::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    std::vector<ng::Tensor*> params = {&p.W1, &p.b1, &p.W2, &p.b2, &p.W3, &p.b3};

    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (curve) curve->epoch_loss.clear();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        const auto starts = batch_starts(order.size(), static_cast<std::size_t>(cfg.batch_size));
        double epoch_loss = 0.0;
        for (std::size_t bi = 0; bi < starts.size(); ++bi) {
            const std::size_t begin = starts[bi];
            const std::size_t end = bi + 1 < starts.size() ? starts[bi + 1] : order.size();
            const std::size_t rows = end - begin;
            ng::Tensor x = ng::Tensor::zeros({rows, dim});
            std::vector<double> y(rows);
            for (std::size_t i = 0; i < rows; ++i) {
                const auto& e = encodings[order[begin + i]];
                std::copy(e.begin(), e.end(), x.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
                y[i] = targets[order[begin + i]];
            }
            ng::Tape tape;
            ng::Tensor w1 = tape.leaf(p.W1), b1 = tape.leaf(p.b1);
            ng::Tensor w2 = tape.leaf(p.W2), b2 = tape.leaf(p.b2);
            ng::Tensor w3 = tape.leaf(p.W3), b3 = tape.leaf(p.b3);
            ng::Tensor h = tape.activation(tape.linear(x, w1, b1), ng::Activation::relu);
            h = tape.activation(tape.linear(h, w2, b2), ng::Activation::relu);
            ng::Tensor pred = tape.linear(h, w3, b3);
            ng::Tensor loss = tape.mse(pred, ng::Tensor::vector(y));
            tape.backward(loss);
            std::vector<const std::vector<double>*> grads = {&tape.grad(w1), &tape.grad(b1),
                                                             &tape.grad(w2), &tape.grad(b2),
                                                             &tape.grad(w3), &tape.grad(b3)};
            adam.step(params, grads);
            epoch_loss += loss.scalar() * static_cast<double>(rows);
        }
        if (curve) curve->epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    return p;
}

}  // namespace npenas
