#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "npenas/archgraph.hpp"
#include "npenas/numgrad.hpp"
#include "npenas/space.hpp"

namespace npenas {

struct TrainConfig {
    int epochs = 300;
    int batch_size = 16;
    double lr = 5e-3;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;

    static TrainConfig uncertainty_defaults(std::uint64_t seed = 0) {
        return TrainConfig{1000, 16, 5e-3, 1e-4, seed};
    }
    static TrainConfig point_defaults(std::uint64_t seed = 0) {
        return TrainConfig{300, 16, 5e-3, 1e-4, seed};
    }
};

enum class NeighborMode { symmetric, in_only };

constexpr double kSigmaFloor = 1e-4;
constexpr double kDropoutRate = 0.1;

struct GinLayer {
    ng::Tensor W, b, gamma, beta;
    ng::BatchNormState bn;
};

// Three GIN layers (aggregate -> linear -> activation -> batch norm) with a
// global mean pool readout of width 32.
struct GinEmbedderParams {
    std::array<GinLayer, 3> layers;
    ng::Activation act = ng::Activation::celu;
    NeighborMode mode = NeighborMode::symmetric;
    double gin_eps = 0.0;
    int vocab_size = 0;
};

// Concatenated node features + block-diagonal adjacency for a list of cells.
// Callers pass canonically relabeled graphs so results are reproducible under
// isomorphic relabelings of the inputs.
struct GraphBatch {
    ng::Tensor features;  // [total_nodes, vocab]
    std::vector<std::uint8_t> adj;
    std::size_t total_nodes = 0;
    std::vector<int> graph_of_row;
    std::size_t num_graphs = 0;
};
GraphBatch make_batch(const std::vector<const ArchGraph*>& graphs, int vocab_size);

struct TrainCurve {
    std::vector<double> epoch_loss;
    double first() const { return epoch_loss.empty() ? 0.0 : epoch_loss.front(); }
    double last() const { return epoch_loss.empty() ? 0.0 : epoch_loss.back(); }
};

// Gaussian (mu, sigma) head over the CELU embedder; sigma is softplus-mapped
// with a 1e-4 floor, so it is always positive.
struct UncertaintyPredictor {
    GinEmbedderParams emb;
    ng::Tensor fc_W, fc_b;
    ng::Tensor mu_W, mu_b;
    ng::Tensor sigma_W, sigma_b;

    static UncertaintyPredictor init(int vocab_size, std::uint64_t seed);
    std::vector<ng::NamedTensor> named_params();
    std::vector<ng::Tensor*> param_list();
};

// Point head over the ReLU embedder; sigmoid keeps predictions in (0,1).
struct PointPredictor {
    GinEmbedderParams emb;
    ng::Tensor fc_W, fc_b;
    ng::Tensor out_W, out_b;

    static PointPredictor init(int vocab_size, std::uint64_t seed);
    std::vector<ng::NamedTensor> named_params();
    std::vector<ng::Tensor*> param_list();
};

// Eval-mode 32-dim embedding; permutation-invariant under graph isomorphism.
std::vector<double> embed(const GinEmbedderParams& params, const ArchGraph& arch);

std::pair<double, double> predict_uncertainty(const UncertaintyPredictor& p,
                                              const ArchGraph& arch);
double predict_point(const PointPredictor& p, const ArchGraph& arch);

UncertaintyPredictor train_uncertainty(const std::vector<EvalRecord>& pool, const TrainConfig& cfg,
                                       int vocab_size, TrainCurve* curve = nullptr);
PointPredictor train_point(const std::vector<EvalRecord>& pool, const TrainConfig& cfg,
                           int vocab_size, TrainCurve* curve = nullptr);

double thompson_sample(double mu, double sigma, Rng& rng);

// Fully connected regressor over a fixed vector encoding (two hidden layers
// of width 64); the comparison baselines of the predictor study.
struct MlpPredictor {
    enum class Encoding { path, adjacency };
    Encoding encoding = Encoding::path;
    ng::Tensor W1, b1, W2, b2, W3, b3;

    static MlpPredictor init(Encoding enc, std::size_t input_dim, std::uint64_t seed);
    double predict(const std::vector<double>& enc) const;
    double predict_arch(const SearchSpaceSpec& space, const ArchGraph& arch) const;
};

std::vector<double> encode_for_mlp(MlpPredictor::Encoding enc, const SearchSpaceSpec& space,
                                   const ArchGraph& arch);

MlpPredictor train_baseline_mlp(MlpPredictor::Encoding enc, const std::vector<EvalRecord>& pool,
                                const TrainConfig& cfg, const SearchSpaceSpec& space,
                                TrainCurve* curve = nullptr);

namespace detail {

// Training-mode loss for one batch; exposes the tape and parameter leaves so
// gradient checks can compare against finite differences.
ng::Tensor uncertainty_batch_loss(UncertaintyPredictor& p, ng::Tape& tape, const GraphBatch& batch,
                                  const std::vector<double>& targets, bool train, Rng& dropout_rng,
                                  std::vector<ng::Tensor>* leaves);
ng::Tensor point_batch_loss(PointPredictor& p, ng::Tape& tape, const GraphBatch& batch,
                            const std::vector<double>& targets, bool train, Rng& dropout_rng,
                            std::vector<ng::Tensor>* leaves);

}  // namespace detail

}  // namespace npenas
