#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "npenas/rng.hpp"

namespace npenas::ng {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};
struct TapeError : std::runtime_error {
    explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major 64-bit float tensor. `node` links the value to a tape
// recording; -1 means constant (no gradient flows into it).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    int node = -1;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor row_vector(std::vector<double> values);  // shape {1, n}
    static Tensor vector(std::vector<double> values);      // shape {n}
    static Tensor scalar_tensor(double value);             // shape {1}

    std::size_t size() const { return data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    double scalar() const;
};

enum class Activation { relu, celu, sigmoid, softplus };

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(std::size_t features = 0)
        : running_mean(features, 0.0), running_var(features, 1.0) {}
};

// Recording tape for reverse-mode differentiation. One tape per forward
// pass; single-threaded by construction.
class Tape {
  public:
    // Registers `value` as a differentiable leaf and returns a tape-linked copy.
    Tensor leaf(const Tensor& value);

    // y = x W + b with x: [B,Fin], W: [Fin,Fout], b: [Fout].
    Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b);

    Tensor activation(const Tensor& x, Activation kind);

    // Per-feature normalization over rows. Train mode uses batch statistics
    // (and updates `state`), eval mode uses the running statistics.
    Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      BatchNormState& state, bool train);

    // Train mode zeroes elements with probability `rate` and rescales the
    // survivors; eval mode is the identity.
    Tensor dropout(const Tensor& x, double rate, bool train, Rng& rng);

    // out_v = (1+eps) h_v + sum of neighbor rows. `adj` is the row-major
    // binary adjacency over `n` nodes; `symmetric` aggregates both edge
    // directions, otherwise only in-neighbors.
    Tensor aggregate_neighbors(const Tensor& h, const std::vector<std::uint8_t>& adj,
                               std::size_t n, double eps, bool symmetric);

    // Per-graph mean of node rows; graph_of_row maps each row to [0, num_graphs).
    Tensor global_mean_pool(const Tensor& h, const std::vector<int>& graph_of_row,
                            std::size_t num_graphs);

    // Mean over the batch of ln(sigma) + (y-mu)^2/(2 sigma^2) + ln(2 pi)/2.
    Tensor gaussian_nll(const Tensor& mu, const Tensor& sigma, const Tensor& y);

    Tensor mse(const Tensor& predicted, const Tensor& target);

    Tensor add(const Tensor& a, const Tensor& b);
    Tensor add_const(const Tensor& x, double c);
    Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);

    // Accumulates gradients of `loss` (a scalar) into every recorded leaf.
    void backward(const Tensor& loss);

    // Gradient buffer of a tape-linked tensor; zeros when the node was never
    // touched by the loss. Valid after backward().
    const std::vector<double>& grad(const Tensor& t) const;

    std::size_t num_nodes() const { return nodes_.size(); }

  private:
    struct Node {
        std::vector<std::size_t> shape;
        std::size_t size = 0;
        std::function<void(const std::vector<double>&, Tape&)> backprop;  // may be empty
    };

    int record(std::vector<std::size_t> shape, std::size_t size,
               std::function<void(const std::vector<double>&, Tape&)> backprop);
    std::vector<double>& grad_buffer(int node);
    void check_finite(const Tensor& t, const char* op) const;

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool ran_backward_ = false;
};

struct AdamConfig {
    double lr = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Adam with L2-style weight decay folded into the gradient before the
// moment updates; bias-corrected moments.
class Adam {
  public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<Tensor*>& params,
              const std::vector<const std::vector<double>*>& grads);

    const AdamConfig& config() const { return cfg_; }
    long step_count() const { return t_; }

  private:
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Flat little-endian float64 checkpoint with a JSON sidecar listing
// (name, shape, offset) per entry.
struct NamedTensor {
    std::string name;
    const Tensor* tensor;
};
void save_checkpoint(const std::string& bin_path, const std::string& meta_path,
                     const std::vector<NamedTensor>& entries);
void load_checkpoint(const std::string& bin_path, const std::string& meta_path,
                     const std::vector<std::string>& names, std::vector<Tensor*> out);

}  // namespace npenas::ng
