#include "npenas/numgrad.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <utility>

#include <nlohmann/json.hpp>

namespace npenas::ng {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178032973640562;

std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

// C[M,N] += A[M,K] B[K,N]
void matmul_acc(double* C, const double* A, const double* B, std::size_t M, std::size_t K,
                std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        const double* a = A + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const double av = a[k];
            if (av == 0.0) continue;
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A[M,K] B^T with B stored [N,K]
void matmul_nt_acc(double* C, const double* A, const double* B, std::size_t M, std::size_t K,
                   std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

// C[K,N] += A^T B with A stored [M,K], B stored [M,N]
void matmul_tn_acc(double* C, const double* A, const double* B, std::size_t M, std::size_t K,
                   std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        const double* b = B + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double av = a[k];
            if (av == 0.0) continue;
            double* c = C + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (shape_size(shape) != data.size()) throw ShapeError("tensor data does not match shape");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
}

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::scalar_tensor(double value) { return Tensor({1}, {value}); }

std::size_t Tensor::rows() const {
    if (shape.empty()) throw ShapeError("rank-0 tensor has no rows");
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (shape.size() < 2) return 1;
    return shape[1];
}

double Tensor::scalar() const {
    if (data.size() != 1) throw ShapeError("scalar() on a tensor with more than one element");
    return data[0];
}

int Tape::record(std::vector<std::size_t> shape, std::size_t size,
                 std::function<void(const std::vector<double>&, Tape&)> backprop) {
    nodes_.push_back(Node{std::move(shape), size, std::move(backprop)});
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buffer(int node) {
    if (grads_[static_cast<std::size_t>(node)].empty()) {
        grads_[static_cast<std::size_t>(node)].assign(nodes_[static_cast<std::size_t>(node)].size,
                                                      0.0);
    }
    return grads_[static_cast<std::size_t>(node)];
}

void Tape::check_finite(const Tensor& t, const char* op) const {
    for (double x : t.data) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

Tensor Tape::leaf(const Tensor& value) {
    Tensor out = value;
    check_finite(out, "leaf");
    out.node = record(out.shape, out.size(), nullptr);
    return out;
}

Tensor Tape::linear(const Tensor& x, const Tensor& W, const Tensor& b) {
    if (x.shape.size() != 2 || W.shape.size() != 2 || b.shape.size() != 1) {
        throw ShapeError("linear expects x[B,Fin], W[Fin,Fout], b[Fout]");
    }
    const std::size_t B = x.shape[0], Fin = x.shape[1], Fout = W.shape[1];
    if (W.shape[0] != Fin || b.shape[0] != Fout) {
        throw ShapeError("linear: shapes do not conform");
    }
    Tensor out = Tensor::zeros({B, Fout});
    for (std::size_t i = 0; i < B; ++i) {
        std::copy(b.data.begin(), b.data.end(), out.data.begin() + i * Fout);
    }
    matmul_acc(out.data.data(), x.data.data(), W.data.data(), B, Fin, Fout);
    check_finite(out, "linear");

    const int xn = x.node, wn = W.node, bn = b.node;
    if (xn >= 0 || wn >= 0 || bn >= 0) {
        std::vector<double> xv = x.data, wv = W.data;
        out.node = record(out.shape, out.size(),
                          [xn, wn, bn, xv = std::move(xv), wv = std::move(wv), B, Fin,
                           Fout](const std::vector<double>& dY, Tape& tape) {
                              if (xn >= 0) {
                                  matmul_nt_acc(tape.grad_buffer(xn).data(), dY.data(), wv.data(),
                                                B, Fout, Fin);
                              }
                              if (wn >= 0) {
                                  matmul_tn_acc(tape.grad_buffer(wn).data(), xv.data(), dY.data(),
                                                B, Fin, Fout);
                              }
                              if (bn >= 0) {
                                  auto& db = tape.grad_buffer(bn);
                                  for (std::size_t i = 0; i < B; ++i) {
                                      const double* dy = dY.data() + i * Fout;
                                      for (std::size_t j = 0; j < Fout; ++j) db[j] += dy[j];
                                  }
                              }
                          });
    }
    return out;
}

Tensor Tape::activation(const Tensor& x, Activation kind) {
    Tensor out = x;
    out.node = -1;
    switch (kind) {
        case Activation::relu:
            for (double& v : out.data) v = v > 0.0 ? v : 0.0;
            break;
        case Activation::celu:
            for (double& v : out.data) v = v > 0.0 ? v : std::expm1(v);
            break;
        case Activation::sigmoid:
            for (double& v : out.data) v = stable_sigmoid(v);
            break;
        case Activation::softplus:
            for (double& v : out.data) v = stable_softplus(v);
            break;
    }
    check_finite(out, "activation");
    if (x.node >= 0) {
        const int xn = x.node;
        std::vector<double> yv = out.data;
        out.node = record(out.shape, out.size(),
                          [xn, kind, yv = std::move(yv)](const std::vector<double>& dY,
                                                         Tape& tape) {
                              auto& dx = tape.grad_buffer(xn);
                              switch (kind) {
                                  case Activation::relu:
                                      for (std::size_t i = 0; i < dY.size(); ++i) {
                                          if (yv[i] > 0.0) dx[i] += dY[i];
                                      }
                                      break;
                                  case Activation::celu:
                                      for (std::size_t i = 0; i < dY.size(); ++i) {
                                          dx[i] += dY[i] * (yv[i] > 0.0 ? 1.0 : yv[i] + 1.0);
                                      }
                                      break;
                                  case Activation::sigmoid:
                                      for (std::size_t i = 0; i < dY.size(); ++i) {
                                          dx[i] += dY[i] * yv[i] * (1.0 - yv[i]);
                                      }
                                      break;
                                  case Activation::softplus:
                                      for (std::size_t i = 0; i < dY.size(); ++i) {
                                          dx[i] += dY[i] * (1.0 - std::exp(-yv[i]));
                                      }
                                      break;
                              }
                          });
    }
    return out;
}

Tensor Tape::batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        BatchNormState& state, bool train) {
    if (x.shape.size() != 2) throw ShapeError("batch_norm expects x[B,F]");
    const std::size_t B = x.shape[0], F = x.shape[1];
    if (gamma.size() != F || beta.size() != F) throw ShapeError("batch_norm: gamma/beta size");
    if (state.running_mean.size() != F) throw ShapeError("batch_norm: state size");
    if (train && B < 2) throw ShapeError("batch_norm needs at least 2 rows in train mode");

    Tensor out = Tensor::zeros({B, F});
    std::vector<double> xhat(B * F);
    std::vector<double> inv_std(F);

    if (train) {
        for (std::size_t j = 0; j < F; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < B; ++i) mean += x.data[i * F + j];
            mean /= static_cast<double>(B);
            double var = 0.0;
            for (std::size_t i = 0; i < B; ++i) {
                const double d = x.data[i * F + j] - mean;
                var += d * d;
            }
            var /= static_cast<double>(B);
            const double inv = 1.0 / std::sqrt(var + state.eps);
            inv_std[j] = inv;
            for (std::size_t i = 0; i < B; ++i) {
                const double xh = (x.data[i * F + j] - mean) * inv;
                xhat[i * F + j] = xh;
                out.data[i * F + j] = gamma.data[j] * xh + beta.data[j];
            }
            const double unbiased = var * static_cast<double>(B) / static_cast<double>(B - 1);
            state.running_mean[j] =
                (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean;
            state.running_var[j] =
                (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
        }
    } else {
        for (std::size_t j = 0; j < F; ++j) {
            const double inv = 1.0 / std::sqrt(state.running_var[j] + state.eps);
            inv_std[j] = inv;
            for (std::size_t i = 0; i < B; ++i) {
                const double xh = (x.data[i * F + j] - state.running_mean[j]) * inv;
                xhat[i * F + j] = xh;
                out.data[i * F + j] = gamma.data[j] * xh + beta.data[j];
            }
        }
    }
    check_finite(out, "batch_norm");

    const int xn = x.node, gn = gamma.node, bn = beta.node;
    if (xn >= 0 || gn >= 0 || bn >= 0) {
        std::vector<double> gv = gamma.data;
        out.node = record(
            out.shape, out.size(),
            [xn, gn, bn, train, B, F, xhat = std::move(xhat), inv_std = std::move(inv_std),
             gv = std::move(gv)](const std::vector<double>& dY, Tape& tape) {
                if (gn >= 0) {
                    auto& dg = tape.grad_buffer(gn);
                    for (std::size_t i = 0; i < B; ++i) {
                        for (std::size_t j = 0; j < F; ++j) {
                            dg[j] += dY[i * F + j] * xhat[i * F + j];
                        }
                    }
                }
                if (bn >= 0) {
                    auto& db = tape.grad_buffer(bn);
                    for (std::size_t i = 0; i < B; ++i) {
                        for (std::size_t j = 0; j < F; ++j) db[j] += dY[i * F + j];
                    }
                }
                if (xn >= 0) {
                    auto& dx = tape.grad_buffer(xn);
                    if (train) {
                        for (std::size_t j = 0; j < F; ++j) {
                            double sum_dy = 0.0, sum_dy_xhat = 0.0;
                            for (std::size_t i = 0; i < B; ++i) {
                                sum_dy += dY[i * F + j];
                                sum_dy_xhat += dY[i * F + j] * xhat[i * F + j];
                            }
                            const double scale = gv[j] * inv_std[j] / static_cast<double>(B);
                            for (std::size_t i = 0; i < B; ++i) {
                                dx[i * F + j] += scale * (static_cast<double>(B) * dY[i * F + j] -
                                                          sum_dy - xhat[i * F + j] * sum_dy_xhat);
                            }
                        }
                    } else {
                        for (std::size_t i = 0; i < B; ++i) {
                            for (std::size_t j = 0; j < F; ++j) {
                                dx[i * F + j] += dY[i * F + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            });
    }
    return out;
}

Tensor Tape::dropout(const Tensor& x, double rate, bool train, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout rate must be in [0,1)");
    if (!train || rate == 0.0) return x;

    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.size());
    for (double& m : mask) m = rng.bernoulli(rate) ? 0.0 : keep_scale;

    Tensor out = x;
    out.node = -1;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask[i];
    check_finite(out, "dropout");
    if (x.node >= 0) {
        const int xn = x.node;
        out.node = record(out.shape, out.size(),
                          [xn, mask = std::move(mask)](const std::vector<double>& dY, Tape& tape) {
                              auto& dx = tape.grad_buffer(xn);
                              for (std::size_t i = 0; i < dY.size(); ++i) dx[i] += dY[i] * mask[i];
                          });
    }
    return out;
}

Tensor Tape::aggregate_neighbors(const Tensor& h, const std::vector<std::uint8_t>& adj,
                                 std::size_t n, double eps, bool symmetric) {
    if (h.shape.size() != 2 || h.shape[0] != n) throw ShapeError("aggregate: h must be [n,F]");
    if (adj.size() != n * n) throw ShapeError("aggregate: adjacency must be n*n");
    const std::size_t F = h.shape[1];

    std::vector<std::pair<int, int>> edges;
    for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t v = 0; v < n; ++v) {
            if (adj[u * n + v]) edges.emplace_back(static_cast<int>(u), static_cast<int>(v));
        }
    }

    Tensor out = h;
    out.node = -1;
    const double self = 1.0 + eps;
    for (double& v : out.data) v *= self;
    for (const auto& [u, v] : edges) {
        const double* src = h.data.data() + static_cast<std::size_t>(u) * F;
        double* dst = out.data.data() + static_cast<std::size_t>(v) * F;
        for (std::size_t j = 0; j < F; ++j) dst[j] += src[j];
        if (symmetric) {
            const double* src2 = h.data.data() + static_cast<std::size_t>(v) * F;
            double* dst2 = out.data.data() + static_cast<std::size_t>(u) * F;
            for (std::size_t j = 0; j < F; ++j) dst2[j] += src2[j];
        }
    }
    check_finite(out, "aggregate_neighbors");

    if (h.node >= 0) {
        const int hn = h.node;
        out.node = record(out.shape, out.size(),
                          [hn, edges = std::move(edges), self, symmetric,
                           F](const std::vector<double>& dY, Tape& tape) {
                              auto& dh = tape.grad_buffer(hn);
                              for (std::size_t i = 0; i < dY.size(); ++i) dh[i] += self * dY[i];
                              for (const auto& [u, v] : edges) {
                                  const double* dy = dY.data() + static_cast<std::size_t>(v) * F;
                                  double* du = dh.data() + static_cast<std::size_t>(u) * F;
                                  for (std::size_t j = 0; j < F; ++j) du[j] += dy[j];
                                  if (symmetric) {
                                      const double* dy2 =
                                          dY.data() + static_cast<std::size_t>(u) * F;
                                      double* dv = dh.data() + static_cast<std::size_t>(v) * F;
                                      for (std::size_t j = 0; j < F; ++j) dv[j] += dy2[j];
                                  }
                              }
                          });
    }
    return out;
}

Tensor Tape::global_mean_pool(const Tensor& h, const std::vector<int>& graph_of_row,
                              std::size_t num_graphs) {
    if (h.shape.size() != 2) throw ShapeError("pool expects [rows,F]");
    const std::size_t rows = h.shape[0], F = h.shape[1];
    if (graph_of_row.size() != rows) throw ShapeError("pool: membership size mismatch");

    std::vector<double> counts(num_graphs, 0.0);
    for (int g : graph_of_row) {
        if (g < 0 || static_cast<std::size_t>(g) >= num_graphs) {
            throw ShapeError("pool: membership out of range");
        }
        counts[static_cast<std::size_t>(g)] += 1.0;
    }
    for (double c : counts) {
        if (c == 0.0) throw ShapeError("pool: empty graph");
    }

    Tensor out = Tensor::zeros({num_graphs, F});
    for (std::size_t i = 0; i < rows; ++i) {
        const auto g = static_cast<std::size_t>(graph_of_row[i]);
        const double* src = h.data.data() + i * F;
        double* dst = out.data.data() + g * F;
        for (std::size_t j = 0; j < F; ++j) dst[j] += src[j];
    }
    for (std::size_t g = 0; g < num_graphs; ++g) {
        double* dst = out.data.data() + g * F;
        for (std::size_t j = 0; j < F; ++j) dst[j] /= counts[g];
    }
    check_finite(out, "global_mean_pool");

    if (h.node >= 0) {
        const int hn = h.node;
        std::vector<int> membership = graph_of_row;
        out.node = record(out.shape, out.size(),
                          [hn, membership = std::move(membership), counts = std::move(counts),
                           F](const std::vector<double>& dY, Tape& tape) {
                              auto& dh = tape.grad_buffer(hn);
                              for (std::size_t i = 0; i < membership.size(); ++i) {
                                  const auto g = static_cast<std::size_t>(membership[i]);
                                  const double* dy = dY.data() + g * F;
                                  double* dst = dh.data() + i * F;
                                  for (std::size_t j = 0; j < F; ++j) dst[j] += dy[j] / counts[g];
                              }
                          });
    }
    return out;
}

Tensor Tape::gaussian_nll(const Tensor& mu, const Tensor& sigma, const Tensor& y) {
    if (mu.size() != sigma.size() || mu.size() != y.size() || mu.size() == 0) {
        throw ShapeError("gaussian_nll: mu/sigma/y sizes must match and be nonempty");
    }
    for (double s : sigma.data) {
        if (!(s > 0.0)) throw NumericError("gaussian_nll: nonpositive sigma");
    }
    const std::size_t B = mu.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const double d = y.data[i] - mu.data[i];
        loss += std::log(sigma.data[i]) + d * d / (2.0 * sigma.data[i] * sigma.data[i]);
    }
    loss = loss / static_cast<double>(B) + kHalfLog2Pi;

    Tensor out = Tensor::scalar_tensor(loss);
    check_finite(out, "gaussian_nll");
    const int mn = mu.node, sn = sigma.node;
    if (mn >= 0 || sn >= 0) {
        std::vector<double> mv = mu.data, sv = sigma.data, yv = y.data;
        out.node = record(out.shape, out.size(),
                          [mn, sn, mv = std::move(mv), sv = std::move(sv), yv = std::move(yv),
                           B](const std::vector<double>& dY, Tape& tape) {
                              const double d0 = dY[0] / static_cast<double>(B);
                              if (mn >= 0) {
                                  auto& dm = tape.grad_buffer(mn);
                                  for (std::size_t i = 0; i < B; ++i) {
                                      dm[i] += d0 * (mv[i] - yv[i]) / (sv[i] * sv[i]);
                                  }
                              }
                              if (sn >= 0) {
                                  auto& ds = tape.grad_buffer(sn);
                                  for (std::size_t i = 0; i < B; ++i) {
                                      const double diff = yv[i] - mv[i];
                                      ds[i] += d0 * (1.0 / sv[i] -
                                                     diff * diff / (sv[i] * sv[i] * sv[i]));
                                  }
                              }
                          });
    }
    return out;
}

Tensor Tape::mse(const Tensor& predicted, const Tensor& target) {
    if (predicted.size() != target.size() || predicted.size() == 0) {
        throw ShapeError("mse: sizes must match and be nonempty");
    }
    const std::size_t B = predicted.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const double d = predicted.data[i] - target.data[i];
        loss += d * d;
    }
    loss /= static_cast<double>(B);

    Tensor out = Tensor::scalar_tensor(loss);
    check_finite(out, "mse");
    const int pn = predicted.node, tn = target.node;
    if (pn >= 0 || tn >= 0) {
        std::vector<double> pv = predicted.data, tv = target.data;
        out.node = record(out.shape, out.size(),
                          [pn, tn, pv = std::move(pv), tv = std::move(tv),
                           B](const std::vector<double>& dY, Tape& tape) {
                              const double d0 = 2.0 * dY[0] / static_cast<double>(B);
                              if (pn >= 0) {
                                  auto& dp = tape.grad_buffer(pn);
                                  for (std::size_t i = 0; i < B; ++i) {
                                      dp[i] += d0 * (pv[i] - tv[i]);
                                  }
                              }
                              if (tn >= 0) {
                                  auto& dt = tape.grad_buffer(tn);
                                  for (std::size_t i = 0; i < B; ++i) {
                                      dt[i] -= d0 * (pv[i] - tv[i]);
                                  }
                              }
                          });
    }
    return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw ShapeError("add: shapes must match");
    Tensor out = a;
    out.node = -1;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    check_finite(out, "add");
    const int an = a.node, bn = b.node;
    if (an >= 0 || bn >= 0) {
        out.node = record(out.shape, out.size(),
                          [an, bn](const std::vector<double>& dY, Tape& tape) {
                              if (an >= 0) {
                                  auto& da = tape.grad_buffer(an);
                                  for (std::size_t i = 0; i < dY.size(); ++i) da[i] += dY[i];
                              }
                              if (bn >= 0) {
                                  auto& db = tape.grad_buffer(bn);
                                  for (std::size_t i = 0; i < dY.size(); ++i) db[i] += dY[i];
                              }
                          });
    }
    return out;
}

Tensor Tape::add_const(const Tensor& x, double c) {
    Tensor out = x;
    out.node = -1;
    for (double& v : out.data) v += c;
    check_finite(out, "add_const");
    if (x.node >= 0) {
        const int xn = x.node;
        out.node = record(out.shape, out.size(),
                          [xn](const std::vector<double>& dY, Tape& tape) {
                              auto& dx = tape.grad_buffer(xn);
                              for (std::size_t i = 0; i < dY.size(); ++i) dx[i] += dY[i];
                          });
    }
    return out;
}

Tensor Tape::reshape(const Tensor& x, std::vector<std::size_t> shape) {
    if (shape_size(shape) != x.size()) throw ShapeError("reshape: element count mismatch");
    Tensor out = x;
    out.shape = std::move(shape);
    out.node = -1;
    if (x.node >= 0) {
        const int xn = x.node;
        out.node = record(out.shape, out.size(),
                          [xn](const std::vector<double>& dY, Tape& tape) {
                              auto& dx = tape.grad_buffer(xn);
                              for (std::size_t i = 0; i < dY.size(); ++i) dx[i] += dY[i];
                          });
    }
    return out;
}

void Tape::backward(const Tensor& loss) {
    if (loss.node < 0) throw TapeError("loss is not on this tape");
    if (static_cast<std::size_t>(loss.node) >= nodes_.size()) {
        throw TapeError("loss node id out of range");
    }
    if (nodes_[static_cast<std::size_t>(loss.node)].size != 1) {
        throw TapeError("backward requires a scalar loss");
    }
    if (ran_backward_) throw TapeError("backward already ran on this tape");
    ran_backward_ = true;

    grads_.assign(nodes_.size(), {});
    grad_buffer(loss.node)[0] = 1.0;
    for (int i = loss.node; i >= 0; --i) {
        const auto& node = nodes_[static_cast<std::size_t>(i)];
        if (grads_[static_cast<std::size_t>(i)].empty() || !node.backprop) continue;
        node.backprop(grads_[static_cast<std::size_t>(i)], *this);
    }
}

const std::vector<double>& Tape::grad(const Tensor& t) const {
    if (!ran_backward_) throw TapeError("grad() before backward()");
    if (t.node < 0 || static_cast<std::size_t>(t.node) >= nodes_.size()) {
        throw TapeError("tensor is not on this tape");
    }
    auto& self = const_cast<Tape&>(*this);
    return self.grad_buffer(t.node);
}

void Adam::step(const std::vector<Tensor*>& params,
                const std::vector<const std::vector<double>*>& grads) {
    if (params.size() != grads.size()) throw ShapeError("adam: params/grads length mismatch");
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t p = 0; p < params.size(); ++p) {
            m_[p].assign(params[p]->size(), 0.0);
            v_[p].assign(params[p]->size(), 0.0);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& param = *params[p];
        const std::vector<double>& grad = *grads[p];
        if (grad.size() != param.size() || m_[p].size() != param.size()) {
            throw ShapeError("adam: parameter/gradient shape mismatch");
        }
        double* w = param.data.data();
        double* m = m_[p].data();
        double* v = v_[p].data();
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double g = grad[i] + cfg_.weight_decay * w[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void save_checkpoint(const std::string& bin_path, const std::string& meta_path,
                     const std::vector<NamedTensor>& entries) {
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw TapeError("cannot open checkpoint file " + bin_path);
    nlohmann::json meta = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& e : entries) {
        bin.write(reinterpret_cast<const char*>(e.tensor->data.data()),
                  static_cast<std::streamsize>(e.tensor->data.size() * sizeof(double)));
        meta.push_back({{"name", e.name}, {"shape", e.tensor->shape}, {"offset", offset}});
        offset += e.tensor->data.size() * sizeof(double);
    }
    bin.close();
    std::ofstream side(meta_path, std::ios::trunc);
    if (!side) throw TapeError("cannot open checkpoint sidecar " + meta_path);
    side << meta.dump(2) << "\n";
}

void load_checkpoint(const std::string& bin_path, const std::string& meta_path,
                     const std::vector<std::string>& names, std::vector<Tensor*> out) {
    if (names.size() != out.size()) throw ShapeError("load_checkpoint: names/out mismatch");
    std::ifstream side(meta_path);
    if (!side) throw TapeError("cannot open checkpoint sidecar " + meta_path);
    nlohmann::json meta = nlohmann::json::parse(side);
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw TapeError("cannot open checkpoint file " + bin_path);

    for (std::size_t i = 0; i < names.size(); ++i) {
        bool found = false;
        for (const auto& entry : meta) {
            if (entry.at("name").get<std::string>() != names[i]) continue;
            const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            const auto offset = entry.at("offset").get<std::size_t>();
            Tensor t = Tensor::zeros(shape);
            bin.seekg(static_cast<std::streamoff>(offset));
            bin.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            if (!bin) throw TapeError("checkpoint truncated for " + names[i]);
            *out[i] = std::move(t);
            found = true;
            break;
        }
        if (!found) throw TapeError("checkpoint entry missing: " + names[i]);
    }
}

}  // namespace npenas::ng
