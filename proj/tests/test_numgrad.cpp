#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "npenas/numgrad.hpp"

using namespace npenas;
using namespace npenas::ng;

namespace {

constexpr double kPi = 3.14159265358979323846;

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

// Central finite differences against the analytic gradient of `forward`,
// perturbing every element of `param`.
template <typename Forward>
double max_grad_rel_err(Tensor& param, const std::vector<double>& analytic, Forward forward,
                        double h = 1e-5) {
    REQUIRE(analytic.size() == param.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < param.data.size(); ++i) {
        const double orig = param.data[i];
        param.data[i] = orig + h;
        const double fp = forward();
        param.data[i] = orig - h;
        const double fm = forward();
        param.data[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, rel_err(analytic[i], fd));
    }
    return worst;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("linear forward matches hand arithmetic") {
    Tape tape;
    Tensor x({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor eye({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor zero = Tensor::zeros({2});
    Tensor y = tape.linear(x, eye, zero);
    CHECK(y.data == x.data);

    Tensor x1({1, 1}, {2.0});
    Tensor w1({1, 1}, {3.0});
    Tensor b1({1}, {1.0});
    CHECK(tape.linear(x1, w1, b1).data[0] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("linear rejects mismatched shapes") {
    Tape tape;
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor w({2, 2}, {1, 0, 0, 1});
    CHECK_THROWS_AS(tape.linear(x, w, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("linear gradients match finite differences") {
    Rng rng(11);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor w = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({5}, rng);
    Tensor target = random_tensor({4, 5}, rng);

    auto run = [&](std::vector<double>* gx, std::vector<double>* gw, std::vector<double>* gb) {
        Tape tape;
        Tensor xl = tape.leaf(x), wl = tape.leaf(w), bl = tape.leaf(b);
        Tensor loss = tape.mse(tape.linear(xl, wl, bl), target);
        if (gx) {
            tape.backward(loss);
            *gx = tape.grad(xl);
            *gw = tape.grad(wl);
            *gb = tape.grad(bl);
        }
        return loss.scalar();
    };
    std::vector<double> gx, gw, gb;
    run(&gx, &gw, &gb);
    auto forward = [&]() { return run(nullptr, nullptr, nullptr); };
    CHECK(max_grad_rel_err(x, gx, forward) < 1e-6);
    CHECK(max_grad_rel_err(w, gw, forward) < 1e-6);
    CHECK(max_grad_rel_err(b, gb, forward) < 1e-6);
}

TEST_CASE("activation values") {
    Tape tape;
    Tensor x({4}, {-1.0, 2.0, 0.0, -0.5});
    Tensor r = tape.activation(x, Activation::relu);
    CHECK(r.data[0] == 0.0);
    CHECK(r.data[1] == 2.0);

    Tensor s = tape.activation(Tensor({1}, {0.0}), Activation::sigmoid);
    CHECK(s.data[0] == doctest::Approx(0.5).epsilon(1e-15));

    Tensor c = tape.activation(Tensor({2}, {-1.0, 1.5}), Activation::celu);
    CHECK(c.data[0] == doctest::Approx(std::expm1(-1.0)).epsilon(1e-12));
    CHECK(c.data[1] == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("activation gradients match finite differences at offset points") {
    Rng rng(12);
    for (Activation kind :
         {Activation::relu, Activation::celu, Activation::sigmoid, Activation::softplus}) {
        Tensor x = random_tensor({2, 6}, rng);
        for (double& v : x.data) {
            if (std::abs(v) < 0.05) v += 0.1;  // keep clear of the relu/celu kink
        }
        Tensor target = random_tensor({2, 6}, rng);
        auto run = [&](std::vector<double>* gx) {
            Tape tape;
            Tensor xl = tape.leaf(x);
            Tensor loss = tape.mse(tape.activation(xl, kind), target);
            if (gx) {
                tape.backward(loss);
                *gx = tape.grad(xl);
            }
            return loss.scalar();
        };
        std::vector<double> gx;
        run(&gx);
        const double tol = kind == Activation::sigmoid || kind == Activation::softplus ? 1e-6
                                                                                       : 1e-4;
        CHECK(max_grad_rel_err(x, gx, [&]() { return run(nullptr); }) < tol);
    }
}

TEST_CASE("batch_norm normalizes per feature in train mode") {
    Tape tape;
    BatchNormState state(3);
    Tensor x({4, 3}, {1, 5, 2, 1, 7, 4, 1, 9, 6, 1, 11, 8});
    Tensor gamma = Tensor::full({3}, 1.0);
    Tensor beta = Tensor::zeros({3});
    Tensor y = tape.batch_norm(x, gamma, beta, state, true);

    // Constant column maps to zeros.
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data[i * 3] == doctest::Approx(0.0));
    // Nonconstant columns have mean ~0 and biased variance ~1 (up to eps).
    for (std::size_t j = 1; j < 3; ++j) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < 4; ++i) mean += y.data[i * 3 + j];
        mean /= 4.0;
        for (std::size_t i = 0; i < 4; ++i) {
            var += (y.data[i * 3 + j] - mean) * (y.data[i * 3 + j] - mean);
        }
        var /= 4.0;
        CHECK(std::abs(mean) < 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("batch_norm rejects single-row train batches") {
    Tape tape;
    BatchNormState state(2);
    Tensor x({1, 2}, {1.0, 2.0});
    CHECK_THROWS_AS(
        tape.batch_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), state, true), ShapeError);
}

TEST_CASE("batch_norm gradients match finite differences") {
    Rng rng(13);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor gamma = random_tensor({3}, rng, 0.5);
    for (double& g : gamma.data) g += 1.0;
    Tensor beta = random_tensor({3}, rng, 0.2);
    Tensor target = random_tensor({4, 3}, rng);

    auto run = [&](bool train, std::vector<double>* gx, std::vector<double>* gg,
                   std::vector<double>* gb) {
        Tape tape;
        BatchNormState state(3);  // fresh state per evaluation
        state.running_mean = {0.1, -0.2, 0.3};
        state.running_var = {1.5, 0.7, 1.1};
        Tensor xl = tape.leaf(x), gl = tape.leaf(gamma), bl = tape.leaf(beta);
        Tensor loss = tape.mse(tape.batch_norm(xl, gl, bl, state, train), target);
        if (gx) {
            tape.backward(loss);
            *gx = tape.grad(xl);
            *gg = tape.grad(gl);
            *gb = tape.grad(bl);
        }
        return loss.scalar();
    };
    for (bool train : {true, false}) {
        std::vector<double> gx, gg, gb;
        run(train, &gx, &gg, &gb);
        auto forward = [&]() { return run(train, nullptr, nullptr, nullptr); };
        CHECK(max_grad_rel_err(x, gx, forward) < 1e-5);
        CHECK(max_grad_rel_err(gamma, gg, forward) < 1e-5);
        CHECK(max_grad_rel_err(beta, gb, forward) < 1e-5);
    }
}

TEST_CASE("batch_norm updates running stats with momentum") {
    Tape tape;
    BatchNormState state(1);
    Tensor x({2, 1}, {0.0, 2.0});  // mean 1, biased var 1, unbiased var 2
    tape.batch_norm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), state, true);
    CHECK(state.running_mean[0] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(state.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0).epsilon(1e-12));
}

TEST_CASE("dropout identity cases") {
    Tape tape;
    Rng rng(5);
    Tensor x({2, 2}, {1, 2, 3, 4});
    CHECK(tape.dropout(x, 0.0, true, rng).data == x.data);
    CHECK(tape.dropout(x, 0.5, false, rng).data == x.data);
    CHECK_THROWS_AS(tape.dropout(x, 1.0, true, rng), ShapeError);
}

TEST_CASE("dropout empirical rate near 0.1") {
    Tape tape;
    Rng rng(99);
    Tensor x = Tensor::full({100000}, 1.0);
    Tensor y = tape.dropout(x, 0.1, true, rng);
    std::size_t zeros = 0;
    for (double v : y.data) {
        if (v == 0.0) {
            ++zeros;
        } else {
            CHECK(v == doctest::Approx(1.0 / 0.9).epsilon(1e-12));
        }
    }
    const double frac = static_cast<double>(zeros) / 100000.0;
    CHECK(frac > 0.09);
    CHECK(frac < 0.11);
}

TEST_CASE("aggregate_neighbors identity and chain") {
    Tape tape;
    std::vector<std::uint8_t> no_edges(4, 0);
    Tensor h({2, 1}, {1.0, 2.0});
    CHECK(tape.aggregate_neighbors(h, no_edges, 2, 0.0, true).data == h.data);

    std::vector<std::uint8_t> chain = {0, 1, 0, 0};  // 0 -> 1
    Tensor sym = tape.aggregate_neighbors(h, chain, 2, 0.0, true);
    CHECK(sym.data[0] == doctest::Approx(3.0));
    CHECK(sym.data[1] == doctest::Approx(3.0));

    // In-only: node 1 receives node 0; node 0 receives nothing.
    Tensor in_only = tape.aggregate_neighbors(h, chain, 2, 0.0, false);
    CHECK(in_only.data[0] == doctest::Approx(1.0));
    CHECK(in_only.data[1] == doctest::Approx(3.0));
}

TEST_CASE("aggregate_neighbors gradients on a random 6-node graph") {
    Rng rng(17);
    const std::size_t n = 6;
    std::vector<std::uint8_t> adj(n * n, 0);
    for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t v = u + 1; v < n; ++v) adj[u * n + v] = rng.bernoulli(0.4) ? 1 : 0;
    }
    Tensor h = random_tensor({n, 3}, rng);
    Tensor target = random_tensor({n, 3}, rng);
    for (bool symmetric : {true, false}) {
        auto run = [&](std::vector<double>* gh) {
            Tape tape;
            Tensor hl = tape.leaf(h);
            Tensor loss = tape.mse(tape.aggregate_neighbors(hl, adj, n, 0.25, symmetric), target);
            if (gh) {
                tape.backward(loss);
                *gh = tape.grad(hl);
            }
            return loss.scalar();
        };
        std::vector<double> gh;
        run(&gh);
        CHECK(max_grad_rel_err(h, gh, [&]() { return run(nullptr); }) < 1e-6);
    }
}

TEST_CASE("global_mean_pool values and batching consistency") {
    Tape tape;
    Tensor h({3, 2}, {4, 6, 4, 6, 4, 6});
    Tensor pooled = tape.global_mean_pool(h, {0, 0, 0}, 1);
    CHECK(pooled.data[0] == doctest::Approx(4.0));
    CHECK(pooled.data[1] == doctest::Approx(6.0));

    Rng rng(23);
    Tensor ha = random_tensor({2, 3}, rng);
    Tensor hb = random_tensor({3, 3}, rng);
    Tensor both = Tensor::zeros({5, 3});
    std::copy(ha.data.begin(), ha.data.end(), both.data.begin());
    std::copy(hb.data.begin(), hb.data.end(), both.data.begin() + 6);
    Tensor batched = tape.global_mean_pool(both, {0, 0, 1, 1, 1}, 2);
    Tensor pa = tape.global_mean_pool(ha, {0, 0}, 1);
    Tensor pb = tape.global_mean_pool(hb, {0, 0, 0}, 1);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(batched.data[j] == doctest::Approx(pa.data[j]).epsilon(1e-15));
        CHECK(batched.data[3 + j] == doctest::Approx(pb.data[j]).epsilon(1e-15));
    }

    CHECK_THROWS_AS(tape.global_mean_pool(h, {0, 0, 2}, 2), ShapeError);  // graph 1 empty
}

TEST_CASE("global_mean_pool gradients") {
    Rng rng(29);
    Tensor h = random_tensor({5, 2}, rng);
    Tensor target = random_tensor({2, 2}, rng);
    const std::vector<int> membership = {0, 1, 0, 1, 1};
    auto run = [&](std::vector<double>* gh) {
        Tape tape;
        Tensor hl = tape.leaf(h);
        Tensor loss = tape.mse(tape.global_mean_pool(hl, membership, 2), target);
        if (gh) {
            tape.backward(loss);
            *gh = tape.grad(hl);
        }
        return loss.scalar();
    };
    std::vector<double> gh;
    run(&gh);
    CHECK(max_grad_rel_err(h, gh, [&]() { return run(nullptr); }) < 1e-6);
}

TEST_CASE("gaussian_nll analytic values") {
    Tape tape;
    Tensor mu({2}, {0.3, -1.2});
    Tensor sigma = Tensor::full({2}, 1.0);
    Tensor y = mu;
    const double base = 0.5 * std::log(2.0 * kPi);
    CHECK(tape.gaussian_nll(mu, sigma, y).scalar() == doctest::Approx(base).epsilon(1e-12));

    Tensor y1({2}, {1.3, -0.2});  // each off by one
    CHECK(tape.gaussian_nll(mu, sigma, y1).scalar() ==
          doctest::Approx(base + 0.5).epsilon(1e-12));

    CHECK_THROWS_AS(tape.gaussian_nll(mu, Tensor({2}, {1.0, 0.0}), y), NumericError);
}

TEST_CASE("gaussian_nll gradients") {
    Rng rng(31);
    Tensor mu = random_tensor({4}, rng);
    Tensor sigma = random_tensor({4}, rng, 0.3);
    for (double& s : sigma.data) s = 0.5 + std::abs(s);
    Tensor y = random_tensor({4}, rng);
    auto run = [&](std::vector<double>* gm, std::vector<double>* gs) {
        Tape tape;
        Tensor ml = tape.leaf(mu), sl = tape.leaf(sigma);
        Tensor loss = tape.gaussian_nll(ml, sl, y);
        if (gm) {
            tape.backward(loss);
            *gm = tape.grad(ml);
            *gs = tape.grad(sl);
        }
        return loss.scalar();
    };
    std::vector<double> gm, gs;
    run(&gm, &gs);
    auto forward = [&]() { return run(nullptr, nullptr); };
    CHECK(max_grad_rel_err(mu, gm, forward) < 1e-6);
    CHECK(max_grad_rel_err(sigma, gs, forward) < 1e-6);
}

TEST_CASE("mse values and gradient") {
    Tape tape;
    Tensor a({2}, {0.0, 1.0});
    Tensor b({2}, {1.0, 1.0});
    CHECK(tape.mse(a, a).scalar() == 0.0);
    CHECK(tape.mse(a, b).scalar() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(tape.mse(a, Tensor({3}, {1, 2, 3})), ShapeError);

    Rng rng(37);
    Tensor p = random_tensor({6}, rng);
    Tensor t = random_tensor({6}, rng);
    auto run = [&](std::vector<double>* gp) {
        Tape tape2;
        Tensor pl = tape2.leaf(p);
        Tensor loss = tape2.mse(pl, t);
        if (gp) {
            tape2.backward(loss);
            *gp = tape2.grad(pl);
        }
        return loss.scalar();
    };
    std::vector<double> gp;
    run(&gp);
    CHECK(max_grad_rel_err(p, gp, [&]() { return run(nullptr); }) < 1e-6);
}

TEST_CASE("backward seeds the loss with 1 and accumulates reuse") {
    Tape tape;
    Tensor p = tape.leaf(Tensor::scalar_tensor(1.75));
    tape.backward(p);
    CHECK(tape.grad(p)[0] == 1.0);

    Tape tape2;
    Tensor q = tape2.leaf(Tensor::scalar_tensor(0.5));
    Tensor doubled = tape2.add(q, q);
    tape2.backward(doubled);
    CHECK(tape2.grad(q)[0] == 2.0);
}

TEST_CASE("untouched leaves get zero gradients") {
    Tape tape;
    Tensor used = tape.leaf(Tensor::scalar_tensor(2.0));
    Tensor unused = tape.leaf(Tensor::full({3}, 1.0));
    tape.backward(used);
    for (double g : tape.grad(unused)) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar and off-tape losses") {
    Tape tape;
    Tensor v = tape.leaf(Tensor::full({2}, 1.0));
    CHECK_THROWS_AS(tape.backward(v), TapeError);
    Tensor constant = Tensor::scalar_tensor(1.0);
    CHECK_THROWS_AS(tape.backward(constant), TapeError);
}

TEST_CASE("non-finite results are refused") {
    Tape tape;
    Tensor big = Tensor::full({1, 1}, 1e308);
    Tensor w = Tensor::full({1, 1}, 1e308);
    CHECK_THROWS_AS(tape.linear(big, w, Tensor::zeros({1})), NumericError);
}

TEST_CASE("adam first step and zero-grad fixed point") {
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam adam(cfg);
    Tensor p = Tensor::scalar_tensor(1.0);
    std::vector<double> g = {0.5};
    adam.step({&p}, {&g});
    // At t=1 bias correction is exact, so the update is lr * g/(|g|+eps').
    CHECK(p.data[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));

    Adam adam2(cfg);
    Tensor q = Tensor::scalar_tensor(3.5);
    std::vector<double> zero = {0.0};
    adam2.step({&q}, {&zero});
    CHECK(q.data[0] == 3.5);
}

TEST_CASE("adam converges on a scalar quadratic") {
    AdamConfig cfg;
    cfg.lr = 0.05;
    Adam adam(cfg);
    Tensor p = Tensor::scalar_tensor(0.0);
    const Tensor target = Tensor::scalar_tensor(3.0);
    for (int step = 0; step < 200; ++step) {
        Tape tape;
        Tensor pl = tape.leaf(p);
        Tensor loss = tape.mse(pl, target);
        tape.backward(loss);
        const std::vector<double>& g = tape.grad(pl);
        adam.step({&p}, {&g});
    }
    CHECK(std::abs(p.data[0] - 3.0) < 0.05);
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "npenas_ckpt_test";
    fs::create_directories(dir);
    Rng rng(41);
    Tensor a = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor({2}, {-0.5, 0.25});
    const std::string bin = (dir / "params.bin").string();
    const std::string meta = (dir / "params.json").string();
    save_checkpoint(bin, meta, {{"a", &a}, {"b", &b}});

    Tensor a2, b2;
    load_checkpoint(bin, meta, {"a", "b"}, {&a2, &b2});
    CHECK(a2.shape == a.shape);
    CHECK(a2.data == a.data);
    CHECK(b2.data == b.data);
    CHECK_THROWS_AS(load_checkpoint(bin, meta, {"missing"}, {&a2}), TapeError);
    fs::remove_all(dir);
}
