#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lider/backbone.hpp"
#include "lider/spectral.hpp"
#include "oracles.hpp"

using namespace lider;

namespace {

// symmetric PSD matrix Q diag(eigs) Q^T with a random orthonormal Q
Tensor psd_with_spectrum(Rng& rng, const std::vector<double>& eigs) {
    const std::size_t n = eigs.size();
    std::vector<double> g(n * n);
    for (double& x : g) x = rng.normal();
    // Gram-Schmidt on columns of g -> orthonormal Q
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t prev = 0; prev < c; ++prev) {
            double proj = 0.0;
            for (std::size_t r = 0; r < n; ++r) proj += g[r * n + c] * g[r * n + prev];
            for (std::size_t r = 0; r < n; ++r) g[r * n + c] -= proj * g[r * n + prev];
        }
        double norm = 0.0;
        for (std::size_t r = 0; r < n; ++r) norm += g[r * n + c] * g[r * n + c];
        norm = std::sqrt(std::max(norm, 1e-12));
        for (std::size_t r = 0; r < n; ++r) g[r * n + c] /= norm;
    }
    std::vector<double> m(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += g[i * n + k] * eigs[k] * g[j * n + k];
            m[i * n + j] = s;
        }
    // force exact symmetry
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = m[j * n + i] = avg;
        }
    return Tensor::matrix(n, n, std::move(m));
}

// random PSD with no spectrum control (for bound-style properties)
Tensor random_psd(Rng& rng, std::size_t n, double lo = 0.0, double hi = 4.0) {
    std::vector<double> eigs(n);
    for (double& e : eigs) e = rng.uniform(lo, hi);
    return psd_with_spectrum(rng, eigs);
}

// dominant eigenvalue in [1, 3], the rest at most 0.8 of it: 50 power steps
// converge far past the checked tolerance
Tensor gapped_psd(Rng& rng, std::size_t n) {
    std::vector<double> eigs(n);
    const double top = rng.uniform(1.0, 3.0);
    eigs[0] = top;
    for (std::size_t i = 1; i < n; ++i) eigs[i] = rng.uniform(0.0, 0.8 * top);
    return psd_with_spectrum(rng, eigs);
}

}  // namespace

TEST_CASE("jacobi eigensolver on hand cases") {
    CHECK(dense_max_eigenvalue(Tensor::matrix(2, 2, {3, 0, 0, 1})) ==
          doctest::Approx(3.0).epsilon(1e-12));
    CHECK(dense_max_eigenvalue(Tensor::matrix(2, 2, {2, 1, 1, 2})) ==
          doctest::Approx(3.0).epsilon(1e-12));
    CHECK_THROWS_AS(dense_max_eigenvalue(Tensor::matrix(2, 2, {1, 2, 0, 1})), ShapeError);
}

TEST_CASE("jacobi agrees with the characteristic-cubic roots on random 3x3") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> m(9);
        m[0] = rng.uniform(-2, 2);
        m[4] = rng.uniform(-2, 2);
        m[8] = rng.uniform(-2, 2);
        m[1] = m[3] = rng.uniform(-2, 2);
        m[2] = m[6] = rng.uniform(-2, 2);
        m[5] = m[7] = rng.uniform(-2, 2);
        Tensor t = Tensor::matrix(3, 3, m);
        std::vector<double> jac = jacobi_eigenvalues(t);
        std::vector<double> cubic = oracles::symmetric_3x3_eigenvalues(m);
        std::sort(jac.begin(), jac.end());
        std::sort(cubic.begin(), cubic.end());
        for (int i = 0; i < 3; ++i)
            CHECK(jac[i] == doctest::Approx(cubic[i]).epsilon(1e-8));
    }
}

TEST_CASE("transmitting matrix hand cases") {
    Tape tape;
    Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor tm = transmitting_matrix(tape, eye, eye);
    CHECK(tm.data() == std::vector<double>{1, 0, 0, 1});
    Rng rng(1);
    Tape t2;
    CHECK(power_iteration(t2, tm, 20, rng).value() == doctest::Approx(1.0).epsilon(1e-10));

    Tensor f_prev = Tensor::matrix(2, 2, {1, 0, 1, 0});
    Tensor f_cur = Tensor::matrix(2, 2, {0, 1, 0, 1});
    Tensor tm2 = transmitting_matrix(tape, f_prev, f_cur);
    CHECK(tm2.data()[0] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(tm2.data()[1] == 0.0);
    CHECK(tm2.data()[2] == 0.0);
    CHECK(tm2.data()[3] == 0.0);

    CHECK_THROWS_AS(transmitting_matrix(tape, Tensor::matrix(2, 2, {1, 0, 1, 0}),
                                        Tensor::matrix(3, 2, {0, 1, 0, 1, 1, 1})),
                    ShapeError);
}

TEST_CASE("transmitting matrix is symmetric PSD for random feature maps") {
    Rng rng(32);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<double> fp(8 * 5), fc(8 * 3);
        for (double& x : fp) x = rng.normal();
        for (double& x : fc) x = rng.normal();
        Tape tape;
        Tensor tm = transmitting_matrix(tape, Tensor::matrix(8, 5, fp), Tensor::matrix(8, 3, fc));
        const std::size_t n = tm.rows();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                CHECK(std::abs(tm.data()[i * n + j] - tm.data()[j * n + i]) <= 1e-12);
        CHECK(dense_min_eigenvalue(tm) >= -1e-9);
    }
}

TEST_CASE("power iteration on diagonal and identity matrices") {
    Rng rng(33);
    Tape tape;
    Tensor diag = Tensor::matrix(3, 3, {5, 0, 0, 0, 2, 0, 0, 0, 1});
    CHECK(power_iteration(tape, diag, 50, rng).value() == doctest::Approx(5.0).epsilon(1e-6));

    Tensor eye4 = Tensor::matrix(4, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    CHECK(power_iteration(tape, eye4, 1, rng).value() == doctest::Approx(1.0).epsilon(1e-12));

    // n = 1 boundary: the estimate is the single entry itself
    Tensor one = Tensor::matrix(1, 1, {2.5});
    CHECK(power_iteration(tape, one, 3, rng).value() == doctest::Approx(2.5).epsilon(1e-12));

    CHECK_THROWS_AS(power_iteration(tape, Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}), 5, rng),
                    ShapeError);
    CHECK_THROWS_AS(power_iteration(tape, eye4, 0, rng), ConfigError);
}

TEST_CASE("power iteration matches the dense oracle on gapped PSD matrices") {
    Rng rng(34);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(31);
        Tensor m = gapped_psd(rng, n);
        const double oracle = dense_max_eigenvalue(m);
        Tape tape;
        const double est = power_iteration(tape, m, 50, rng).value();
        CHECK(est == doctest::Approx(oracle).epsilon(1e-4));
    }
}

TEST_CASE("power iteration never exceeds the dense oracle, any spectrum") {
    Rng rng(44);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(31);
        Tensor m = random_psd(rng, n, 0.0, 5.0);
        const double oracle = dense_max_eigenvalue(m);
        Tape tape;
        const double est = power_iteration(tape, m, 50, rng).value();
        // may undershoot when the top eigenvalues are nearly tied, but must
        // never exceed the true maximum
        CHECK(est <= oracle * (1.0 + 1e-6));
    }
}

TEST_CASE("rayleigh quotient of any unit vector stays below the max eigenvalue") {
    Rng rng(35);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(10);
        Tensor m = random_psd(rng, n);
        const double mx = dense_max_eigenvalue(m);
        std::vector<double> v = rng.unit_vector(n);
        Tape tape;
        CHECK(quadratic_form(tape, m, v).value() <= mx + 1e-9);
    }
}

TEST_CASE("power iteration estimate is monotone in iters on average") {
    Rng rng(36);
    const std::vector<int> iter_grid{1, 2, 5, 15, 50};
    std::vector<double> mean(iter_grid.size(), 0.0);
    const int trials = 40;
    for (int trial = 0; trial < trials; ++trial) {
        Tensor m = random_psd(rng, 12, 0.0, 3.0);
        for (std::size_t g = 0; g < iter_grid.size(); ++g) {
            Rng v_rng(900 + trial);  // same start vector across iteration counts
            Tape tape;
            mean[g] += power_iteration(tape, m, iter_grid[g], v_rng).value() / trials;
        }
    }
    for (std::size_t g = 1; g < iter_grid.size(); ++g) CHECK(mean[g] >= mean[g - 1] - 1e-12);
}

TEST_CASE("power iteration gradient matches finite differences when the gap is clear") {
    Rng rng(37);
    for (int trial = 0; trial < 8; ++trial) {
        Tensor m = gapped_psd(rng, 6);
        Tensor param = Tensor(m.shape(), m.data(), true);
        auto loss_value = [&]() {
            Tape t;
            Rng v_rng(55);
            return power_iteration(t, param, 50, v_rng).value();
        };
        Tape tape;
        Rng v_rng(55);
        Gradients grads = backward(tape, power_iteration(tape, param, 50, v_rng));
        CHECK(oracles::check_gradients({&param}, loss_value, grads, {1e-4, 1e-3, 1e-9}));
    }
}

TEST_CASE("layer estimates: identity features give lambda = 1, count equals layers") {
    MlpBackbone m = init_backbone({2, 2, 2}, 3);
    m.weights[0] = Tensor::matrix(2, 2, {1, 0, 0, 1}, true);
    m.weights[1] = Tensor::matrix(2, 2, {1, 0, 0, 1}, true);
    Tape tape;
    Tensor x = Tensor::matrix(2, 2, {1, 0, 0, 1});
    ForwardTrace trace = forward_with_trace(tape, m, x);
    Rng rng(4);
    SpectralEstimate est = layer_lipschitz_estimates(tape, trace, 30, rng);
    REQUIRE(est.num_layers() == 2);
    for (double l : est.values()) CHECK(l == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("layer estimates agree with the dense oracle on a random 3-layer net") {
    Rng rng(38);
    MlpBackbone m = init_backbone({5, 7, 6, 3}, 38);
    std::vector<double> x(9 * 5);
    for (double& v : x) v = rng.normal();
    Tape tape;
    ForwardTrace trace = forward_with_trace(tape, m, Tensor::matrix(9, 5, x));
    Rng pi_rng(39);
    SpectralEstimate est = layer_lipschitz_estimates(tape, trace, 50, pi_rng);
    REQUIRE(est.num_layers() == 3);
    for (double l : est.values()) CHECK(l >= 0.0);
    for (std::size_t k = 1; k < trace.feature_maps.size(); ++k) {
        Tape scratch;
        Tensor tm = transmitting_matrix(scratch, detach(trace.feature_maps[k - 1]),
                                        detach(trace.feature_maps[k]));
        const double oracle = dense_max_eigenvalue(tm);
        CHECK(est.values()[k - 1] == doctest::Approx(oracle).epsilon(1e-4));
    }
}

TEST_CASE("model lipschitz product multiplies the layer estimates") {
    // identity weights, identity batch: every lambda is 1
    MlpBackbone m = init_backbone({2, 2, 2}, 3);
    m.weights[0] = Tensor::matrix(2, 2, {1, 0, 0, 1}, true);
    m.weights[1] = Tensor::matrix(2, 2, {1, 0, 0, 1}, true);
    Rng rng(5);
    const double p = model_lipschitz_product(m, Tensor::matrix(2, 2, {1, 0, 0, 1}), 30, rng);
    CHECK(p == doctest::Approx(1.0).epsilon(1e-8));

    Rng rng2(6);
    CHECK_THROWS_AS(model_lipschitz_product(m, Tensor::matrix(0, 2, {}), 5, rng2), ShapeError);

    // general case: the product equals the product of the per-layer
    // estimates computed from the same trace and rng state
    Rng data_rng(7);
    MlpBackbone net = init_backbone({4, 6, 5, 3}, 8);
    std::vector<double> x(7 * 4);
    for (double& v : x) v = data_rng.normal();
    Tensor batch = Tensor::matrix(7, 4, x);
    Rng pr_a(9);
    const double product = model_lipschitz_product(net, batch, 25, pr_a);
    MlpBackbone frozen;
    frozen.layer_dims = net.layer_dims;
    for (const Tensor& w : net.weights) frozen.weights.push_back(detach(w));
    Tape tape;
    ForwardTrace trace = forward_with_trace(tape, frozen, batch);
    Rng pr_b(9);
    SpectralEstimate est = layer_lipschitz_estimates(tape, trace, 25, pr_b);
    double expected = 1.0;
    for (double l : est.values()) expected *= l;
    CHECK(product == expected);
}

TEST_CASE("batch of size one is allowed (rank-1 transmitting matrix)") {
    Tape tape;
    Tensor f_prev = Tensor::matrix(1, 3, {1, 2, 2});
    Tensor f_cur = Tensor::matrix(1, 2, {3, 4});
    Tensor tm = transmitting_matrix(tape, f_prev, f_cur);
    // rank-1: lambda equals trace(TM)
    double tr = tm.data()[0] + tm.data()[4] + tm.data()[8];
    Rng rng(7);
    Tape t2;
    CHECK(power_iteration(t2, tm, 60, rng).value() == doctest::Approx(tr).epsilon(1e-6));
}
