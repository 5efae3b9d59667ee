#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "lider/backbone.hpp"
#include "lider/errors.hpp"
#include "lider/rng.hpp"
#include "lider/tensor.hpp"

namespace lider {

// Layer-wise Lipschitz proxies: one dominant-eigenvalue estimate per weight
// layer, kept live on the tape so the regularizer can push weights around.
struct SpectralEstimate {
    std::vector<Tensor> lambdas;

    std::size_t num_layers() const { return lambdas.size(); }

    std::vector<double> values() const {
        std::vector<double> v;
        v.reserve(lambdas.size());
        for (const Tensor& l : lambdas) v.push_back(l.value());
        return v;
    }
};

// TM = A^T A with A = norm(F_cur)^T * norm(F_prev), where norm() rescales
// each sample row to unit L2 length. Symmetric PSD by construction and
// differentiable w.r.t. both feature maps.
inline Tensor transmitting_matrix(Tape& tape, const Tensor& f_prev, const Tensor& f_cur) {
    if (f_prev.rank() != 2 || f_cur.rank() != 2 || f_prev.rows() != f_cur.rows())
        throw ShapeError("transmitting_matrix: feature maps must share the batch dimension");
    Tensor prev_hat = l2_normalize_rows(tape, f_prev);
    Tensor cur_hat = l2_normalize_rows(tape, f_cur);
    Tensor a = matmul(tape, transpose(tape, cur_hat), prev_hat);
    return matmul(tape, transpose(tape, a), a);
}

// Dominant-eigenvalue estimate of a symmetric PSD matrix. The iteration runs
// off-tape; the returned value is the Rayleigh quotient of the final iterate,
// recorded so gradients flow into M with the direction held fixed.
inline Tensor power_iteration(Tape& tape, const Tensor& m, int iters, Rng& rng) {
    if (m.rank() != 2 || m.rows() != m.cols())
        throw ShapeError("power_iteration: square matrix required");
    if (iters < 1) throw ConfigError("power_iteration: iters must be >= 1");
    const std::size_t n = m.rows();
    std::vector<double> v = rng.unit_vector(n);
    std::vector<double> mv(n);
    for (int it = 0; it < iters; ++it) {
        matvec(m.data().data(), v.data(), mv.data(), n);
        const double norm = std::max(l2_norm(mv.data(), n), 1e-12);
        for (std::size_t i = 0; i < n; ++i) v[i] = mv[i] / norm;
    }
    return quadratic_form(tape, m, v);
}

// All eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
// Non-differentiable; used as the exact oracle for power iteration.
inline std::vector<double> jacobi_eigenvalues(const Tensor& m, double symmetry_tol = 1e-9) {
    if (m.rank() != 2 || m.rows() != m.cols())
        throw ShapeError("jacobi_eigenvalues: square matrix required");
    const std::size_t n = m.rows();
    std::vector<double> a = m.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(a[i * n + j] - a[j * n + i]) > symmetry_tol)
                throw ShapeError("jacobi_eigenvalues: matrix is not symmetric");
    // symmetrize exactly so rotations stay consistent
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double avg = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = a[j * n + i] = avg;
        }

    const double tol = 1e-12;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
        double diag = 0.0;
        for (std::size_t i = 0; i < n; ++i) diag += a[i * n + i] * a[i * n + i];
        if (std::sqrt(off) <= tol * std::max(1.0, std::sqrt(diag))) break;

        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    return eig;
}

inline double dense_max_eigenvalue(const Tensor& m, double symmetry_tol = 1e-9) {
    const std::vector<double> eig = jacobi_eigenvalues(m, symmetry_tol);
    double mx = eig[0];
    for (double e : eig) mx = std::max(mx, e);
    return mx;
}

inline double dense_min_eigenvalue(const Tensor& m, double symmetry_tol = 1e-9) {
    const std::vector<double> eig = jacobi_eigenvalues(m, symmetry_tol);
    double mn = eig[0];
    for (double e : eig) mn = std::min(mn, e);
    return mn;
}

// lambda_k = power_iteration(TM(F^{k-1}, F^k)) for every weight layer k.
inline SpectralEstimate layer_lipschitz_estimates(Tape& tape, const ForwardTrace& trace,
                                                  int iters, Rng& rng) {
    SpectralEstimate est;
    est.lambdas.reserve(trace.num_layers());
    for (std::size_t k = 1; k < trace.feature_maps.size(); ++k) {
        Tensor tm = transmitting_matrix(tape, trace.feature_maps[k - 1], trace.feature_maps[k]);
        est.lambdas.push_back(power_iteration(tape, tm, iters, rng));
    }
    return est;
}

// Product of the per-layer estimates over one batch; detached diagnostic for
// the whole-network Lipschitz upper bound.
inline double model_lipschitz_product(const MlpBackbone& model, const Tensor& batch, int iters,
                                      Rng& rng) {
    if (batch.rank() != 2 || batch.rows() == 0)
        throw ShapeError("model_lipschitz_product: non-empty batch required");
    // weights stay constant here: strip the grad flag so nothing is recorded
    MlpBackbone frozen;
    frozen.layer_dims = model.layer_dims;
    for (const Tensor& w : model.weights) frozen.weights.push_back(detach(w));
    Tape scratch;
    ForwardTrace trace = forward_with_trace(scratch, frozen, detach(batch));
    SpectralEstimate est = layer_lipschitz_estimates(scratch, trace, iters, rng);
    double product = 1.0;
    for (const Tensor& l : est.lambdas) product *= l.value();
    return product;
}

}  // namespace lider
