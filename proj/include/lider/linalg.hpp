#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "lider/errors.hpp"

namespace lider {

// Plain row-major kernels shared by the taped ops and the inference-only
// paths. Keeping one kernel per operation guarantees bit-identical results
// between forward_with_trace and plain evaluation.

// out[m x n] = a[m x k] * b[k x n]; out must be zero-initialized or overwritten.
inline void matmul_kernel(const double* a, const double* b, double* out,
                          std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* out_row = out + i * n;
        for (std::size_t j = 0; j < n; ++j) out_row[j] = 0.0;
        const double* a_row = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a_row[p];
            const double* b_row = b + p * n;
            for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
        }
    }
}

inline void relu_kernel(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

inline constexpr double kRowNormEps = 1e-12;

// Divide each row by max(||row||_2, eps); zero rows stay zero.
inline void l2_normalize_rows_kernel(const double* x, double* out,
                                     std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double norm_sq = 0.0;
        for (std::size_t c = 0; c < cols; ++c) norm_sq += xr[c] * xr[c];
        const double denom = std::max(std::sqrt(norm_sq), kRowNormEps);
        double* yr = out + r * cols;
        for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] / denom;
    }
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(const double* a, std::size_t n) { return std::sqrt(dot(a, a, n)); }

// y = M v for square M[n x n].
inline void matvec(const double* m, const double* v, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = dot(m + i * n, v, n);
}

// Softmax over an index subset of one logit row. `mask` lists the class
// indices that participate; everything else gets probability zero.
inline std::vector<double> masked_softmax(const double* logits, std::size_t n_classes,
                                          const std::vector<int>& mask) {
    std::vector<double> probs(n_classes, 0.0);
    if (mask.empty()) return probs;
    double mx = logits[mask[0]];
    for (int c : mask) mx = std::max(mx, logits[static_cast<std::size_t>(c)]);
    double z = 0.0;
    for (int c : mask) z += std::exp(logits[static_cast<std::size_t>(c)] - mx);
    for (int c : mask) {
        probs[static_cast<std::size_t>(c)] =
            std::exp(logits[static_cast<std::size_t>(c)] - mx) / z;
    }
    return probs;
}

inline std::vector<double> softmax(const double* logits, std::size_t n_classes) {
    std::vector<int> all(n_classes);
    for (std::size_t i = 0; i < n_classes; ++i) all[i] = static_cast<int>(i);
    return masked_softmax(logits, n_classes, all);
}

}  // namespace lider
