#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lider/backbone.hpp"
#include "lider/errors.hpp"
#include "lider/spectral.hpp"
#include "lider/tensor.hpp"

namespace lider {

enum class TargetMode { learned, fixed };
enum class RegTarget { buffer, stream };

struct LiderConfig {
    double alpha = 0.0;              // weight of the c-Lip term
    double beta = 0.0;               // weight of the 0-Lip term
    int power_iters = 5;
    TargetMode target_mode = TargetMode::learned;
    double fixed_target = 1.0;       // used when target_mode == fixed
    double target_lr = 0.1;          // step size for learned targets
    RegTarget regularization_target = RegTarget::buffer;

    bool enabled() const { return alpha > 0.0 || beta > 0.0; }

    void validate() const {
        if (alpha < 0.0 || beta < 0.0)
            throw ConfigError("lider: alpha and beta must be non-negative");
        if (power_iters < 1) throw ConfigError("lider: power_iters must be >= 1");
        if (target_lr <= 0.0) throw ConfigError("lider: target_lr must be positive");
    }
};

// Per-layer Lipschitz targets c_k. In learned mode these are grad-enabled
// scalars seeded from the first measured estimates and updated only by the
// optimizer; in fixed mode they are constants.
struct LipschitzTargets {
    std::vector<Tensor> c;
    bool initialized = false;

    std::size_t num_layers() const { return c.size(); }

    void init_learned(const SpectralEstimate& est) {
        c.clear();
        for (const Tensor& l : est.lambdas) c.push_back(Tensor::scalar(l.value(), true));
        initialized = true;
    }

    void init_fixed(std::size_t layers, double value) {
        c.clear();
        for (std::size_t k = 0; k < layers; ++k) c.push_back(Tensor::scalar(value, false));
        initialized = true;
    }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> p;
        for (Tensor& t : c)
            if (t.grad_enabled()) p.push_back(&t);
        return p;
    }

    std::vector<double> values() const {
        std::vector<double> v;
        for (const Tensor& t : c) v.push_back(t.value());
        return v;
    }
};

// (1/K) sum_k |lambda_k - c_k|. Gradients reach both the estimates (hence the
// weights) and the targets.
inline Tensor loss_c_lip(Tape& tape, const SpectralEstimate& est, const LipschitzTargets& targets) {
    if (est.num_layers() != targets.num_layers())
        throw ShapeError("loss_c_lip: estimate/target length mismatch");
    if (est.num_layers() == 0) throw ShapeError("loss_c_lip: empty estimate");
    Tensor lambdas = stack_scalars(tape, est.lambdas);
    Tensor cs = stack_scalars(tape, targets.c);
    return abs_mean(tape, sub(tape, lambdas, cs));
}

// (1/K) sum_k |lambda_k|; equals the mean estimate since every lambda >= 0.
inline Tensor loss_0_lip(Tape& tape, const SpectralEstimate& est) {
    if (est.num_layers() == 0) throw ShapeError("loss_0_lip: empty estimate");
    return abs_mean(tape, stack_scalars(tape, est.lambdas));
}

struct LiderLossResult {
    Tensor loss;           // alpha * c-Lip + beta * 0-Lip (exact zero when skipped)
    double c_lip = 0.0;
    double zero_lip = 0.0;
    bool skipped = false;  // no designated batch, or regularizer disabled
};

// Combined surrogate loss over the designated batch. The caller picks the
// batch according to cfg.regularization_target; in buffer mode this function
// never sees current-task activations. An empty batch skips the term and
// returns exact zero. On the first regularized step with learned targets the
// targets are initialized to the detached measured estimates.
inline LiderLossResult lider_loss(Tape& tape, const MlpBackbone& model, const Tensor& reg_batch,
                                  LipschitzTargets& targets, const LiderConfig& cfg, Rng& power_rng) {
    cfg.validate();
    LiderLossResult out{Tensor::scalar(0.0), 0.0, 0.0, true};
    if (!cfg.enabled()) return out;
    if (reg_batch.rank() != 2 || reg_batch.rows() == 0) return out;

    ForwardTrace trace = forward_with_trace(tape, model, reg_batch);
    SpectralEstimate est = layer_lipschitz_estimates(tape, trace, cfg.power_iters, power_rng);

    if (!targets.initialized) {
        if (cfg.target_mode == TargetMode::learned)
            targets.init_learned(est);
        else
            targets.init_fixed(est.num_layers(), cfg.fixed_target);
    }

    Tensor c_lip = loss_c_lip(tape, est, targets);
    Tensor zero_lip = loss_0_lip(tape, est);
    out.loss = add(tape, scale(tape, c_lip, cfg.alpha), scale(tape, zero_lip, cfg.beta));
    out.c_lip = c_lip.value();
    out.zero_lip = zero_lip.value();
    out.skipped = false;
    return out;
}

}  // namespace lider
