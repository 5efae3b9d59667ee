#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "lider/backbone.hpp"
#include "lider/benchmark.hpp"
#include "lider/buffer.hpp"
#include "lider/errors.hpp"
#include "lider/rng.hpp"
#include "lider/tensor.hpp"

namespace lider {

// Margin of the true class over the best rival on (optionally masked)
// pre-softmax logits: positive iff the masked argmax is correct.
inline double decision_value(const MlpBackbone& model, const std::vector<double>& x,
                             int true_class,
                             const std::optional<std::vector<int>>& class_mask = std::nullopt) {
    const std::vector<double> logits = logits_for(model, x);
    std::vector<int> allowed;
    if (class_mask) {
        allowed = *class_mask;
        if (std::find(allowed.begin(), allowed.end(), true_class) == allowed.end())
            throw ConfigError("decision_value: true class not in mask");
    } else {
        allowed.resize(model.num_classes());
        for (std::size_t c = 0; c < allowed.size(); ++c) allowed[c] = static_cast<int>(c);
    }
    if (allowed.size() < 2) throw ConfigError("decision_value: need at least two classes");
    double best_rival = -std::numeric_limits<double>::infinity();
    for (int c : allowed)
        if (c != true_class)
            best_rival = std::max(best_rival, logits[static_cast<std::size_t>(c)]);
    return logits[static_cast<std::size_t>(true_class)] - best_rival;
}

struct FgsmDirection {
    std::vector<double> direction;  // unit L2 norm
    bool fallback = false;          // gradient vanished; seeded random direction used
};

// Sign of the input gradient of the cross-entropy loss at (x, true_class),
// L2-normalized. When a class mask is given the loss runs over that subset,
// so the direction depends only on the masked logits. A vanishing gradient
// falls back to a seeded random unit vector and flags it.
inline FgsmDirection fgsm_direction(const MlpBackbone& model, const std::vector<double>& x,
                                    int true_class, std::uint64_t fallback_seed = 0,
                                    const std::optional<std::vector<int>>& class_mask =
                                        std::nullopt) {
    Tape tape;
    Tensor input = Tensor::matrix(1, x.size(), x, true);
    MlpBackbone frozen;
    frozen.layer_dims = model.layer_dims;
    for (const Tensor& w : model.weights) frozen.weights.push_back(detach(w));
    ForwardTrace trace = forward_with_trace(tape, frozen, input);
    Tensor loss = softmax_cross_entropy(tape, trace.logits(), {true_class}, class_mask);
    Gradients grads = tape.backward(loss);
    const Tensor g = grads.get(input);

    FgsmDirection out;
    out.direction.resize(x.size());
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = g.data()[i] > 0.0 ? 1.0 : (g.data()[i] < 0.0 ? -1.0 : 0.0);
        out.direction[i] = s;
        norm_sq += s * s;
    }
    if (norm_sq == 0.0) {
        Rng rng(fallback_seed);
        out.direction = rng.unit_vector(x.size());
        out.fallback = true;
        return out;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& v : out.direction) v *= inv;
    return out;
}

// S(x + i*alpha + j*beta) over a (grid_size x grid_size) plane: alpha is a
// seeded random unit direction, beta the normalized FGSM direction.
struct SurfaceGrid {
    std::size_t grid_size = 0;
    double eps = 0.0;
    std::vector<double> coeffs;   // per-axis coefficients, length grid_size
    std::vector<double> values;   // row-major: values[i * grid_size + j]
    std::vector<double> alpha;
    std::vector<double> beta;
    bool fgsm_fallback = false;

    double at(std::size_t i, std::size_t j) const { return values[i * grid_size + j]; }
};

inline SurfaceGrid decision_surface(const MlpBackbone& model, const std::vector<double>& x,
                                    int true_class, double eps, std::size_t grid_size,
                                    std::uint64_t seed,
                                    const std::optional<std::vector<int>>& class_mask =
                                        std::nullopt) {
    if (grid_size % 2 == 0) throw ConfigError("decision_surface: grid_size must be odd");
    SurfaceGrid grid;
    grid.grid_size = grid_size;
    grid.eps = eps;
    Rng rng(seed);
    grid.alpha = rng.unit_vector(x.size());
    FgsmDirection fgsm = fgsm_direction(model, x, true_class, seed + 1, class_mask);
    grid.beta = fgsm.direction;
    grid.fgsm_fallback = fgsm.fallback;

    grid.coeffs.resize(grid_size);
    const std::size_t half = grid_size / 2;
    for (std::size_t k = 0; k < grid_size; ++k)
        grid.coeffs[k] = grid_size == 1
                             ? 0.0
                             : eps * (static_cast<double>(k) - static_cast<double>(half)) /
                                   static_cast<double>(half);

    grid.values.resize(grid_size * grid_size);
    std::vector<double> point(x.size());
    for (std::size_t i = 0; i < grid_size; ++i) {
        for (std::size_t j = 0; j < grid_size; ++j) {
            for (std::size_t d = 0; d < x.size(); ++d)
                point[d] = x[d] + grid.coeffs[i] * grid.alpha[d] + grid.coeffs[j] * grid.beta[d];
            grid.values[i * grid_size + j] = decision_value(model, point, true_class, class_mask);
        }
    }
    return grid;
}

// Mean, over seeded uniform perturbations in an L-inf ball, of the gap
// between the true-class probability and the best task-class probability
// (softmax restricted to the task's classes). Always <= 0; equals 0 only
// when the true class tops every sampled neighbor.
inline double robustness_score(const MlpBackbone& model, const std::vector<double>& x,
                               int true_class, const std::vector<int>& task_classes,
                               std::size_t n_perturb, double radius, std::uint64_t seed) {
    if (std::find(task_classes.begin(), task_classes.end(), true_class) == task_classes.end())
        throw ConfigError("robustness_score: true class not in the task set");
    if (n_perturb < 1) throw ConfigError("robustness_score: n_perturb must be >= 1");
    Rng rng(seed);
    std::vector<double> point(x.size());
    double total = 0.0;
    for (std::size_t p = 0; p < n_perturb; ++p) {
        for (std::size_t d = 0; d < x.size(); ++d)
            point[d] = x[d] + rng.uniform(-radius, radius);
        const std::vector<double> logits = logits_for(model, point);
        const std::vector<double> probs =
            masked_softmax(logits.data(), model.num_classes(), task_classes);
        double best = 0.0;
        for (int c : task_classes) best = std::max(best, probs[static_cast<std::size_t>(c)]);
        total += probs[static_cast<std::size_t>(true_class)] - best;
    }
    return total / static_cast<double>(n_perturb);
}

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

struct RocResult {
    double auc = 0.0;           // Mann-Whitney rank statistic, ties averaged
    std::vector<RocPoint> points;
};

// ROC over (score, positive-label) pairs with "higher score = predicted
// positive". Points are one per distinct threshold, so trapezoidal
// integration over them reproduces the tie-averaged rank AUC.
inline RocResult roc_from_scores(std::vector<std::pair<double, bool>> scored) {
    std::size_t positives = 0;
    for (const auto& [s, label] : scored) positives += label ? 1 : 0;
    const std::size_t negatives = scored.size() - positives;
    if (positives == 0 || negatives == 0)
        throw ConfigError("roc: both label classes must be present");

    // rank statistic with average ranks over ties (ascending scores)
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < scored.size()) {
        std::size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (scored[k].second) rank_sum_pos += avg_rank;
        i = j;
    }
    RocResult out;
    out.auc = (rank_sum_pos - 0.5 * static_cast<double>(positives) *
                                  static_cast<double>(positives + 1)) /
              (static_cast<double>(positives) * static_cast<double>(negatives));

    // ROC points, one step per distinct threshold from high to low
    out.points.push_back(RocPoint{0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::size_t tp = 0, fp = 0;
    std::size_t k = scored.size();
    while (k > 0) {
        const double threshold = scored[k - 1].first;
        while (k > 0 && scored[k - 1].first == threshold) {
            if (scored[k - 1].second)
                ++tp;
            else
                ++fp;
            --k;
        }
        out.points.push_back(RocPoint{static_cast<double>(fp) / static_cast<double>(negatives),
                                      static_cast<double>(tp) / static_cast<double>(positives),
                                      threshold});
    }
    return out;
}

struct ProbeConfig {
    std::size_t n_perturb = 32;
    double radius = 0.1;
    std::uint64_t seed = 0;
};

struct BufferGuessResult {
    double auc = 0.0;
    std::vector<RocPoint> roc;
    std::size_t in_buffer = 0;
    std::size_t total = 0;
};

// The buffer guessing game: score every example of the first task's train
// set with robustness_score (task-IL restricted to task 0) and measure, via
// ROC-AUC, how well the scores separate buffer residents from the rest.
inline BufferGuessResult buffer_guessing_auc(const MlpBackbone& model, const MemoryBuffer& buffer,
                                             const std::vector<Example>& task0_train,
                                             const std::vector<int>& task0_classes,
                                             const ProbeConfig& probe) {
    std::vector<std::pair<double, bool>> scored;
    std::size_t resident = 0;
    for (std::size_t i = 0; i < task0_train.size(); ++i) {
        const Example& e = task0_train[i];
        bool in_buffer = false;
        for (const BufferEntry& b : buffer.entries())
            if (b.task_id == 0 && b.x == e.x) {
                in_buffer = true;
                break;
            }
        resident += in_buffer ? 1 : 0;
        const double score = robustness_score(model, e.x, e.y, task0_classes, probe.n_perturb,
                                              probe.radius, probe.seed + i);
        scored.emplace_back(score, in_buffer);
    }
    if (resident == 0 || resident == task0_train.size())
        throw ConfigError("buffer_guessing_auc: buffer ∩ task0 must be a non-empty strict subset");
    RocResult roc = roc_from_scores(std::move(scored));
    return BufferGuessResult{roc.auc, std::move(roc.points), resident, task0_train.size()};
}

struct PerturbationPoint {
    double sigma = 0.0;
    double mean_acc = 0.0;
    double std_acc = 0.0;
};

// Class-IL accuracy under W <- W + sigma * std(W_k) * N(0,1) noise per layer,
// averaged over independent trials; the caller's model is left untouched.
inline std::vector<PerturbationPoint> weight_perturbation_robustness(
    const MlpBackbone& model, const std::vector<Example>& test,
    const std::vector<double>& sigmas, std::size_t trials, std::uint64_t seed) {
    if (trials < 1) throw ConfigError("weight_perturbation_robustness: trials must be >= 1");
    for (double s : sigmas)
        if (s < 0.0) throw ConfigError("weight_perturbation_robustness: negative sigma");

    std::vector<double> layer_std;
    for (const Tensor& w : model.weights) {
        double mean = 0.0;
        for (double v : w.data()) mean += v;
        mean /= static_cast<double>(w.size());
        double var = 0.0;
        for (double v : w.data()) var += (v - mean) * (v - mean);
        layer_std.push_back(std::sqrt(var / static_cast<double>(w.size())));
    }

    std::vector<PerturbationPoint> out;
    for (std::size_t si = 0; si < sigmas.size(); ++si) {
        const double sigma = sigmas[si];
        std::vector<double> accs;
        for (std::size_t trial = 0; trial < trials; ++trial) {
            Rng rng = Rng::stream(seed, si * 10007 + trial);
            MlpBackbone noisy;
            noisy.layer_dims = model.layer_dims;
            for (std::size_t k = 0; k < model.weights.size(); ++k) {
                std::vector<double> w = model.weights[k].data();
                for (double& v : w) v += sigma * layer_std[k] * rng.normal();
                noisy.weights.push_back(Tensor(model.weights[k].shape(), std::move(w)));
            }
            accs.push_back(class_il_accuracy(noisy, test));
        }
        // shifted accumulation: constant samples (the sigma = 0 case) come
        // back exactly, with zero spread
        const double base = accs[0];
        double mean_shift = 0.0;
        for (double a : accs) mean_shift += a - base;
        mean_shift /= static_cast<double>(accs.size());
        const double mean = base + mean_shift;
        double var = 0.0;
        for (double a : accs) var += (a - base - mean_shift) * (a - base - mean_shift);
        out.push_back(PerturbationPoint{sigma, mean,
                                        std::sqrt(var / static_cast<double>(accs.size()))});
    }
    return out;
}

}  // namespace lider
