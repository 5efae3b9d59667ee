#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "lider/backbone.hpp"
#include "lider/buffer.hpp"
#include "lider/errors.hpp"
#include "lider/regularizer.hpp"
#include "lider/tensor.hpp"

namespace lider {

enum class Method { er, er_ace, derpp, gdumb, joint, finetune };

struct MethodConfig {
    Method method = Method::er;
    std::size_t buffer_capacity = 50;
    double poison_p = 0.0;
    double derpp_alpha = 0.3;   // weight of the stored-logit consistency term
    double derpp_beta = 0.3;    // weight of the replayed label term
    int gdumb_fit_epochs = 50;
};

struct Batch {
    Tensor x;  // B x d
    std::vector<int> y;

    std::size_t size() const { return y.size(); }
    bool empty() const { return y.empty(); }
};

inline Batch make_batch(const std::vector<BufferEntry>& entries, std::size_t dim) {
    std::vector<double> xs;
    std::vector<int> ys;
    xs.reserve(entries.size() * dim);
    ys.reserve(entries.size());
    for (const BufferEntry& e : entries) {
        xs.insert(xs.end(), e.x.begin(), e.x.end());
        ys.push_back(e.y);
    }
    return Batch{Tensor::matrix(entries.size(), dim, std::move(xs)), std::move(ys)};
}

inline Batch concat_batches(const Batch& a, const Batch& b) {
    std::vector<double> xs = a.x.data();
    xs.insert(xs.end(), b.x.data().begin(), b.x.data().end());
    std::vector<int> ys = a.y;
    ys.insert(ys.end(), b.y.begin(), b.y.end());
    return Batch{Tensor::matrix(a.size() + b.size(), a.x.cols(), std::move(xs)), std::move(ys)};
}

// Everything a method step needs beyond model/stream/buffer. The rng streams
// are separate so that enabling the regularizer does not perturb the data
// path: buffer sampling draws only from sample_rng, power iteration only
// from power_rng.
struct StepContext {
    double lr = 0.1;
    MethodConfig method;
    LiderConfig lider;
    LipschitzTargets* targets = nullptr;
    Rng* sample_rng = nullptr;
    Rng* power_rng = nullptr;
    std::vector<int> task_classes;  // classes of the current task
    std::vector<int> seen_classes;  // union over tasks seen so far (incl. current)
};

struct StepLosses {
    double total = 0.0;
    double ce_stream = 0.0;
    double ce_buffer = 0.0;
    double mse_logits = 0.0;
    double lider_c = 0.0;
    double lider_0 = 0.0;
    bool lider_skipped = false;
    std::vector<double> stream_logits;  // detached, row-major; empty if no forward ran
};

namespace detail {

// Regularizer hook shared by all method steps. Returns the loss term to add
// (exact zero scalar when disabled or skipped).
inline Tensor apply_lider(Tape& tape, const MlpBackbone& model, const Tensor& buffer_x,
                          const Tensor& stream_x, StepContext& ctx, StepLosses& losses) {
    if (!ctx.lider.enabled()) {
        losses.lider_skipped = true;
        return Tensor::scalar(0.0);
    }
    const Tensor& designated =
        ctx.lider.regularization_target == RegTarget::buffer ? buffer_x : stream_x;
    LiderLossResult res =
        lider_loss(tape, model, designated, *ctx.targets, ctx.lider, *ctx.power_rng);
    losses.lider_c = res.c_lip;
    losses.lider_0 = res.zero_lip;
    losses.lider_skipped = res.skipped;
    return res.loss;
}

inline void optimize(Tape& tape, const Tensor& loss, MlpBackbone& model, StepContext& ctx) {
    Gradients grads = tape.backward(loss);
    sgd_step(model.params(), grads, ctx.lr);
    if (ctx.lider.enabled() && ctx.targets) {
        std::vector<Tensor*> tp = ctx.targets->params();
        if (!tp.empty()) sgd_step(tp, grads, ctx.lider.target_lr);
    }
}

inline std::vector<double> slice_rows(const Tensor& m, std::size_t row_begin,
                                      std::size_t row_count) {
    const std::size_t c = m.cols();
    return std::vector<double>(m.data().begin() + row_begin * c,
                               m.data().begin() + (row_begin + row_count) * c);
}

}  // namespace detail

// Plain supervised step: cross-entropy on the stream batch only. Used by
// finetune, joint (on the merged stream) and as the ER base case.
inline StepLosses plain_ce_step(MlpBackbone& model, const Batch& stream, StepContext& ctx) {
    StepLosses losses;
    Tape tape;
    ForwardTrace trace = forward_with_trace(tape, model, stream.x);
    Tensor ce = softmax_cross_entropy(tape, trace.logits(), stream.y);
    losses.ce_stream = ce.value();
    losses.stream_logits = detail::slice_rows(trace.logits(), 0, stream.size());
    Tensor empty_buffer = Tensor::matrix(0, stream.x.cols(), {});
    Tensor reg = detail::apply_lider(tape, model, empty_buffer, stream.x, ctx, losses);
    Tensor loss = ctx.lider.enabled() ? add(tape, ce, reg) : ce;
    losses.total = loss.value();
    detail::optimize(tape, loss, model, ctx);
    return losses;
}

// Cross-entropy over the concatenation of the stream batch and one replay
// batch of equal size (buffer term skipped while the buffer is empty).
inline StepLosses er_step(MlpBackbone& model, const Batch& stream, MemoryBuffer& buffer,
                          StepContext& ctx) {
    StepLosses losses;
    Tape tape;
    Batch replay{Tensor::matrix(0, stream.x.cols(), {}), {}};
    if (!buffer.empty())
        replay = make_batch(sample_batch(buffer, stream.size(), *ctx.sample_rng), stream.x.cols());

    const Batch joint = replay.empty() ? stream : concat_batches(stream, replay);
    ForwardTrace trace = forward_with_trace(tape, model, joint.x);
    Tensor ce = softmax_cross_entropy(tape, trace.logits(), joint.y);
    losses.ce_stream = ce.value();
    losses.stream_logits = detail::slice_rows(trace.logits(), 0, stream.size());

    Tensor reg = detail::apply_lider(tape, model, replay.x, stream.x, ctx, losses);
    Tensor loss = ctx.lider.enabled() ? add(tape, ce, reg) : ce;
    losses.total = loss.value();
    detail::optimize(tape, loss, model, ctx);
    return losses;
}

// Asymmetric cross-entropy: the stream term runs a softmax restricted to the
// current task's classes, the replay term over every class seen so far.
inline StepLosses er_ace_step(MlpBackbone& model, const Batch& stream, MemoryBuffer& buffer,
                              StepContext& ctx) {
    StepLosses losses;
    Tape tape;
    ForwardTrace trace = forward_with_trace(tape, model, stream.x);
    Tensor ce_stream = softmax_cross_entropy(tape, trace.logits(), stream.y, ctx.task_classes);
    losses.ce_stream = ce_stream.value();
    losses.stream_logits = detail::slice_rows(trace.logits(), 0, stream.size());

    Batch replay{Tensor::matrix(0, stream.x.cols(), {}), {}};
    Tensor loss = ce_stream;
    if (!buffer.empty()) {
        replay = make_batch(sample_batch(buffer, stream.size(), *ctx.sample_rng), stream.x.cols());
        ForwardTrace replay_trace = forward_with_trace(tape, model, replay.x);
        Tensor ce_buffer =
            softmax_cross_entropy(tape, replay_trace.logits(), replay.y, ctx.seen_classes);
        losses.ce_buffer = ce_buffer.value();
        loss = add(tape, loss, ce_buffer);
    }

    Tensor reg = detail::apply_lider(tape, model, replay.x, stream.x, ctx, losses);
    if (ctx.lider.enabled()) loss = add(tape, loss, reg);
    losses.total = loss.value();
    detail::optimize(tape, loss, model, ctx);
    return losses;
}

// Stream cross-entropy plus two independently sampled replay terms: an L2
// consistency term against the logits stored at insertion, and a plain
// cross-entropy term on a second batch.
inline StepLosses derpp_step(MlpBackbone& model, const Batch& stream, MemoryBuffer& buffer,
                             StepContext& ctx) {
    StepLosses losses;
    Tape tape;
    ForwardTrace trace = forward_with_trace(tape, model, stream.x);
    Tensor ce_stream = softmax_cross_entropy(tape, trace.logits(), stream.y);
    losses.ce_stream = ce_stream.value();
    losses.stream_logits = detail::slice_rows(trace.logits(), 0, stream.size());

    Batch logit_batch{Tensor::matrix(0, stream.x.cols(), {}), {}};
    Tensor loss = ce_stream;
    if (!buffer.empty()) {
        const std::vector<BufferEntry> first = sample_batch(buffer, stream.size(), *ctx.sample_rng);
        logit_batch = make_batch(first, stream.x.cols());
        const std::size_t classes = model.num_classes();
        std::vector<double> stored;
        stored.reserve(first.size() * classes);
        for (const BufferEntry& e : first) {
            if (!e.stored_logits || e.stored_logits->size() != classes)
                throw ConfigError("derpp_step: buffer entry without stored logits");
            stored.insert(stored.end(), e.stored_logits->begin(), e.stored_logits->end());
        }
        ForwardTrace t1 = forward_with_trace(tape, model, logit_batch.x);
        Tensor consistency = mse(tape, t1.logits(),
                                 Tensor::matrix(first.size(), classes, std::move(stored)));
        losses.mse_logits = consistency.value();
        loss = add(tape, loss, scale(tape, consistency, ctx.method.derpp_alpha));

        const Batch label_batch =
            make_batch(sample_batch(buffer, stream.size(), *ctx.sample_rng), stream.x.cols());
        ForwardTrace t2 = forward_with_trace(tape, model, label_batch.x);
        Tensor ce_buffer = softmax_cross_entropy(tape, t2.logits(), label_batch.y);
        losses.ce_buffer = ce_buffer.value();
        loss = add(tape, loss, scale(tape, ce_buffer, ctx.method.derpp_beta));
    }

    Tensor reg = detail::apply_lider(tape, model, logit_batch.x, stream.x, ctx, losses);
    if (ctx.lider.enabled()) loss = add(tape, loss, reg);
    losses.total = loss.value();
    detail::optimize(tape, loss, model, ctx);
    return losses;
}

// Retrains a fresh model from scratch on buffer contents only. Depends on
// nothing but the buffer and the given seeds, so two runs with identical
// buffers produce identical weights no matter what the stream did.
inline MlpBackbone gdumb_fit(const MemoryBuffer& buffer, const std::vector<std::size_t>& layer_dims,
                             std::uint64_t init_seed, int fit_epochs, std::size_t batch_size,
                             double lr, const LiderConfig& lider_cfg, Rng& fit_rng,
                             Rng& power_rng) {
    if (buffer.empty()) throw ConfigError("gdumb_fit: buffer is empty");
    MlpBackbone model = init_backbone(layer_dims, init_seed);
    LipschitzTargets targets;  // fresh targets: the model restarts from scratch
    const std::size_t dim = layer_dims.front();
    for (int epoch = 0; epoch < fit_epochs; ++epoch) {
        const std::vector<std::size_t> order = fit_rng.permutation(buffer.size());
        for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
            const std::size_t end = std::min(begin + batch_size, order.size());
            std::vector<BufferEntry> chunk;
            chunk.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) chunk.push_back(buffer.entry(order[i]));
            Batch batch = make_batch(chunk, dim);

            Tape tape;
            ForwardTrace trace = forward_with_trace(tape, model, batch.x);
            Tensor loss = softmax_cross_entropy(tape, trace.logits(), batch.y);
            if (lider_cfg.enabled()) {
                LiderLossResult res =
                    lider_loss(tape, model, batch.x, targets, lider_cfg, power_rng);
                loss = add(tape, loss, res.loss);
            }
            Gradients grads = tape.backward(loss);
            sgd_step(model.params(), grads, lr);
            if (lider_cfg.enabled()) {
                std::vector<Tensor*> tp = targets.params();
                if (!tp.empty()) sgd_step(tp, grads, lider_cfg.target_lr);
            }
        }
    }
    return model;
}

}  // namespace lider
