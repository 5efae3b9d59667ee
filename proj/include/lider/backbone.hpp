#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "lider/errors.hpp"
#include "lider/rng.hpp"
#include "lider/tensor.hpp"

namespace lider {

// Fully-connected ReLU network without biases. layer_dims = [d0 .. dK] where
// d0 is the input width and dK the total class count; weights[k] maps layer k
// to layer k+1 and has shape d_k x d_{k+1}. The last layer is linear
// (pre-softmax logits).
struct MlpBackbone {
    std::vector<std::size_t> layer_dims;
    std::vector<Tensor> weights;

    std::size_t num_layers() const { return weights.size(); }
    std::size_t input_dim() const { return layer_dims.front(); }
    std::size_t num_classes() const { return layer_dims.back(); }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> p;
        p.reserve(weights.size());
        for (Tensor& w : weights) p.push_back(&w);
        return p;
    }
};

// Per-layer post-activation feature maps for one batch. feature_maps[0] is
// the raw input, feature_maps[k] for k >= 1 the output of layer k (the last
// entry holds the logits).
struct ForwardTrace {
    std::vector<Tensor> feature_maps;

    const Tensor& logits() const { return feature_maps.back(); }
    std::size_t num_layers() const { return feature_maps.size() - 1; }
};

// He-style initialization: entries ~ N(0, 2 / fan_in), seeded.
inline MlpBackbone init_backbone(const std::vector<std::size_t>& layer_dims,
                                 std::uint64_t seed) {
    if (layer_dims.size() < 3)
        throw ConfigError("init_backbone: need at least one hidden layer (3+ dims)");
    for (std::size_t d : layer_dims)
        if (d < 1) throw ConfigError("init_backbone: zero-width layer");
    MlpBackbone model;
    model.layer_dims = layer_dims;
    Rng rng(seed);
    for (std::size_t k = 0; k + 1 < layer_dims.size(); ++k) {
        const std::size_t fan_in = layer_dims[k], fan_out = layer_dims[k + 1];
        const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
        std::vector<double> w(fan_in * fan_out);
        for (double& x : w) x = std_dev * rng.normal();
        model.weights.push_back(Tensor::matrix(fan_in, fan_out, std::move(w), true));
    }
    return model;
}

// Forward pass that keeps every intermediate feature map live on the tape, so
// losses over any map backpropagate into the weights.
inline ForwardTrace forward_with_trace(Tape& tape, const MlpBackbone& model, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != model.input_dim())
        throw ShapeError("forward_with_trace: input width does not match the model");
    ForwardTrace trace;
    trace.feature_maps.reserve(model.num_layers() + 1);
    trace.feature_maps.push_back(x);
    Tensor h = x;
    for (std::size_t k = 0; k < model.num_layers(); ++k) {
        Tensor pre = matmul(tape, h, model.weights[k]);
        h = (k + 1 < model.num_layers()) ? relu(tape, pre) : pre;
        trace.feature_maps.push_back(h);
    }
    return trace;
}

// Inference-only forward pass; identical arithmetic to forward_with_trace.
inline std::vector<double> forward_plain(const MlpBackbone& model,
                                         const std::vector<double>& x, std::size_t batch) {
    const std::size_t d0 = model.input_dim();
    if (x.size() != batch * d0) throw ShapeError("forward_plain: input size mismatch");
    std::vector<double> h = x;
    std::size_t width = d0;
    for (std::size_t k = 0; k < model.num_layers(); ++k) {
        const Tensor& w = model.weights[k];
        std::vector<double> next(batch * w.cols());
        matmul_kernel(h.data(), w.data().data(), next.data(), batch, width, w.cols());
        if (k + 1 < model.num_layers()) relu_kernel(next.data(), next.data(), next.size());
        h = std::move(next);
        width = w.cols();
    }
    return h;
}

inline std::vector<double> logits_for(const MlpBackbone& model, const std::vector<double>& x) {
    return forward_plain(model, x, 1);
}

}  // namespace lider
