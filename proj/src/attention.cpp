#include "pgsam/attention.hpp"

#include <cmath>

#include "pgsam/grid.hpp"
#include "pgsam/tensor_util.hpp"

namespace pgsam::nn {

torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k, double scale) {
    if (q.size(-1) != k.size(-1)) throw ContractViolation("attention: query/key dims differ");
    auto logits = torch::matmul(q, k.transpose(-2, -1)) * scale;
    check_finite(logits, "attention logits");
    return torch::softmax(logits, -1);
}

torch::Tensor split_heads(const torch::Tensor& x, int64_t heads) {
    const auto b = x.size(0), n = x.size(1), c = x.size(2);
    return x.reshape({b, n, heads, c / heads}).transpose(1, 2);
}

torch::Tensor merge_heads(const torch::Tensor& x) {
    const auto b = x.size(0), h = x.size(1), n = x.size(2), dh = x.size(3);
    return x.transpose(1, 2).reshape({b, n, h * dh});
}

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads, int64_t downsample)
    : heads_(heads), internal_dim_(dim / downsample) {
    if (internal_dim_ % heads != 0) throw ContractViolation("attention: heads must divide internal dim");
    q_proj = register_module("q_proj", torch::nn::Linear(dim, internal_dim_));
    k_proj = register_module("k_proj", torch::nn::Linear(dim, internal_dim_));
    v_proj = register_module("v_proj", torch::nn::Linear(dim, internal_dim_));
    out_proj = register_module("out_proj", torch::nn::Linear(internal_dim_, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
    auto qh = split_heads(q_proj(q), heads_);
    auto kh = split_heads(k_proj(k), heads_);
    auto vh = split_heads(v_proj(v), heads_);
    const double scale = 1.0 / std::sqrt(static_cast<double>(qh.size(-1)));
    auto out = torch::matmul(attention_weights(qh, kh, scale), vh);
    return out_proj(merge_heads(out));
}

MlpImpl::MlpImpl(int64_t in, int64_t hidden, int64_t out, int64_t layers) {
    for (int64_t i = 0; i < layers; ++i) {
        const int64_t a = i == 0 ? in : hidden;
        const int64_t b = i + 1 == layers ? out : hidden;
        layers_.push_back(register_module("layer" + std::to_string(i), torch::nn::Linear(a, b)));
    }
}

torch::Tensor MlpImpl::forward(torch::Tensor x) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i](x);
        if (i + 1 < layers_.size()) x = torch::relu(x);
    }
    return x;
}

torch::Tensor layer_norm_2d(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& bias) {
    auto u = x.mean(1, true);
    auto s = (x - u).pow(2).mean(1, true);
    auto y = (x - u) / torch::sqrt(s + 1e-6);
    return weight.view({1, -1, 1, 1}) * y + bias.view({1, -1, 1, 1});
}

}  // namespace pgsam::nn
