#pragma once

#include <torch/torch.h>

namespace pgsam::nn {

/// Row-stochastic attention map softmax(q k^T * scale) over the last axis.
/// q: [..., Nq, dk], k: [..., Nk, dk]. Non-finite logits raise NumericalError.
torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k, double scale);

/// Splits [B, N, h*dh] into [B, h, N, dh] and back.
torch::Tensor split_heads(const torch::Tensor& x, int64_t heads);
torch::Tensor merge_heads(const torch::Tensor& x);

/// Multi-head attention with an optional internal downsampling of the embedding dim.
class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t dim, int64_t heads, int64_t downsample = 1);
    torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

    int64_t internal_dim() const { return internal_dim_; }

    torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

private:
    int64_t heads_;
    int64_t internal_dim_;
};
TORCH_MODULE(Attention);

class MlpImpl : public torch::nn::Module {
public:
    MlpImpl(int64_t in, int64_t hidden, int64_t out, int64_t layers = 2);
    torch::Tensor forward(torch::Tensor x);

private:
    std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(Mlp);

/// Per-channel LayerNorm over [B, C, H, W].
torch::Tensor layer_norm_2d(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& bias);

}  // namespace pgsam::nn
