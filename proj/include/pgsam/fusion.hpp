#pragma once

#include <vector>

#include <torch/torch.h>

namespace pgsam::fusion {

/// How the value path of the cross-sequence attention is formed.
enum class ValueMode {
    /// Values are x_i tokens projected by Wv (queries from x_f, keys/values from x_i).
    projected,
    /// Wv is a free learned [tokens, d] matrix multiplied directly by the attention map.
    literal,
};

struct FusionConfig {
    int64_t dim = 64;
    int64_t sequences = 4;
    int64_t key_dim = 64;
    int64_t heads = 1;
    int64_t tokens = 196;  // only used by ValueMode::literal
    ValueMode value_mode = ValueMode::projected;
    /// Initialize the fusion conv as a per-channel mean over sequences.
    bool average_init = true;
};

struct AttentionResult {
    torch::Tensor correction;  // A_i: [B, N, d]
    torch::Tensor weights;     // [B, heads, N, N], rows sum to 1
};

/// A_i = softmax((x_f Wq)(x_i Wk)^T / sqrt(d_k)) V.
/// x_f, x_i: [B, N, d] tokens. wq, wk: [d_k, d]. wv: [d, d] (projected) or [N, d] (literal).
AttentionResult cross_sequence_attention(const torch::Tensor& x_f, const torch::Tensor& x_i,
                                         const torch::Tensor& wq, const torch::Tensor& wk,
                                         const torch::Tensor& wv, ValueMode mode, int64_t heads = 1);

/// x_i + A_i.
torch::Tensor refine_sequence(const torch::Tensor& x_i, const torch::Tensor& a_i);

/// [B, d, g, g] <-> [B, g*g, d]
torch::Tensor to_tokens(const torch::Tensor& grid);
torch::Tensor to_grid(const torch::Tensor& tokens, int64_t g);

struct FusionOutput {
    torch::Tensor fused;                   // x_f: [B, d, g, g]
    std::vector<torch::Tensor> refined;    // per sequence [B, d, g, g]
    std::vector<torch::Tensor> attention;  // per sequence attention maps
};

class CrossSequenceFusionImpl : public torch::nn::Module {
public:
    explicit CrossSequenceFusionImpl(FusionConfig cfg);

    /// Concat over sequences then 1x1 convolution back to d channels.
    torch::Tensor fuse_sequences(const std::vector<torch::Tensor>& embeddings);
    AttentionResult attend(const torch::Tensor& fused, const torch::Tensor& x_i);
    FusionOutput forward(const std::vector<torch::Tensor>& embeddings);

    const FusionConfig& config() const { return cfg_; }

    torch::nn::Conv2d fuse{nullptr};
    torch::Tensor wq, wk, wv;

private:
    FusionConfig cfg_;
};
TORCH_MODULE(CrossSequenceFusion);

}  // namespace pgsam::fusion
