#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pgsam/attention.hpp"
#include "pgsam/data.hpp"
#include "pgsam/text.hpp"

namespace pgsam::decoder {

/// Sinusoidal encoding of normalized coordinates in [0,1]^2 -> [n, dim]. dim must be a multiple of 4.
torch::Tensor sinusoidal_encoding(const torch::Tensor& coords, int64_t dim);

/// Point and box prompts -> tokens [3, d]: point, top-left corner, bottom-right corner.
class PromptEncoderImpl : public torch::nn::Module {
public:
    PromptEncoderImpl(int64_t dim, int64_t image_size);

    torch::Tensor encode(const text::PromptSet& prompts);
    /// [B, 3, d] for a batch of prompt sets.
    torch::Tensor encode_batch(const std::vector<text::PromptSet>& prompts);
    /// Positional encoding of grid-cell centres: [d, g, g].
    torch::Tensor dense_pe(int64_t grid) const;

    torch::Tensor point_embed, corner_tl_embed, corner_br_embed;

private:
    int64_t dim_;
    int64_t image_size_;
};
TORCH_MODULE(PromptEncoder);

/// Per-class noise variances, inversely proportional to class pixel counts.
struct VarianceTable {
    std::vector<double> var;
    std::vector<int64_t> class_counts;
    double kappa_max = 0.1;
    std::vector<std::string> warnings;

    std::size_t classes() const { return var.size(); }
    void save_json(const std::filesystem::path& path) const;
    static VarianceTable load_json(const std::filesystem::path& path);
    bool operator==(const VarianceTable& o) const { return var == o.var && class_counts == o.class_counts; }
};

inline constexpr double kDefaultKappaMax = 0.1;

/// var(i) = kappa * total / count(i), with kappa chosen so that max var = kappa_max.
/// Binary task: class 0 background, class 1 lesion.
VarianceTable build_variance_table(const std::vector<data::LesionMask>& train_masks,
                                   double kappa_max = kDefaultKappaMax);

/// X(GT = i) += N(0, var(i)) in training; identity otherwise.
/// x: [B, N, d], labels: [B, N] integer class ids.
torch::Tensor cmattn_perturb(const torch::Tensor& x, const torch::Tensor& labels, const VarianceTable& table,
                             bool training, std::optional<at::Generator> gen = std::nullopt);

/// X + M ⊙ softmax(K Q^T) V.
/// x: [B, N, d], m: [B, N] in [0,1], k: [B, N, dk], q: [B, T, dk], v: [B, T, d].
torch::Tensor lmca(const torch::Tensor& x, const torch::Tensor& m, const torch::Tensor& k, const torch::Tensor& q,
                   const torch::Tensor& v);

/// Prompt tokens <-> image tokens block (self-attention, two cross-attentions, MLP).
class TwoWayBlockImpl : public torch::nn::Module {
public:
    TwoWayBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim);
    std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor queries, torch::Tensor keys,
                                                    const torch::Tensor& query_pe, const torch::Tensor& key_pe);

    nn::Attention self_attn{nullptr}, token_to_image{nullptr}, image_to_token{nullptr};
    nn::Mlp mlp{nullptr};
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr}, norm4{nullptr};
};
TORCH_MODULE(TwoWayBlock);

struct DecoderConfig {
    int64_t dim = 64;
    int64_t grid = 14;
    int64_t image_size = 224;
    int64_t depth = 2;  // two-way blocks per stage
    int64_t heads = 2;
    int64_t mlp_dim = 128;
};

struct SegmentationOutput {
    torch::Tensor prior_logits, refined_logits;       // [B, 1, S, S]
    torch::Tensor prior_mask, refined_mask, final_mask;  // probabilities
};

/// Stage-2 inputs that only exist during training.
struct TrainingContext {
    torch::Tensor labels;  // [B, g*g] class ids at token resolution
    const VarianceTable* table = nullptr;
    std::optional<at::Generator> gen;
};

/// Two-stage mask decoder: a SAM-style decoder emits the prior mask; a refinement stage applies
/// class-balanced perturbation (training only) and mask-gated cross-attention to emit the refined mask.
class HierarchicalDecoderImpl : public torch::nn::Module {
public:
    explicit HierarchicalDecoderImpl(DecoderConfig cfg);

    /// src, dense: [B, d, g, g]; prompt_tokens: [B, T, d] (T may be 0); pe: [d, g, g].
    SegmentationOutput forward(const torch::Tensor& src, const torch::Tensor& dense,
                               const torch::Tensor& prompt_tokens, const torch::Tensor& pe,
                               const TrainingContext* training = nullptr);

    const DecoderConfig& config() const { return cfg_; }

    torch::Tensor mask_token;
    std::vector<TwoWayBlock> stage1, stage2;
    nn::Attention final_attn1{nullptr}, final_attn2{nullptr}, cm_self_attn{nullptr};
    torch::nn::LayerNorm final_norm1{nullptr}, final_norm2{nullptr}, cm_norm{nullptr}, cm_out_norm{nullptr},
        lmca_norm{nullptr};
    torch::nn::Linear lmca_k{nullptr}, lmca_q{nullptr}, lmca_v{nullptr};
    torch::nn::ConvTranspose2d up1a{nullptr}, up1b{nullptr}, up2a{nullptr}, up2b{nullptr};
    torch::Tensor up1_ln_w, up1_ln_b, up2_ln_w, up2_ln_b;
    nn::Mlp hyper1{nullptr}, hyper2{nullptr};

private:
    torch::Tensor run_two_way(std::vector<TwoWayBlock>& blocks, nn::Attention& final_attn,
                              torch::nn::LayerNorm& final_norm, torch::Tensor& tokens, torch::Tensor keys,
                              const torch::Tensor& token_pe, const torch::Tensor& key_pe);
    torch::Tensor mask_logits(const torch::Tensor& keys, const torch::Tensor& token, bool stage2);

    DecoderConfig cfg_;
};
TORCH_MODULE(HierarchicalDecoder);

/// Class labels on the token grid: a cell is lesion when at least half of its pixels are.
torch::Tensor labels_at_grid(const torch::Tensor& gt, int64_t grid);

}  // namespace pgsam::decoder
