#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <torch/torch.h>

namespace pgsam::encoder {

struct LoRATargets {
    bool query = true;
    bool key = false;
    bool value = true;
    bool output = false;
    bool operator==(const LoRATargets&) const = default;
};

struct EncoderConfig {
    int64_t patch_size = 16;
    int64_t embed_dim = 64;
    int64_t depth = 2;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
    int64_t image_size = 224;
    int64_t lora_rank = 5;
    LoRATargets lora_targets{};
    double lora_init_std = 0.01;
    std::uint64_t init_seed = 0;
    std::optional<std::filesystem::path> pretrained_source;

    int64_t grid() const { return image_size / patch_size; }
    void validate() const;

    /// patch 16, dim 64, depth 2, rank 5.
    static EncoderConfig tiny();
    /// ViT-L geometry (patch 16, dim 1024, depth 24, 16 heads).
    static EncoderConfig vit_l();
};

/// z = W0 x + B (A x) (+ bias), applied over the last axis of `x`.
/// W0: [d_out, d_in], A: [r, d_in], B: [d_out, r]. `scale` multiplies the low-rank path.
torch::Tensor lora_linear(const torch::Tensor& x, const torch::Tensor& w0, const torch::Tensor& a,
                          const torch::Tensor& b, const torch::Tensor& bias = {}, double scale = 1.0);

/// Linear layer with a frozen base weight and an optional trainable low-rank update.
class LoRALinearImpl : public torch::nn::Module {
public:
    LoRALinearImpl(int64_t d_in, int64_t d_out, int64_t rank, double init_std, at::Generator& gen);
    torch::Tensor forward(const torch::Tensor& x);

    int64_t rank() const { return rank_; }
    void set_scale(double s) { scale_ = s; }

    torch::Tensor weight;  // W0, frozen
    torch::Tensor bias;    // frozen
    torch::Tensor lora_a;  // [r, d_in], trainable when r > 0
    torch::Tensor lora_b;  // [d_out, r], zero at init

private:
    int64_t rank_;
    double scale_ = 1.0;
};
TORCH_MODULE(LoRALinear);

class ViTBlockImpl : public torch::nn::Module {
public:
    ViTBlockImpl(const EncoderConfig& cfg, at::Generator& gen);
    torch::Tensor forward(const torch::Tensor& x);
    void set_lora_scale(double s);

    LoRALinear q{nullptr}, k{nullptr}, v{nullptr}, proj{nullptr};
    torch::Tensor ln1_w, ln1_b, ln2_w, ln2_b;
    torch::Tensor fc1_w, fc1_b, fc2_w, fc2_b;

private:
    int64_t heads_;
};
TORCH_MODULE(ViTBlock);

/// One embedding grid per MRI sequence.
struct SequenceEmbedding {
    torch::Tensor grid;  // [d, g, g]
    int64_t sequence_index = 0;
};

/// ViT image encoder: frozen backbone, trainable LoRA pairs on the configured projections.
class ViTLoRAEncoderImpl : public torch::nn::Module {
public:
    explicit ViTLoRAEncoderImpl(EncoderConfig cfg);

    /// images: [N, H, W] or [N, 1, H, W] in [0,1] -> [N, d, g, g].
    torch::Tensor forward(torch::Tensor images);
    SequenceEmbedding encode_sequence(const torch::Tensor& channel, int64_t sequence_index = 0);

    std::vector<torch::Tensor> trainable_parameters() const;
    std::vector<torch::Tensor> frozen_parameters() const;
    /// Named LoRA matrices in a stable order.
    std::vector<std::pair<std::string, torch::Tensor>> lora_parameters() const;
    void set_lora_scale(double s);

    const EncoderConfig& config() const { return cfg_; }

    /// Backbone import/export through a tensor bundle (see weights.hpp). Keys follow
    /// `named_parameters()` minus LoRA entries; a differing positional grid is bilinearly resampled.
    void load_backbone(const std::filesystem::path& stem);
    void save_backbone(const std::filesystem::path& stem) const;
    void save_lora(const std::filesystem::path& stem) const;
    void load_lora(const std::filesystem::path& stem);

    torch::Tensor patch_w, patch_b, pos_embed, neck_w, neck_b;
    std::vector<ViTBlock> blocks;

private:
    EncoderConfig cfg_;
};
TORCH_MODULE(ViTLoRAEncoder);

bool is_lora_key(const std::string& name);

}  // namespace pgsam::encoder
