#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pgsam/decoder.hpp"
#include "pgsam/encoder.hpp"
#include "pgsam/fusion.hpp"
#include "pgsam/text.hpp"

namespace pgsam::model {

struct ModelConfig {
    encoder::EncoderConfig encoder = encoder::EncoderConfig::tiny();
    int64_t sequences = 4;
    bool cam = true;
    bool tpm = true;
    int64_t text_dim = 256;
    int64_t adapter_bottleneck = 32;
    fusion::ValueMode value_mode = fusion::ValueMode::projected;
    int64_t decoder_depth = 2;
    int64_t decoder_heads = 2;
    int64_t decoder_mlp_dim = 128;
    double prompt_threshold = 0.5;

    void validate() const;
};

/// Everything a forward pass yields. Per-sequence tensors are flattened to [B*c, ...],
/// sample-major (index b*c + s).
struct ForwardOutput {
    decoder::SegmentationOutput seg;
    torch::Tensor coarse_logits;  // [B, 1, S, S]; undefined without the text pathway
    torch::Tensor constrained;    // coarse probabilities times the spatial prior
    std::vector<text::PromptSet> prompts;
};

struct TrainingInputs {
    torch::Tensor gt;  // [B, S, S] in {0,1}
    const decoder::VarianceTable* table = nullptr;
    std::optional<at::Generator> gen;
};

/// Encoder, optional cross-sequence fusion, optional text-prompt pathway, prompt encoder and
/// hierarchical decoder. The spatial prior is a buffer, not a parameter.
class PGSAMImpl : public torch::nn::Module {
public:
    explicit PGSAMImpl(ModelConfig cfg);

    /// images: [B, c, S, S]; text: [B, d_t] frozen embeddings (required iff the text pathway is on).
    ForwardOutput forward(const torch::Tensor& images, const torch::Tensor& text = {},
                          const TrainingInputs* training = nullptr);

    void set_prior(const text::SpatialPriorMask& prior);
    text::SpatialPriorMask prior_mask() const;

    /// Parameters that receive gradients, in registration order with stable names.
    std::vector<std::pair<std::string, torch::Tensor>> trainable_named() const;
    std::vector<torch::Tensor> trainable_parameters() const;
    /// Hash of the frozen backbone values; guards checkpoints against a different backbone.
    std::string frozen_fingerprint() const;

    const ModelConfig& config() const { return cfg_; }
    bool has_fusion() const { return !fusion.is_empty(); }
    bool has_text() const { return !adapter.is_empty(); }

    encoder::ViTLoRAEncoder encoder{nullptr};
    fusion::CrossSequenceFusion fusion{nullptr};
    text::TextAdapter adapter{nullptr};
    text::CoarseMaskDecoder coarse{nullptr};
    decoder::PromptEncoder prompt_encoder{nullptr};
    decoder::HierarchicalDecoder decoder{nullptr};
    torch::Tensor no_fused_embed;
    torch::Tensor prior;  // [S, S]

private:
    ModelConfig cfg_;
};
TORCH_MODULE(PGSAM);

struct LossParts {
    torch::Tensor total, dec1, dec2, prompt;
};

/// w·L_dec1 + (1−w)·L_dec2 + β·L_prompt. `available` [B, c] selects the sequences that contribute.
LossParts compute_loss(const ForwardOutput& out, const torch::Tensor& gt, const torch::Tensor& available,
                       double w, double beta, double smooth);

}  // namespace pgsam::model
