#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pgsam/data.hpp"
#include "pgsam/grid.hpp"

namespace pgsam::text {

struct TextEmbedding {
    torch::Tensor vector;  // [d_t], float32
    std::string provider_id;
};

/// Frozen text encoder. Implementations hold no trainable state.
class TextProvider {
public:
    virtual ~TextProvider() = default;
    virtual std::string id() const = 0;
    virtual int64_t dim() const = 0;
    /// Throws ValidationError on empty text and ProviderError when the text cannot be encoded.
    virtual TextEmbedding embed(const std::string& text) const = 0;
};

/// Deterministic bag of hashed unigrams and bigrams. Each token seeds a fixed Gaussian
/// direction; the sum is L2-normalized.
class HashBagProvider final : public TextProvider {
public:
    explicit HashBagProvider(int64_t dim = 256, std::uint64_t seed = 0x5eed);
    std::string id() const override;
    int64_t dim() const override { return dim_; }
    TextEmbedding embed(const std::string& text) const override;

    static std::vector<std::string> tokenize(const std::string& text);
    static std::uint64_t fnv1a(const std::string& s);

private:
    int64_t dim_;
    std::uint64_t seed_;
};

/// Embeddings computed offline by an external encoder (e.g. a medical CLIP model) and stored as
/// JSON: {"provider_id": str, "dim": int, "embeddings": {text: [floats]}}.
class PrecomputedProvider final : public TextProvider {
public:
    explicit PrecomputedProvider(const std::filesystem::path& path);
    std::string id() const override { return id_; }
    int64_t dim() const override { return dim_; }
    TextEmbedding embed(const std::string& text) const override;

private:
    std::string id_;
    int64_t dim_ = 0;
    std::map<std::string, std::vector<float>> table_;
};

/// "hash-bag", "hash-bag:<dim>", or "precomputed:<path>".
std::unique_ptr<TextProvider> make_provider(const std::string& spec);

/// Residual bottleneck adapter: x + up(gelu(down(x))). `up` starts at zero.
class TextAdapterImpl : public torch::nn::Module {
public:
    TextAdapterImpl(int64_t text_dim, int64_t bottleneck);
    torch::Tensor forward(const torch::Tensor& x);
    torch::Tensor bottleneck_activation(const torch::Tensor& x);

    torch::nn::Linear down{nullptr}, up{nullptr};
};
TORCH_MODULE(TextAdapter);

/// Per-stage (kernel = stride) factors taking a g-grid to `target` pixels.
std::vector<int64_t> upsample_plan(int64_t grid, int64_t target);

struct CoarseDecoderConfig {
    int64_t dim = 64;
    int64_t text_dim = 256;
    int64_t grid = 14;
    int64_t image_size = 224;
    bool use_text = true;
};

/// Text-guided coarse decoder: channelwise scale-and-shift of x_f from the text vector, then
/// transposed-convolution upsampling to full resolution. Returns logits [B, 1, S, S].
class CoarseMaskDecoderImpl : public torch::nn::Module {
public:
    explicit CoarseMaskDecoderImpl(CoarseDecoderConfig cfg);
    torch::Tensor forward(const torch::Tensor& fused, const torch::Tensor& text = {});
    torch::Tensor modulate(const torch::Tensor& fused, const torch::Tensor& text);

    torch::nn::Linear film{nullptr};
    std::vector<torch::nn::ConvTranspose2d> ups;
    torch::nn::Conv2d head{nullptr};

private:
    CoarseDecoderConfig cfg_;
};
TORCH_MODULE(CoarseMaskDecoder);

struct SpatialPriorMask {
    Image weights;  // [0,1]
    std::size_t support_count = 0;
    bool fallback = false;
};

SpatialPriorMask build_spatial_prior(const std::vector<data::LesionMask>& train_masks,
                                     std::size_t image_size = data::kImageSize);
/// coarse ⊙ M
Image apply_prior(const Image& coarse, const SpatialPriorMask& prior);

/// Prompt geometry. `x` indexes rows (first image axis) and `y` indexes columns.
struct PromptSet {
    std::array<double, 2> point{0, 0};       // [x_mean, y_mean]
    std::array<double, 4> bbox{0, 0, 0, 0};  // [x_min, y_min, x_max, y_max]
    bool fallback_used = false;
};

/// Mean coordinate and bounds of pixels >= threshold; an empty support falls back to the
/// region where the prior attains its maximum.
PromptSet extract_prompts(const Image& constrained, const SpatialPriorMask& prior, double threshold = 0.5);

void save_prior(const std::filesystem::path& path, const SpatialPriorMask& prior);
SpatialPriorMask load_prior(const std::filesystem::path& path);

}  // namespace pgsam::text
