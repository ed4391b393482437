#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pgsam/data.hpp"
#include "pgsam/model.hpp"

namespace pgsam {

/// Flat run configuration. On disk it is a `key = value` file, one entry per line, `#` starts
/// a comment. Keys match the field names below.
struct RunConfig {
    // model
    int64_t patch_size = 16;
    int64_t embed_dim = 64;
    int64_t depth = 2;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
    int64_t image_size = 224;
    int64_t lora_rank = 5;
    int64_t decoder_depth = 2;
    int64_t decoder_heads = 2;
    int64_t text_dim = 256;
    int64_t adapter_bottleneck = 32;
    std::string fusion_value_mode = "projected";
    std::uint64_t backbone_seed = 0;
    // optimizer
    double lr = 1e-4;
    std::string lr_schedule = "cosine";  // cosine | constant
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.1;
    int64_t max_epochs = 30;
    int64_t batch_size = 8;
    int64_t patience = 10;
    // loss
    double loss_w = 0.5;
    double loss_beta = 0.5;
    double dice_smooth = 1e-5;
    // toggles
    std::string prompt_mode = "expert";
    bool cam = true;
    bool tpm = true;
    bool augment = false;
    double sample_fraction = 1.0;
    std::uint64_t seed = 0;
    std::string provider = "hash-bag";
    double prompt_threshold = 0.5;
    double kappa_max = 0.1;

    data::PromptMode mode() const { return data::parse_prompt_mode(prompt_mode); }
    /// The text pathway runs only when enabled and a prompt is selected.
    bool effective_tpm() const { return tpm && mode() != data::PromptMode::none; }

    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    static const std::vector<std::string>& keys();
    /// Ordered key -> value snapshot; round-trips through `set`.
    std::map<std::string, std::string> to_map() const;
    void validate() const;

    model::ModelConfig model_config() const;

    static RunConfig load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    /// "desk" (default values) or "full" (300 epochs).
    static RunConfig preset(const std::string& name);
};

/// Output root for relative output paths: $PGSAM_OUTPUT_ROOT, else the working directory.
std::filesystem::path output_root();

}  // namespace pgsam
