#include "pgsam/encoder.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <map>

#include "pgsam/attention.hpp"
#include "pgsam/grid.hpp"
#include "pgsam/weights.hpp"

namespace pgsam::encoder {

void EncoderConfig::validate() const {
    if (patch_size <= 0 || image_size % patch_size != 0)
        throw ContractViolation("encoder: image_size must be divisible by patch_size");
    if (embed_dim <= 0 || depth < 0 || heads <= 0 || embed_dim % heads != 0)
        throw ContractViolation("encoder: heads must divide embed_dim");
    if (lora_rank < 0 || lora_rank > embed_dim) throw ContractViolation("encoder: invalid LoRA rank");
}

EncoderConfig EncoderConfig::tiny() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::vit_l() {
    EncoderConfig c;
    c.embed_dim = 1024;
    c.depth = 24;
    c.heads = 16;
    return c;
}

torch::Tensor lora_linear(const torch::Tensor& x, const torch::Tensor& w0, const torch::Tensor& a,
                          const torch::Tensor& b, const torch::Tensor& bias, double scale) {
    if (w0.dim() != 2 || x.size(-1) != w0.size(1))
        throw ContractViolation("lora_linear: input width does not match W0");
    auto z = torch::matmul(x, w0.t());
    if (a.defined() && a.numel() > 0) {
        if (a.dim() != 2 || b.dim() != 2 || a.size(1) != w0.size(1) || b.size(0) != w0.size(0) ||
            a.size(0) != b.size(1))
            throw ContractViolation("lora_linear: LoRA pair shapes do not match W0");
        z = z + scale * torch::matmul(torch::matmul(x, a.t()), b.t());
    }
    if (bias.defined()) z = z + bias;
    return z;
}

namespace {

torch::Tensor gaussian(at::IntArrayRef shape, double std, at::Generator& gen) {
    return torch::randn(shape, gen, torch::kFloat32) * std;
}

}  // namespace

LoRALinearImpl::LoRALinearImpl(int64_t d_in, int64_t d_out, int64_t rank, double init_std, at::Generator& gen)
    : rank_(rank) {
    weight = register_parameter("weight", gaussian({d_out, d_in}, 1.0 / std::sqrt(double(d_in)), gen), false);
    bias = register_parameter("bias", torch::zeros({d_out}), false);
    if (rank_ > 0) {
        lora_a = register_parameter("lora_a", gaussian({rank_, d_in}, init_std, gen));
        lora_b = register_parameter("lora_b", torch::zeros({d_out, rank_}));
    }
}

torch::Tensor LoRALinearImpl::forward(const torch::Tensor& x) {
    return lora_linear(x, weight, lora_a, lora_b, bias, scale_);
}

ViTBlockImpl::ViTBlockImpl(const EncoderConfig& cfg, at::Generator& gen) : heads_(cfg.heads) {
    const auto d = cfg.embed_dim;
    const auto& t = cfg.lora_targets;
    const auto r = cfg.lora_rank;
    q = register_module("q", LoRALinear(d, d, t.query ? r : 0, cfg.lora_init_std, gen));
    k = register_module("k", LoRALinear(d, d, t.key ? r : 0, cfg.lora_init_std, gen));
    v = register_module("v", LoRALinear(d, d, t.value ? r : 0, cfg.lora_init_std, gen));
    proj = register_module("proj", LoRALinear(d, d, t.output ? r : 0, cfg.lora_init_std, gen));
    ln1_w = register_parameter("ln1_w", torch::ones({d}), false);
    ln1_b = register_parameter("ln1_b", torch::zeros({d}), false);
    ln2_w = register_parameter("ln2_w", torch::ones({d}), false);
    ln2_b = register_parameter("ln2_b", torch::zeros({d}), false);
    const auto hidden = d * cfg.mlp_ratio;
    fc1_w = register_parameter("fc1_w", gaussian({hidden, d}, 1.0 / std::sqrt(double(d)), gen), false);
    fc1_b = register_parameter("fc1_b", torch::zeros({hidden}), false);
    fc2_w = register_parameter("fc2_w", gaussian({d, hidden}, 1.0 / std::sqrt(double(hidden)), gen), false);
    fc2_b = register_parameter("fc2_b", torch::zeros({d}), false);
}

torch::Tensor ViTBlockImpl::forward(const torch::Tensor& x) {
    const auto d = x.size(-1);
    auto h = torch::layer_norm(x, {d}, ln1_w, ln1_b);
    auto qh = nn::split_heads(q(h), heads_);
    auto kh = nn::split_heads(k(h), heads_);
    auto vh = nn::split_heads(v(h), heads_);
    const double scale = 1.0 / std::sqrt(static_cast<double>(qh.size(-1)));
    auto attn = nn::merge_heads(torch::matmul(nn::attention_weights(qh, kh, scale), vh));
    auto y = x + proj(attn);
    auto m = torch::layer_norm(y, {d}, ln2_w, ln2_b);
    m = torch::linear(torch::gelu(torch::linear(m, fc1_w, fc1_b)), fc2_w, fc2_b);
    return y + m;
}

void ViTBlockImpl::set_lora_scale(double s) {
    for (auto* l : {&q, &k, &v, &proj}) (*l)->set_scale(s);
}

ViTLoRAEncoderImpl::ViTLoRAEncoderImpl(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg_.init_seed);
    const auto d = cfg_.embed_dim, p = cfg_.patch_size, g = cfg_.grid();
    patch_w = register_parameter("patch_w", gaussian({d, 1, p, p}, 1.0 / double(p), gen), false);
    patch_b = register_parameter("patch_b", torch::zeros({d}), false);
    pos_embed = register_parameter("pos_embed", gaussian({g * g, d}, 0.02, gen), false);
    for (int64_t i = 0; i < cfg_.depth; ++i)
        blocks.push_back(register_module("block" + std::to_string(i), ViTBlock(cfg_, gen)));
    neck_w = register_parameter("neck_w", torch::ones({d}), false);
    neck_b = register_parameter("neck_b", torch::zeros({d}), false);
    if (cfg_.pretrained_source) load_backbone(*cfg_.pretrained_source);
}

torch::Tensor ViTLoRAEncoderImpl::forward(torch::Tensor images) {
    if (images.dim() == 3) images = images.unsqueeze(1);
    if (images.dim() != 4 || images.size(1) != 1 || images.size(2) != cfg_.image_size ||
        images.size(3) != cfg_.image_size)
        throw ContractViolation("encoder: expected preprocessed " + std::to_string(cfg_.image_size) + "x" +
                                std::to_string(cfg_.image_size) + " single-channel input");
    const auto n = images.size(0), d = cfg_.embed_dim, g = cfg_.grid();
    // [0,1] intensities are centred to [-1,1] before patch projection.
    auto x = torch::conv2d(images * 2.0 - 1.0, patch_w, patch_b, {cfg_.patch_size, cfg_.patch_size});
    x = x.flatten(2).transpose(1, 2) + pos_embed.unsqueeze(0);  // [N, g*g, d]
    for (auto& b : blocks) x = b(x);
    x = torch::layer_norm(x, {d}, neck_w, neck_b);
    return x.transpose(1, 2).reshape({n, d, g, g});
}

SequenceEmbedding ViTLoRAEncoderImpl::encode_sequence(const torch::Tensor& channel, int64_t sequence_index) {
    if (channel.dim() != 2) throw ContractViolation("encode_sequence: expected a single 2D channel");
    return {forward(channel.unsqueeze(0)).squeeze(0), sequence_index};
}

std::vector<torch::Tensor> ViTLoRAEncoderImpl::trainable_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& p : parameters())
        if (p.requires_grad()) out.push_back(p);
    return out;
}

std::vector<torch::Tensor> ViTLoRAEncoderImpl::frozen_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& p : parameters())
        if (!p.requires_grad()) out.push_back(p);
    return out;
}

bool is_lora_key(const std::string& name) {
    return name.find("lora_a") != std::string::npos || name.find("lora_b") != std::string::npos;
}

std::vector<std::pair<std::string, torch::Tensor>> ViTLoRAEncoderImpl::lora_parameters() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& item : named_parameters())
        if (is_lora_key(item.key())) out.emplace_back(item.key(), item.value());
    return out;
}

void ViTLoRAEncoderImpl::set_lora_scale(double s) {
    for (auto& b : blocks) b->set_lora_scale(s);
}

void ViTLoRAEncoderImpl::save_backbone(const std::filesystem::path& stem) const {
    weights::NamedTensors out;
    for (const auto& item : named_parameters())
        if (!is_lora_key(item.key())) out.emplace_back(item.key(), item.value());
    weights::write_bundle(stem, out);
}

void ViTLoRAEncoderImpl::load_backbone(const std::filesystem::path& stem) {
    auto loaded = weights::read_bundle(stem);
    std::map<std::string, torch::Tensor> by_key(loaded.begin(), loaded.end());
    torch::NoGradGuard ng;
    for (auto& item : named_parameters()) {
        if (is_lora_key(item.key())) continue;
        auto it = by_key.find(item.key());
        if (it == by_key.end()) throw ValidationError("backbone manifest lacks key " + item.key());
        auto src = it->second;
        auto& dst = item.value();
        if (item.key() == "pos_embed" && src.sizes() != dst.sizes()) {
            const auto old_g = static_cast<int64_t>(std::llround(std::sqrt(double(src.size(0)))));
            if (old_g * old_g != src.size(0) || src.size(1) != dst.size(1))
                throw ValidationError("pos_embed in manifest is not a square grid of the right width");
            const auto g = cfg_.grid();
            auto grid = src.t().reshape({1, src.size(1), old_g, old_g});
            grid = torch::nn::functional::interpolate(
                grid, torch::nn::functional::InterpolateFuncOptions()
                          .size(std::vector<int64_t>{g, g})
                          .mode(torch::kBilinear)
                          .align_corners(false));
            src = grid.reshape({src.size(1), g * g}).t();
        }
        if (src.sizes() != dst.sizes())
            throw ValidationError("backbone key " + item.key() + " has mismatched shape");
        dst.copy_(src);
    }
}

void ViTLoRAEncoderImpl::save_lora(const std::filesystem::path& stem) const {
    weights::write_bundle(stem, lora_parameters());
}

void ViTLoRAEncoderImpl::load_lora(const std::filesystem::path& stem) {
    auto loaded = weights::read_bundle(stem);
    std::map<std::string, torch::Tensor> by_key(loaded.begin(), loaded.end());
    torch::NoGradGuard ng;
    for (auto& [key, t] : lora_parameters()) {
        auto it = by_key.find(key);
        if (it == by_key.end() || it->second.sizes() != t.sizes())
            throw ValidationError("LoRA checkpoint lacks a matching entry for " + key);
        t.copy_(it->second);
    }
}

}  // namespace pgsam::encoder
