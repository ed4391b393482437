#include "pgsam/decoder.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "pgsam/fusion.hpp"
#include "pgsam/grid.hpp"

namespace F = torch::nn::functional;

namespace pgsam::decoder {

torch::Tensor sinusoidal_encoding(const torch::Tensor& coords, int64_t dim) {
    if (dim % 4 != 0) throw ContractViolation("sinusoidal_encoding: dim must be a multiple of 4");
    const int64_t m = dim / 4;
    // Frequencies pi * 64^(k/(m-1)), k = 0..m-1.
    auto k = torch::arange(m, torch::kFloat32);
    auto freq = std::numbers::pi * torch::pow(64.0, m > 1 ? k / static_cast<double>(m - 1) : k);
    auto u = coords.select(-1, 0).unsqueeze(-1) * freq;
    auto v = coords.select(-1, 1).unsqueeze(-1) * freq;
    return torch::cat({torch::sin(u), torch::cos(u), torch::sin(v), torch::cos(v)}, -1);
}

PromptEncoderImpl::PromptEncoderImpl(int64_t dim, int64_t image_size) : dim_(dim), image_size_(image_size) {
    point_embed = register_parameter("point_embed", torch::randn({dim}));
    corner_tl_embed = register_parameter("corner_tl_embed", torch::randn({dim}));
    corner_br_embed = register_parameter("corner_br_embed", torch::randn({dim}));
}

torch::Tensor PromptEncoderImpl::encode(const text::PromptSet& p) {
    const double hi = static_cast<double>(image_size_ - 1);
    const std::array<double, 6> xs = {p.point[0], p.point[1], p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3]};
    for (double v : xs)
        if (!(v >= 0.0 && v <= hi)) throw ValidationError("prompt coordinate outside image bounds");
    const double s = static_cast<double>(image_size_);
    auto coords = torch::tensor({(p.point[0] + 0.5) / s, (p.point[1] + 0.5) / s, (p.bbox[0] + 0.5) / s,
                                 (p.bbox[1] + 0.5) / s, (p.bbox[2] + 0.5) / s, (p.bbox[3] + 0.5) / s},
                                torch::kFloat32)
                      .reshape({3, 2});
    auto pe = sinusoidal_encoding(coords, dim_);
    auto types = torch::stack({point_embed, corner_tl_embed, corner_br_embed});
    return pe + types;
}

torch::Tensor PromptEncoderImpl::encode_batch(const std::vector<text::PromptSet>& prompts) {
    std::vector<torch::Tensor> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) out.push_back(encode(p));
    return torch::stack(out);
}

torch::Tensor PromptEncoderImpl::dense_pe(int64_t grid) const {
    auto centres = (torch::arange(grid, torch::kFloat32) + 0.5) / static_cast<double>(grid);
    auto rows = centres.view({grid, 1}).expand({grid, grid});
    auto cols = centres.view({1, grid}).expand({grid, grid});
    auto coords = torch::stack({rows, cols}, -1).reshape({grid * grid, 2});
    return sinusoidal_encoding(coords, dim_).t().reshape({dim_, grid, grid});
}

VarianceTable build_variance_table(const std::vector<data::LesionMask>& train_masks, double kappa_max) {
    if (train_masks.empty()) throw ValidationError("variance table needs at least one training mask");
    VarianceTable t;
    t.kappa_max = kappa_max;
    t.class_counts.assign(2, 0);
    for (const auto& m : train_masks) {
        const auto lesion = static_cast<int64_t>(m.lesion_pixel_count());
        t.class_counts[1] += lesion;
        t.class_counts[0] += static_cast<int64_t>(m.pixels.size()) - lesion;
    }
    int64_t min_count = 0;
    for (auto c : t.class_counts)
        if (c > 0 && (min_count == 0 || c < min_count)) min_count = c;
    t.var.resize(t.class_counts.size());
    for (std::size_t i = 0; i < t.var.size(); ++i) {
        if (t.class_counts[i] == 0) {
            t.var[i] = kappa_max;
            t.warnings.push_back("class " + std::to_string(i) + " has no training pixels; using kappa_max");
        } else {
            // kappa * total / count normalized by its maximum, which is attained at min_count.
            t.var[i] = kappa_max * static_cast<double>(min_count) / static_cast<double>(t.class_counts[i]);
        }
    }
    return t;
}

void VarianceTable::save_json(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["kappa_max"] = kappa_max;
    j["classes"] = nlohmann::json::array();
    for (std::size_t i = 0; i < var.size(); ++i)
        j["classes"].push_back({{"id", i}, {"count", class_counts[i]}, {"var", var[i]}});
    j["warnings"] = warnings;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

VarianceTable VarianceTable::load_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open variance table " + path.string());
    auto j = nlohmann::json::parse(is);
    VarianceTable t;
    t.kappa_max = j.at("kappa_max").get<double>();
    for (const auto& c : j.at("classes")) {
        t.class_counts.push_back(c.at("count").get<int64_t>());
        t.var.push_back(c.at("var").get<double>());
    }
    if (j.contains("warnings")) t.warnings = j["warnings"].get<std::vector<std::string>>();
    return t;
}

torch::Tensor cmattn_perturb(const torch::Tensor& x, const torch::Tensor& labels, const VarianceTable& table,
                             bool training, std::optional<at::Generator> gen) {
    if (!training) return x;
    if (labels.sizes() != x.sizes().slice(0, 2)) throw ContractViolation("cmattn: labels not aligned with features");
    if (labels.numel() > 0 &&
        (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= static_cast<int64_t>(table.classes())))
        throw ContractViolation("cmattn: class id outside the variance table");
    auto var = torch::tensor(table.var, torch::kFloat64).to(x.scalar_type());
    auto std = torch::sqrt(var.index_select(0, labels.flatten())).view({x.size(0), x.size(1), 1});
    auto noise = torch::randn(x.sizes(), gen, x.options().requires_grad(false));
    return x + noise * std;
}

torch::Tensor lmca(const torch::Tensor& x, const torch::Tensor& m, const torch::Tensor& k, const torch::Tensor& q,
                   const torch::Tensor& v) {
    if (m.sizes() != x.sizes().slice(0, 2)) throw ContractViolation("lmca: gate must have one value per token");
    if (m.numel() > 0 && (m.min().item<double>() < 0.0 || m.max().item<double>() > 1.0))
        throw ContractViolation("lmca: gate values must lie in [0,1]");
    auto attn = nn::attention_weights(k, q, 1.0);  // [B, N, T]
    return m.unsqueeze(-1) * torch::matmul(attn, v) + x;
}

TwoWayBlockImpl::TwoWayBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim) {
    self_attn = register_module("self_attn", nn::Attention(dim, heads));
    token_to_image = register_module("token_to_image", nn::Attention(dim, heads, 2));
    image_to_token = register_module("image_to_token", nn::Attention(dim, heads, 2));
    mlp = register_module("mlp", nn::Mlp(dim, mlp_dim, dim));
    auto ln = [&](const char* name) {
        return register_module(name, torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    };
    norm1 = ln("norm1");
    norm2 = ln("norm2");
    norm3 = ln("norm3");
    norm4 = ln("norm4");
}

std::pair<torch::Tensor, torch::Tensor> TwoWayBlockImpl::forward(torch::Tensor queries, torch::Tensor keys,
                                                                 const torch::Tensor& query_pe,
                                                                 const torch::Tensor& key_pe) {
    auto q = queries + query_pe;
    queries = norm1(queries + self_attn(q, q, queries));
    q = queries + query_pe;
    auto k = keys + key_pe;
    queries = norm2(queries + token_to_image(q, k, keys));
    queries = norm3(queries + mlp(queries));
    q = queries + query_pe;
    k = keys + key_pe;
    keys = norm4(keys + image_to_token(k, q, queries));
    return {queries, keys};
}

HierarchicalDecoderImpl::HierarchicalDecoderImpl(DecoderConfig cfg) : cfg_(cfg) {
    const auto d = cfg_.dim;
    if (d % 8 != 0) throw ContractViolation("decoder dim must be a multiple of 8");
    mask_token = register_parameter("mask_token", torch::randn({d}));
    for (int64_t i = 0; i < cfg_.depth; ++i) {
        stage1.push_back(register_module("stage1_" + std::to_string(i), TwoWayBlock(d, cfg_.heads, cfg_.mlp_dim)));
        stage2.push_back(register_module("stage2_" + std::to_string(i), TwoWayBlock(d, cfg_.heads, cfg_.mlp_dim)));
    }
    auto ln = [&](const std::string& name) {
        return register_module(name, torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    };
    final_attn1 = register_module("final_attn1", nn::Attention(d, cfg_.heads, 2));
    final_attn2 = register_module("final_attn2", nn::Attention(d, cfg_.heads, 2));
    final_norm1 = ln("final_norm1");
    final_norm2 = ln("final_norm2");
    cm_norm = ln("cm_norm");
    cm_self_attn = register_module("cm_self_attn", nn::Attention(d, cfg_.heads, 2));
    cm_out_norm = ln("cm_out_norm");
    lmca_k = register_module("lmca_k", torch::nn::Linear(d, d / 2));
    lmca_q = register_module("lmca_q", torch::nn::Linear(d, d / 2));
    lmca_v = register_module("lmca_v", torch::nn::Linear(d, d));
    lmca_norm = ln("lmca_norm");
    auto convt = [&](const std::string& name, int64_t in, int64_t out) {
        return register_module(name,
                               torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, 2).stride(2)));
    };
    up1a = convt("up1a", d, d / 4);
    up1b = convt("up1b", d / 4, d / 8);
    up2a = convt("up2a", d, d / 4);
    up2b = convt("up2b", d / 4, d / 8);
    up1_ln_w = register_parameter("up1_ln_w", torch::ones({d / 4}));
    up1_ln_b = register_parameter("up1_ln_b", torch::zeros({d / 4}));
    up2_ln_w = register_parameter("up2_ln_w", torch::ones({d / 4}));
    up2_ln_b = register_parameter("up2_ln_b", torch::zeros({d / 4}));
    hyper1 = register_module("hyper1", nn::Mlp(d, d, d / 8, 3));
    hyper2 = register_module("hyper2", nn::Mlp(d, d, d / 8, 3));
}

torch::Tensor HierarchicalDecoderImpl::run_two_way(std::vector<TwoWayBlock>& blocks, nn::Attention& final_attn,
                                                   torch::nn::LayerNorm& final_norm, torch::Tensor& tokens,
                                                   torch::Tensor keys, const torch::Tensor& token_pe,
                                                   const torch::Tensor& key_pe) {
    for (auto& b : blocks) std::tie(tokens, keys) = b(tokens, keys, token_pe, key_pe);
    auto q = tokens + token_pe;
    auto k = keys + key_pe;
    tokens = final_norm(tokens + final_attn(q, k, keys));
    return keys;
}

torch::Tensor HierarchicalDecoderImpl::mask_logits(const torch::Tensor& keys, const torch::Tensor& token,
                                                   bool stage2) {
    auto x = fusion::to_grid(keys, cfg_.grid);
    auto& ua = stage2 ? up2a : up1a;
    auto& ub = stage2 ? up2b : up1b;
    auto up = torch::gelu(nn::layer_norm_2d(ua(x), stage2 ? up2_ln_w : up1_ln_w, stage2 ? up2_ln_b : up1_ln_b));
    up = torch::gelu(ub(up));
    auto h = (stage2 ? hyper2 : hyper1)(token);  // [B, d/8]
    auto logits = (h.unsqueeze(-1).unsqueeze(-1) * up).sum(1, true);
    return F::interpolate(logits, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{cfg_.image_size, cfg_.image_size})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
}

torch::Tensor labels_at_grid(const torch::Tensor& gt, int64_t grid) {
    const auto cell = gt.size(-1) / grid;
    auto frac = F::avg_pool2d(gt.to(torch::kFloat32), F::AvgPool2dFuncOptions(cell));
    return (frac >= 0.5).to(torch::kLong).flatten(1);
}

SegmentationOutput HierarchicalDecoderImpl::forward(const torch::Tensor& src, const torch::Tensor& dense,
                                                    const torch::Tensor& prompt_tokens, const torch::Tensor& pe,
                                                    const TrainingContext* training) {
    const auto b = src.size(0), d = cfg_.dim;
    auto keys = fusion::to_tokens(src + dense);
    auto key_pe = fusion::to_tokens(pe.unsqueeze(0)).expand({b, -1, -1});
    auto tokens0 = torch::cat({mask_token.view({1, 1, d}).expand({b, 1, d}), prompt_tokens}, 1);

    // Stage 1: prior mask.
    auto tokens = tokens0;
    auto keys1 = run_two_way(stage1, final_attn1, final_norm1, tokens, keys, tokens0, key_pe);
    SegmentationOutput out;
    out.prior_logits = mask_logits(keys1, tokens.select(1, 0), false);
    out.prior_mask = torch::sigmoid(out.prior_logits);

    // Stage 2: class-balanced perturbation, then cross-attention gated by the prior probabilities.
    auto perturbed = cm_norm(keys1);
    if (training && training->table)
        perturbed = cmattn_perturb(perturbed, training->labels, *training->table, true, training->gen);
    auto x = cm_out_norm(keys1 + cm_self_attn(perturbed + key_pe, perturbed + key_pe, perturbed));

    const auto cell = cfg_.image_size / cfg_.grid;
    auto gate = F::avg_pool2d(out.prior_mask, F::AvgPool2dFuncOptions(cell)).flatten(1);  // [B, N]
    const double scale = 1.0 / std::sqrt(static_cast<double>(d / 2));
    x = lmca_norm(lmca(x, gate, lmca_k(x + key_pe), lmca_q(tokens + tokens0) * scale, lmca_v(tokens)));

    auto keys2 = run_two_way(stage2, final_attn2, final_norm2, tokens, x, tokens0, key_pe);
    out.refined_logits = mask_logits(keys2, tokens.select(1, 0), true);
    out.refined_mask = torch::sigmoid(out.refined_logits);
    out.final_mask = (out.prior_mask + out.refined_mask) / 2;
    return out;
}

}  // namespace pgsam::decoder
