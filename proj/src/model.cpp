#include "pgsam/model.hpp"

#include <cstdio>

#include "pgsam/metrics.hpp"
#include "pgsam/tensor_util.hpp"

namespace pgsam::model {

void ModelConfig::validate() const {
    encoder.validate();
    if (sequences <= 0) throw ConfigError("model needs at least one sequence");
    if (encoder.embed_dim % 8 != 0) throw ConfigError("embed_dim must be a multiple of 8");
    if (decoder_depth < 0 || decoder_heads <= 0 || encoder.embed_dim % (2 * decoder_heads) != 0)
        throw ConfigError("decoder heads must divide embed_dim/2");
    if (tpm && (adapter_bottleneck <= 0 || adapter_bottleneck >= text_dim))
        throw ConfigError("adapter bottleneck must lie in (0, text_dim)");
    if (!(prompt_threshold > 0.0 && prompt_threshold < 1.0)) throw ConfigError("prompt_threshold must lie in (0,1)");
}

PGSAMImpl::PGSAMImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto d = cfg_.encoder.embed_dim, g = cfg_.encoder.grid(), s = cfg_.encoder.image_size;
    encoder = register_module("encoder", encoder::ViTLoRAEncoder(cfg_.encoder));
    if (cfg_.cam) {
        fusion::FusionConfig fc;
        fc.dim = d;
        fc.sequences = cfg_.sequences;
        fc.key_dim = d;
        fc.tokens = g * g;
        fc.value_mode = cfg_.value_mode;
        fusion = register_module("fusion", fusion::CrossSequenceFusion(fc));
    }
    if (cfg_.tpm) {
        adapter = register_module("adapter", text::TextAdapter(cfg_.text_dim, cfg_.adapter_bottleneck));
        text::CoarseDecoderConfig cc;
        cc.dim = d;
        cc.text_dim = cfg_.text_dim;
        cc.grid = g;
        cc.image_size = s;
        coarse = register_module("coarse", text::CoarseMaskDecoder(cc));
    }
    prompt_encoder = register_module("prompt_encoder", decoder::PromptEncoder(d, s));
    decoder::DecoderConfig dc;
    dc.dim = d;
    dc.grid = g;
    dc.image_size = s;
    dc.depth = cfg_.decoder_depth;
    dc.heads = cfg_.decoder_heads;
    dc.mlp_dim = cfg_.decoder_mlp_dim;
    decoder = register_module("decoder", decoder::HierarchicalDecoder(dc));
    no_fused_embed = register_parameter("no_fused_embed", torch::zeros({d}));
    prior = register_buffer("prior", torch::ones({s, s}));
}

void PGSAMImpl::set_prior(const text::SpatialPriorMask& p) {
    auto t = to_tensor(p.weights);
    if (t.sizes() != prior.sizes()) throw ContractViolation("prior size does not match the model image size");
    torch::NoGradGuard ng;
    prior.copy_(t);
}

text::SpatialPriorMask PGSAMImpl::prior_mask() const {
    text::SpatialPriorMask p;
    p.weights = to_image(prior);
    p.fallback = (prior == 1.0f).all().item<bool>();
    return p;
}

ForwardOutput PGSAMImpl::forward(const torch::Tensor& images, const torch::Tensor& text,
                                 const TrainingInputs* training) {
    const auto c = cfg_.sequences, d = cfg_.encoder.embed_dim, g = cfg_.encoder.grid(),
               s = cfg_.encoder.image_size;
    if (images.dim() != 4 || images.size(1) != c || images.size(2) != s || images.size(3) != s)
        throw ContractViolation("model: expected images shaped [B, " + std::to_string(c) + ", " + std::to_string(s) +
                                ", " + std::to_string(s) + "]");
    const auto b = images.size(0);
    auto emb = encoder(images.reshape({b * c, s, s})).reshape({b, c, d, g, g});
    std::vector<torch::Tensor> per_seq;
    for (int64_t i = 0; i < c; ++i) per_seq.push_back(emb.select(1, i));

    torch::Tensor fused, src, dense;
    if (has_fusion()) {
        auto fo = fusion(per_seq);
        fused = fo.fused;
        src = torch::stack(fo.refined, 1).reshape({b * c, d, g, g});
        dense = fused.repeat_interleave(c, 0);
    } else {
        src = emb.reshape({b * c, d, g, g});
        dense = no_fused_embed.view({1, d, 1, 1}).expand({b * c, d, g, g});
        if (has_text()) fused = emb.mean(1);
    }

    ForwardOutput out;
    torch::Tensor prompt_tokens = torch::zeros({b * c, 0, d}, images.options());
    if (has_text()) {
        if (!text.defined() || text.dim() != 2 || text.size(0) != b || text.size(1) != cfg_.text_dim)
            throw ContractViolation("model: text pathway needs embeddings shaped [B, text_dim]");
        out.coarse_logits = coarse(fused, adapter(text));
        out.constrained = (torch::sigmoid(out.coarse_logits).squeeze(1) * prior).detach();
        const auto pm = prior_mask();
        for (int64_t i = 0; i < b; ++i)
            out.prompts.push_back(text::extract_prompts(to_image(out.constrained[i]), pm, cfg_.prompt_threshold));
        prompt_tokens = prompt_encoder->encode_batch(out.prompts).repeat_interleave(c, 0);
    }

    auto pe = prompt_encoder->dense_pe(g);
    if (training) {
        decoder::TrainingContext ctx;
        ctx.labels = decoder::labels_at_grid(training->gt.unsqueeze(1), g).repeat_interleave(c, 0);
        ctx.table = training->table;
        ctx.gen = training->gen;
        out.seg = decoder(src, dense, prompt_tokens, pe, &ctx);
    } else {
        out.seg = decoder(src, dense, prompt_tokens, pe, nullptr);
    }
    return out;
}

std::vector<std::pair<std::string, torch::Tensor>> PGSAMImpl::trainable_named() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& p : named_parameters())
        if (p.value().requires_grad()) out.emplace_back(p.key(), p.value());
    return out;
}

std::vector<torch::Tensor> PGSAMImpl::trainable_parameters() const {
    std::vector<torch::Tensor> out;
    for (auto& [_, t] : trainable_named()) out.push_back(t);
    return out;
}

std::string PGSAMImpl::frozen_fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : encoder->frozen_parameters()) {
        auto c = t.contiguous().to(torch::kFloat32);
        const auto* bytes = reinterpret_cast<const unsigned char*>(c.data_ptr<float>());
        for (std::size_t i = 0; i < static_cast<std::size_t>(c.numel()) * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

LossParts compute_loss(const ForwardOutput& out, const torch::Tensor& gt, const torch::Tensor& available, double w,
                       double beta, double smooth) {
    const auto b = gt.size(0), c = available.size(1);
    auto gt_seq = gt.unsqueeze(1).repeat_interleave(c, 0).to(torch::kFloat32);
    auto avail = available.to(torch::kFloat32).view({b * c});
    const auto n = avail.sum().clamp_min(1.0);
    LossParts parts;
    parts.dec1 = (metrics::bce_dice_per_sample_logits(out.seg.prior_logits, gt_seq, smooth) * avail).sum() / n;
    parts.dec2 = (metrics::bce_dice_per_sample_logits(out.seg.refined_logits, gt_seq, smooth) * avail).sum() / n;
    if (out.coarse_logits.defined())
        parts.prompt = metrics::bce_dice_loss_logits(out.coarse_logits, gt.unsqueeze(1).to(torch::kFloat32), smooth);
    else
        parts.prompt = torch::zeros({}, gt_seq.options());
    metrics::LossConfig lc{w, beta, smooth};
    parts.total = metrics::total_loss(parts.dec1, parts.dec2, parts.prompt, lc);
    return parts;
}

}  // namespace pgsam::model
