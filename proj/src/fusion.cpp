#include "pgsam/fusion.hpp"

#include <cmath>

#include "pgsam/attention.hpp"
#include "pgsam/grid.hpp"

namespace pgsam::fusion {

torch::Tensor to_tokens(const torch::Tensor& grid) { return grid.flatten(2).transpose(1, 2); }

torch::Tensor to_grid(const torch::Tensor& tokens, int64_t g) {
    return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), g, g});
}

AttentionResult cross_sequence_attention(const torch::Tensor& x_f, const torch::Tensor& x_i,
                                         const torch::Tensor& wq, const torch::Tensor& wk,
                                         const torch::Tensor& wv, ValueMode mode, int64_t heads) {
    if (x_f.dim() != 3 || x_i.sizes() != x_f.sizes())
        throw ContractViolation("cross_sequence_attention: x_f and x_i must be equal-length token sequences");
    const auto n = x_i.size(1), dk = wq.size(0);
    if (dk % heads != 0) throw ContractViolation("cross_sequence_attention: heads must divide d_k");
    auto q = nn::split_heads(torch::matmul(x_f, wq.t()), heads);
    auto k = nn::split_heads(torch::matmul(x_i, wk.t()), heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk / heads));
    auto weights = nn::attention_weights(q, k, scale);

    torch::Tensor v;
    if (mode == ValueMode::projected) {
        v = nn::split_heads(torch::matmul(x_i, wv.t()), heads);
    } else {
        if (wv.size(0) != n) throw ContractViolation("cross_sequence_attention: literal Wv needs one row per token");
        v = wv.reshape({n, heads, wv.size(1) / heads}).transpose(0, 1).unsqueeze(0);
    }
    return {nn::merge_heads(torch::matmul(weights, v)), weights};
}

torch::Tensor refine_sequence(const torch::Tensor& x_i, const torch::Tensor& a_i) {
    if (x_i.sizes() != a_i.sizes()) throw ContractViolation("refine_sequence: shape mismatch");
    return x_i + a_i;
}

CrossSequenceFusionImpl::CrossSequenceFusionImpl(FusionConfig cfg) : cfg_(cfg) {
    const auto d = cfg_.dim, c = cfg_.sequences;
    fuse = register_module("fuse", torch::nn::Conv2d(torch::nn::Conv2dOptions(c * d, d, 1)));
    if (cfg_.average_init) {
        torch::NoGradGuard ng;
        fuse->weight.zero_();
        for (int64_t s = 0; s < c; ++s)
            for (int64_t j = 0; j < d; ++j) fuse->weight[j][s * d + j][0][0] = 1.0 / static_cast<double>(c);
        fuse->bias.zero_();
    }
    const double std_qk = 1.0 / std::sqrt(static_cast<double>(d));
    wq = register_parameter("wq", torch::randn({cfg_.key_dim, d}) * std_qk);
    wk = register_parameter("wk", torch::randn({cfg_.key_dim, d}) * std_qk);
    const int64_t rows = cfg_.value_mode == ValueMode::projected ? d : cfg_.tokens;
    wv = register_parameter("wv", torch::randn({rows, d}) * (0.1 * std_qk));
}

torch::Tensor CrossSequenceFusionImpl::fuse_sequences(const std::vector<torch::Tensor>& embeddings) {
    if (embeddings.size() != static_cast<std::size_t>(cfg_.sequences))
        throw ContractViolation("fuse_sequences: expected " + std::to_string(cfg_.sequences) + " embeddings");
    for (const auto& e : embeddings)
        if (e.sizes() != embeddings.front().sizes())
            throw ContractViolation("fuse_sequences: heterogeneous embedding shapes");
    return fuse(torch::cat(embeddings, 1));
}

AttentionResult CrossSequenceFusionImpl::attend(const torch::Tensor& fused, const torch::Tensor& x_i) {
    return cross_sequence_attention(to_tokens(fused), to_tokens(x_i), wq, wk, wv, cfg_.value_mode, cfg_.heads);
}

FusionOutput CrossSequenceFusionImpl::forward(const std::vector<torch::Tensor>& embeddings) {
    FusionOutput out;
    out.fused = fuse_sequences(embeddings);
    const auto g = out.fused.size(-1);
    for (const auto& x : embeddings) {
        auto att = attend(out.fused, x);
        out.refined.push_back(refine_sequence(x, to_grid(att.correction, g)));
        out.attention.push_back(att.weights);
    }
    return out;
}

}  // namespace pgsam::fusion
