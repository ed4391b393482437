#include "pgsam/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "pgsam/io.hpp"
#include "pgsam/rng.hpp"

namespace pgsam::text {

HashBagProvider::HashBagProvider(int64_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim_ <= 0) throw ValidationError("hash-bag provider needs a positive dimension");
}

std::string HashBagProvider::id() const {
    return "hash-bag-v1-d" + std::to_string(dim_) + "-s" + std::to_string(seed_);
}

std::uint64_t HashBagProvider::fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::string> HashBagProvider::tokenize(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char ch : text) {
        if (ch < 0x80 && std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    std::vector<std::string> tokens = words;
    for (std::size_t i = 0; i + 1 < words.size(); ++i) tokens.push_back(words[i] + " " + words[i + 1]);
    return tokens;
}

TextEmbedding HashBagProvider::embed(const std::string& text) const {
    if (text.empty()) throw ValidationError("cannot embed empty text");
    std::vector<double> acc(static_cast<std::size_t>(dim_), 0.0);
    for (const auto& tok : tokenize(text)) {
        Rng rng(mix_seed(seed_, fnv1a(tok)));
        for (auto& a : acc) a += rng.normal();
    }
    double norm = 0.0;
    for (double a : acc) norm += a * a;
    norm = std::sqrt(norm);
    auto t = torch::zeros({dim_}, torch::kFloat32);
    auto* p = t.data_ptr<float>();
    if (norm > 0)
        for (int64_t i = 0; i < dim_; ++i) p[i] = static_cast<float>(acc[i] / norm);
    return {t, id()};
}

PrecomputedProvider::PrecomputedProvider(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ProviderError("text provider unavailable: cannot open " + path.string());
    try {
        auto j = nlohmann::json::parse(is);
        id_ = j.at("provider_id").get<std::string>();
        dim_ = j.at("dim").get<int64_t>();
        for (const auto& [k, v] : j.at("embeddings").items()) {
            auto vec = v.get<std::vector<float>>();
            if (static_cast<int64_t>(vec.size()) != dim_)
                throw ProviderError("embedding for '" + k + "' has the wrong dimension");
            table_.emplace(k, std::move(vec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ProviderError("text provider table " + path.string() + " is malformed: " + e.what());
    }
}

TextEmbedding PrecomputedProvider::embed(const std::string& text) const {
    if (text.empty()) throw ValidationError("cannot embed empty text");
    auto it = table_.find(text);
    if (it == table_.end()) throw ProviderError("provider " + id_ + " has no embedding for: " + text);
    auto t = torch::from_blob(const_cast<float*>(it->second.data()), {dim_}, torch::kFloat32).clone();
    return {t, id_};
}

std::unique_ptr<TextProvider> make_provider(const std::string& spec) {
    if (spec == "hash-bag") return std::make_unique<HashBagProvider>();
    if (spec.rfind("hash-bag:", 0) == 0) return std::make_unique<HashBagProvider>(std::stoll(spec.substr(9)));
    if (spec.rfind("precomputed:", 0) == 0) return std::make_unique<PrecomputedProvider>(spec.substr(12));
    throw ProviderError("unknown text provider '" + spec + "'");
}

TextAdapterImpl::TextAdapterImpl(int64_t text_dim, int64_t bottleneck) {
    if (bottleneck <= 0 || bottleneck >= text_dim)
        throw ContractViolation("adapter bottleneck must be smaller than the text dimension");
    down = register_module("down", torch::nn::Linear(text_dim, bottleneck));
    up = register_module("up", torch::nn::Linear(bottleneck, text_dim));
    torch::NoGradGuard ng;
    up->weight.zero_();
    up->bias.zero_();
}

torch::Tensor TextAdapterImpl::bottleneck_activation(const torch::Tensor& x) { return torch::gelu(down(x)); }

torch::Tensor TextAdapterImpl::forward(const torch::Tensor& x) { return x + up(bottleneck_activation(x)); }

std::vector<int64_t> upsample_plan(int64_t grid, int64_t target) {
    if (grid <= 0 || target % grid != 0)
        throw ContractViolation("upsample_plan: target must be a multiple of the grid");
    std::vector<int64_t> factors;
    int64_t rest = target / grid;
    for (int64_t f = 2; rest > 1;) {
        if (rest % f == 0) {
            factors.push_back(f);
            rest /= f;
        } else {
            ++f;
        }
    }
    return factors;
}

CoarseMaskDecoderImpl::CoarseMaskDecoderImpl(CoarseDecoderConfig cfg) : cfg_(cfg) {
    if (cfg_.use_text) {
        film = register_module("film", torch::nn::Linear(cfg_.text_dim, 2 * cfg_.dim));
        torch::NoGradGuard ng;
        film->weight.mul_(0.1);
        film->bias.zero_();
    }
    int64_t ch = cfg_.dim;
    const auto plan = upsample_plan(cfg_.grid, cfg_.image_size);
    for (std::size_t i = 0; i < plan.size(); ++i) {
        const int64_t next = std::max<int64_t>(8, ch / 2);
        ups.push_back(register_module("up" + std::to_string(i),
                                      torch::nn::ConvTranspose2d(
                                          torch::nn::ConvTranspose2dOptions(ch, next, plan[i]).stride(plan[i]))));
        ch = next;
    }
    head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 1, 3).padding(1)));
}

torch::Tensor CoarseMaskDecoderImpl::modulate(const torch::Tensor& fused, const torch::Tensor& text) {
    if (!cfg_.use_text || !text.defined()) return fused;
    auto gb = film(text);  // [B, 2d]
    auto gamma = gb.slice(1, 0, cfg_.dim).unsqueeze(-1).unsqueeze(-1);
    auto beta = gb.slice(1, cfg_.dim, 2 * cfg_.dim).unsqueeze(-1).unsqueeze(-1);
    return fused * (1 + gamma) + beta;
}

torch::Tensor CoarseMaskDecoderImpl::forward(const torch::Tensor& fused, const torch::Tensor& text) {
    auto x = modulate(fused, text);
    for (auto& up : ups) x = torch::gelu(up(x));
    return head(x);
}

SpatialPriorMask build_spatial_prior(const std::vector<data::LesionMask>& train_masks, std::size_t image_size) {
    SpatialPriorMask prior;
    if (train_masks.empty()) {
        prior.weights = Image(image_size, image_size, 1.0f);
        prior.fallback = true;
        return prior;
    }
    const auto& ref = train_masks.front().pixels;
    Grid<double> freq(ref.rows(), ref.cols(), 0.0);
    for (const auto& m : train_masks) {
        if (!m.pixels.same_shape(ref)) throw ContractViolation("build_spatial_prior: mask dimension mismatch");
        for (std::size_t i = 0; i < ref.size(); ++i)
            if (m.pixels.values()[i]) freq.values()[i] += 1.0;
    }
    const double n = static_cast<double>(train_masks.size());
    double mx = 0.0;
    for (auto& f : freq.values()) {
        f /= n;
        mx = std::max(mx, f);
    }
    prior.support_count = train_masks.size();
    prior.weights = Image(ref.rows(), ref.cols(), 1.0f);
    if (mx == 0.0) {
        prior.fallback = true;
        return prior;
    }
    for (std::size_t i = 0; i < freq.size(); ++i) prior.weights.values()[i] = static_cast<float>(freq.values()[i] / mx);
    return prior;
}

Image apply_prior(const Image& coarse, const SpatialPriorMask& prior) {
    if (!coarse.same_shape(prior.weights)) throw ContractViolation("apply_prior: shape mismatch");
    Image out = coarse;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] *= prior.weights.values()[i];
    return out;
}

namespace {

template <typename Pred>
bool support_stats(const Image& img, Pred in_support, PromptSet& out) {
    double sx = 0, sy = 0;
    std::size_t n = 0, xmin = img.rows(), xmax = 0, ymin = img.cols(), ymax = 0;
    for (std::size_t r = 0; r < img.rows(); ++r)
        for (std::size_t c = 0; c < img.cols(); ++c)
            if (in_support(img(r, c))) {
                ++n;
                sx += static_cast<double>(r);
                sy += static_cast<double>(c);
                xmin = std::min(xmin, r);
                xmax = std::max(xmax, r);
                ymin = std::min(ymin, c);
                ymax = std::max(ymax, c);
            }
    if (n == 0) return false;
    out.point = {sx / n, sy / n};
    out.bbox = {double(xmin), double(ymin), double(xmax), double(ymax)};
    return true;
}

}  // namespace

PromptSet extract_prompts(const Image& constrained, const SpatialPriorMask& prior, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("binarize threshold must lie in (0,1)");
    PromptSet p;
    if (support_stats(constrained, [&](float v) { return v >= threshold; }, p)) return p;
    p.fallback_used = true;
    const float mx = *std::max_element(prior.weights.values().begin(), prior.weights.values().end());
    support_stats(prior.weights, [&](float v) { return v == mx; }, p);
    return p;
}

void save_prior(const std::filesystem::path& path, const SpatialPriorMask& prior) {
    io::write_channels(path, {prior.weights});
}

SpatialPriorMask load_prior(const std::filesystem::path& path) {
    auto chans = io::read_channels(path);
    if (chans.size() != 1) throw ValidationError("prior file must hold exactly one channel");
    SpatialPriorMask p;
    p.weights = std::move(chans.front());
    p.support_count = 0;
    const auto [mn, mx] = std::minmax_element(p.weights.values().begin(), p.weights.values().end());
    p.fallback = *mn == 1.0f && *mx == 1.0f;
    return p;
}

}  // namespace pgsam::text
