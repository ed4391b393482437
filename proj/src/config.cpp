#include "pgsam/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>

#include "pgsam/grid.hpp"
#include "pgsam/metrics.hpp"

namespace pgsam {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw ConfigError("bad value for " + key + ": '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::string fmt_double(double d) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define INT_FIELD(name)                                                                              \
    {#name,                                                                                          \
     {[](RunConfig& c, const std::string& v) { c.name = parse_number<decltype(c.name)>(#name, v); }, \
      [](const RunConfig& c) { return std::to_string(c.name); }}}
#define DOUBLE_FIELD(name)                                                              \
    {#name,                                                                             \
     {[](RunConfig& c, const std::string& v) { c.name = parse_number<double>(#name, v); }, \
      [](const RunConfig& c) { return fmt_double(c.name); }}}
#define BOOL_FIELD(name)                                                        \
    {#name,                                                                     \
     {[](RunConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }, \
      [](const RunConfig& c) { return std::string(c.name ? "true" : "false"); }}}
#define STRING_FIELD(name)                                        \
    {#name,                                                       \
     {[](RunConfig& c, const std::string& v) { c.name = v; },     \
      [](const RunConfig& c) { return c.name; }}}

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> f = {
        INT_FIELD(patch_size),       INT_FIELD(embed_dim),       INT_FIELD(depth),
        INT_FIELD(heads),            INT_FIELD(mlp_ratio),       INT_FIELD(image_size),
        INT_FIELD(lora_rank),        INT_FIELD(decoder_depth),   INT_FIELD(decoder_heads),
        INT_FIELD(text_dim),         INT_FIELD(adapter_bottleneck), STRING_FIELD(fusion_value_mode),
        INT_FIELD(backbone_seed),    DOUBLE_FIELD(lr),           STRING_FIELD(lr_schedule),
        DOUBLE_FIELD(beta1),         DOUBLE_FIELD(beta2),        DOUBLE_FIELD(weight_decay),
        INT_FIELD(max_epochs),       INT_FIELD(batch_size),      INT_FIELD(patience),
        DOUBLE_FIELD(loss_w),        DOUBLE_FIELD(loss_beta),    DOUBLE_FIELD(dice_smooth),
        STRING_FIELD(prompt_mode),   BOOL_FIELD(cam),            BOOL_FIELD(tpm),
        BOOL_FIELD(augment),         DOUBLE_FIELD(sample_fraction), INT_FIELD(seed),
        STRING_FIELD(provider),      DOUBLE_FIELD(prompt_threshold), DOUBLE_FIELD(kappa_max),
    };
    return f;
}

#undef INT_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef STRING_FIELD

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(*this, trim(value));
}

std::string RunConfig::get(const std::string& key) const {
    auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second.get(*this);
}

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& [name, _] : fields()) out.push_back(name);
        return out;
    }();
    return k;
}

std::map<std::string, std::string> RunConfig::to_map() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, f] : fields()) out[name] = f.get(*this);
    return out;
}

void RunConfig::validate() const {
    if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) throw ConfigError("sample_fraction must lie in (0,1]");
    if (max_epochs <= 0) throw ConfigError("max_epochs must be positive");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (patience <= 0) throw ConfigError("patience must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (lr_schedule != "cosine" && lr_schedule != "constant") throw ConfigError("lr_schedule must be cosine or constant");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (fusion_value_mode != "projected" && fusion_value_mode != "literal")
        throw ConfigError("fusion_value_mode must be projected or literal");
    try {
        (void)mode();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    metrics::LossConfig{loss_w, loss_beta, dice_smooth}.validate();
    model_config().validate();
}

model::ModelConfig RunConfig::model_config() const {
    model::ModelConfig m;
    m.encoder.patch_size = patch_size;
    m.encoder.embed_dim = embed_dim;
    m.encoder.depth = depth;
    m.encoder.heads = heads;
    m.encoder.mlp_ratio = mlp_ratio;
    m.encoder.image_size = image_size;
    m.encoder.lora_rank = lora_rank;
    m.encoder.init_seed = backbone_seed;
    m.sequences = static_cast<int64_t>(data::kDefaultSequences);
    m.cam = cam;
    m.tpm = effective_tpm();
    m.text_dim = text_dim;
    m.adapter_bottleneck = adapter_bottleneck;
    m.value_mode = fusion_value_mode == "literal" ? fusion::ValueMode::literal : fusion::ValueMode::projected;
    m.decoder_depth = decoder_depth;
    m.decoder_heads = decoder_heads;
    m.decoder_mlp_dim = 2 * embed_dim;
    m.prompt_threshold = prompt_threshold;
    return m;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    RunConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return c;
}

void RunConfig::save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write config " + path.string());
    for (const auto& [k, v] : to_map()) os << k << " = " << v << "\n";
}

RunConfig RunConfig::preset(const std::string& name) {
    RunConfig c;
    if (name == "desk") return c;
    if (name == "full") {
        c.max_epochs = 300;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "'");
}

std::filesystem::path output_root() {
    if (const char* env = std::getenv("PGSAM_OUTPUT_ROOT"); env && *env) return env;
    return ".";
}

}  // namespace pgsam
