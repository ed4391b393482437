// Acceptance suite: one PASS/FAIL line per criterion.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include <ATen/CPUGeneratorImpl.h>
#include <CLI11.hpp>

#include "oracles.hpp"
#include "pgsam/config.hpp"
#include "pgsam/data.hpp"
#include "pgsam/decoder.hpp"
#include "pgsam/encoder.hpp"
#include "pgsam/fusion.hpp"
#include "pgsam/harness.hpp"
#include "pgsam/metrics.hpp"
#include "pgsam/model.hpp"
#include "pgsam/tensor_util.hpp"
#include "pgsam/text.hpp"

using namespace pgsam;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kMetricTol = 1e-9;
constexpr double kMetricBudgetSec = 10.0;
constexpr double kBaselineTol = 1e-6;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradBudgetSec = 60.0;
constexpr double kRowSumTol = 1e-6;
constexpr double kGateLinearityTol = 1e-9;
constexpr double kVarianceRelTol = 0.05;
constexpr int64_t kVarianceSamples = 100000;
constexpr int kRectangles = 1000;
constexpr int64_t kExpectedLoraCount = 2560;
constexpr int kAuditSteps = 100;
constexpr std::size_t kLearnPhantoms = 200;
constexpr int64_t kLearnEpochs = 30;
constexpr double kLearnDsc = 0.60;
constexpr double kLearnBudgetSec = 30 * 60.0;
constexpr double kAblationMargin = 0.02;
constexpr int64_t kAblationEpochs = 12;
constexpr int64_t kAblationBatch = 4;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// FNV-1a over every file (relative path and bytes) under `root`, in sorted path order.
std::string tree_hash(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
    std::sort(files.begin(), files.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const std::string& s) {
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& f : files) {
        mix(f.generic_string());
        mix(slurp(root / f));
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

data::DatasetIndex make_dataset(const fs::path& dir, std::size_t count, std::uint64_t seed) {
    fs::remove_all(dir);
    data::PhantomConfig pc;
    pc.count = count;
    pc.seed = seed;
    auto samples = data::generate_phantoms(pc);
    std::vector<data::LesionMask> masks;
    for (const auto& s : samples) masks.push_back(s.mask);
    std::vector<data::PhantomSample> kept;
    for (auto i : data::filter_slices(masks)) kept.push_back(samples[i]);
    return data::export_dataset(dir, kept, seed);
}

Outcome metric_oracle() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    double worst = 0.0;
    int undefined_mismatch = 0, undefined = 0;
    for (int t = 0; t < 100; ++t) {
        auto a = oracle::random_mask(rng, 16, 16, rng.uniform(0.02, 0.6));
        auto b = oracle::random_mask(rng, 16, 16, rng.uniform(0.02, 0.6));
        worst = std::max(worst, std::abs(metrics::dsc(a, b) - oracle::dsc(a, b)));
        const auto got = metrics::hd95(a, b);
        const auto ref = oracle::hausdorff_q(a, b, 0.95);
        if (got.has_value() != ref.has_value()) ++undefined_mismatch;
        if (got && ref) worst = std::max(worst, std::abs(*got - *ref));
        if (!ref) ++undefined;
    }
    const double sec = seconds_since(t0);
    return {worst <= kMetricTol && undefined_mismatch == 0 && sec < kMetricBudgetSec,
            "max_abs_diff=" + num(worst) + " undefined=" + std::to_string(undefined) +
                " mismatched_undefined=" + std::to_string(undefined_mismatch) + " time=" + num(sec, 3) + "s"};
}

Outcome baseline_identity(const fs::path& work) {
    fs::create_directories(work);
    auto cfg = encoder::EncoderConfig::tiny();
    cfg.init_seed = 11;
    encoder::ViTLoRAEncoder with_lora(cfg);
    with_lora->save_backbone(work / "backbone");
    auto frozen_cfg = cfg;
    frozen_cfg.lora_rank = 0;
    frozen_cfg.pretrained_source = work / "backbone";
    encoder::ViTLoRAEncoder frozen(frozen_cfg);

    torch::NoGradGuard ng;
    bool b_zero = true;
    for (auto& [name, t] : with_lora->lora_parameters())
        if (name.find("lora_b") != std::string::npos) b_zero &= t.abs().max().item<double>() == 0.0;
    data::PhantomConfig pc;
    pc.count = 2;
    pc.seed = 5;
    double worst = 0.0;
    for (const auto& s : data::generate_phantoms(pc)) {
        auto x = pgsam::to_tensor(s.slice).to(torch::kFloat32);
        worst = std::max(worst, (with_lora->forward(x) - frozen->forward(x)).abs().max().item<double>());
    }
    return {b_zero && worst <= kBaselineTol,
            "all_B_zero=" + std::string(b_zero ? "yes" : "no") + " max_abs_diff=" + num(worst)};
}

Outcome gradient_check() {
    const auto t0 = Clock::now();
    const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    torch::manual_seed(77);
    std::vector<std::pair<std::string, double>> errs;

    {
        auto x = torch::randn({16, 8}, opts), w0 = torch::randn({6, 8}, opts), target = torch::randn({16, 6}, opts);
        auto f = [&](const std::vector<torch::Tensor>& p) {
            return (encoder::lora_linear(x, w0, p[0], p[1]) - target).pow(2).sum() * 0.5;
        };
        errs.emplace_back("lora_linear", oracle::fd_relative_error(f, {torch::randn({3, 8}, opts), torch::randn({6, 3}, opts)}));
    }
    {
        text::TextAdapter adapter(16, 4);
        adapter->to(torch::kFloat64);
        {
            torch::NoGradGuard ng;
            adapter->up->weight.normal_(0, 0.5);
        }
        auto x = torch::randn({3, 16}, opts);
        auto w = torch::randn({3, 16}, opts);
        errs.emplace_back("adapter", oracle::fd_parameter_error(adapter->parameters(),
                                                                [&] { return (adapter->forward(x) * w).sum(); }));
    }
    {
        auto xf = torch::randn({1, 16, 8}, opts);
        auto f = [&](const std::vector<torch::Tensor>& p) {
            auto r = fusion::cross_sequence_attention(xf, p[3], p[0], p[1], p[2], fusion::ValueMode::projected);
            return (fusion::refine_sequence(p[3], r.correction) * torch::cos(p[3])).sum();
        };
        errs.emplace_back("cross_sequence_attention",
                          oracle::fd_relative_error(f, {torch::randn({8, 8}, opts), torch::randn({8, 8}, opts),
                                                        torch::randn({8, 8}, opts), torch::randn({1, 16, 8}, opts)}));
    }
    {
        auto m = torch::rand({1, 16}, opts);
        auto f = [&](const std::vector<torch::Tensor>& p) {
            return (decoder::lmca(p[0], m, p[1], p[2], p[3]) * torch::sin(p[0])).sum();
        };
        errs.emplace_back("lmca", oracle::fd_relative_error(f, {torch::randn({1, 16, 8}, opts), torch::randn({1, 16, 4}, opts),
                                                                torch::randn({1, 3, 4}, opts), torch::randn({1, 3, 8}, opts)}));
    }
    const double sec = seconds_since(t0);
    bool ok = sec < kGradBudgetSec;
    std::string detail;
    for (auto& [name, e] : errs) {
        ok &= e < kGradRelTol;
        detail += name + "=" + num(e, 3) + " ";
    }
    return {ok, detail + "time=" + num(sec, 3) + "s"};
}

Outcome attention_invariants() {
    torch::manual_seed(31);
    double worst_row = 0.0;
    for (double scale : {0.1, 1.0, 5.0}) {
        auto xf = torch::randn({2, 49, 16}) * scale, xi = torch::randn({2, 49, 16}) * scale;
        for (auto mode : {fusion::ValueMode::projected, fusion::ValueMode::literal}) {
            auto wv = torch::randn({mode == fusion::ValueMode::projected ? 16 : 49, 16});
            auto r = fusion::cross_sequence_attention(xf, xi, torch::randn({16, 16}), torch::randn({16, 16}), wv, mode);
            worst_row = std::max(worst_row, (r.weights.sum(-1) - 1).abs().max().item<double>());
        }
        auto w = nn::attention_weights(nn::split_heads(torch::randn({2, 7, 16}) * scale, 2),
                                       nn::split_heads(torch::randn({2, 49, 16}) * scale, 2), 0.25);
        worst_row = std::max(worst_row, (w.sum(-1) - 1).abs().max().item<double>());
    }
    fusion::FusionConfig fc;
    fc.dim = 16;
    fc.key_dim = 16;
    fc.sequences = 4;
    fusion::CrossSequenceFusion cam(fc);
    std::vector<torch::Tensor> emb;
    for (int i = 0; i < 4; ++i) emb.push_back(torch::randn({1, 16, 7, 7}));
    for (const auto& a : cam->forward(emb).attention)
        worst_row = std::max(worst_row, (a.sum(-1) - 1).abs().max().item<double>());

    const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto x = torch::randn({2, 16, 8}, opts), k = torch::randn({2, 16, 4}, opts), q = torch::randn({2, 3, 4}, opts),
         v = torch::randn({2, 3, 8}, opts);
    const bool zero_identity = torch::equal(decoder::lmca(x, torch::zeros({2, 16}, opts), k, q, v), x);
    auto unit = decoder::lmca(x, torch::ones({2, 16}, opts), k, q, v) - x;
    double worst_lin = 0.0;
    auto gate = torch::rand({2, 16}, opts);
    for (double alpha : {0.5, 0.25, 0.9}) {
        auto scaled = decoder::lmca(x, gate * alpha, k, q, v) - x;
        auto ref = decoder::lmca(x, gate, k, q, v) - x;
        worst_lin = std::max(worst_lin, (scaled - alpha * ref).abs().max().item<double>());
        auto uniform = decoder::lmca(x, torch::full({2, 16}, alpha, opts), k, q, v) - x;
        worst_lin = std::max(worst_lin, (uniform - alpha * unit).abs().max().item<double>());
    }
    return {worst_row <= kRowSumTol && zero_identity && worst_lin <= kGateLinearityTol,
            "max_row_sum_err=" + num(worst_row, 3) + " lmca_zero_identity=" + (zero_identity ? "exact" : "broken") +
                " gate_linearity_err=" + num(worst_lin, 3)};
}

Outcome cmattn_statistics() {
    data::PhantomConfig pc;
    pc.count = 20;
    pc.seed = 9;
    std::vector<data::LesionMask> masks;
    for (const auto& s : data::generate_phantoms(pc)) masks.push_back(s.mask);
    auto table = decoder::build_variance_table(masks);
    auto x = torch::zeros({1, 2, kVarianceSamples}, torch::kFloat64);
    auto labels = torch::tensor({{0, 1}}, torch::kLong);
    auto out = decoder::cmattn_perturb(x, labels, table, true, at::make_generator<at::CPUGeneratorImpl>(17));
    bool ok = true;
    std::string detail;
    for (int64_t c = 0; c < 2; ++c) {
        const double est = (out[0][c] - x[0][c]).var().item<double>();
        const double rel = std::abs(est - table.var[c]) / table.var[c];
        ok &= rel <= kVarianceRelTol;
        detail += "class" + std::to_string(c) + " var=" + num(table.var[c]) + " est=" + num(est) + " rel=" +
                  num(rel, 3) + " ";
    }
    auto feats = torch::randn({2, 49, 16});
    auto lab = torch::randint(0, 2, {2, 49}, torch::kLong);
    const bool passthrough = torch::equal(decoder::cmattn_perturb(feats, lab, table, false), feats);

    model::ModelConfig mc;
    torch::manual_seed(1);
    model::PGSAM m(mc);
    m->eval();
    torch::NoGradGuard ng;
    auto images = torch::rand({1, 4, 224, 224});
    auto text = torch::randn({1, 256});
    const bool model_det =
        torch::equal(m->forward(images, text).seg.final_mask, m->forward(images, text).seg.final_mask);
    ok &= passthrough && model_det;
    return {ok, detail + "eval_passthrough=" + (passthrough ? "exact" : "broken") +
                    " eval_model_deterministic=" + (model_det ? "yes" : "no")};
}

Outcome prompt_geometry() {
    Rng rng(606);
    text::SpatialPriorMask prior;
    prior.weights = Image(224, 224, 1.0f);
    int exact = 0, inside = 0;
    for (int t = 0; t < kRectangles; ++t) {
        const auto r0 = rng.below(224), c0 = rng.below(224);
        const auto r1 = r0 + rng.below(224 - r0), c1 = c0 + rng.below(224 - c0);
        Image img(224, 224);
        for (auto& v : img.values()) v = float(rng.uniform(0.0, 0.49));
        std::uint64_t sr = 0, sc = 0, n = 0;
        for (auto r = r0; r <= r1; ++r)
            for (auto c = c0; c <= c1; ++c) {
                img(r, c) = float(rng.uniform(0.5, 1.0));
                sr += r;
                sc += c;
                ++n;
            }
        auto p = text::extract_prompts(img, prior, 0.5);
        const bool point_ok = p.point[0] == double(sr) / double(n) && p.point[1] == double(sc) / double(n);
        const bool box_ok = p.bbox == std::array<double, 4>{double(r0), double(c0), double(r1), double(c1)};
        exact += point_ok && box_ok && !p.fallback_used;
        inside += p.bbox[0] <= p.point[0] && p.point[0] <= p.bbox[2] && p.bbox[1] <= p.point[1] &&
                  p.point[1] <= p.bbox[3];
    }
    return {exact == kRectangles && inside == kRectangles,
            "exact=" + std::to_string(exact) + "/" + std::to_string(kRectangles) + " point_in_bbox=" +
                std::to_string(inside) + "/" + std::to_string(kRectangles)};
}

Outcome trainable_audit() {
    RunConfig cfg;
    cfg.lr = 1e-3;
    data::PhantomConfig pc;
    pc.count = 2;
    pc.seed = 4;
    harness::Samples samples;
    for (auto& s : data::generate_phantoms(pc)) samples.push_back({s.slice, s.mask, s.report});
    auto masks = harness::masks_of(samples);
    auto session =
        harness::make_session(cfg, text::build_spatial_prior(masks), decoder::build_variance_table(masks));
    auto& enc = session->model->encoder;

    int64_t lora_count = 0, enc_trainable = 0;
    for (auto& [_, t] : enc->lora_parameters()) lora_count += t.numel();
    for (auto& t : enc->trainable_parameters()) enc_trainable += t.numel();
    bool names_ok = true;
    for (auto& [name, t] : session->model->trainable_named())
        if (name.rfind("encoder.", 0) == 0) names_ok &= encoder::is_lora_key(name);

    std::vector<torch::Tensor> before;
    for (auto& t : enc->frozen_parameters()) before.push_back(t.clone());
    auto batch = harness::make_batch({&samples[0], &samples[1]}, 4);
    for (int i = 0; i < kAuditSteps; ++i) harness::train_step(*session, batch, std::uint64_t(i), cfg.lr);
    const auto after = enc->frozen_parameters();
    bool identical = after.size() == before.size();
    for (std::size_t i = 0; identical && i < after.size(); ++i) identical = torch::equal(after[i], before[i]);
    double lora_moved = 0;
    for (auto& [_, t] : enc->lora_parameters()) lora_moved += t.abs().sum().item<double>();
    const bool ok =
        lora_count == kExpectedLoraCount && enc_trainable == kExpectedLoraCount && names_ok && identical && lora_moved > 0;
    return {ok, "lora_params=" + std::to_string(lora_count) + " encoder_trainable=" + std::to_string(enc_trainable) +
                    " frozen_tensors=" + std::to_string(after.size()) + " W0_identical_after_" +
                    std::to_string(kAuditSteps) + "_steps=" + (identical ? "yes" : "no")};
}

RunConfig learning_config() {
    RunConfig cfg;
    cfg.prompt_mode = "expert";
    cfg.max_epochs = kLearnEpochs;
    cfg.patience = kLearnEpochs;
    return cfg;
}

Outcome end_to_end(const fs::path& work) {
    const auto t0 = Clock::now();
    auto index = make_dataset(work / "data", kLearnPhantoms, 7);
    auto cfg = learning_config();
    auto res = harness::train(cfg, index, {work / "run"});
    const auto test = harness::load_split(index, data::Split::test);
    auto rep = harness::evaluate_checkpoint(res.best_dir, test);
    rep.write_summary_csv(work / "summary.csv");
    const double sec = seconds_since(t0);
    const double d = rep.mean_dsc();
    const bool ok = d >= kLearnDsc && sec <= kLearnBudgetSec && int64_t(res.history.size()) <= kLearnEpochs;
    return {ok, "slices=" + std::to_string(index.entries.size()) + " test_rows=" + std::to_string(rep.rows.size()) +
                    " best_epoch=" + std::to_string(res.best_epoch) + " epochs_run=" +
                    std::to_string(res.history.size()) + " test_mean_dsc=" + num(d, 4) + " time=" + num(sec, 4) + "s"};
}

Outcome ablation(const fs::path& work) {
    auto index = make_dataset(work / "data", 60, 21);
    RunConfig base;
    base.max_epochs = kAblationEpochs;
    base.batch_size = kAblationBatch;
    base.lr = 1e-3;
    base.patience = kAblationEpochs;
    const std::vector<std::uint64_t> seeds = {0, 1, 2};
    auto res = harness::ablate(base, index, seeds, work / "out");

    const auto t4 = slurp(work / "out" / "modules.csv"), t3 = slurp(work / "out" / "prompts.csv");
    const bool headers = t4.rfind("CAM,TPM,Site,modality,DSC,seeds\n", 0) == 0 &&
                         t3.rfind("Prompt,Site,modality,DSC,seeds\n", 0) == 0;
    std::size_t module_runs = 0, prompt_runs = 0;
    for (const auto& r : res.runs) (r.table == "module" ? module_runs : prompt_runs)++;
    std::set<std::string> prompts;
    for (const auto& c : res.prompt_cells) prompts.insert(c.prompt);

    auto mean_of = [&](bool cam, bool tpm) {
        double s = 0;
        int n = 0;
        for (const auto& r : res.runs)
            if (r.table == "module" && r.cam == cam && r.tpm == tpm) {
                s += r.mean_dsc;
                ++n;
            }
        return n ? s / n : 0.0;
    };
    const double full = mean_of(true, true), plain = mean_of(false, false);
    std::string cells;
    for (bool cam : {false, true})
        for (bool tpm : {false, true})
            cells += " cam" + std::to_string(cam) + "_tpm" + std::to_string(tpm) + "=" + num(mean_of(cam, tpm), 4);
    const bool ok = headers && module_runs == 4 * seeds.size() && prompt_runs == 5 * seeds.size() &&
                    prompts.size() == 5 && full >= plain - kAblationMargin;
    return {ok, "module_runs=" + std::to_string(module_runs) + " prompt_runs=" + std::to_string(prompt_runs) +
                    " unique_trainings=" + std::to_string(res.unique_trainings) + cells +
                    " full_minus_baseline=" + num(full - plain, 4)};
}

Outcome reproducibility(const fs::path& work) {
    RunConfig cfg;
    cfg.max_epochs = 2;
    cfg.lr = 1e-3;
    std::vector<std::string> hashes;
    std::vector<std::string> bytes;
    for (const char* run : {"a", "b"}) {
        const auto dir = work / run;
        auto index = make_dataset(dir / "data", 24, 13);
        hashes.push_back(tree_hash(dir / "data"));
        auto res = harness::train(cfg, index, {dir / "run"});
        auto rep = harness::evaluate_checkpoint(res.best_dir, harness::load_split(index, data::Split::test));
        rep.write_csv(dir / "metrics.csv");
        rep.write_summary_csv(dir / "summary.csv");
        rep.write_json(dir / "report.json");
        bytes.push_back(slurp(dir / "metrics.csv") + slurp(dir / "summary.csv") + slurp(dir / "report.json"));
    }
    const bool same_data = hashes[0] == hashes[1];
    const bool same_reports = bytes[0] == bytes[1] && !bytes[0].empty();
    return {same_data && same_reports, "dataset_hash=" + hashes[0] + (same_data ? "" : "/" + hashes[1]) +
                                           " report_bytes=" + std::to_string(bytes[0].size()) +
                                           " identical=" + (same_reports ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    fs::path work = "acceptance_work";
    std::vector<int> only;
    app.add_option("--work", work, "scratch directory");
    app.add_option("--only", only, "run only these criteria");
    CLI11_PARSE(app, argc, argv);
    harness::init_runtime();

    const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
        {1, metric_oracle},
        {2, [&] { return baseline_identity(work / "c2"); }},
        {3, gradient_check},
        {4, attention_invariants},
        {5, cmattn_statistics},
        {6, prompt_geometry},
        {7, trainable_audit},
        {8, [&] { return end_to_end(work / "c8"); }},
        {9, [&] { return ablation(work / "c9"); }},
        {10, [&] { return reproducibility(work / "c10"); }},
    };
    int failed = 0;
    for (const auto& [id, run] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
