#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pgsam/config.hpp"
#include "pgsam/data.hpp"
#include "pgsam/decoder.hpp"
#include "pgsam/harness.hpp"
#include "pgsam/io.hpp"
#include "pgsam/text.hpp"

namespace fs = std::filesystem;
using namespace pgsam;

namespace {

fs::path resolve_out(const std::string& out, const std::string& fallback) {
    fs::path p = out.empty() ? fs::path(fallback) : fs::path(out);
    return p.is_absolute() ? p : output_root() / p;
}

struct ConfigArgs {
    std::string file;
    std::string preset = "desk";
    std::vector<std::string> overrides;

    void attach(CLI::App* app) {
        app->add_option("--config", file, "key = value config file");
        app->add_option("--preset", preset, "desk | full")->check(CLI::IsMember({"desk", "full"}));
        app->add_option("--set", overrides, "override a config key (key=value), repeatable");
    }

    RunConfig build() const {
        RunConfig c = file.empty() ? RunConfig::preset(preset) : RunConfig::load(file);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            c.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        c.validate();
        return c;
    }
};

template <typename T>
std::vector<T> parse_list(const std::string& s) {
    std::vector<T> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::istringstream is(item);
        T v{};
        if (!(is >> v)) throw ConfigError("cannot parse list item '" + item + "'");
        out.push_back(v);
    }
    return out;
}

data::LoadedSample sample_from_dir(const fs::path& dir) {
    data::LoadedSample s;
    s.slice.channels = io::read_channels(dir / "channels.bin");
    for (const auto& ch : s.slice.channels)
        s.slice.available.push_back(std::any_of(ch.values().begin(), ch.values().end(), [](float v) { return v != 0.0f; }));
    s.slice.slice_id = dir.filename().string();
    s.slice.site_id = data::site_of(s.slice.slice_id);
    if (fs::exists(dir / "mask.png")) s.mask = data::LesionMask(io::read_mask_png(dir / "mask.png"));
    if (fs::exists(dir / "report.json")) s.report = io::read_report_json(dir / "report.json");
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    harness::init_runtime();
    CLI::App app{"Prompt-guided multi-sequence lesion segmentation: data, training and evaluation"};
    app.require_subcommand(1);

    // gen-phantoms
    auto* gen = app.add_subcommand("gen-phantoms", "Generate a synthetic multi-sequence dataset");
    std::string gen_out;
    std::size_t gen_count = 200;
    std::uint64_t gen_seed = 0;
    std::string gen_site = "site1";
    bool gen_external = false;
    double gen_missing = 0.0;
    gen->add_option("--out", gen_out, "dataset root")->required();
    gen->add_option("--count", gen_count, "number of slices");
    gen->add_option("--seed", gen_seed, "generator and split seed");
    gen->add_option("--site", gen_site, "site preset")->check(CLI::IsMember({"site1", "site2", "site3"}));
    gen->add_flag("--external", gen_external, "place every slice in the test split");
    gen->add_option("--missing-prob", gen_missing, "probability that a non-T1 sequence is absent");

    // build-prior
    auto* bprior = app.add_subcommand("build-prior", "Lesion-frequency prior from the train split");
    std::string bp_data, bp_out;
    bprior->add_option("--data", bp_data, "dataset root")->required();
    bprior->add_option("--out", bp_out, "output file (prior.bin)");

    // build-variance
    auto* bvar = app.add_subcommand("build-variance", "Per-class noise variances from the train split");
    std::string bv_data, bv_out;
    double bv_kappa = decoder::kDefaultKappaMax;
    bvar->add_option("--data", bv_data, "dataset root")->required();
    bvar->add_option("--out", bv_out, "output file (variance.json)");
    bvar->add_option("--kappa-max", bv_kappa, "largest variance");

    // train
    auto* tr = app.add_subcommand("train", "Train a model");
    std::string tr_data, tr_out, tr_prior, tr_var;
    bool tr_resume = false;
    ConfigArgs tr_cfg;
    tr->add_option("--data", tr_data, "dataset root")->required();
    tr->add_option("--out", tr_out, "run directory");
    tr->add_option("--prior", tr_prior, "precomputed prior.bin");
    tr->add_option("--variance", tr_var, "precomputed variance.json");
    tr->add_flag("--resume", tr_resume, "continue from <out>/last");
    tr_cfg.attach(tr);

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    std::string ev_ckpt, ev_data, ev_out, ev_split = "test", ev_provider;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
    ev->add_option("--data", ev_data, "dataset root")->required();
    ev->add_option("--split", ev_split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
    ev->add_option("--out", ev_out, "report directory");
    ev->add_option("--provider", ev_provider, "text provider spec; must match the checkpoint");

    // predict
    auto* pr = app.add_subcommand("predict", "Segment one slice and render an overlay");
    std::string pr_ckpt, pr_sample, pr_out;
    pr->add_option("--checkpoint", pr_ckpt, "checkpoint directory")->required();
    pr->add_option("--sample", pr_sample, "slice directory (channels.bin, optional report.json)")->required();
    pr->add_option("--out", pr_out, "output directory");

    // ablate
    auto* ab = app.add_subcommand("ablate", "CAM/TPM grid and prompt-template comparison");
    std::string ab_data, ab_out, ab_seeds = "0,1,2";
    ConfigArgs ab_cfg;
    ab->add_option("--data", ab_data, "dataset root")->required();
    ab->add_option("--out", ab_out, "output directory");
    ab->add_option("--seeds", ab_seeds, "comma-separated seeds");
    ab_cfg.attach(ab);

    // sweep
    auto* sw = app.add_subcommand("sweep", "DSC against training-sample fraction");
    std::string sw_data, sw_out, sw_fracs = "0.05,0.1,0.2,0.3,1.0";
    ConfigArgs sw_cfg;
    sw->add_option("--data", sw_data, "dataset root")->required();
    sw->add_option("--out", sw_out, "output directory");
    sw->add_option("--fractions", sw_fracs, "comma-separated fractions");
    sw_cfg.attach(sw);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            auto pc = data::PhantomConfig::for_site(gen_site);
            pc.count = gen_count;
            pc.seed = gen_seed;
            pc.channel_missing_prob = gen_missing;
            auto samples = data::generate_phantoms(pc);
            std::vector<data::LesionMask> masks;
            for (const auto& s : samples) masks.push_back(s.mask);
            std::vector<data::PhantomSample> kept;
            for (auto i : data::filter_slices(masks)) kept.push_back(std::move(samples[i]));
            const auto root = resolve_out(gen_out, "data");
            auto index = data::export_dataset(root, kept, gen_seed, gen_external);
            std::cout << "wrote " << index.entries.size() << " slices to " << root.string() << "\n";
        } else if (*bprior) {
            auto index = data::load_dataset(bp_data);
            auto prior = text::build_spatial_prior(harness::masks_of(harness::load_split(index, data::Split::train)));
            const auto out = resolve_out(bp_out, "prior.bin");
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            text::save_prior(out, prior);
            std::cout << "prior from " << prior.support_count << " masks" << (prior.fallback ? " (uniform fallback)" : "")
                      << " -> " << out.string() << "\n";
        } else if (*bvar) {
            auto index = data::load_dataset(bv_data);
            auto table =
                decoder::build_variance_table(harness::masks_of(harness::load_split(index, data::Split::train)), bv_kappa);
            const auto out = resolve_out(bv_out, "variance.json");
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            table.save_json(out);
            for (const auto& w : table.warnings) std::cerr << "warning: " << w << "\n";
            std::cout << "variance table -> " << out.string() << "\n";
        } else if (*tr) {
            const auto cfg = tr_cfg.build();
            auto index = data::load_dataset(tr_data, cfg.mode() == data::PromptMode::expert && cfg.effective_tpm());
            harness::TrainOptions opts;
            opts.out_dir = resolve_out(tr_out, "train");
            opts.resume = tr_resume;
            if (!tr_prior.empty()) opts.prior_path = tr_prior;
            if (!tr_var.empty()) opts.variance_path = tr_var;
            opts.log = &std::cout;
            auto res = harness::train(cfg, index, opts);
            std::cout << "best epoch " << res.best_epoch << " val_dsc " << res.best_val_dsc << " -> "
                      << res.best_dir.string() << "\n";
        } else if (*ev) {
            auto index = data::load_dataset(ev_data);
            auto samples = harness::load_split(index, data::parse_split(ev_split));
            std::optional<std::string> prov;
            if (!ev_provider.empty()) prov = ev_provider;
            auto rep = harness::evaluate_checkpoint(ev_ckpt, samples, prov);
            const auto out = resolve_out(ev_out, "eval");
            rep.write_csv(out / "metrics.csv");
            rep.write_summary_csv(out / "summary.csv");
            rep.write_json(out / "report.json");
            std::cout << rep.rows.size() << " rows, mean DSC " << report::fmt(rep.mean_dsc()) << " -> " << out.string()
                      << "\n";
        } else if (*pr) {
            auto lc = harness::load_checkpoint(pr_ckpt);
            auto sample = sample_from_dir(pr_sample);
            auto p = harness::predict(*lc.session, sample);
            const auto out = resolve_out(pr_out, "predict");
            harness::write_prediction(out, sample, p);
            std::cout << "prediction for " << sample.slice.slice_id << " -> " << out.string() << "\n";
        } else if (*ab) {
            const auto cfg = ab_cfg.build();
            auto index = data::load_dataset(ab_data);
            const auto out = resolve_out(ab_out, "ablate");
            auto res = harness::ablate(cfg, index, parse_list<std::uint64_t>(ab_seeds), out, &std::cout);
            std::cout << res.runs.size() << " runs (" << res.unique_trainings << " trainings) -> " << out.string()
                      << "\n";
        } else if (*sw) {
            const auto cfg = sw_cfg.build();
            auto index = data::load_dataset(sw_data);
            const auto out = resolve_out(sw_out, "sweep");
            auto pts = harness::sweep(cfg, index, parse_list<double>(sw_fracs), out, &std::cout);
            std::cout << pts.size() << " curve rows -> " << out.string() << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
