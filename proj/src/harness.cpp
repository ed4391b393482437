#include "pgsam/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pgsam/metrics.hpp"
#include "pgsam/rng.hpp"
#include "pgsam/tensor_util.hpp"
#include "pgsam/weights.hpp"

namespace fs = std::filesystem;

namespace pgsam::harness {

namespace {

constexpr int64_t kEvalBatch = 8;
constexpr std::uint64_t kNoiseStream = 0x6e6f697365;  // "noise"
constexpr std::uint64_t kAugmentStream = 0x61756700;

void say(std::ostream* log, const std::string& line) {
    if (log) *log << line << std::endl;
}

std::string fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_text(const fs::path& path, const std::string& s) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << s;
}

double schedule(const RunConfig& cfg, int64_t step, int64_t total) {
    if (cfg.lr_schedule == "constant" || total <= 1) return cfg.lr;
    return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total)));
}

void write_log(const fs::path& path, const std::vector<EpochLog>& h) {
    std::ostringstream os;
    os << "epoch,loss,l_dec1,l_dec2,l_prompt,val_dsc,lr\n";
    for (const auto& e : h)
        os << e.epoch << "," << fixed(e.loss, 8) << "," << fixed(e.dec1, 8) << "," << fixed(e.dec2, 8) << ","
           << fixed(e.prompt, 8) << "," << fixed(e.val_dsc, 8) << "," << fixed(e.lr, 10) << "\n";
    write_text(path, os.str());
}

std::vector<EpochLog> read_log(const fs::path& path) {
    std::vector<EpochLog> out;
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string f;
        std::vector<double> v;
        while (std::getline(ls, f, ',')) v.push_back(std::stod(f));
        if (v.size() != 7) continue;
        out.push_back({int64_t(v[0]), v[1], v[2], v[3], v[4], v[5], v[6]});
    }
    return out;
}

}  // namespace

void init_runtime() {
    static const bool done = [] {
        at::set_num_threads(1);
        at::set_num_interop_threads(1);
        return true;
    }();
    (void)done;
}

Samples load_split(const data::DatasetIndex& index, data::Split split) {
    Samples out;
    for (const auto* e : index.split(split)) out.push_back(data::load_sample(*e));
    return out;
}

Batch make_batch(const std::vector<const data::LoadedSample*>& samples, int64_t sequences) {
    if (samples.empty()) throw ContractViolation("make_batch: empty batch");
    Batch b;
    std::vector<torch::Tensor> imgs, gts;
    auto avail = torch::zeros({int64_t(samples.size()), sequences}, torch::kBool);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = *samples[i];
        if (int64_t(s.slice.channels.size()) != sequences)
            throw ValidationError("slice " + s.slice.slice_id + " has " + std::to_string(s.slice.channels.size()) +
                                  " channels, the model expects " + std::to_string(sequences));
        imgs.push_back(to_tensor(s.slice));
        gts.push_back(to_tensor(s.mask.pixels));
        for (int64_t c = 0; c < sequences; ++c) avail[i][c] = bool(s.slice.available[c]);
    }
    b.images = torch::stack(imgs);
    b.gt = torch::stack(gts);
    b.available = avail;
    b.samples = samples;
    return b;
}

std::vector<std::size_t> fraction_subset(std::size_t n, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("sample fraction must lie in (0,1]");
    const auto k = static_cast<std::size_t>(std::llround(fraction * double(n)));
    if (k == 0)
        throw ConfigError("sample fraction " + fixed(fraction, 4) + " of " + std::to_string(n) +
                          " training samples selects nothing");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x73756273));  // "subs"
    shuffle(order.begin(), order.end(), rng);
    order.resize(k);
    return order;
}

std::vector<data::LesionMask> masks_of(const Samples& samples) {
    std::vector<data::LesionMask> out;
    for (const auto& s : samples) out.push_back(s.mask);
    return out;
}

torch::Tensor Session::text_for(const std::vector<const data::LoadedSample*>& samples) {
    if (!provider) return {};
    const auto mode = cfg.mode();
    std::vector<torch::Tensor> rows;
    for (const auto* s : samples) {
        if (mode == data::PromptMode::expert && !s->report)
            throw ValidationError("slice " + s->slice.slice_id + " has no expert report but the text prompt needs one");
        const auto txt = data::prompt_text(mode, s->report ? &*s->report : nullptr);
        auto it = text_cache.find(txt);
        if (it == text_cache.end()) {
            auto e = provider->embed(txt);
            if (e.vector.numel() != cfg.text_dim)
                throw ConfigError("provider " + provider->id() + " yields dimension " +
                                  std::to_string(e.vector.numel()) + " but text_dim is " +
                                  std::to_string(cfg.text_dim));
            it = text_cache.emplace(txt, e.vector).first;
        }
        rows.push_back(it->second);
    }
    return torch::stack(rows);
}

std::unique_ptr<Session> make_session(const RunConfig& cfg, const text::SpatialPriorMask& prior,
                                      const decoder::VarianceTable& table) {
    cfg.validate();
    auto s = std::make_unique<Session>();
    s->cfg = cfg;
    s->table = table;
    if (cfg.effective_tpm()) s->provider = text::make_provider(cfg.provider);
    torch::manual_seed(cfg.seed);
    s->model = model::PGSAM(cfg.model_config());
    s->model->set_prior(prior);
    s->optimizer = std::make_unique<torch::optim::AdamW>(
        s->model->trainable_parameters(),
        torch::optim::AdamWOptions(cfg.lr).betas({cfg.beta1, cfg.beta2}).weight_decay(cfg.weight_decay));
    return s;
}

StepResult train_step(Session& s, const Batch& batch, std::uint64_t noise_seed, double lr) {
    s.model->train();
    for (auto& g : s.optimizer->param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
    auto text = s.text_for(batch.samples);
    model::TrainingInputs ti;
    ti.gt = batch.gt;
    ti.table = &s.table;
    ti.gen = at::make_generator<at::CPUGeneratorImpl>(noise_seed);
    auto out = s.model->forward(batch.images, text, &ti);
    auto parts = model::compute_loss(out, batch.gt, batch.available, s.cfg.loss_w, s.cfg.loss_beta, s.cfg.dice_smooth);
    check_finite(parts.total, "training loss");
    s.optimizer->zero_grad();
    parts.total.backward();
    s.optimizer->step();
    return {parts.total.item<double>(), parts.dec1.item<double>(), parts.dec2.item<double>(),
            parts.prompt.item<double>()};
}

report::MetricReport evaluate(Session& s, const Samples& samples) {
    report::MetricReport rep;
    s.model->eval();
    torch::NoGradGuard ng;
    const auto c = s.model->config().sequences;
    for (std::size_t start = 0; start < samples.size(); start += kEvalBatch) {
        std::vector<const data::LoadedSample*> chunk;
        for (std::size_t i = start; i < std::min(samples.size(), start + kEvalBatch); ++i) chunk.push_back(&samples[i]);
        auto batch = make_batch(chunk, c);
        auto out = s.model->forward(batch.images, s.text_for(chunk));
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            const auto& smp = *chunk[b];
            for (int64_t q = 0; q < c; ++q) {
                if (!smp.slice.available[q]) continue;
                auto pred = to_binary(out.seg.final_mask[int64_t(b) * c + q][0], 0.5);
                const auto& gt = smp.mask.pixels;
                const auto cc = metrics::confusion(pred, gt);
                report::MetricRow r;
                r.site = smp.slice.site_id;
                r.modality = q < int64_t(data::kSequenceNames.size()) ? data::kSequenceNames[q] : "S" + std::to_string(q);
                r.slice_id = smp.slice.slice_id;
                r.dsc = metrics::dsc(pred, gt);
                r.hd95 = metrics::hd95(pred, gt);
                r.acc = metrics::accuracy(cc);
                r.rec = metrics::recall(cc);
                rep.rows.push_back(std::move(r));
            }
        }
    }
    return rep;
}

double mean_dsc(Session& s, const Samples& samples) { return evaluate(s, samples).mean_dsc(); }

void save_checkpoint(Session& s, const fs::path& dir, int64_t epoch, const std::map<std::string, double>& extra) {
    fs::create_directories(dir);
    weights::NamedTensors tensors;
    for (auto& [k, t] : s.model->trainable_named()) tensors.emplace_back(k, t.detach());
    tensors.emplace_back("prior", s.model->prior);
    weights::write_bundle(dir / "weights", tensors);
    {
        torch::serialize::OutputArchive ar;
        s.optimizer->save(ar);
        ar.save_to((dir / "optimizer.pt").string());
    }
    s.table.save_json(dir / "variance.json");
    text::save_prior(dir / "prior.bin", s.model->prior_mask());
    nlohmann::json meta;
    meta["config"] = s.cfg.to_map();
    meta["provider_id"] = s.provider_id();
    meta["epoch"] = epoch;
    meta["frozen_fingerprint"] = s.model->frozen_fingerprint();
    meta["extra"] = extra;
    write_text(dir / "meta.json", meta.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir, const std::optional<std::string>& provider_override) {
    std::ifstream is(dir / "meta.json");
    if (!is) throw ValidationError("no checkpoint at " + dir.string());
    const auto meta = nlohmann::json::parse(is);
    RunConfig cfg;
    for (const auto& [k, v] : meta.at("config").items()) cfg.set(k, v.get<std::string>());
    const auto recorded_provider = meta.at("provider_id").get<std::string>();
    if (provider_override) cfg.provider = *provider_override;

    auto table = decoder::VarianceTable::load_json(dir / "variance.json");
    auto prior = text::load_prior(dir / "prior.bin");
    LoadedCheckpoint lc;
    lc.session = make_session(cfg, prior, table);
    auto& s = *lc.session;
    if (s.provider_id() != recorded_provider)
        throw ProviderError("checkpoint was trained with text provider '" + recorded_provider + "' but '" +
                            s.provider_id() + "' is configured; refusing to mix providers");
    if (s.model->frozen_fingerprint() != meta.at("frozen_fingerprint").get<std::string>())
        throw ValidationError("frozen backbone differs from the one recorded in " + dir.string());

    auto tensors = weights::read_bundle(dir / "weights");
    std::map<std::string, torch::Tensor> by_name(tensors.begin(), tensors.end());
    torch::NoGradGuard ng;
    for (auto& [k, t] : s.model->trainable_named()) {
        auto it = by_name.find(k);
        if (it == by_name.end()) throw ValidationError("checkpoint is missing tensor " + k);
        if (it->second.sizes() != t.sizes()) throw ValidationError("checkpoint tensor " + k + " has the wrong shape");
        t.copy_(it->second);
        by_name.erase(it);
    }
    auto pit = by_name.find("prior");
    if (pit == by_name.end()) throw ValidationError("checkpoint is missing the prior");
    s.model->prior.copy_(pit->second);
    by_name.erase(pit);
    if (!by_name.empty()) throw ValidationError("checkpoint has unexpected tensor " + by_name.begin()->first);

    if (fs::exists(dir / "optimizer.pt")) {
        torch::serialize::InputArchive ar;
        ar.load_from((dir / "optimizer.pt").string());
        s.optimizer->load(ar);
    }
    lc.epoch = meta.at("epoch").get<int64_t>();
    lc.provider_id = recorded_provider;
    if (meta.contains("extra")) lc.extra = meta["extra"].get<std::map<std::string, double>>();
    return lc;
}

report::MetricReport evaluate_checkpoint(const fs::path& dir, const Samples& samples,
                                         const std::optional<std::string>& provider_override) {
    auto lc = load_checkpoint(dir, provider_override);
    return evaluate(*lc.session, samples);
}

TrainResult train(const RunConfig& cfg, const Samples& train_all, const Samples& val, const TrainOptions& opts) {
    cfg.validate();
    const auto subset = fraction_subset(train_all.size(), cfg.sample_fraction, cfg.seed);
    Samples train_set;
    for (auto i : subset) train_set.push_back(train_all[i]);
    const auto masks = masks_of(train_set);

    auto prior = opts.prior_path ? text::load_prior(*opts.prior_path)
                                 : text::build_spatial_prior(masks, std::size_t(cfg.image_size));
    auto table = opts.variance_path ? decoder::VarianceTable::load_json(*opts.variance_path)
                                    : decoder::build_variance_table(masks, cfg.kappa_max);
    fs::create_directories(opts.out_dir);
    cfg.save(opts.out_dir / "config.txt");

    TrainResult res;
    res.train_count = train_set.size();
    res.best_dir = opts.out_dir / "best";
    res.last_dir = opts.out_dir / "last";

    std::unique_ptr<Session> session;
    int64_t start_epoch = 0, bad_epochs = 0;
    if (opts.resume && fs::exists(res.last_dir / "meta.json")) {
        auto lc = load_checkpoint(res.last_dir);
        session = std::move(lc.session);
        start_epoch = lc.epoch + 1;
        res.best_val_dsc = lc.extra.at("best_val_dsc");
        res.best_epoch = int64_t(lc.extra.at("best_epoch"));
        bad_epochs = int64_t(lc.extra.at("bad_epochs"));
        for (const auto& e : read_log(opts.out_dir / "train_log.csv"))
            if (e.epoch < start_epoch) res.history.push_back(e);
        say(opts.log, "resuming at epoch " + std::to_string(start_epoch));
        if (bad_epochs >= cfg.patience) {
            res.early_stopped = true;
            return res;
        }
    } else {
        session = make_session(cfg, prior, table);
    }
    auto& s = *session;

    const auto n = int64_t(train_set.size());
    const auto bs = cfg.batch_size;
    const auto steps_per_epoch = (n + bs - 1) / bs;
    const auto total_steps = steps_per_epoch * cfg.max_epochs;
    const auto c = s.model->config().sequences;

    for (int64_t epoch = start_epoch; epoch < cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order(train_set.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(mix_seed(cfg.seed, std::uint64_t(epoch) + 1));
        shuffle(order.begin(), order.end(), rng);

        EpochLog log;
        log.epoch = epoch;
        for (int64_t step = 0; step < steps_per_epoch; ++step) {
            Samples augmented;
            std::vector<const data::LoadedSample*> chunk;
            for (int64_t i = step * bs; i < std::min(n, (step + 1) * bs); ++i) {
                const auto& smp = train_set[order[std::size_t(i)]];
                if (cfg.augment) {
                    auto a = smp;
                    std::tie(a.slice, a.mask) = data::augment(
                        smp.slice, smp.mask, mix_seed(mix_seed(cfg.seed ^ kAugmentStream, std::uint64_t(epoch)), i));
                    augmented.push_back(std::move(a));
                } else {
                    chunk.push_back(&smp);
                }
            }
            if (cfg.augment)
                for (const auto& a : augmented) chunk.push_back(&a);
            const auto global_step = epoch * steps_per_epoch + step;
            log.lr = schedule(cfg, global_step, total_steps);
            StepResult r;
            try {
                r = train_step(s, make_batch(chunk, c),
                               mix_seed(mix_seed(cfg.seed ^ kNoiseStream, std::uint64_t(epoch)), std::uint64_t(step)),
                               log.lr);
            } catch (const NumericalError& e) {
                const auto diag = opts.out_dir / "diverged";
                save_checkpoint(s, diag, epoch, {{"step", double(step)}});
                nlohmann::json info;
                info["error"] = e.what();
                info["epoch"] = epoch;
                info["step"] = step;
                info["lr"] = log.lr;
                std::vector<std::string> ids;
                for (const auto* p : chunk) ids.push_back(p->slice.slice_id);
                info["slices"] = ids;
                write_text(diag / "diagnostic.json", info.dump(2) + "\n");
                throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(step) + "; snapshot in " + diag.string());
            }
            const double w = double(chunk.size()) / double(n);
            log.loss += w * r.total;
            log.dec1 += w * r.dec1;
            log.dec2 += w * r.dec2;
            log.prompt += w * r.prompt;
        }
        log.val_dsc = val.empty() ? 0.0 : mean_dsc(s, val);
        res.history.push_back(log);

        const bool improved = val.empty() || log.val_dsc > res.best_val_dsc;
        if (improved) {
            res.best_val_dsc = log.val_dsc;
            res.best_epoch = epoch;
            bad_epochs = 0;
            save_checkpoint(s, res.best_dir, epoch);
        } else {
            ++bad_epochs;
        }
        save_checkpoint(s, res.last_dir, epoch,
                        {{"best_val_dsc", res.best_val_dsc},
                         {"best_epoch", double(res.best_epoch)},
                         {"bad_epochs", double(bad_epochs)}});
        write_log(opts.out_dir / "train_log.csv", res.history);
        say(opts.log, "epoch " + std::to_string(epoch) + " loss " + fixed(log.loss, 4) + " (dec1 " +
                          fixed(log.dec1, 4) + ", dec2 " + fixed(log.dec2, 4) + ", prompt " + fixed(log.prompt, 4) +
                          ") val_dsc " + fixed(log.val_dsc, 4));
        if (bad_epochs >= cfg.patience) {
            res.early_stopped = true;
            say(opts.log, "early stop: no validation improvement for " + std::to_string(bad_epochs) + " epochs");
            break;
        }
    }
    return res;
}

TrainResult train(const RunConfig& cfg, const data::DatasetIndex& index, const TrainOptions& opts) {
    return train(cfg, load_split(index, data::Split::train), load_split(index, data::Split::val), opts);
}

namespace {

std::string run_key(const RunConfig& c) {
    const bool tpm = c.effective_tpm();
    return std::string("cam") + (c.cam ? "1" : "0") + "_tpm" + (tpm ? "1" : "0") + "_" +
           (tpm ? c.prompt_mode : std::string("none"));
}

template <typename KeyFn>
std::vector<report::AblationCell> average_cells(const std::vector<std::pair<report::AblationCell, report::MetricReport>>& runs,
                                                KeyFn key) {
    std::map<std::string, std::pair<report::AblationCell, std::vector<double>>> acc;
    std::vector<std::string> order;
    for (const auto& [proto, rep] : runs)
        for (const auto& a : rep.aggregates()) {
            auto cell = proto;
            cell.site = a.site;
            cell.modality = a.modality;
            const auto k = key(cell);
            auto it = acc.find(k);
            if (it == acc.end()) {
                it = acc.emplace(k, std::make_pair(cell, std::vector<double>{})).first;
                order.push_back(k);
            }
            it->second.second.push_back(a.dsc);
        }
    std::vector<report::AblationCell> out;
    for (const auto& k : order) {
        auto [cell, v] = acc.at(k);
        double sum = 0;
        for (double d : v) sum += d;
        cell.dsc = sum / double(v.size());
        cell.seeds = v.size();
        out.push_back(cell);
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.site != b.site) return a.site < b.site;
        return report::modality_rank(a.modality) < report::modality_rank(b.modality);
    });
    return out;
}

}  // namespace

AblationResult ablate(const RunConfig& base, const data::DatasetIndex& index, const std::vector<std::uint64_t>& seeds,
                      const fs::path& out_dir, std::ostream* log) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    const auto train_set = load_split(index, data::Split::train);
    const auto val_set = load_split(index, data::Split::val);
    const auto test_set = load_split(index, data::Split::test);
    const std::string full_prompt =
        base.mode() == data::PromptMode::none ? std::string("expert") : base.prompt_mode;

    struct Variant {
        std::string table;
        bool cam, tpm;
        std::string prompt;
    };
    std::vector<Variant> variants;
    for (bool cam : {false, true})
        for (bool tpm : {false, true}) variants.push_back({"module", cam, tpm, tpm ? full_prompt : "none"});
    for (auto m : data::all_prompt_modes())
        variants.push_back({"prompt", true, m != data::PromptMode::none, data::to_string(m)});

    AblationResult res;
    std::map<std::string, report::MetricReport> cache;
    std::vector<std::pair<report::AblationCell, report::MetricReport>> module_runs, prompt_runs;
    for (auto seed : seeds)
        for (const auto& v : variants) {
            auto cfg = base;
            cfg.cam = v.cam;
            cfg.tpm = v.tpm;
            cfg.prompt_mode = v.prompt;
            cfg.seed = seed;
            const auto key = run_key(cfg) + "_s" + std::to_string(seed);
            auto it = cache.find(key);
            if (it == cache.end()) {
                say(log, "ablation run " + key);
                TrainOptions opts;
                opts.out_dir = out_dir / "runs" / key;
                opts.log = log;
                auto tr = train(cfg, train_set, val_set, opts);
                it = cache.emplace(key, evaluate_checkpoint(tr.best_dir, test_set)).first;
                it->second.write_json(opts.out_dir / "test_report.json");
                ++res.unique_trainings;
            }
            report::AblationCell proto;
            proto.cam = v.cam;
            proto.tpm = v.tpm;
            proto.prompt = v.prompt;
            (v.table == "module" ? module_runs : prompt_runs).emplace_back(proto, it->second);
            res.runs.push_back({v.table, v.cam, v.tpm, v.prompt, seed, key, it->second.mean_dsc()});
        }

    res.module_cells = average_cells(module_runs, [](const report::AblationCell& c) {
        return std::string(c.cam ? "1" : "0") + (c.tpm ? "1" : "0") + "|" + c.site + "|" + c.modality;
    });
    res.prompt_cells = average_cells(prompt_runs, [](const report::AblationCell& c) {
        return c.prompt + "|" + c.site + "|" + c.modality;
    });
    report::write_module_table(out_dir / "modules.csv", res.module_cells);
    report::write_prompt_table(out_dir / "prompts.csv", res.prompt_cells);
    std::ostringstream os;
    os << "table,cam,tpm,prompt,seed,run_key,mean_dsc\n";
    for (const auto& r : res.runs)
        os << r.table << "," << (r.cam ? "on" : "off") << "," << (r.tpm ? "on" : "off") << "," << r.prompt << ","
           << r.seed << "," << r.run_key << "," << report::fmt(r.mean_dsc) << "\n";
    write_text(out_dir / "runs.csv", os.str());
    return res;
}

std::vector<SweepPoint> sweep(const RunConfig& base, const data::DatasetIndex& index,
                              const std::vector<double>& fractions, const fs::path& out_dir, std::ostream* log) {
    const auto train_set = load_split(index, data::Split::train);
    const auto val_set = load_split(index, data::Split::val);
    const auto test_set = load_split(index, data::Split::test);
    for (double f : fractions) (void)fraction_subset(train_set.size(), f, base.seed);

    std::vector<SweepPoint> points;
    for (double f : fractions) {
        auto cfg = base;
        cfg.sample_fraction = f;
        TrainOptions opts;
        opts.out_dir = out_dir / ("fraction_" + fixed(f, 2));
        opts.log = log;
        say(log, "sweep fraction " + fixed(f, 2));
        auto tr = train(cfg, train_set, val_set, opts);
        const auto rep = evaluate_checkpoint(tr.best_dir, test_set);
        rep.write_json(opts.out_dir / "test_report.json");
        for (const auto& a : rep.aggregates()) points.push_back({f, tr.train_count, a.site, a.modality, a.dsc});
    }
    std::ostringstream os;
    os << "fraction,train_count,site,modality,DSC\n";
    for (const auto& p : points)
        os << fixed(p.fraction, 2) << "," << p.train_count << "," << p.site << "," << p.modality << ","
           << report::fmt(p.dsc) << "\n";
    write_text(out_dir / "curve.csv", os.str());
    io::write_rgb_png(out_dir / "curve.png", render_curve(points));
    return points;
}

Prediction predict(Session& s, const data::LoadedSample& sample) {
    s.model->eval();
    torch::NoGradGuard ng;
    if (s.model->has_text() && s.cfg.mode() == data::PromptMode::expert && !sample.report)
        throw ValidationError("this checkpoint uses expert text prompts; a report is required for " +
                              sample.slice.slice_id);
    auto batch = make_batch({&sample}, s.model->config().sequences);
    auto out = s.model->forward(batch.images, s.text_for(batch.samples));
    Prediction p;
    p.seg = out.seg;
    if (!out.prompts.empty()) p.prompts = out.prompts.front();
    p.available = sample.slice.available;
    return p;
}

io::RgbImage render_overlay(const data::MultiSequenceSlice& slice, const std::vector<BinaryGrid>& masks) {
    std::vector<std::size_t> shown;
    for (std::size_t i = 0; i < slice.channels.size(); ++i)
        if (slice.available[i]) shown.push_back(i);
    const std::size_t gap = 4, rows = slice.rows(), cols = slice.cols();
    const std::size_t width = shown.empty() ? cols : shown.size() * cols + (shown.size() - 1) * gap;
    io::RgbImage img(rows, width, io::Rgb{0, 0, 0});
    for (std::size_t k = 0; k < shown.size(); ++k) {
        const auto& ch = slice.channels[shown[k]];
        const auto& m = masks[shown[k]];
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double g = std::clamp(double(ch(r, c)), 0.0, 1.0) * 255.0;
                io::Rgb px;
                if (m(r, c)) {
                    px.r = std::uint8_t(std::lround(0.5 * g + 127.5));
                    px.g = px.b = std::uint8_t(std::lround(0.5 * g));
                } else {
                    px.r = px.g = px.b = std::uint8_t(std::lround(g));
                }
                img(r, k * (cols + gap) + c) = px;
            }
    }
    return img;
}

void write_prediction(const fs::path& out_dir, const data::LoadedSample& sample, const Prediction& p) {
    fs::create_directories(out_dir);
    std::vector<BinaryGrid> masks;
    nlohmann::json j;
    j["slice_id"] = sample.slice.slice_id;
    for (std::size_t i = 0; i < p.available.size(); ++i) {
        masks.push_back(to_binary(p.seg.final_mask[int64_t(i)][0], 0.5));
        const auto name = i < data::kSequenceNames.size() ? data::kSequenceNames[i] : "S" + std::to_string(i);
        if (!p.available[i]) continue;
        io::write_mask_png(out_dir / ("mask_" + name + ".png"), masks.back());
        j["lesion_pixels"][name] = data::LesionMask(masks.back()).lesion_pixel_count();
    }
    io::write_rgb_png(out_dir / "overlay.png", render_overlay(sample.slice, masks));
    if (p.prompts) {
        j["prompt"]["point"] = p.prompts->point;
        j["prompt"]["bbox"] = p.prompts->bbox;
        j["prompt"]["fallback_used"] = p.prompts->fallback_used;
    } else {
        j["prompt"] = nullptr;
    }
    write_text(out_dir / "prediction.json", j.dump(2) + "\n");
}

io::RgbImage render_curve(const std::vector<SweepPoint>& points) {
    const int w = 480, h = 320, left = 40, right = 20, top = 20, bottom = 40;
    io::RgbImage img(h, w, io::Rgb{255, 255, 255});
    auto plot = [&](int x, int y, io::Rgb col) {
        if (x >= 0 && y >= 0 && x < w && y < h) img(std::size_t(y), std::size_t(x)) = col;
    };
    auto line = [&](int x0, int y0, int x1, int y1, io::Rgb col) {
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0), sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        for (;;) {
            plot(x0, y0, col);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) { err += dy; x0 += sx; }
            if (e2 <= dx) { err += dx; y0 += sy; }
        }
    };
    const io::Rgb black{0, 0, 0}, grid{220, 220, 220};
    auto px = [&](double f) { return left + int(std::lround(f * (w - left - right))); };
    auto py = [&](double d) { return h - bottom - int(std::lround(std::clamp(d, 0.0, 1.0) * (h - top - bottom))); };
    for (int k = 0; k <= 10; ++k) {
        line(px(0), py(k / 10.0), px(1), py(k / 10.0), grid);
        line(px(k / 10.0), py(0), px(k / 10.0), py(1), grid);
    }
    line(px(0), py(0), px(1), py(0), black);
    line(px(0), py(0), px(0), py(1), black);

    // Mean DSC over modalities per (site, fraction).
    std::map<std::string, std::map<double, std::pair<double, int>>> series;
    for (const auto& p : points) {
        auto& cell = series[p.site][p.fraction];
        cell.first += p.dsc;
        cell.second += 1;
    }
    const io::Rgb palette[] = {{214, 39, 40}, {31, 119, 180}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}};
    std::size_t ci = 0;
    for (const auto& [site, pts] : series) {
        const auto col = palette[ci++ % std::size(palette)];
        std::optional<std::pair<int, int>> prev;
        for (const auto& [f, sum] : pts) {
            const int x = px(f), y = py(sum.first / sum.second);
            if (prev) line(prev->first, prev->second, x, y, col);
            for (int dx = -2; dx <= 2; ++dx)
                for (int dy = -2; dy <= 2; ++dy) plot(x + dx, y + dy, col);
            prev = {x, y};
        }
    }
    return img;
}

}  // namespace pgsam::harness
