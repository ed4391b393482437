#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pgsam/config.hpp"
#include "pgsam/data.hpp"
#include "pgsam/decoder.hpp"
#include "pgsam/io.hpp"
#include "pgsam/model.hpp"
#include "pgsam/report.hpp"
#include "pgsam/text.hpp"

namespace pgsam::harness {

/// Single-threaded intra-op execution; results are reproducible bit for bit on one platform.
void init_runtime();

using Samples = std::vector<data::LoadedSample>;

Samples load_split(const data::DatasetIndex& index, data::Split split);

struct Batch {
    torch::Tensor images;     // [B, c, S, S]
    torch::Tensor available;  // [B, c] bool
    torch::Tensor gt;         // [B, S, S] float in {0,1}
    std::vector<const data::LoadedSample*> samples;
};
Batch make_batch(const std::vector<const data::LoadedSample*>& samples, int64_t sequences);

/// First round(f*n) entries of one seeded permutation, so smaller fractions are subsets of larger ones.
std::vector<std::size_t> fraction_subset(std::size_t n, double fraction, std::uint64_t seed);

std::vector<data::LesionMask> masks_of(const Samples& samples);

/// Model, optimizer, text provider and the offline training artifacts for one run.
struct Session {
    RunConfig cfg;
    model::PGSAM model{nullptr};
    std::unique_ptr<torch::optim::AdamW> optimizer;
    std::unique_ptr<text::TextProvider> provider;  // null when the text pathway is off
    decoder::VarianceTable table;
    std::map<std::string, torch::Tensor> text_cache;

    /// [B, d_t] embeddings for the batch, or an undefined tensor without the text pathway.
    torch::Tensor text_for(const std::vector<const data::LoadedSample*>& samples);
    std::string provider_id() const { return provider ? provider->id() : "none"; }
};

/// Seeds torch from cfg.seed, then builds the model and optimizer.
std::unique_ptr<Session> make_session(const RunConfig& cfg, const text::SpatialPriorMask& prior,
                                      const decoder::VarianceTable& table);

struct StepResult {
    double total = 0, dec1 = 0, dec2 = 0, prompt = 0;
};
/// One optimizer step; CMAttn noise is drawn from a generator seeded by `noise_seed`.
StepResult train_step(Session& s, const Batch& batch, std::uint64_t noise_seed, double lr);

struct EpochLog {
    int64_t epoch = 0;
    double loss = 0, dec1 = 0, dec2 = 0, prompt = 0;
    double val_dsc = 0;
    double lr = 0;
};

struct TrainOptions {
    std::filesystem::path out_dir;
    /// Continue from `<out_dir>/last` if it exists.
    bool resume = false;
    std::optional<std::filesystem::path> prior_path;
    std::optional<std::filesystem::path> variance_path;
    std::ostream* log = nullptr;
};

struct TrainResult {
    std::vector<EpochLog> history;
    int64_t best_epoch = -1;
    double best_val_dsc = -1.0;
    bool early_stopped = false;
    std::size_t train_count = 0;
    std::filesystem::path best_dir, last_dir;
};

/// Trains on cfg.sample_fraction of `train`, selects by validation mean DSC, writes
/// `<out>/best`, `<out>/last` and `<out>/train_log.csv`.
TrainResult train(const RunConfig& cfg, const Samples& train, const Samples& val, const TrainOptions& opts);
TrainResult train(const RunConfig& cfg, const data::DatasetIndex& index, const TrainOptions& opts);

/// Final masks thresholded at 0.5; one row per available sequence of every sample.
report::MetricReport evaluate(Session& s, const Samples& samples);
/// Mean DSC over all evaluated (slice, sequence) pairs.
double mean_dsc(Session& s, const Samples& samples);

// Checkpoint directory: weights.{manifest,bin}, optimizer.pt, meta.json, variance.json, prior.bin.
void save_checkpoint(Session& s, const std::filesystem::path& dir, int64_t epoch,
                     const std::map<std::string, double>& extra = {});
struct LoadedCheckpoint {
    std::unique_ptr<Session> session;
    int64_t epoch = 0;
    std::string provider_id;
    std::map<std::string, double> extra;
};
/// With `provider_override`, the provider is rebuilt from that spec and must report the recorded id.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir,
                                 const std::optional<std::string>& provider_override = std::nullopt);

report::MetricReport evaluate_checkpoint(const std::filesystem::path& dir, const Samples& samples,
                                         const std::optional<std::string>& provider_override = std::nullopt);

struct AblationRun {
    std::string table;  // "module" or "prompt"
    bool cam = false, tpm = false;
    std::string prompt;
    std::uint64_t seed = 0;
    std::string run_key;
    double mean_dsc = 0;
};
struct AblationResult {
    std::vector<report::AblationCell> module_cells, prompt_cells;
    std::vector<AblationRun> runs;
    std::size_t unique_trainings = 0;
};
/// 2x2 CAM/TPM grid plus every prompt mode, each under every seed. Configurations shared between
/// the two tables are trained once per seed. Writes modules.csv, prompts.csv and runs.csv to `out_dir`.
AblationResult ablate(const RunConfig& base, const data::DatasetIndex& index, const std::vector<std::uint64_t>& seeds,
                      const std::filesystem::path& out_dir, std::ostream* log = nullptr);

struct SweepPoint {
    double fraction = 0;
    std::size_t train_count = 0;
    std::string site, modality;
    double dsc = 0;
};
/// Nested training subsets of the train split; evaluation on the test split. Writes curve.csv and curve.png.
std::vector<SweepPoint> sweep(const RunConfig& base, const data::DatasetIndex& index,
                              const std::vector<double>& fractions, const std::filesystem::path& out_dir,
                              std::ostream* log = nullptr);

struct Prediction {
    decoder::SegmentationOutput seg;  // [c, 1, S, S]
    std::optional<text::PromptSet> prompts;
    std::vector<bool> available;
};
Prediction predict(Session& s, const data::LoadedSample& sample);
/// Writes mask_<seq>.png per available sequence, overlay.png and prediction.json.
void write_prediction(const std::filesystem::path& out_dir, const data::LoadedSample& sample, const Prediction& p);
/// Side-by-side panels of each available sequence with the mask blended in red.
io::RgbImage render_overlay(const data::MultiSequenceSlice& slice, const std::vector<BinaryGrid>& masks);

/// Line chart of DSC against training fraction, one line per site.
io::RgbImage render_curve(const std::vector<SweepPoint>& points);

}  // namespace pgsam::harness
