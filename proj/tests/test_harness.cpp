#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "pgsam/config.hpp"
#include "pgsam/harness.hpp"
#include "pgsam/io.hpp"
#include "pgsam/report.hpp"

using namespace pgsam;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

RunConfig quick_config() {
    RunConfig c;
    c.max_epochs = 1;
    c.batch_size = 4;
    c.lr = 1e-3;
    return c;
}

class HarnessTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        harness::init_runtime();
        root_ = fs::temp_directory_path() / "pgsam_test_harness";
        fs::remove_all(root_);
        data::PhantomConfig pc;
        pc.count = 12;
        pc.seed = 3;
        index_ = data::export_dataset(root_ / "data", data::generate_phantoms(pc), 1);
        train_ = harness::load_split(index_, data::Split::train);
        val_ = harness::load_split(index_, data::Split::val);
        test_ = harness::load_split(index_, data::Split::test);
    }

    static fs::path out(const std::string& name) {
        auto p = root_ / name;
        fs::remove_all(p);
        return p;
    }

    static inline fs::path root_;
    static inline data::DatasetIndex index_;
    static inline harness::Samples train_, val_, test_;
};

}  // namespace

TEST(Config, DefaultsAndPresets) {
    RunConfig c;
    EXPECT_EQ(c.lora_rank, 5);
    EXPECT_EQ(c.beta1, 0.9);
    EXPECT_EQ(c.beta2, 0.999);
    EXPECT_EQ(c.weight_decay, 0.1);
    EXPECT_EQ(c.max_epochs, 30);
    EXPECT_EQ(RunConfig::preset("full").max_epochs, 300);
    EXPECT_THROW(RunConfig::preset("huge"), ConfigError);
}

TEST(Config, FileRoundTrip) {
    const auto path = fs::temp_directory_path() / "pgsam_test_config.txt";
    RunConfig c;
    c.set("lr", "0.0025");
    c.set("cam", "false");
    c.set("prompt_mode", "photo");
    c.set("sample_fraction", "0.2");
    c.save(path);
    auto back = RunConfig::load(path);
    EXPECT_EQ(back.to_map(), c.to_map());
    EXPECT_EQ(back.lr, 0.0025);
    EXPECT_FALSE(back.cam);
    std::ofstream(path) << "# comment\nlr = 0.5\n\nseed=9  # trailing\n";
    auto parsed = RunConfig::load(path);
    EXPECT_EQ(parsed.lr, 0.5);
    EXPECT_EQ(parsed.seed, 9u);
}

TEST(Config, Rejections) {
    RunConfig c;
    EXPECT_THROW(c.set("learning_rate", "1"), ConfigError);
    EXPECT_THROW(c.set("lr", "fast"), ConfigError);
    c.sample_fraction = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c.sample_fraction = 1.0;
    c.prompt_mode = "poem";
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, NonePromptDisablesText) {
    RunConfig c;
    c.prompt_mode = "none";
    EXPECT_FALSE(c.effective_tpm());
    EXPECT_FALSE(c.model_config().tpm);
}

TEST(Config, OutputRootFromEnvironment) {
    ::setenv("PGSAM_OUTPUT_ROOT", "/tmp/pgsam_root", 1);
    EXPECT_EQ(output_root(), fs::path("/tmp/pgsam_root"));
    ::unsetenv("PGSAM_OUTPUT_ROOT");
    EXPECT_EQ(output_root(), fs::path("."));
}

TEST(Fraction, NestedSubsetsAndCounts) {
    auto small = harness::fraction_subset(100, 0.1, 4), large = harness::fraction_subset(100, 0.2, 4);
    EXPECT_EQ(small.size(), 10u);
    EXPECT_EQ(harness::fraction_subset(100, 1.0, 4).size(), 100u);
    for (auto i : small) EXPECT_NE(std::find(large.begin(), large.end(), i), large.end());
    EXPECT_THROW(harness::fraction_subset(5, 0.05, 0), ConfigError);
    EXPECT_THROW(harness::fraction_subset(5, 1.5, 0), ConfigError);
}

TEST(Report, FormattingAndAggregates) {
    report::MetricReport r;
    r.rows.push_back({"site1", "T2", "a", 0.5, 2.0, 0.9, 1.0});
    r.rows.push_back({"site1", "T1", "a", 1.0, std::nullopt, 1.0, std::nullopt});
    r.rows.push_back({"site1", "T1", "b", 0.0, 4.0, 0.8, 0.0});
    auto aggs = r.aggregates();
    ASSERT_EQ(aggs.size(), 2u);
    EXPECT_EQ(aggs[0].modality, "T1");
    EXPECT_EQ(aggs[0].n, 2u);
    EXPECT_DOUBLE_EQ(aggs[0].dsc, 0.5);
    EXPECT_DOUBLE_EQ(*aggs[0].hd95, 4.0);
    EXPECT_EQ(aggs[0].hd95_undefined, 1u);
    EXPECT_EQ(report::fmt(1.0 / 3.0), "0.333333");
    EXPECT_EQ(report::fmt(std::optional<double>{}), "NA");
    const auto path = fs::temp_directory_path() / "pgsam_test_report.csv";
    r.write_csv(path);
    const auto csv = slurp(path);
    EXPECT_EQ(csv.rfind("# count=3\nsite,modality,slice_id,dsc,hd95,acc,rec\n", 0), 0u);
    EXPECT_NE(csv.find("site1,T1,a,1.000000,NA,1.000000,NA"), std::string::npos);
    EXPECT_NE(r.to_json().find("\"hd95\": null"), std::string::npos);
}

TEST(Report, EmptyReportHasZeroCount) {
    report::MetricReport r;
    const auto path = fs::temp_directory_path() / "pgsam_test_empty.csv";
    r.write_summary_csv(path);
    EXPECT_EQ(slurp(path).rfind("# count=0\n", 0), 0u);
    EXPECT_EQ(r.mean_dsc(), 0.0);
    EXPECT_NE(r.to_json().find("\"count\": 0"), std::string::npos);
}

TEST_F(HarnessTest, BatchLayout) {
    std::vector<const data::LoadedSample*> ptrs = {&train_[0], &train_[1]};
    auto b = harness::make_batch(ptrs, 4);
    EXPECT_EQ(b.images.sizes(), (std::vector<int64_t>{2, 4, 224, 224}));
    EXPECT_EQ(b.gt.sizes(), (std::vector<int64_t>{2, 224, 224}));
    EXPECT_TRUE(b.available.all().item<bool>());
    EXPECT_THROW(harness::make_batch(ptrs, 3), ValidationError);
}

TEST_F(HarnessTest, SmokeTrainWritesCheckpoint) {
    const auto dir = out("smoke");
    auto cfg = quick_config();
    auto res = harness::train(cfg, index_, {dir});
    ASSERT_EQ(res.history.size(), 1u);
    EXPECT_TRUE(std::isfinite(res.history[0].loss));
    for (const char* f : {"weights.manifest", "weights.bin", "optimizer.pt", "meta.json", "variance.json", "prior.bin"})
        EXPECT_TRUE(fs::exists(dir / "best" / f)) << f;
    EXPECT_TRUE(fs::exists(dir / "train_log.csv"));
    EXPECT_TRUE(fs::exists(dir / "config.txt"));
}

TEST_F(HarnessTest, SameSeedSameFirstEpochLoss) {
    auto cfg = quick_config();
    auto a = harness::train(cfg, train_, {}, {out("det_a")});
    auto b = harness::train(cfg, train_, {}, {out("det_b")});
    EXPECT_NEAR(a.history[0].loss, b.history[0].loss, 1e-6);
}

TEST_F(HarnessTest, FixedBatchLossDecreases) {
    auto cfg = quick_config();
    auto masks = harness::masks_of(train_);
    auto s = harness::make_session(cfg, text::build_spatial_prior(masks), decoder::build_variance_table(masks));
    auto batch = harness::make_batch({&train_[0], &train_[1]}, 4);
    const double first = harness::train_step(*s, batch, 1, cfg.lr).total;
    double last = first;
    for (int i = 1; i < 50; ++i) last = harness::train_step(*s, batch, 1 + i, cfg.lr).total;
    EXPECT_LT(last, first);
}

TEST_F(HarnessTest, ResumeReproducesTrajectory) {
    auto cfg = quick_config();
    cfg.lr_schedule = "constant";
    cfg.max_epochs = 2;
    auto straight = harness::train(cfg, train_, val_, {out("resume_a")});
    const auto dir = out("resume_b");
    auto first = cfg;
    first.max_epochs = 1;
    harness::train(first, train_, val_, {dir});
    harness::TrainOptions opts{dir};
    opts.resume = true;
    auto resumed = harness::train(cfg, train_, val_, opts);
    ASSERT_EQ(resumed.history.size(), 2u);
    EXPECT_NEAR(resumed.history[1].loss, straight.history[1].loss, 1e-9);
    EXPECT_EQ(resumed.history[1].val_dsc, straight.history[1].val_dsc);
}

TEST_F(HarnessTest, CheckpointRoundTripEvaluatesIdentically) {
    const auto dir = out("roundtrip");
    auto cfg = quick_config();
    auto res = harness::train(cfg, train_, {}, {dir});
    auto loaded = harness::load_checkpoint(res.last_dir);
    const auto a = harness::evaluate(*loaded.session, test_).to_json();
    const auto b = harness::evaluate_checkpoint(res.last_dir, test_).to_json();
    EXPECT_EQ(a, b);
    auto reloaded = harness::load_checkpoint(res.last_dir);
    EXPECT_EQ(harness::evaluate(*reloaded.session, test_).to_json(), a);
}

TEST_F(HarnessTest, ProviderMismatchRefused) {
    const auto dir = out("provider");
    auto res = harness::train(quick_config(), train_, {}, {dir});
    EXPECT_THROW(harness::load_checkpoint(res.last_dir, std::string("hash-bag:128")), ProviderError);
    EXPECT_NO_THROW(harness::load_checkpoint(res.last_dir, std::string("hash-bag")));
}

TEST_F(HarnessTest, EmptySplitGivesEmptyReport) {
    auto cfg = quick_config();
    auto masks = harness::masks_of(train_);
    auto s = harness::make_session(cfg, text::build_spatial_prior(masks), decoder::build_variance_table(masks));
    auto rep = harness::evaluate(*s, {});
    EXPECT_TRUE(rep.rows.empty());
}

TEST_F(HarnessTest, TextOffAcceptsMissingReports) {
    auto cfg = quick_config();
    cfg.tpm = false;
    harness::Samples no_reports = train_;
    for (auto& s : no_reports) s.report.reset();
    auto res = harness::train(cfg, no_reports, {}, {out("noreport")});
    EXPECT_EQ(res.history.size(), 1u);
    auto loaded = harness::load_checkpoint(res.last_dir);
    EXPECT_FALSE(loaded.session->provider);
    EXPECT_NO_THROW(harness::predict(*loaded.session, no_reports[0]));
}

TEST_F(HarnessTest, PredictNeedsReportWhenExpert) {
    auto res = harness::train(quick_config(), train_, {}, {out("predict")});
    auto loaded = harness::load_checkpoint(res.last_dir);
    auto sample = test_[0];
    auto p1 = harness::predict(*loaded.session, sample);
    auto p2 = harness::predict(*loaded.session, sample);
    EXPECT_TRUE(torch::equal(p1.seg.final_mask, p2.seg.final_mask));
    ASSERT_TRUE(p1.prompts);
    const auto dir = out("predict_out");
    harness::write_prediction(dir, sample, p1);
    EXPECT_TRUE(fs::exists(dir / "overlay.png"));
    EXPECT_TRUE(fs::exists(dir / "mask_T1.png"));
    EXPECT_NE(slurp(dir / "prediction.json").find("bbox"), std::string::npos);
    auto overlay = io::read_rgb_png(dir / "overlay.png");
    EXPECT_EQ(overlay.rows(), 224u);
    sample.report.reset();
    EXPECT_THROW(harness::predict(*loaded.session, sample), ValidationError);
}

TEST_F(HarnessTest, OverlayMarksMaskInRed) {
    std::vector<BinaryGrid> masks(4, BinaryGrid(224, 224));
    masks[0](10, 10) = 1;
    auto img = harness::render_overlay(train_[0].slice, masks);
    const auto px = img(10, 10);
    EXPECT_GT(px.r, px.g);
    EXPECT_EQ(img.cols(), 4u * 224u + 3u * 4u);
}

TEST_F(HarnessTest, OverfitReachesHighTrainingDsc) {
    auto cfg = quick_config();
    cfg.max_epochs = 40;
    cfg.lr = 2e-3;
    cfg.batch_size = 1;
    harness::Samples few(train_.begin(), train_.begin() + 4);
    auto res = harness::train(cfg, few, {}, {out("overfit")});
    auto loaded = harness::load_checkpoint(res.last_dir);
    EXPECT_GE(harness::mean_dsc(*loaded.session, few), 0.95);
}
