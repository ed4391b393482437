#include <fstream>
#include <cmath>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "pgsam/data.hpp"
#include "pgsam/io.hpp"
#include "pgsam/rng.hpp"

using namespace pgsam;
using namespace pgsam::data;
namespace fs = std::filesystem;

namespace {

LesionMask mask_with_count(std::size_t count, std::size_t size = 16) {
    BinaryGrid g(size, size);
    for (std::size_t i = 0; i < count; ++i) g.values()[i] = 1;
    return LesionMask(g);
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("pgsam_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Bilinear sample at half-pixel-centre coordinates, written out from the interpolation formula.
double reference_bilinear(const Image& src, double r, double c) {
    r = std::clamp(r, 0.0, double(src.rows() - 1));
    c = std::clamp(c, 0.0, double(src.cols() - 1));
    const auto r0 = std::size_t(std::floor(r)), c0 = std::size_t(std::floor(c));
    const auto r1 = std::min(r0 + 1, src.rows() - 1), c1 = std::min(c0 + 1, src.cols() - 1);
    const double a = r - double(r0), b = c - double(c0);
    return (1 - a) * (1 - b) * src(r0, c0) + (1 - a) * b * src(r0, c1) + a * (1 - b) * src(r1, c0) +
           a * b * src(r1, c1);
}

PhantomSample one_phantom(std::uint64_t seed) {
    PhantomConfig pc;
    pc.count = 1;
    pc.seed = seed;
    return generate_phantoms(pc).front();
}

}  // namespace

TEST(FilterSlices, ThresholdIsStrict) {
    std::vector<LesionMask> m = {mask_with_count(0), mask_with_count(25), mask_with_count(26)};
    EXPECT_EQ(filter_slices(m, 25), (std::vector<std::size_t>{2}));
}

TEST(FilterSlices, AllEmptyMasksGiveNothing) {
    std::vector<LesionMask> m = {mask_with_count(0), mask_with_count(0)};
    EXPECT_TRUE(filter_slices(m).empty());
}

TEST(FilterSlices, ZeroThresholdKeepsPositiveCounts) {
    std::vector<LesionMask> m = {mask_with_count(100), mask_with_count(30)};
    EXPECT_EQ(filter_slices(m, 0), (std::vector<std::size_t>{0, 1}));
}

TEST(FilterSlices, MonotoneInThreshold) {
    Rng rng(3);
    std::vector<LesionMask> m;
    for (int i = 0; i < 50; ++i) m.push_back(mask_with_count(rng.below(200)));
    std::size_t prev = m.size() + 1;
    for (int t = 0; t < 220; t += 5) {
        const auto n = filter_slices(m, t).size();
        EXPECT_LE(n, prev);
        prev = n;
    }
}

TEST(Preprocess, MinMaxEndpoints) {
    Image raw(224, 224, 0.0f);
    for (std::size_t i = 0; i < raw.size(); i += 3) raw.values()[i] = 10.0f;
    auto out = preprocess_slice(raw);
    ASSERT_EQ(out.rows(), 224u);
    for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(out.values()[i], raw.values()[i] == 10.0f ? 1.0f : 0.0f);
}

TEST(Preprocess, ConstantInputIsZero) {
    auto out = preprocess_slice(Image(100, 80, 3.5f));
    EXPECT_EQ(out, Image(224, 224, 0.0f));
}

TEST(Preprocess, NonFiniteRejected) {
    Image raw(10, 10, 1.0f);
    raw(3, 3) = std::nanf("");
    EXPECT_THROW(preprocess_slice(raw), ValidationError);
    raw(3, 3) = INFINITY;
    EXPECT_THROW(preprocess_slice(raw), ValidationError);
}

TEST(Preprocess, CheckerboardMatchesReferenceKernel) {
    Image raw(448, 448);
    for (std::size_t r = 0; r < 448; ++r)
        for (std::size_t c = 0; c < 448; ++c) raw(r, c) = float(((r / 3) + (c / 5)) % 2);
    auto resized = bilinear_resize(raw, 224, 224);
    const std::pair<std::size_t, std::size_t> probes[] = {{0, 0}, {0, 223}, {223, 0}, {223, 223}, {17, 101}};
    for (auto [r, c] : probes) {
        const double ref = reference_bilinear(raw, (r + 0.5) * 2.0 - 0.5, (c + 0.5) * 2.0 - 0.5);
        EXPECT_NEAR(resized(r, c), ref, 1e-6) << r << "," << c;
    }
    auto out = preprocess_slice(raw);
    EXPECT_EQ(out.rows(), 224u);
    EXPECT_EQ(out.cols(), 224u);
}

TEST(Preprocess, IdempotentOnPreprocessed) {
    Rng rng(1);
    Image raw(224, 224);
    for (auto& v : raw.values()) v = float(rng.uniform());
    auto once = preprocess_slice(raw);
    EXPECT_EQ(preprocess_slice(once), once);
}

TEST(Augment, IdentityAndFlipDefinitions) {
    Rng rng(2);
    Image img(5, 7);
    for (auto& v : img.values()) v = float(rng.uniform());
    EXPECT_EQ(apply_transform(img, {0, false}), img);
    auto f = apply_transform(img, {0, true});
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 7; ++c) EXPECT_EQ(f(r, c), img(r, 6 - c));
    auto four = img;
    for (int k = 0; k < 4; ++k) four = apply_transform(four, {1, false});
    EXPECT_EQ(four, img);
}

TEST(Augment, SeedSelectingIdentityLeavesInputUnchanged) {
    auto p = one_phantom(4);
    std::uint64_t seed = 0;
    while (!(DihedralTransform::from_seed(seed).quarter_turns == 0 && !DihedralTransform::from_seed(seed).flip)) ++seed;
    auto [s, m] = augment(p.slice, p.mask, seed);
    EXPECT_EQ(s.channels, p.slice.channels);
    EXPECT_EQ(m, p.mask);
}

TEST(Augment, JointTransformAndCountPreserved) {
    auto p = one_phantom(5);
    for (std::uint64_t seed = 0; seed < 16; ++seed) {
        const auto t = DihedralTransform::from_seed(seed);
        auto [s, m] = augment(p.slice, p.mask, seed);
        EXPECT_EQ(m.lesion_pixel_count(), p.mask.lesion_pixel_count());
        EXPECT_EQ(m.pixels, apply_transform(p.mask.pixels, t));
        for (std::size_t k = 0; k < s.channels.size(); ++k)
            EXPECT_EQ(s.channels[k], apply_transform(p.slice.channels[k], t));
        EXPECT_EQ(augment(p.slice, p.mask, seed).second, m);
    }
}

TEST(Phantoms, DeterministicUnderSeed) {
    PhantomConfig pc;
    pc.count = 3;
    pc.seed = 11;
    auto a = generate_phantoms(pc), b = generate_phantoms(pc);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].slice.channels, b[i].slice.channels);
        EXPECT_EQ(a[i].mask, b[i].mask);
        EXPECT_EQ(a[i].report.rendered_text, b[i].report.rendered_text);
    }
}

TEST(Phantoms, LesionAreaNearDisk) {
    // Recover the drawn radius by replaying the generator's draws.
    PhantomConfig pc;
    pc.count = 20;
    pc.seed = 9;
    auto samples = generate_phantoms(pc);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        Rng rng(mix_seed(pc.seed, i));
        (void)rng.bernoulli(pc.lesion_laterality_prior);
        const double r = rng.uniform(pc.lesion_radius_range[0], pc.lesion_radius_range[1]);
        const double area = std::numbers::pi * r * r;
        const double n = double(samples[i].mask.lesion_pixel_count());
        EXPECT_NEAR(n, area, 0.15 * area) << "sample " << i;
    }
}

TEST(Phantoms, ReportAgreesWithMask) {
    PhantomConfig pc;
    pc.count = 30;
    pc.seed = 21;
    for (const auto& s : generate_phantoms(pc)) {
        const auto& px = s.mask.pixels;
        double csum = 0;
        std::size_t n = 0, cmin = 1000, cmax = 0, rmin = 1000, rmax = 0;
        for (std::size_t r = 0; r < px.rows(); ++r)
            for (std::size_t c = 0; c < px.cols(); ++c)
                if (px(r, c)) {
                    ++n;
                    csum += double(c);
                    cmin = std::min(cmin, c);
                    cmax = std::max(cmax, c);
                    rmin = std::min(rmin, r);
                    rmax = std::max(rmax, r);
                }
        const bool left = csum / double(n) < 111.5;
        EXPECT_EQ(s.report.laterality, left ? Laterality::left : Laterality::right);
        EXPECT_DOUBLE_EQ(s.report.size_mm[0], double(cmax - cmin + 1) * kMmPerPixel);
        EXPECT_DOUBLE_EQ(s.report.size_mm[1], double(rmax - rmin + 1) * kMmPerPixel);
        EXPECT_EQ(s.report.rendered_text, render_report(s.report));
        const auto again = derive_report(s.mask, pc.image_size);
        EXPECT_EQ(again.rendered_text, s.report.rendered_text);
        for (std::size_t k = 0; k < s.slice.channels.size(); ++k) EXPECT_TRUE(s.slice.available[k]);
        s.slice.validate();
    }
}

TEST(Phantoms, LeftPosteriorPlacementReported) {
    BinaryGrid g(224, 224);
    const auto gl = gland_geometry(224)[0];
    const double cr = gl.center_row + 0.6 * gl.semi_rows, cc = gl.center_col;
    for (std::size_t r = 0; r < 224; ++r)
        for (std::size_t c = 0; c < 224; ++c)
            if ((r - cr) * (r - cr) + (c - cc) * (c - cc) <= 64.0) g(r, c) = 1;
    auto rep = derive_report(LesionMask(g), 224);
    EXPECT_EQ(rep.laterality, Laterality::left);
    EXPECT_EQ(rep.subregion, Subregion::posterior);
}

TEST(Phantoms, InfeasibleRadiusIsConfigError) {
    PhantomConfig pc;
    pc.lesion_radius_range = {10.0, 60.0};
    EXPECT_THROW(generate_phantoms(pc), ConfigError);
    pc.lesion_radius_range = {20.0, 10.0};
    EXPECT_THROW(generate_phantoms(pc), ConfigError);
}

TEST(Phantoms, MissingChannelsAreZeroAndFlagged) {
    PhantomConfig pc;
    pc.count = 20;
    pc.channel_missing_prob = 0.5;
    bool any_missing = false;
    for (const auto& s : generate_phantoms(pc)) {
        EXPECT_TRUE(s.slice.available[0]);
        for (std::size_t k = 0; k < s.slice.channels.size(); ++k)
            if (!s.slice.available[k]) {
                any_missing = true;
                EXPECT_EQ(s.slice.channels[k], Image(224, 224, 0.0f));
            }
    }
    EXPECT_TRUE(any_missing);
}

TEST(Report, ExpertTemplateVerbatim) {
    ExpertReport r;
    r.laterality = Laterality::left;
    r.subregion = Subregion::posterior;
    r.size_mm = {29, 25, 35};
    EXPECT_EQ(render_report(r),
              "This is an MRI image with a lesion located in the left posterior parotid gland, with size of "
              "29\xC3\x97" "25\xC3\x97" "35 mm.");
    r.subregion = Subregion::none;
    r.laterality = Laterality::right;
    EXPECT_EQ(render_report(r),
              "This is an MRI image with a lesion located in the right parotid gland, with size of "
              "29\xC3\x97" "25\xC3\x97" "35 mm.");
    r.size_mm[1] = 0;
    EXPECT_THROW(render_report(r), ValidationError);
}

TEST(Report, FixedTemplates) {
    EXPECT_EQ(prompt_text(PromptMode::photo, nullptr), "A photo of a parotid gland.");
    EXPECT_EQ(prompt_text(PromptMode::there_is, nullptr), "There is a parotid gland in this MRI image.");
    EXPECT_EQ(prompt_text(PromptMode::containing, nullptr),
              "An image containing the parotid gland, with the rest being background.");
    EXPECT_EQ(prompt_text(PromptMode::none, nullptr), "");
    for (auto m : all_prompt_modes()) EXPECT_EQ(parse_prompt_mode(to_string(m)), m);
}

TEST(Dataset, EmptyDirectoryGivesEmptyIndex) {
    auto root = temp_dir("empty");
    EXPECT_TRUE(load_dataset(root).entries.empty());
}

TEST(Dataset, SplitArithmeticAndRoundTrip) {
    auto root = temp_dir("split");
    PhantomConfig pc;
    pc.count = 10;
    pc.seed = 2;
    auto samples = generate_phantoms(pc);
    export_dataset(root, samples, 5);
    auto index = load_dataset(root, true);
    EXPECT_EQ(index.split(Split::train).size(), 7u);
    EXPECT_EQ(index.split(Split::val).size(), 1u);
    EXPECT_EQ(index.split(Split::test).size(), 2u);
    for (const auto& e : index.entries) {
        auto loaded = load_sample(e);
        auto it = std::find_if(samples.begin(), samples.end(),
                               [&](const PhantomSample& s) { return s.slice.slice_id == e.slice_id; });
        ASSERT_NE(it, samples.end());
        EXPECT_EQ(loaded.slice.channels, it->slice.channels);
        EXPECT_EQ(loaded.mask, it->mask);
        ASSERT_TRUE(loaded.report);
        EXPECT_EQ(loaded.report->rendered_text, it->report.rendered_text);
        EXPECT_EQ(e.site_id, "site1");
    }
}

TEST(Dataset, MissingReportNamesSlice) {
    auto root = temp_dir("noreport");
    PhantomConfig pc;
    pc.count = 3;
    auto samples = generate_phantoms(pc);
    auto index = export_dataset(root, samples, 1);
    const auto victim = index.entries.front();
    fs::remove(*victim.report_path);
    EXPECT_NO_THROW(load_dataset(root, false));
    try {
        load_dataset(root, true);
        FAIL() << "expected an indexing error";
    } catch (const IndexingError& e) {
        EXPECT_NE(std::string(e.what()).find(victim.slice_id), std::string::npos);
    }
}

TEST(Dataset, MissingMaskNamesSlice) {
    auto root = temp_dir("nomask");
    PhantomConfig pc;
    pc.count = 2;
    auto index = export_dataset(root, generate_phantoms(pc), 1);
    fs::remove(index.entries.back().mask_path);
    try {
        load_dataset(root);
        FAIL() << "expected an indexing error";
    } catch (const IndexingError& e) {
        EXPECT_NE(std::string(e.what()).find(index.entries.back().slice_id), std::string::npos);
    }
}

TEST(ChannelFile, HeaderLayout) {
    auto dir = temp_dir("mseq");
    std::vector<Image> ch = {Image(3, 2, 0.25f), Image(3, 2, 0.5f)};
    io::write_channels(dir / "c.bin", ch);
    EXPECT_EQ(fs::file_size(dir / "c.bin"), io::kChannelHeaderBytes + 2 * 3 * 2 * sizeof(float));
    std::ifstream is(dir / "c.bin", std::ios::binary);
    unsigned char h[16];
    is.read(reinterpret_cast<char*>(h), 16);
    EXPECT_EQ(std::string(reinterpret_cast<char*>(h), 4), "MSEQ");
    EXPECT_EQ(h[4] | (h[5] << 8), 1);
    EXPECT_EQ(h[6] | (h[7] << 8), 2);
    EXPECT_EQ(h[8], 3);
    EXPECT_EQ(h[12], 2);
    EXPECT_EQ(io::read_channels(dir / "c.bin"), ch);
}

TEST(MaskPng, RoundTripStores255) {
    auto dir = temp_dir("png");
    BinaryGrid m(9, 13);
    m(4, 5) = 1;
    m(0, 12) = 1;
    io::write_mask_png(dir / "m.png", m);
    EXPECT_EQ(io::read_mask_png(dir / "m.png"), m);
}

TEST(Site, PrefixOfSliceId) {
    EXPECT_EQ(site_of("site2_000013"), "site2");
    EXPECT_EQ(PhantomConfig::for_site("site3").site_id, "site3");
    EXPECT_THROW(PhantomConfig::for_site("mars"), ConfigError);
}
