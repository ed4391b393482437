#include "pgsam/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "pgsam/io.hpp"
#include "pgsam/rng.hpp"

namespace fs = std::filesystem;

namespace pgsam::data {

void MultiSequenceSlice::validate() const {
    if (channels.empty()) throw ContractViolation("slice " + slice_id + ": no channels");
    if (available.size() != channels.size())
        throw ContractViolation("slice " + slice_id + ": availability flags do not match channel count");
    for (std::size_t k = 0; k < channels.size(); ++k) {
        const auto& ch = channels[k];
        if (!ch.same_shape(channels.front()))
            throw ContractViolation("slice " + slice_id + ": channels are not aligned");
        for (float v : ch.values()) {
            if (!(v >= 0.0f && v <= 1.0f))
                throw ContractViolation("slice " + slice_id + ": intensity outside [0,1]");
            if (!available[k] && v != 0.0f)
                throw ContractViolation("slice " + slice_id + ": unavailable channel is not zero-filled");
        }
    }
}

std::size_t LesionMask::lesion_pixel_count() const {
    return static_cast<std::size_t>(std::count_if(pixels.values().begin(), pixels.values().end(),
                                                  [](unsigned char v) { return v != 0; }));
}

std::string to_string(Laterality l) { return l == Laterality::left ? "left" : "right"; }

std::string to_string(Subregion s) {
    switch (s) {
        case Subregion::anterior: return "anterior";
        case Subregion::posterior: return "posterior";
        case Subregion::superficial: return "superficial";
        case Subregion::deep: return "deep";
        case Subregion::none: return "none";
    }
    return "none";
}

Laterality parse_laterality(const std::string& s) {
    if (s == "left") return Laterality::left;
    if (s == "right") return Laterality::right;
    throw ValidationError("unknown laterality '" + s + "'");
}

Subregion parse_subregion(const std::string& s) {
    for (auto r : {Subregion::anterior, Subregion::posterior, Subregion::superficial, Subregion::deep,
                   Subregion::none})
        if (to_string(r) == s) return r;
    throw ValidationError("unknown subregion '" + s + "'");
}

std::string to_string(PromptMode m) {
    switch (m) {
        case PromptMode::none: return "none";
        case PromptMode::photo: return "photo";
        case PromptMode::there_is: return "there-is";
        case PromptMode::containing: return "containing";
        case PromptMode::expert: return "expert";
    }
    return "none";
}

PromptMode parse_prompt_mode(const std::string& s) {
    for (auto m : all_prompt_modes())
        if (to_string(m) == s) return m;
    throw ValidationError("unknown prompt mode '" + s + "'");
}

const std::vector<PromptMode>& all_prompt_modes() {
    static const std::vector<PromptMode> modes = {PromptMode::none, PromptMode::photo, PromptMode::there_is,
                                                  PromptMode::containing, PromptMode::expert};
    return modes;
}

namespace {

std::string format_mm(double v) {
    char buf[32];
    if (std::abs(v - std::round(v)) < 1e-9)
        std::snprintf(buf, sizeof buf, "%.0f", v);
    else
        std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

}  // namespace

std::string render_report(const ExpertReport& report) {
    for (double d : report.size_mm)
        if (!(d > 0.0)) throw ValidationError("report sizes must be strictly positive");
    std::string pos = to_string(report.laterality);
    if (report.subregion != Subregion::none) pos += " " + to_string(report.subregion);
    const std::string times = "\xC3\x97";  // U+00D7 multiplication sign
    const std::string size = format_mm(report.size_mm[0]) + times + format_mm(report.size_mm[1]) + times +
                             format_mm(report.size_mm[2]);
    return "This is an MRI image with a lesion located in the " + pos + " parotid gland, with size of " + size +
           " mm.";
}

std::string prompt_text(PromptMode mode, const ExpertReport* report) {
    switch (mode) {
        case PromptMode::none: return {};
        case PromptMode::photo: return "A photo of a parotid gland.";
        case PromptMode::there_is: return "There is a parotid gland in this MRI image.";
        case PromptMode::containing: return "An image containing the parotid gland, with the rest being background.";
        case PromptMode::expert:
            if (!report) throw ValidationError("expert prompt mode requires a report");
            return render_report(*report);
    }
    return {};
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + s + "'");
}

std::vector<const DatasetEntry*> DatasetIndex::split(Split s) const {
    std::vector<const DatasetEntry*> out;
    for (const auto& e : entries)
        if (e.split == s) out.push_back(&e);
    return out;
}

std::vector<ChannelContrast> PhantomConfig::default_contrast() {
    // T1 lesion hypointense, T1C/T2 hyperintense, ADC mildly hyperintense and noisier.
    return {{-0.25, 0.05}, {0.30, 0.05}, {0.35, 0.06}, {0.15, 0.08}};
}

PhantomConfig PhantomConfig::for_site(const std::string& site) {
    PhantomConfig c;
    c.site_id = site;
    if (site == "site1") return c;
    if (site == "site2") {
        c.noise_scale = 1.5;
        c.intensity_scale = 0.9;
        return c;
    }
    if (site == "site3") {
        c.noise_scale = 1.2;
        c.intensity_scale = 0.8;
        c.lesion_radius_range = {9.0, 18.0};
        return c;
    }
    throw ConfigError("unknown site preset '" + site + "'");
}

std::array<GlandGeometry, 2> gland_geometry(std::size_t image_size) {
    const double s = static_cast<double>(image_size);
    GlandGeometry left{0.5 * s, 0.27 * s, 0.2 * s, 0.14 * s};
    GlandGeometry right{0.5 * s, 0.73 * s, 0.2 * s, 0.14 * s};
    return {left, right};
}

void PhantomConfig::validate() const {
    if (image_size < 32) throw ConfigError("phantom image_size must be at least 32");
    if (!(lesion_radius_range[0] > 0.0) || lesion_radius_range[0] > lesion_radius_range[1])
        throw ConfigError("lesion radius range must be positive and ordered");
    if (lesion_laterality_prior < 0.0 || lesion_laterality_prior > 1.0 || channel_missing_prob < 0.0 ||
        channel_missing_prob > 1.0)
        throw ConfigError("phantom probabilities must lie in [0,1]");
    if (per_channel_contrast.empty()) throw ConfigError("phantom needs at least one channel");
    const auto g = gland_geometry(image_size)[0];
    if (lesion_radius_range[1] >= std::min(g.semi_rows, g.semi_cols))
        throw ConfigError("lesion radius exceeds gland size");
}

std::vector<std::size_t> filter_slices(const std::vector<LesionMask>& masks, int threshold) {
    if (threshold < 0) throw ValidationError("filter threshold must be non-negative");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < masks.size(); ++i)
        if (masks[i].lesion_pixel_count() > static_cast<std::size_t>(threshold)) keep.push_back(i);
    return keep;
}

Image bilinear_resize(const Image& src, std::size_t out_rows, std::size_t out_cols) {
    if (src.empty()) throw ValidationError("cannot resize an empty image");
    if (src.rows() == out_rows && src.cols() == out_cols) return src;
    Image out(out_rows, out_cols);
    const double sr = static_cast<double>(src.rows()) / out_rows;
    const double sc = static_cast<double>(src.cols()) / out_cols;
    const auto axis = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& w) {
        pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
        i0 = static_cast<std::size_t>(std::floor(pos));
        i1 = std::min(i0 + 1, n - 1);
        w = pos - static_cast<double>(i0);
    };
    for (std::size_t r = 0; r < out_rows; ++r) {
        std::size_t r0, r1;
        double wr;
        axis((r + 0.5) * sr - 0.5, src.rows(), r0, r1, wr);
        for (std::size_t c = 0; c < out_cols; ++c) {
            std::size_t c0, c1;
            double wc;
            axis((c + 0.5) * sc - 0.5, src.cols(), c0, c1, wc);
            const double top = (1 - wc) * src(r0, c0) + wc * src(r0, c1);
            const double bot = (1 - wc) * src(r1, c0) + wc * src(r1, c1);
            out(r, c) = static_cast<float>((1 - wr) * top + wr * bot);
        }
    }
    return out;
}

Image preprocess_slice(const Image& raw, std::size_t out_size) {
    if (raw.empty()) throw ValidationError("preprocess: empty input");
    for (float v : raw.values())
        if (!std::isfinite(v)) throw ValidationError("preprocess: non-finite input value");
    Image out = bilinear_resize(raw, out_size, out_size);
    const auto [mn, mx] = std::minmax_element(out.values().begin(), out.values().end());
    const float lo = *mn, hi = *mx;
    if (hi == lo) return Image(out_size, out_size, 0.0f);
    for (float& v : out.values()) v = (v - lo) / (hi - lo);
    return out;
}

DihedralTransform DihedralTransform::from_seed(std::uint64_t seed) {
    Rng rng(seed);
    const auto v = rng.below(8);
    return {static_cast<int>(v % 4), v >= 4};
}

template <typename T>
Grid<T> apply_transform(const Grid<T>& g, DihedralTransform t) {
    Grid<T> cur = g;
    for (int k = 0; k < ((t.quarter_turns % 4) + 4) % 4; ++k) {
        // Counter-clockwise quarter turn.
        Grid<T> next(cur.cols(), cur.rows());
        for (std::size_t r = 0; r < next.rows(); ++r)
            for (std::size_t c = 0; c < next.cols(); ++c) next(r, c) = cur(c, cur.cols() - 1 - r);
        cur = std::move(next);
    }
    if (t.flip) {
        Grid<T> next(cur.rows(), cur.cols());
        for (std::size_t r = 0; r < cur.rows(); ++r)
            for (std::size_t c = 0; c < cur.cols(); ++c) next(r, c) = cur(r, cur.cols() - 1 - c);
        cur = std::move(next);
    }
    return cur;
}

template Grid<float> apply_transform(const Grid<float>&, DihedralTransform);
template Grid<unsigned char> apply_transform(const Grid<unsigned char>&, DihedralTransform);

std::pair<MultiSequenceSlice, LesionMask> augment(const MultiSequenceSlice& slice, const LesionMask& mask,
                                                  std::uint64_t rng_seed) {
    const auto t = DihedralTransform::from_seed(rng_seed);
    MultiSequenceSlice out = slice;
    for (auto& ch : out.channels) ch = apply_transform(ch, t);
    return {std::move(out), LesionMask(apply_transform(mask.pixels, t))};
}

ExpertReport derive_report(const LesionMask& mask, std::size_t image_size) {
    const auto& px = mask.pixels;
    std::size_t n = 0, rmin = px.rows(), rmax = 0, cmin = px.cols(), cmax = 0;
    double rsum = 0, csum = 0;
    for (std::size_t r = 0; r < px.rows(); ++r)
        for (std::size_t c = 0; c < px.cols(); ++c)
            if (px(r, c)) {
                ++n;
                rsum += r;
                csum += c;
                rmin = std::min(rmin, r);
                rmax = std::max(rmax, r);
                cmin = std::min(cmin, c);
                cmax = std::max(cmax, c);
            }
    if (n == 0) throw ValidationError("cannot derive a report from an empty mask");
    const double cr = rsum / n, cc = csum / n;
    const double mid = 0.5 * (static_cast<double>(image_size) - 1.0);

    ExpertReport rep;
    rep.laterality = cc < mid ? Laterality::left : Laterality::right;
    const auto gland = gland_geometry(image_size)[rep.laterality == Laterality::left ? 0 : 1];
    // Offsets relative to the gland center; "lateral" points away from the midline.
    const double d_row = cr - gland.center_row;
    const double d_lat = std::abs(cc - mid) - std::abs(gland.center_col - mid);
    const double dead_zone = 0.15 * std::min(gland.semi_rows, gland.semi_cols);
    if (std::max(std::abs(d_row), std::abs(d_lat)) < dead_zone)
        rep.subregion = Subregion::none;
    else if (std::abs(d_row) >= std::abs(d_lat))
        rep.subregion = d_row < 0 ? Subregion::anterior : Subregion::posterior;
    else
        rep.subregion = d_lat > 0 ? Subregion::superficial : Subregion::deep;

    const double width = static_cast<double>(cmax - cmin + 1) * kMmPerPixel;
    const double height = static_cast<double>(rmax - rmin + 1) * kMmPerPixel;
    // Through-plane extent is not observable on one slice; a round lesion is assumed.
    rep.size_mm = {width, height, std::max(width, height)};
    rep.rendered_text = render_report(rep);
    return rep;
}

std::vector<PhantomSample> generate_phantoms(const PhantomConfig& config) {
    config.validate();
    const std::size_t S = config.image_size;
    const auto glands = gland_geometry(S);
    const double mid = 0.5 * (static_cast<double>(S) - 1.0);
    const std::size_t c = config.per_channel_contrast.size();

    std::vector<PhantomSample> out;
    out.reserve(config.count);
    for (std::size_t idx = 0; idx < config.count; ++idx) {
        Rng rng(mix_seed(config.seed, idx));
        const bool left = rng.bernoulli(config.lesion_laterality_prior);
        const auto& gland = glands[left ? 0 : 1];
        const double radius = rng.uniform(config.lesion_radius_range[0], config.lesion_radius_range[1]);
        const double sr = gland.semi_rows - radius, sc = gland.semi_cols - radius;
        double dr = 0, dc = 0;
        do {
            dr = rng.uniform(-1.0, 1.0);
            dc = rng.uniform(-1.0, 1.0);
        } while (dr * dr + dc * dc > 1.0);
        const double lr = gland.center_row + dr * sr;
        const double lc = gland.center_col + dc * sc;

        BinaryGrid lesion(S, S);
        Grid<unsigned char> tissue(S, S);  // 0 background, 1 head, 2 gland
        for (std::size_t r = 0; r < S; ++r)
            for (std::size_t col = 0; col < S; ++col) {
                const double y = static_cast<double>(r), x = static_cast<double>(col);
                const double hr = (y - mid) / (0.46 * S), hc = (x - mid) / (0.42 * S);
                if (hr * hr + hc * hc <= 1.0) tissue(r, col) = 1;
                for (const auto& g : glands) {
                    const double gr = (y - g.center_row) / g.semi_rows, gc = (x - g.center_col) / g.semi_cols;
                    if (gr * gr + gc * gc <= 1.0) tissue(r, col) = 2;
                }
                if ((y - lr) * (y - lr) + (x - lc) * (x - lc) <= radius * radius) lesion(r, col) = 1;
            }

        PhantomSample s;
        s.slice.slice_id = config.site_id + "_" + [&] {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%06zu", idx);
            return std::string(buf);
        }();
        s.slice.site_id = config.site_id;
        for (std::size_t k = 0; k < c; ++k) {
            const auto& con = config.per_channel_contrast[k];
            const bool missing = k > 0 && rng.bernoulli(config.channel_missing_prob);
            Image ch(S, S);
            const double head = (0.30 + 0.04 * k) * config.intensity_scale;
            const double gl = (0.50 + 0.03 * k) * config.intensity_scale;
            const double les = gl + con.lesion_offset * config.intensity_scale;
            for (std::size_t r = 0; r < S; ++r)
                for (std::size_t col = 0; col < S; ++col) {
                    double v = 0.0;
                    if (tissue(r, col) == 1) v = head;
                    if (tissue(r, col) == 2) v = gl;
                    if (lesion(r, col)) v = les;
                    v += con.noise_std * config.noise_scale * rng.normal();
                    ch(r, col) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            if (missing) {
                s.slice.channels.emplace_back(S, S, 0.0f);
                s.slice.available.push_back(false);
            } else {
                s.slice.channels.push_back(preprocess_slice(ch, S));
                s.slice.available.push_back(true);
            }
        }
        s.mask = LesionMask(std::move(lesion));
        s.report = derive_report(s.mask, S);
        out.push_back(std::move(s));
    }
    return out;
}

std::string site_of(const std::string& slice_id) {
    const auto pos = slice_id.find('_');
    return pos == std::string::npos ? std::string("site1") : slice_id.substr(0, pos);
}

DatasetIndex export_dataset(const fs::path& root, const std::vector<PhantomSample>& samples, std::uint64_t seed,
                            bool all_to_test) {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    shuffle(order.begin(), order.end(), rng);
    const std::size_t n = samples.size();
    const auto n_train = static_cast<std::size_t>(std::llround(0.7 * n));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.1 * n)));

    DatasetIndex index;
    index.seed = seed;
    for (std::size_t rank = 0; rank < n; ++rank) {
        const auto& s = samples[order[rank]];
        Split split = rank < n_train ? Split::train : (rank < n_train + n_val ? Split::val : Split::test);
        if (all_to_test) split = Split::test;
        const fs::path dir = root / to_string(split) / s.slice.slice_id;
        fs::create_directories(dir);
        io::write_channels(dir / "channels.bin", s.slice.channels);
        io::write_mask_png(dir / "mask.png", s.mask.pixels);
        io::write_report_json(dir / "report.json", s.report, s.slice.slice_id);
        index.entries.push_back({dir / "channels.bin", dir / "mask.png", dir / "report.json", split,
                                 s.slice.slice_id, s.slice.site_id});
    }
    std::stable_sort(index.entries.begin(), index.entries.end(), [](const auto& a, const auto& b) {
        return std::tie(a.split, a.slice_id) < std::tie(b.split, b.slice_id);
    });
    return index;
}

DatasetIndex load_dataset(const fs::path& root, bool require_reports) {
    if (!fs::is_directory(root)) throw IndexingError("dataset root is not a directory: " + root.string());
    DatasetIndex index;
    for (Split split : {Split::train, Split::val, Split::test}) {
        const fs::path dir = root / to_string(split);
        if (!fs::is_directory(dir)) continue;
        std::vector<fs::path> slices;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory()) slices.push_back(e.path());
        std::sort(slices.begin(), slices.end());
        for (const auto& sdir : slices) {
            const std::string id = sdir.filename().string();
            DatasetEntry entry;
            entry.slice_id = id;
            entry.site_id = site_of(id);
            entry.split = split;
            entry.slice_path = sdir / "channels.bin";
            entry.mask_path = sdir / "mask.png";
            if (!fs::exists(entry.slice_path)) throw IndexingError("slice " + id + ": missing channels.bin");
            if (!fs::exists(entry.mask_path)) throw IndexingError("slice " + id + ": missing mask");
            if (fs::exists(sdir / "report.json")) {
                entry.report_path = sdir / "report.json";
                std::string report_id;
                io::read_report_json(*entry.report_path, &report_id);
                if (!report_id.empty() && report_id != id)
                    throw IndexingError("slice " + id + ": report belongs to " + report_id);
            } else if (require_reports) {
                throw IndexingError("slice " + id + ": missing report.json (required for text prompts)");
            }
            index.entries.push_back(std::move(entry));
        }
    }
    return index;
}

LoadedSample load_sample(const DatasetEntry& entry) {
    LoadedSample s;
    s.slice.channels = io::read_channels(entry.slice_path);
    s.slice.slice_id = entry.slice_id;
    s.slice.site_id = entry.site_id;
    for (const auto& ch : s.slice.channels)
        s.slice.available.push_back(
            std::any_of(ch.values().begin(), ch.values().end(), [](float v) { return v != 0.0f; }));
    s.mask = LesionMask(io::read_mask_png(entry.mask_path));
    if (!s.slice.channels.empty() && (s.mask.pixels.rows() != s.slice.channels.front().rows() ||
                                      s.mask.pixels.cols() != s.slice.channels.front().cols()))
        throw IndexingError("slice " + entry.slice_id + ": mask dimensions differ from channels");
    if (entry.report_path) s.report = io::read_report_json(*entry.report_path);
    return s;
}

}  // namespace pgsam::data
