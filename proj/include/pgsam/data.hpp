#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pgsam/grid.hpp"

namespace pgsam::data {

inline constexpr std::size_t kImageSize = 224;
inline constexpr std::size_t kDefaultSequences = 4;
inline constexpr int kDefaultFilterThreshold = 25;
/// Phantom reports state sizes in mm; one pixel is exactly this many mm.
inline constexpr double kMmPerPixel = 1.0;

inline const std::array<std::string, 4> kSequenceNames = {"T1", "T1C", "T2", "ADC"};

/// One 2D slice, one aligned channel per MRI sequence.
struct MultiSequenceSlice {
    std::vector<Image> channels;
    std::vector<bool> available;
    std::string slice_id;
    std::string site_id;

    std::size_t sequence_count() const { return channels.size(); }
    std::size_t rows() const { return channels.empty() ? 0 : channels.front().rows(); }
    std::size_t cols() const { return channels.empty() ? 0 : channels.front().cols(); }
    /// Throws ContractViolation unless channels are aligned, in [0,1], and unavailable ones are zero.
    void validate() const;
};

struct LesionMask {
    BinaryGrid pixels;  // values in {0,1}

    LesionMask() = default;
    explicit LesionMask(BinaryGrid p) : pixels(std::move(p)) {}

    std::size_t lesion_pixel_count() const;
    bool operator==(const LesionMask&) const = default;
};

enum class Laterality { left, right };
enum class Subregion { anterior, posterior, superficial, deep, none };

std::string to_string(Laterality l);
std::string to_string(Subregion s);
Laterality parse_laterality(const std::string& s);
Subregion parse_subregion(const std::string& s);

struct ExpertReport {
    Laterality laterality = Laterality::left;
    Subregion subregion = Subregion::none;
    std::array<double, 3> size_mm{1.0, 1.0, 1.0};
    std::string rendered_text;
};

/// Text prompt variants used by the prompt ablation. `none` disables the text pathway.
enum class PromptMode { none, photo, there_is, containing, expert };

std::string to_string(PromptMode m);
PromptMode parse_prompt_mode(const std::string& s);
const std::vector<PromptMode>& all_prompt_modes();

/// Expert template with [pos] and [xx] substituted.
std::string render_report(const ExpertReport& report);
/// Text fed to the provider for a given mode; `report` is required only for `expert`.
std::string prompt_text(PromptMode mode, const ExpertReport* report);

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct DatasetEntry {
    std::filesystem::path slice_path;
    std::filesystem::path mask_path;
    std::optional<std::filesystem::path> report_path;
    Split split = Split::train;
    std::string slice_id;
    std::string site_id;
};

struct DatasetIndex {
    std::vector<DatasetEntry> entries;
    std::uint64_t seed = 0;

    std::vector<const DatasetEntry*> split(Split s) const;
};

struct ChannelContrast {
    double lesion_offset = 0.3;
    double noise_std = 0.05;
};

struct PhantomConfig {
    std::size_t image_size = kImageSize;
    std::array<double, 2> lesion_radius_range{10.0, 20.0};
    double lesion_laterality_prior = 0.5;  // probability of a left-sided lesion
    std::vector<ChannelContrast> per_channel_contrast = default_contrast();
    double channel_missing_prob = 0.0;
    std::size_t count = 1;
    std::uint64_t seed = 0;
    std::string site_id = "site1";
    // Site-level shifts, used to mimic external centers.
    double intensity_scale = 1.0;
    double noise_scale = 1.0;

    static std::vector<ChannelContrast> default_contrast();
    /// Named presets "site1", "site2", "site3".
    static PhantomConfig for_site(const std::string& site);
    void validate() const;
};

struct PhantomSample {
    MultiSequenceSlice slice;
    LesionMask mask;
    ExpertReport report;
};

/// Gland geometry used by the phantom generator (pixel units).
struct GlandGeometry {
    double center_row = 0.0;
    double center_col = 0.0;
    double semi_rows = 0.0;
    double semi_cols = 0.0;
};
std::array<GlandGeometry, 2> gland_geometry(std::size_t image_size);  // [left, right]

std::vector<std::size_t> filter_slices(const std::vector<LesionMask>& masks,
                                       int threshold = kDefaultFilterThreshold);

/// Bilinear resize (half-pixel centers) followed by min-max normalization.
Image preprocess_slice(const Image& raw, std::size_t out_size = kImageSize);
/// Half-pixel-center bilinear resize, edge-clamped.
Image bilinear_resize(const Image& src, std::size_t out_rows, std::size_t out_cols);

/// One of the eight dihedral transforms: k quarter turns, then optional horizontal flip.
struct DihedralTransform {
    int quarter_turns = 0;
    bool flip = false;
    static DihedralTransform from_seed(std::uint64_t seed);
};
template <typename T>
Grid<T> apply_transform(const Grid<T>& g, DihedralTransform t);
std::pair<MultiSequenceSlice, LesionMask> augment(const MultiSequenceSlice& slice,
                                                  const LesionMask& mask, std::uint64_t rng_seed);

std::vector<PhantomSample> generate_phantoms(const PhantomConfig& config);

/// Laterality, subregion and extents recovered from a lesion mask alone.
ExpertReport derive_report(const LesionMask& mask, std::size_t image_size);

/// Writes `<root>/<split>/<slice_id>/...` with a seeded 70/10/20 split.
DatasetIndex export_dataset(const std::filesystem::path& root, const std::vector<PhantomSample>& samples,
                            std::uint64_t seed, bool all_to_test = false);
/// Scans `<root>/{train,val,test}/*`. With `require_reports`, a missing report.json is an error.
DatasetIndex load_dataset(const std::filesystem::path& root, bool require_reports = false);

struct LoadedSample {
    MultiSequenceSlice slice;
    LesionMask mask;
    std::optional<ExpertReport> report;
};
LoadedSample load_sample(const DatasetEntry& entry);

/// Site id is the slice id prefix up to the first underscore.
std::string site_of(const std::string& slice_id);

}  // namespace pgsam::data
