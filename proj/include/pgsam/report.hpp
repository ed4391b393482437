#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pgsam::report {

/// One evaluated (site, modality, slice).
struct MetricRow {
    std::string site;
    std::string modality;
    std::string slice_id;
    double dsc = 0.0;
    std::optional<double> hd95;  // undefined when either mask is empty
    double acc = 0.0;
    std::optional<double> rec;   // undefined when the ground truth is empty
};

/// Means per (site, modality); undefined HD95/REC values are excluded and counted.
struct Aggregate {
    std::string site;
    std::string modality;
    std::size_t n = 0;
    double dsc = 0.0;
    std::optional<double> hd95;
    double acc = 0.0;
    std::optional<double> rec;
    std::size_t hd95_undefined = 0;
    std::size_t rec_undefined = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;

    /// Sorted by site, then modality in sequence order.
    std::vector<Aggregate> aggregates() const;
    /// Mean of per-row DSC over all rows (0 when empty).
    double mean_dsc() const;

    /// Per-slice CSV, first line "# count=<rows>".
    void write_csv(const std::filesystem::path& path) const;
    /// Aggregates in the per-site, per-modality table layout (DSC, HD95, ACC, REC).
    void write_summary_csv(const std::filesystem::path& path) const;
    void write_json(const std::filesystem::path& path) const;
    std::string to_json() const;
};

/// Fixed-precision rendering used by every report so bytes are stable across runs.
std::string fmt(double v);
std::string fmt(const std::optional<double>& v);

/// Module ablation row: CAM/TPM toggles, per (site, modality) mean DSC over seeds.
struct AblationCell {
    bool cam = false;
    bool tpm = false;
    std::string prompt;  // prompt mode name
    std::string site;
    std::string modality;
    double dsc = 0.0;
    std::size_t seeds = 0;
};

/// Columns: CAM, TPM, Site, modality, DSC, seeds.
void write_module_table(const std::filesystem::path& path, const std::vector<AblationCell>& cells);
/// Columns: Prompt, Site, modality, DSC, seeds.
void write_prompt_table(const std::filesystem::path& path, const std::vector<AblationCell>& cells);

/// Ranks modality names by sequence order, unknown names last.
int modality_rank(const std::string& m);

}  // namespace pgsam::report
