#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "pgsam/grid.hpp"

namespace pgsam::metrics {

struct LossConfig {
    double w = 0.5;
    double beta = 0.5;
    double dice_smooth = 1e-5;
    void validate() const;
};

/// BCE(pred, gt) + (1 - (2 Σ pred·gt + s) / (Σ pred + Σ gt + s)).
/// 2D inputs are one sample; for higher rank the first axis is the batch and per-sample losses are averaged.
torch::Tensor bce_dice_loss(const torch::Tensor& pred, const torch::Tensor& gt, double smooth = 1e-5);
/// Same loss evaluated from logits (numerically stable BCE).
torch::Tensor bce_dice_loss_logits(const torch::Tensor& logits, const torch::Tensor& gt, double smooth = 1e-5);
/// Per-sample losses [B] for inputs shaped [B, ...].
torch::Tensor bce_dice_per_sample_logits(const torch::Tensor& logits, const torch::Tensor& gt, double smooth);

/// w·L_dec1 + (1−w)·L_dec2 + β·L_prompt
template <typename T>
T total_loss(const T& l_dec1, const T& l_dec2, const T& l_prompt, const LossConfig& cfg) {
    return cfg.w * l_dec1 + (1.0 - cfg.w) * l_dec2 + cfg.beta * l_prompt;
}

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::int64_t total() const { return tp + fp + tn + fn; }
};

ConfusionCounts confusion(const BinaryGrid& pred, const BinaryGrid& gt);

/// 2|GT ∩ Pred| / (|GT| + |Pred|); 1.0 when both are empty.
double dsc(const BinaryGrid& pred, const BinaryGrid& gt);

double accuracy(const ConfusionCounts& c);
/// Undefined (nullopt) when the ground truth has no positives.
std::optional<double> recall(const ConfusionCounts& c);

/// Foreground pixels with at least one 8-neighbour in the background or outside the image.
BinaryGrid boundary(const BinaryGrid& mask);

/// Linear interpolation between order statistics; q in [0,1].
double percentile(std::vector<double> values, double q);

/// Symmetric 95th-percentile boundary Hausdorff distance in pixels; nullopt if either mask is empty.
std::optional<double> hd95(const BinaryGrid& pred, const BinaryGrid& gt);
/// Exact (100th percentile) symmetric boundary Hausdorff distance.
std::optional<double> hausdorff(const BinaryGrid& pred, const BinaryGrid& gt);

/// Exact squared Euclidean distance from every pixel to the nearest set pixel of `seeds`.
Grid<double> squared_distance_transform(const BinaryGrid& seeds);

}  // namespace pgsam::metrics
