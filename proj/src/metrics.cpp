#include "pgsam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace F = torch::nn::functional;

namespace pgsam::metrics {

void LossConfig::validate() const {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("loss weight w must lie in [0,1]");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("loss weight beta must be non-negative");
    if (!(dice_smooth > 0.0)) throw ConfigError("dice smoothing must be positive");
}

namespace {

torch::Tensor dice_term(const torch::Tensor& prob, const torch::Tensor& gt, double smooth) {
    auto inter = (prob * gt).sum(1);
    auto denom = prob.sum(1) + gt.sum(1);
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth);
}

std::pair<torch::Tensor, torch::Tensor> as_batch(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.sizes() != b.sizes()) throw ContractViolation("loss: prediction and ground truth shapes differ");
    if (a.dim() <= 2) return {a.reshape({1, -1}), b.reshape({1, -1}).to(a.scalar_type())};
    return {a.flatten(1), b.flatten(1).to(a.scalar_type())};
}

}  // namespace

torch::Tensor bce_dice_loss(const torch::Tensor& pred, const torch::Tensor& gt, double smooth) {
    auto [p, g] = as_batch(pred, gt);
    // torch clamps log terms at -100, so exact 0/1 predictions stay finite.
    auto bce = F::binary_cross_entropy(p, g, F::BinaryCrossEntropyFuncOptions().reduction(torch::kNone)).mean(1);
    return (bce + dice_term(p, g, smooth)).mean();
}

torch::Tensor bce_dice_per_sample_logits(const torch::Tensor& logits, const torch::Tensor& gt, double smooth) {
    auto [l, g] = as_batch(logits, gt);
    auto bce = F::binary_cross_entropy_with_logits(
                   l, g, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone))
                   .mean(1);
    return bce + dice_term(torch::sigmoid(l), g, smooth);
}

torch::Tensor bce_dice_loss_logits(const torch::Tensor& logits, const torch::Tensor& gt, double smooth) {
    return bce_dice_per_sample_logits(logits, gt, smooth).mean();
}

ConfusionCounts confusion(const BinaryGrid& pred, const BinaryGrid& gt) {
    if (!pred.same_shape(gt)) throw ContractViolation("confusion: shape mismatch");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.values()[i] != 0, g = gt.values()[i] != 0;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

double dsc(const BinaryGrid& pred, const BinaryGrid& gt) {
    const auto c = confusion(pred, gt);
    const auto denom = (c.tp + c.fn) + (c.tp + c.fp);
    if (denom == 0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double accuracy(const ConfusionCounts& c) {
    if (c.total() == 0) return 1.0;
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

std::optional<double> recall(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) return std::nullopt;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

BinaryGrid boundary(const BinaryGrid& mask) {
    const auto rows = static_cast<std::ptrdiff_t>(mask.rows()), cols = static_cast<std::ptrdiff_t>(mask.cols());
    BinaryGrid out(mask.rows(), mask.cols());
    for (std::ptrdiff_t r = 0; r < rows; ++r)
        for (std::ptrdiff_t c = 0; c < cols; ++c) {
            if (!mask(r, c)) continue;
            bool edge = false;
            for (std::ptrdiff_t dr = -1; dr <= 1 && !edge; ++dr)
                for (std::ptrdiff_t dc = -1; dc <= 1 && !edge; ++dc) {
                    const auto rr = r + dr, cc = c + dc;
                    if (rr < 0 || cc < 0 || rr >= rows || cc >= cols || !mask(rr, cc)) edge = true;
                }
            out(r, c) = edge ? 1 : 0;
        }
    return out;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ContractViolation("percentile of an empty list");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

// Stands in for "no seed"; large enough never to win, small enough to keep the envelope arithmetic exact.
constexpr double kFar = 1e20;

// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
    const std::size_t n = f.size();
    std::vector<std::size_t> v(n);
    std::vector<double> z(n + 1);
    const double inf = std::numeric_limits<double>::infinity();
    std::size_t k = 0;
    v[0] = 0;
    z[0] = -inf;
    z[1] = inf;
    for (std::size_t q = 1; q < n; ++q) {
        const double fq = f[q] + double(q) * double(q);
        double s = (fq - (f[v[k]] + double(v[k]) * double(v[k]))) / (2.0 * (double(q) - double(v[k])));
        while (s <= z[k]) {
            --k;
            s = (fq - (f[v[k]] + double(v[k]) * double(v[k]))) / (2.0 * (double(q) - double(v[k])));
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < double(q)) ++k;
        const double dq = double(q) - double(v[k]);
        d[q] = dq * dq + f[v[k]];
    }
}

std::vector<double> directed_distances(const BinaryGrid& from_boundary, const Grid<double>& sq_dist_to_other) {
    std::vector<double> out;
    for (std::size_t i = 0; i < from_boundary.size(); ++i)
        if (from_boundary.values()[i]) out.push_back(std::sqrt(sq_dist_to_other.values()[i]));
    return out;
}

std::optional<double> symmetric_boundary_distance(const BinaryGrid& pred, const BinaryGrid& gt, double q) {
    if (!pred.same_shape(gt)) throw ContractViolation("hausdorff: shape mismatch");
    const auto bp = boundary(pred), bg = boundary(gt);
    const auto has = [](const BinaryGrid& g) {
        return std::any_of(g.values().begin(), g.values().end(), [](unsigned char v) { return v != 0; });
    };
    if (!has(bp) || !has(bg)) return std::nullopt;
    const auto a = directed_distances(bp, squared_distance_transform(bg));
    const auto b = directed_distances(bg, squared_distance_transform(bp));
    return std::max(percentile(a, q), percentile(b, q));
}

}  // namespace

Grid<double> squared_distance_transform(const BinaryGrid& seeds) {
    const std::size_t rows = seeds.rows(), cols = seeds.cols();
    Grid<double> g(rows, cols, kFar);
    for (std::size_t i = 0; i < seeds.size(); ++i)
        if (seeds.values()[i]) g.values()[i] = 0.0;
    std::vector<double> f, d;
    f.resize(rows);
    d.resize(rows);
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t r = 0; r < rows; ++r) f[r] = g(r, c);
        edt_1d(f, d);
        for (std::size_t r = 0; r < rows; ++r) g(r, c) = d[r];
    }
    f.resize(cols);
    d.resize(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) f[c] = g(r, c);
        edt_1d(f, d);
        for (std::size_t c = 0; c < cols; ++c) g(r, c) = d[c];
    }
    return g;
}

std::optional<double> hd95(const BinaryGrid& pred, const BinaryGrid& gt) {
    return symmetric_boundary_distance(pred, gt, 0.95);
}

std::optional<double> hausdorff(const BinaryGrid& pred, const BinaryGrid& gt) {
    return symmetric_boundary_distance(pred, gt, 1.0);
}

}  // namespace pgsam::metrics
