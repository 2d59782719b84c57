#include "mlda/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mlda {

namespace {

void check_same_shape(const PredictedMask& pred, const BinaryMask& truth) {
  if (pred.height != truth.height || pred.width != truth.width ||
      pred.probs.size() != truth.data.size()) {
    throw ShapeMismatch("prediction is " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                        " but truth is " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  }
}

}  // namespace

std::string_view to_string(Domain d) { return d == Domain::S ? "S" : "T"; }

Domain domain_from_string(std::string_view s) {
  if (s == "S" || s == "s") return Domain::S;
  if (s == "T" || s == "t") return Domain::T;
  throw std::invalid_argument("unknown domain '" + std::string(s) + "', expected S or T");
}

std::size_t BinaryMask::foreground() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

PredictedMask PredictedMask::from_binary(const BinaryMask& m) {
  PredictedMask p(m.height, m.width);
  std::transform(m.data.begin(), m.data.end(), p.probs.begin(), [](std::uint8_t v) { return static_cast<float>(v); });
  return p;
}

void Sample::validate() const {
  if (image.channels != 3) throw std::invalid_argument("sample " + id + ": image must have 3 channels");
  if (image.data.size() != static_cast<size_t>(image.channels) * image.height * image.width)
    throw std::invalid_argument("sample " + id + ": image buffer size does not match its dimensions");
  if (image.height != mask.height || image.width != mask.width)
    throw ShapeMismatch("sample " + id + ": image is " + std::to_string(image.height) + "x" +
                        std::to_string(image.width) + " but mask is " + std::to_string(mask.height) + "x" +
                        std::to_string(mask.width));
  if (mask.data.size() != static_cast<size_t>(mask.height) * mask.width)
    throw std::invalid_argument("sample " + id + ": mask buffer size does not match its dimensions");
  for (float v : image.data)
    if (!(v >= 0.f && v <= 1.f)) throw std::invalid_argument("sample " + id + ": image value outside [0,1]");
  for (auto v : mask.data)
    if (v > 1) throw std::invalid_argument("sample " + id + ": mask is not binary");
}

double dice_coefficient(const PredictedMask& pred, const BinaryMask& truth, double threshold) {
  check_same_shape(pred, truth);
  std::size_t inter = 0, p_count = 0, y_count = 0;
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    const bool p = pred.probs[i] >= threshold;
    const bool y = truth.data[i] != 0;
    inter += p && y;
    p_count += p;
    y_count += y;
  }
  if (p_count + y_count == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p_count + y_count);
}

double pixel_accuracy(const PredictedMask& pred, const BinaryMask& truth, double threshold) {
  check_same_shape(pred, truth);
  if (truth.data.empty()) throw std::invalid_argument("pixel_accuracy: empty mask");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < truth.data.size(); ++i) agree += (pred.probs[i] >= threshold) == (truth.data[i] != 0);
  return static_cast<double>(agree) / static_cast<double>(truth.data.size());
}

double binary_cross_entropy(std::span<const float> probs, std::span<const float> targets, double eps) {
  if (probs.size() != targets.size())
    throw ShapeMismatch("binary_cross_entropy: " + std::to_string(probs.size()) + " probabilities vs " +
                        std::to_string(targets.size()) + " targets");
  if (probs.empty()) throw std::invalid_argument("binary_cross_entropy: empty input");
  if (!(eps > 0.0 && eps < 0.5)) throw std::invalid_argument("binary_cross_entropy: eps must lie in (0, 0.5)");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (std::isnan(probs[i]) || std::isnan(targets[i])) throw std::invalid_argument("binary_cross_entropy: NaN input");
    const double p = std::clamp(static_cast<double>(probs[i]), eps, 1.0 - eps);
    const double y = targets[i];
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return total / static_cast<double>(probs.size());
}

Metrics average_metrics(std::span<const Metrics> per_image) {
  if (per_image.empty()) throw std::invalid_argument("average_metrics: no metrics");
  Metrics out;
  for (const auto& m : per_image) {
    out.dice += m.dice;
    out.accuracy += m.accuracy;
  }
  out.dice /= static_cast<double>(per_image.size());
  out.accuracy /= static_cast<double>(per_image.size());
  out.n_samples = static_cast<int>(per_image.size());
  return out;
}

RunAggregate aggregate_runs(std::span<const Metrics> runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate_runs: empty run list");
  const auto n = static_cast<double>(runs.size());
  RunAggregate agg;
  agg.n_runs = static_cast<int>(runs.size());
  for (const auto& r : runs) {
    agg.dice_mean += r.dice;
    agg.acc_mean += r.accuracy;
  }
  agg.dice_mean /= n;
  agg.acc_mean /= n;
  if (runs.size() > 1) {
    double sd = 0.0, sa = 0.0;
    for (const auto& r : runs) {
      sd += (r.dice - agg.dice_mean) * (r.dice - agg.dice_mean);
      sa += (r.accuracy - agg.acc_mean) * (r.accuracy - agg.acc_mean);
    }
    agg.dice_std = std::sqrt(sd / (n - 1.0));
    agg.acc_std = std::sqrt(sa / (n - 1.0));
  }
  return agg;
}

}  // namespace mlda
