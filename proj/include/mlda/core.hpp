#pragma once

// Domain types and binary-segmentation metrics shared by every other module.
// Nothing in here depends on libtorch; masks and images are plain row-major
// buffers so the metrics can be checked against hand-written oracles.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mlda {

enum class Domain { S, T };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

/// Raised whenever two arrays that must share a shape do not.
class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kDefaultThreshold = 0.5;
inline constexpr double kBceEps = 1e-7;

/// Planar (C, H, W) float image with values in [0, 1].
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, 0.f) {}

  float& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

/// Row-major binary mask, every element 0 or 1.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  std::size_t foreground() const;
  bool operator==(const BinaryMask&) const = default;
};

/// Sigmoid output of the segmentation network for one image.
struct PredictedMask {
  int height = 0;
  int width = 0;
  std::vector<float> probs;

  PredictedMask() = default;
  PredictedMask(int h, int w, float fill = 0.f) : height(h), width(w), probs(static_cast<size_t>(h) * w, fill) {}
  static PredictedMask from_binary(const BinaryMask& m);
};

struct Sample {
  Image image;
  BinaryMask mask;
  Domain domain = Domain::S;
  std::string id;

  /// Throws std::invalid_argument when any type invariant is broken.
  void validate() const;
  bool operator==(const Sample&) const = default;
};

struct Metrics {
  double dice = 0.0;
  double accuracy = 0.0;
  int n_samples = 0;
};

struct RunAggregate {
  double dice_mean = 0.0;
  double dice_std = 0.0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  int n_runs = 0;
};

// Dice 2|P∩Y| / (|P|+|Y|) after binarising `pred` at `threshold`.
// Both sets empty counts as perfect agreement (1.0).
double dice_coefficient(const PredictedMask& pred, const BinaryMask& truth, double threshold = kDefaultThreshold);

// Fraction of pixels where the binarised prediction equals the truth.
double pixel_accuracy(const PredictedMask& pred, const BinaryMask& truth, double threshold = kDefaultThreshold);

// Mean of -[y log p + (1-y) log(1-p)] with p clipped to [eps, 1-eps].
double binary_cross_entropy(std::span<const float> probs, std::span<const float> targets, double eps = kBceEps);

/// Per-image metrics averaged over a set (macro average).
Metrics average_metrics(std::span<const Metrics> per_image);

/// Mean and sample standard deviation (ddof = 1) over independent runs.
RunAggregate aggregate_runs(std::span<const Metrics> runs);

}  // namespace mlda
