#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mlda/core.hpp"

namespace mlda {

/// Stacked samples of one domain/split: images (N, 3, H, W) and, when labels
/// are available, masks (N, 1, H, W) as 0/1 floats.
struct TensorSet {
  torch::Tensor images;
  torch::Tensor masks;
  std::vector<std::string> ids;
  Domain domain = Domain::S;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  bool labeled() const { return masks.defined(); }
  TensorSet select(const std::vector<std::int64_t>& indices) const;
  TensorSet without_labels() const;
};

TensorSet to_tensors(const std::vector<Sample>& samples, Domain domain, bool with_masks = true);

BinaryMask mask_from_tensor(const torch::Tensor& mask_hw);
PredictedMask prediction_from_tensor(const torch::Tensor& probs_hw);

/// Endless stream of indices into [0, n): a fresh seeded permutation per pass.
class EpochSampler {
 public:
  EpochSampler(std::int64_t n, std::uint64_t seed);
  std::vector<std::int64_t> next(std::int64_t k);

 private:
  std::int64_t n_;
  std::mt19937_64 rng_;
  std::vector<std::int64_t> order_;
  std::size_t pos_ = 0;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace mlda
