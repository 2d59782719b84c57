#include "mlda/batch.hpp"

#include <algorithm>
#include <numeric>

namespace mlda {

TensorSet TensorSet::select(const std::vector<std::int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kLong);
  TensorSet out;
  out.domain = domain;
  out.images = images.index_select(0, idx);
  if (labeled()) out.masks = masks.index_select(0, idx);
  for (auto i : indices) out.ids.push_back(ids.at(static_cast<std::size_t>(i)));
  return out;
}

TensorSet TensorSet::without_labels() const {
  TensorSet out = *this;
  out.masks = torch::Tensor();
  return out;
}

TensorSet to_tensors(const std::vector<Sample>& samples, Domain domain, bool with_masks) {
  TensorSet out;
  out.domain = domain;
  if (samples.empty()) return out;
  const int h = samples[0].image.height, w = samples[0].image.width;
  const auto n = static_cast<std::int64_t>(samples.size());
  out.images = torch::empty({n, 3, h, w});
  if (with_masks) out.masks = torch::empty({n, 1, h, w});
  auto* img = out.images.data_ptr<float>();
  float* msk = with_masks ? out.masks.data_ptr<float>() : nullptr;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.image.height != h || s.image.width != w)
      throw ShapeMismatch("sample " + s.id + " is " + std::to_string(s.image.height) + "x" +
                          std::to_string(s.image.width) + ", expected " + std::to_string(h) + "x" + std::to_string(w));
    std::copy(s.image.data.begin(), s.image.data.end(), img + i * 3 * plane);
    if (msk) std::transform(s.mask.data.begin(), s.mask.data.end(), msk + i * plane, [](std::uint8_t v) { return float(v); });
    out.ids.push_back(s.id);
  }
  return out;
}

BinaryMask mask_from_tensor(const torch::Tensor& mask_hw) {
  auto t = mask_hw.detach().to(torch::kFloat).contiguous().squeeze();
  BinaryMask m(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)));
  const float* p = t.data_ptr<float>();
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = p[i] > 0.5f ? 1 : 0;
  return m;
}

PredictedMask prediction_from_tensor(const torch::Tensor& probs_hw) {
  auto t = probs_hw.detach().to(torch::kFloat).contiguous().squeeze();
  PredictedMask m(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)));
  std::copy(t.data_ptr<float>(), t.data_ptr<float>() + m.probs.size(), m.probs.begin());
  return m;
}

EpochSampler::EpochSampler(std::int64_t n, std::uint64_t seed) : n_(n), rng_(seed) {
  if (n <= 0) throw std::invalid_argument("EpochSampler: empty index range");
  order_.resize(static_cast<std::size_t>(n));
  pos_ = order_.size();
}

std::vector<std::int64_t> EpochSampler::next(std::int64_t k) {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(k));
  while (static_cast<std::int64_t>(out.size()) < k) {
    if (pos_ == order_.size()) {
      std::iota(order_.begin(), order_.end(), 0);
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + stream + 0x632be59bd9b4e019ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace mlda
