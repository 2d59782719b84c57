#pragma once

// Segmentation network G: U-Net with a residual-stage encoder (ResNet-34
// stage layout at configurable width), nearest-upsample decoder with skip
// connections, and a sigmoid mask head. Every stage output is exposed so the
// discriminators can consume the whole feature pyramid.

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mlda/core.hpp"

namespace mlda {

enum class NormKind { Group, Instance, None };

std::string_view to_string(NormKind k);
NormKind norm_from_string(std::string_view s);

struct NetworkSpec {
  int n_encoder_stages = 5;
  // Stage 1 is a stride-1 stem; stages 2..n are stride-2 residual stages.
  std::vector<int> stage_widths{8, 16, 32, 64, 128};
  // Residual blocks in stages 2..n (ResNet-34 uses 3,4,6,3).
  std::vector<int> blocks_per_stage{1, 1, 2, 1};
  // Decoder stage i upsamples and fuses the skip from encoder stage n-1-i.
  std::vector<int> decoder_widths{64, 32, 16, 8};
  int input_channels = 3;
  int output_channels = 1;
  NormKind norm = NormKind::Group;

  int n_decoder_stages() const { return n_encoder_stages - 1; }
  /// Input height and width must be multiples of this.
  int required_divisor() const { return 1 << (n_encoder_stages - 1); }
  void validate() const;
  bool operator==(const NetworkSpec&) const = default;
};

/// Per-layer feature maps {f^(l)}: encoder stage outputs (halving resolution)
/// followed by decoder stage outputs (doubling resolution).
struct FeaturePyramid {
  std::vector<torch::Tensor> encoder;
  std::vector<torch::Tensor> decoder;

  std::size_t size() const { return encoder.size() + decoder.size(); }
  /// 1-based layer index running over encoder then decoder maps.
  const torch::Tensor& layer(int l) const;
  FeaturePyramid detached() const;
  /// Concatenates two pyramids along the batch dimension.
  static FeaturePyramid cat(const FeaturePyramid& a, const FeaturePyramid& b);
};

struct SegOutput {
  torch::Tensor probs;  // (B, 1, H, W), sigmoid output
  FeaturePyramid pyramid;
};

torch::nn::AnyModule make_norm(NormKind kind, int channels);

struct ConvNormActImpl : torch::nn::Module {
  ConvNormActImpl(int in, int out, int stride, NormKind norm, double negative_slope);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::AnyModule norm;
  double negative_slope;
};
TORCH_MODULE(ConvNormAct);

/// Basic residual block (two 3x3 convs) with a projected shortcut when the
/// stride or width changes.
struct ResidualBlockImpl : torch::nn::Module {
  ResidualBlockImpl(int in, int out, int stride, NormKind norm, double negative_slope);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::AnyModule norm1, norm2;
  torch::nn::Conv2d proj{nullptr};
  torch::nn::AnyModule proj_norm;
  bool has_proj = false;
  double negative_slope;
};
TORCH_MODULE(ResidualBlock);

/// Stack of residual blocks; the first one carries the stride.
torch::nn::Sequential make_residual_stage(int in, int out, int blocks, int stride, NormKind norm,
                                          double negative_slope);

struct DecoderStageImpl : torch::nn::Module {
  DecoderStageImpl(int in, int skip, int out, NormKind norm);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

  ConvNormAct conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(DecoderStage);

struct SegmentationNetImpl : torch::nn::Module {
  explicit SegmentationNetImpl(NetworkSpec spec);
  SegOutput forward(const torch::Tensor& images);

  /// Throws std::invalid_argument unless `images` is (B, C, H, W) with H and W
  /// multiples of spec.required_divisor().
  void check_input(const torch::Tensor& images) const;

  NetworkSpec spec;
  ConvNormAct stem{nullptr};
  torch::nn::ModuleList encoder_stages{nullptr};
  torch::nn::ModuleList decoder_stages{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(SegmentationNet);

/// Validates `spec` and constructs G with parameters initialised from `seed`.
SegmentationNet build_segmentation_network(const NetworkSpec& spec, std::uint64_t seed);

/// Elementwise BCE of probabilities against targets, probabilities clipped to
/// [eps, 1-eps], averaged over all elements.
torch::Tensor bce_loss(const torch::Tensor& probs, const torch::Tensor& targets, double eps = kBceEps);

/// L_seg: BCE between predicted masks and labels.
torch::Tensor segmentation_loss(const torch::Tensor& pred, const torch::Tensor& labels);

/// Spatial dims (h, w) of every pyramid level for an input of size h x w,
/// encoder first, as the network will produce them.
std::vector<std::pair<std::int64_t, std::int64_t>> pyramid_dims(const NetworkSpec& spec, std::int64_t h,
                                                                std::int64_t w);

std::string shape_string(const torch::Tensor& t);

}  // namespace mlda
