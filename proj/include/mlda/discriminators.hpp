#pragma once

// Adversaries of the segmentation network.
//
// D_e and D_d mirror the encoder / decoder stage layout of G. The first map of
// their pyramid half is the network input; after every stride-2 stage the
// discriminator's own map has the resolution of the next pyramid map, which is
// concatenated channel-wise (an "injection point"). D_d walks the decoder maps
// largest-first so its downsampling stages line up with them.
//
// D_s classifies whole masks (ground truth vs generated). The SF and AFC heads
// are the single-layer and crop-and-concatenate baselines.

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mlda/segnet.hpp"

namespace mlda {

/// Spatial or channel disagreement at an injection point of a mirrored
/// discriminator. stage() is the 1-based injection index (0 = input map).
class MirrorAlignmentError : public ShapeMismatch {
 public:
  MirrorAlignmentError(int stage, const std::string& what) : ShapeMismatch(what), stage_(stage) {}
  int stage() const { return stage_; }

 private:
  int stage_;
};

struct MirroredDiscriminatorSpec {
  std::string name;                 // "D_e" or "D_d", used in error messages
  std::vector<int> injection_widths;  // channels of each consumed map, input map first
  std::vector<int> stage_widths;      // own width per stage, mirrors the source network
  std::vector<int> blocks_per_stage;  // residual blocks per downsampling stage
  NormKind norm = NormKind::Group;
  double negative_slope = 0.2;

  std::size_t n_injections() const { return injection_widths.size() - 1; }
};

MirroredDiscriminatorSpec encoder_mirror_spec(const NetworkSpec& seg);
MirroredDiscriminatorSpec decoder_mirror_spec(const NetworkSpec& seg);

struct MirroredDiscriminatorImpl : torch::nn::Module {
  explicit MirroredDiscriminatorImpl(MirroredDiscriminatorSpec spec);

  /// `maps` in consumption order (input map first). Returns (B) logits.
  torch::Tensor forward_maps(const std::vector<torch::Tensor>& maps);

  MirroredDiscriminatorSpec spec;
  ConvNormAct stem{nullptr};
  torch::nn::ModuleList stages{nullptr};
  ConvNormAct fuse{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(MirroredDiscriminator);

/// D_e: consumes F_e in encoder order.
struct EncoderDiscriminator {
  MirroredDiscriminator net{nullptr};
  torch::Tensor forward(const FeaturePyramid& p) { return net->forward_maps(p.encoder); }
  torch::Tensor forward(const std::vector<torch::Tensor>& encoder_maps) { return net->forward_maps(encoder_maps); }
};

/// D_d: consumes F_d in reverse decoder order (largest map is the input).
struct DecoderDiscriminator {
  MirroredDiscriminator net{nullptr};
  torch::Tensor forward(const FeaturePyramid& p) { return forward(p.decoder); }
  /// `decoder_maps` in decoder order, as produced by G.
  torch::Tensor forward(const std::vector<torch::Tensor>& decoder_maps) {
    return net->forward_maps(std::vector<torch::Tensor>(decoder_maps.rbegin(), decoder_maps.rend()));
  }
};

EncoderDiscriminator build_encoder_discriminator(const NetworkSpec& seg_spec, std::uint64_t seed);
DecoderDiscriminator build_decoder_discriminator(const NetworkSpec& seg_spec, std::uint64_t seed);

struct ShapeDiscriminatorSpec {
  std::vector<int> stage_widths{8, 16, 32, 64};
  std::vector<int> blocks_per_stage{2, 2, 2, 2};  // ResNet-18 layout
  NormKind norm = NormKind::Group;
  double negative_slope = 0.2;

  void validate() const;
  bool operator==(const ShapeDiscriminatorSpec&) const = default;
};

struct ShapeDiscriminatorImpl : torch::nn::Module {
  explicit ShapeDiscriminatorImpl(ShapeDiscriminatorSpec spec);
  /// (B, 1, H, W) masks in [0,1] -> (B) realness logits.
  torch::Tensor forward(const torch::Tensor& masks);

  ShapeDiscriminatorSpec spec;
  ConvNormAct stem{nullptr};
  torch::nn::ModuleList stages{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(ShapeDiscriminator);

ShapeDiscriminator build_shape_discriminator(std::uint64_t seed, const ShapeDiscriminatorSpec& spec = {});

/// conv -> strided conv -> global pool -> linear; the SF / AFC domain head.
struct ClassifierHeadImpl : torch::nn::Module {
  ClassifierHeadImpl(int in_channels, int width, NormKind norm);
  torch::Tensor forward(const torch::Tensor& x);

  int in_channels;
  ConvNormAct conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(ClassifierHead);

ClassifierHead build_classifier_head(int in_channels, std::uint64_t seed, int width = 32,
                                     NormKind norm = NormKind::Group);

/// Channel count of pyramid layer `l` (1-based) for networks built from `spec`.
int layer_channels(const NetworkSpec& spec, int l);
/// Sum of all stage widths, i.e. channels of crop_concat_features.
int pyramid_channels(const NetworkSpec& spec);

// Domain labels: S -> 1, T -> 0. Realness labels: ground truth -> 1, generated -> 0.
struct DomainBatch {
  FeaturePyramid pyramids;
  torch::Tensor domain_labels;  // (B) float
  void validate() const;
};

struct ShapeBatch {
  torch::Tensor masks;            // (B, 1, H, W)
  torch::Tensor realness_labels;  // (B) float
  void validate() const;
};

/// Discriminator BCE on logits. With both classes present it is the mean of
/// the per-class BCE means, so it keeps the two expectations equally weighted
/// when a batch is unbalanced; on a balanced batch it equals the plain mean.
torch::Tensor discriminator_bce(const torch::Tensor& logits, const torch::Tensor& labels, double eps = kBceEps);

torch::Tensor encoder_domain_loss(EncoderDiscriminator& d_e, const DomainBatch& batch);
torch::Tensor decoder_domain_loss(DecoderDiscriminator& d_d, const DomainBatch& batch);
torch::Tensor shape_adversarial_loss(ShapeDiscriminator& d_s, const ShapeBatch& batch);
/// SF baselines: domain BCE of a head over the single pyramid map f_l.
torch::Tensor single_layer_domain_loss(ClassifierHead& head, const torch::Tensor& f_l, const torch::Tensor& labels);
/// AFC baseline: every map centre-cropped to the smallest spatial size, then
/// concatenated along channels.
torch::Tensor crop_concat_features(const FeaturePyramid& pyramid);

}  // namespace mlda
