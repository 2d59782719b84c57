#include "mlda/discriminators.hpp"

#include <algorithm>

#include "mlda/log.hpp"

namespace mlda {

namespace nn = torch::nn;

namespace {

std::string dims_string(const torch::Tensor& t) { return std::to_string(t.size(2)) + "x" + std::to_string(t.size(3)); }

torch::Tensor global_pool(const torch::Tensor& x) { return x.mean({2, 3}); }

}  // namespace

MirroredDiscriminatorSpec encoder_mirror_spec(const NetworkSpec& seg) {
  seg.validate();
  MirroredDiscriminatorSpec s;
  s.name = "D_e";
  s.injection_widths = seg.stage_widths;
  s.stage_widths = seg.stage_widths;
  s.blocks_per_stage = seg.blocks_per_stage;
  s.norm = seg.norm;
  return s;
}

MirroredDiscriminatorSpec decoder_mirror_spec(const NetworkSpec& seg) {
  seg.validate();
  MirroredDiscriminatorSpec s;
  s.name = "D_d";
  s.injection_widths.assign(seg.decoder_widths.rbegin(), seg.decoder_widths.rend());
  s.stage_widths = s.injection_widths;
  s.blocks_per_stage.assign(s.stage_widths.size() - 1, 1);
  s.norm = seg.norm;
  return s;
}

MirroredDiscriminatorImpl::MirroredDiscriminatorImpl(MirroredDiscriminatorSpec s) : spec(std::move(s)) {
  const auto k = spec.injection_widths.size();
  if (k < 1 || spec.stage_widths.size() != k || spec.blocks_per_stage.size() + 1 != k)
    throw std::invalid_argument(spec.name + ": inconsistent mirrored discriminator spec");
  stem = register_module("stem", ConvNormAct(spec.injection_widths[0], spec.stage_widths[0], 1, spec.norm,
                                             spec.negative_slope));
  stages = register_module("stages", nn::ModuleList());
  for (std::size_t i = 1; i < k; ++i) {
    const int in = i == 1 ? spec.stage_widths[0] : spec.stage_widths[i - 1] + spec.injection_widths[i - 1];
    stages->push_back(make_residual_stage(in, spec.stage_widths[i], spec.blocks_per_stage[i - 1], 2, spec.norm,
                                          spec.negative_slope));
  }
  const int last = k == 1 ? spec.stage_widths[0] : spec.stage_widths[k - 1] + spec.injection_widths[k - 1];
  fuse = register_module("fuse", ConvNormAct(last, spec.stage_widths[k - 1], 1, spec.norm, spec.negative_slope));
  fc = register_module("fc", nn::Linear(spec.stage_widths[k - 1], 1));
}

torch::Tensor MirroredDiscriminatorImpl::forward_maps(const std::vector<torch::Tensor>& maps) {
  const auto k = spec.injection_widths.size();
  if (maps.size() != k)
    throw MirrorAlignmentError(0, spec.name + ": expected " + std::to_string(k) + " feature maps, got " +
                                      std::to_string(maps.size()));
  const auto& input = maps[0];
  if (input.dim() != 4 || input.size(1) != spec.injection_widths[0])
    throw MirrorAlignmentError(0, spec.name + " stage 0 (input): expected " +
                                      std::to_string(spec.injection_widths[0]) + " channels, got map " +
                                      shape_string(input));
  auto x = stem->forward(input);
  for (std::size_t i = 1; i < k; ++i) {
    x = stages[i - 1]->as<nn::Sequential>()->forward(x);
    const auto& m = maps[i];
    const int stage = static_cast<int>(i);
    if (m.dim() != 4 || m.size(0) != x.size(0))
      throw MirrorAlignmentError(stage, spec.name + " injection stage " + std::to_string(i) +
                                            ": injected map " + shape_string(m) + " does not match batch " +
                                            std::to_string(x.size(0)));
    if (m.size(2) != x.size(2) || m.size(3) != x.size(3))
      throw MirrorAlignmentError(stage, spec.name + " injection stage " + std::to_string(i) +
                                            ": spatial mismatch, internal map " + dims_string(x) +
                                            " vs injected map " + dims_string(m));
    if (m.size(1) != spec.injection_widths[i])
      throw MirrorAlignmentError(stage, spec.name + " injection stage " + std::to_string(i) + ": expected " +
                                            std::to_string(spec.injection_widths[i]) + " channels, got " +
                                            std::to_string(m.size(1)));
    x = torch::cat({x, m}, 1);
  }
  return fc->forward(global_pool(fuse->forward(x))).squeeze(1);
}

namespace {

// Dry run at the smallest admissible input so an alignment defect surfaces
// when the discriminator is built rather than mid-training.
void assert_alignment(const NetworkSpec& seg, MirroredDiscriminator d, bool decoder) {
  torch::NoGradGuard no_grad;
  const auto dims = pyramid_dims(seg, seg.required_divisor(), seg.required_divisor());
  const auto n_enc = static_cast<std::size_t>(seg.n_encoder_stages);
  std::vector<torch::Tensor> maps;
  if (!decoder) {
    for (std::size_t i = 0; i < n_enc; ++i)
      maps.push_back(torch::zeros({1, seg.stage_widths[i], dims[i].first, dims[i].second}));
  } else {
    for (std::size_t i = dims.size(); i-- > n_enc;)
      maps.push_back(torch::zeros({1, seg.decoder_widths[i - n_enc], dims[i].first, dims[i].second}));
  }
  d->forward_maps(maps);
}

}  // namespace

EncoderDiscriminator build_encoder_discriminator(const NetworkSpec& seg_spec, std::uint64_t seed) {
  torch::manual_seed(seed);
  EncoderDiscriminator d{MirroredDiscriminator(encoder_mirror_spec(seg_spec))};
  assert_alignment(seg_spec, d.net, false);
  return d;
}

DecoderDiscriminator build_decoder_discriminator(const NetworkSpec& seg_spec, std::uint64_t seed) {
  torch::manual_seed(seed);
  DecoderDiscriminator d{MirroredDiscriminator(decoder_mirror_spec(seg_spec))};
  assert_alignment(seg_spec, d.net, true);
  return d;
}

void ShapeDiscriminatorSpec::validate() const {
  if (stage_widths.empty() || stage_widths.size() != blocks_per_stage.size())
    throw std::invalid_argument("ShapeDiscriminatorSpec: stage_widths and blocks_per_stage must be nonempty and equal length");
  for (std::size_t i = 0; i < stage_widths.size(); ++i)
    if (stage_widths[i] <= 0 || blocks_per_stage[i] <= 0)
      throw std::invalid_argument("ShapeDiscriminatorSpec: widths and block counts must be positive");
}

ShapeDiscriminatorImpl::ShapeDiscriminatorImpl(ShapeDiscriminatorSpec s) : spec(std::move(s)) {
  spec.validate();
  stem = register_module("stem", ConvNormAct(1, spec.stage_widths[0], 2, spec.norm, spec.negative_slope));
  stages = register_module("stages", nn::ModuleList());
  for (std::size_t i = 0; i < spec.stage_widths.size(); ++i)
    stages->push_back(make_residual_stage(i == 0 ? spec.stage_widths[0] : spec.stage_widths[i - 1],
                                          spec.stage_widths[i], spec.blocks_per_stage[i], i == 0 ? 1 : 2, spec.norm,
                                          spec.negative_slope));
  fc = register_module("fc", nn::Linear(spec.stage_widths.back(), 1));
}

torch::Tensor ShapeDiscriminatorImpl::forward(const torch::Tensor& masks) {
  if (masks.dim() != 4 || masks.size(1) != 1)
    throw ShapeMismatch("D_s expects (B, 1, H, W) masks, got " + shape_string(masks));
  auto x = stem->forward(masks);
  for (const auto& stage : *stages) x = stage->as<nn::Sequential>()->forward(x);
  return fc->forward(global_pool(x)).squeeze(1);
}

ShapeDiscriminator build_shape_discriminator(std::uint64_t seed, const ShapeDiscriminatorSpec& spec) {
  spec.validate();
  torch::manual_seed(seed);
  return ShapeDiscriminator(spec);
}

ClassifierHeadImpl::ClassifierHeadImpl(int in, int width, NormKind norm)
    : in_channels(in),
      conv1(register_module("conv1", ConvNormAct(in, width, 1, norm, 0.2))),
      conv2(register_module("conv2", ConvNormAct(width, width, 2, norm, 0.2))),
      fc(register_module("fc", nn::Linear(width, 1))) {}

torch::Tensor ClassifierHeadImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != in_channels)
    throw ShapeMismatch("classifier head expects " + std::to_string(in_channels) + " channels, got " + shape_string(x));
  return fc->forward(global_pool(conv2->forward(conv1->forward(x)))).squeeze(1);
}

ClassifierHead build_classifier_head(int in_channels, std::uint64_t seed, int width, NormKind norm) {
  torch::manual_seed(seed);
  return ClassifierHead(in_channels, width, norm);
}

int layer_channels(const NetworkSpec& spec, int l) {
  const int n = spec.n_encoder_stages;
  if (l < 1 || l > 2 * n - 1)
    throw std::out_of_range("invalid layer index " + std::to_string(l) + ", pyramid has layers 1.." +
                            std::to_string(2 * n - 1));
  return l <= n ? spec.stage_widths[static_cast<std::size_t>(l - 1)]
                : spec.decoder_widths[static_cast<std::size_t>(l - n - 1)];
}

int pyramid_channels(const NetworkSpec& spec) {
  int total = 0;
  for (int w : spec.stage_widths) total += w;
  for (int w : spec.decoder_widths) total += w;
  return total;
}

void DomainBatch::validate() const {
  if (!domain_labels.defined() || domain_labels.dim() != 1 || domain_labels.size(0) < 1)
    throw std::invalid_argument("DomainBatch: need at least one domain label");
  for (const auto* maps : {&pyramids.encoder, &pyramids.decoder})
    for (const auto& m : *maps)
      if (m.size(0) != domain_labels.size(0))
        throw ShapeMismatch("DomainBatch: pyramid map " + shape_string(m) + " vs " +
                            std::to_string(domain_labels.size(0)) + " labels");
}

void ShapeBatch::validate() const {
  if (!masks.defined() || masks.dim() != 4 || masks.size(1) != 1)
    throw ShapeMismatch("ShapeBatch: masks must be (B, 1, H, W), got " + shape_string(masks));
  if (!realness_labels.defined() || realness_labels.dim() != 1 || realness_labels.size(0) != masks.size(0))
    throw ShapeMismatch("ShapeBatch: " + shape_string(masks) + " masks vs labels " + shape_string(realness_labels));
}

torch::Tensor discriminator_bce(const torch::Tensor& logits, const torch::Tensor& labels, double eps) {
  if (!logits.sizes().equals(labels.sizes()))
    throw ShapeMismatch("discriminator_bce: logits " + shape_string(logits) + " vs labels " + shape_string(labels));
  auto p = torch::sigmoid(logits).clamp(eps, 1.0 - eps);
  auto per = -(labels * torch::log(p) + (1.0 - labels) * torch::log(1.0 - p));
  auto pos = labels > 0.5;
  const auto n_pos = pos.sum().item<int64_t>();
  if (n_pos == 0 || n_pos == labels.numel()) return per.mean();
  return 0.5 * (per.masked_select(pos).mean() + per.masked_select(pos.logical_not()).mean());
}

namespace {

void flag_single_class(const torch::Tensor& labels, const char* what) {
  const auto n_pos = (labels > 0.5).sum().item<int64_t>();
  if (n_pos == 0 || n_pos == labels.numel())
    log_warn(std::string(what) + ": batch holds a single class, gradient may be degenerate");
}

}  // namespace

torch::Tensor encoder_domain_loss(EncoderDiscriminator& d_e, const DomainBatch& batch) {
  batch.validate();
  flag_single_class(batch.domain_labels, "encoder_domain_loss");
  return discriminator_bce(d_e.forward(batch.pyramids), batch.domain_labels);
}

torch::Tensor decoder_domain_loss(DecoderDiscriminator& d_d, const DomainBatch& batch) {
  batch.validate();
  flag_single_class(batch.domain_labels, "decoder_domain_loss");
  return discriminator_bce(d_d.forward(batch.pyramids), batch.domain_labels);
}

torch::Tensor shape_adversarial_loss(ShapeDiscriminator& d_s, const ShapeBatch& batch) {
  batch.validate();
  return discriminator_bce(d_s->forward(batch.masks), batch.realness_labels);
}

torch::Tensor single_layer_domain_loss(ClassifierHead& head, const torch::Tensor& f_l, const torch::Tensor& labels) {
  return discriminator_bce(head->forward(f_l), labels);
}

torch::Tensor crop_concat_features(const FeaturePyramid& pyramid) {
  std::vector<torch::Tensor> maps(pyramid.encoder);
  maps.insert(maps.end(), pyramid.decoder.begin(), pyramid.decoder.end());
  if (maps.empty()) throw std::invalid_argument("crop_concat_features: empty pyramid");
  int64_t h = maps[0].size(2), w = maps[0].size(3);
  for (const auto& m : maps) {
    h = std::min(h, m.size(2));
    w = std::min(w, m.size(3));
  }
  std::vector<torch::Tensor> cropped;
  cropped.reserve(maps.size());
  for (const auto& m : maps) {
    const int64_t top = (m.size(2) - h) / 2, left = (m.size(3) - w) / 2;
    cropped.push_back(m.narrow(2, top, h).narrow(3, left, w));
  }
  return torch::cat(cropped, 1);
}

}  // namespace mlda
