#include "mlda/segnet.hpp"

#include <numeric>
#include <sstream>

namespace mlda {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string_view to_string(NormKind k) {
  switch (k) {
    case NormKind::Group: return "group";
    case NormKind::Instance: return "instance";
    case NormKind::None: return "none";
  }
  return "group";
}

NormKind norm_from_string(std::string_view s) {
  if (s == "group") return NormKind::Group;
  if (s == "instance") return NormKind::Instance;
  if (s == "none") return NormKind::None;
  throw std::invalid_argument("unknown norm '" + std::string(s) + "', expected group|instance|none");
}

void NetworkSpec::validate() const {
  if (n_encoder_stages < 2) throw std::invalid_argument("NetworkSpec: n_encoder_stages must be >= 2");
  const auto n = static_cast<std::size_t>(n_encoder_stages);
  if (stage_widths.size() != n)
    throw std::invalid_argument("NetworkSpec: stage_widths has " + std::to_string(stage_widths.size()) +
                                " entries, expected " + std::to_string(n));
  if (blocks_per_stage.size() != n - 1)
    throw std::invalid_argument("NetworkSpec: blocks_per_stage has " + std::to_string(blocks_per_stage.size()) +
                                " entries, expected " + std::to_string(n - 1));
  if (decoder_widths.size() != n - 1)
    throw std::invalid_argument("NetworkSpec: decoder_widths has " + std::to_string(decoder_widths.size()) +
                                " entries, expected " + std::to_string(n - 1));
  auto positive = [](const std::vector<int>& v) { return std::all_of(v.begin(), v.end(), [](int x) { return x > 0; }); };
  if (!positive(stage_widths) || !positive(decoder_widths) || !positive(blocks_per_stage))
    throw std::invalid_argument("NetworkSpec: widths and block counts must be positive");
  if (input_channels <= 0 || output_channels <= 0)
    throw std::invalid_argument("NetworkSpec: channel counts must be positive");
}

const torch::Tensor& FeaturePyramid::layer(int l) const {
  if (l < 1 || static_cast<std::size_t>(l) > size())
    throw std::out_of_range("invalid layer index " + std::to_string(l) + ", pyramid has layers 1.." +
                            std::to_string(size()));
  const auto i = static_cast<std::size_t>(l - 1);
  return i < encoder.size() ? encoder[i] : decoder[i - encoder.size()];
}

FeaturePyramid FeaturePyramid::detached() const {
  FeaturePyramid out;
  for (const auto& t : encoder) out.encoder.push_back(t.detach());
  for (const auto& t : decoder) out.decoder.push_back(t.detach());
  return out;
}

FeaturePyramid FeaturePyramid::cat(const FeaturePyramid& a, const FeaturePyramid& b) {
  if (a.encoder.size() != b.encoder.size() || a.decoder.size() != b.decoder.size())
    throw std::invalid_argument("FeaturePyramid::cat: pyramids have different depths");
  FeaturePyramid out;
  for (std::size_t i = 0; i < a.encoder.size(); ++i) out.encoder.push_back(torch::cat({a.encoder[i], b.encoder[i]}));
  for (std::size_t i = 0; i < a.decoder.size(); ++i) out.decoder.push_back(torch::cat({a.decoder[i], b.decoder[i]}));
  return out;
}

nn::AnyModule make_norm(NormKind kind, int channels) {
  switch (kind) {
    case NormKind::Group: return nn::AnyModule(nn::GroupNorm(nn::GroupNormOptions(std::gcd(channels, 4), channels)));
    case NormKind::Instance: return nn::AnyModule(nn::GroupNorm(nn::GroupNormOptions(channels, channels)));
    case NormKind::None: return nn::AnyModule(nn::Identity());
  }
  return nn::AnyModule(nn::Identity());
}

namespace {

nn::Conv2d conv3x3(int in, int out, int stride) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::Tensor activate(const torch::Tensor& x, double negative_slope) {
  return negative_slope == 0.0 ? torch::relu(x) : F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(negative_slope));
}

}  // namespace

ConvNormActImpl::ConvNormActImpl(int in, int out, int stride, NormKind kind, double slope)
    : conv(register_module("conv", conv3x3(in, out, stride))), norm(make_norm(kind, out)), negative_slope(slope) {
  register_module("norm", norm.ptr());
}

torch::Tensor ConvNormActImpl::forward(const torch::Tensor& x) {
  return activate(norm.forward(conv->forward(x)), negative_slope);
}

ResidualBlockImpl::ResidualBlockImpl(int in, int out, int stride, NormKind kind, double slope)
    : conv1(register_module("conv1", conv3x3(in, out, stride))),
      conv2(register_module("conv2", conv3x3(out, out, 1))),
      norm1(make_norm(kind, out)),
      norm2(make_norm(kind, out)),
      negative_slope(slope) {
  register_module("norm1", norm1.ptr());
  register_module("norm2", norm2.ptr());
  if (stride != 1 || in != out) {
    has_proj = true;
    proj = register_module("proj", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride)));
    proj_norm = make_norm(kind, out);
    register_module("proj_norm", proj_norm.ptr());
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto y = activate(norm1.forward(conv1->forward(x)), negative_slope);
  y = norm2.forward(conv2->forward(y));
  auto shortcut = has_proj ? proj_norm.forward(proj->forward(x)) : x;
  return activate(y + shortcut, negative_slope);
}

nn::Sequential make_residual_stage(int in, int out, int blocks, int stride, NormKind norm, double slope) {
  nn::Sequential seq;
  for (int b = 0; b < blocks; ++b) seq->push_back(ResidualBlock(b == 0 ? in : out, out, b == 0 ? stride : 1, norm, slope));
  return seq;
}

DecoderStageImpl::DecoderStageImpl(int in, int skip, int out, NormKind norm)
    : conv1(register_module("conv1", ConvNormAct(in + skip, out, 1, norm, 0.0))),
      conv2(register_module("conv2", ConvNormAct(out, out, 1, norm, 0.0))) {}

torch::Tensor DecoderStageImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                                  .mode(torch::kNearest));
  return conv2->forward(conv1->forward(torch::cat({up, skip}, 1)));
}

SegmentationNetImpl::SegmentationNetImpl(NetworkSpec s) : spec(std::move(s)) {
  spec.validate();
  const auto n = static_cast<std::size_t>(spec.n_encoder_stages);
  stem = register_module("stem", ConvNormAct(spec.input_channels, spec.stage_widths[0], 1, spec.norm, 0.0));
  encoder_stages = register_module("encoder", nn::ModuleList());
  for (std::size_t i = 1; i < n; ++i)
    encoder_stages->push_back(make_residual_stage(spec.stage_widths[i - 1], spec.stage_widths[i],
                                                  spec.blocks_per_stage[i - 1], 2, spec.norm, 0.0));
  decoder_stages = register_module("decoder", nn::ModuleList());
  int prev = spec.stage_widths.back();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const int skip = spec.stage_widths[n - 2 - i];
    decoder_stages->push_back(DecoderStage(prev, skip, spec.decoder_widths[i], spec.norm));
    prev = spec.decoder_widths[i];
  }
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(prev, spec.output_channels, 1)));
}

void SegmentationNetImpl::check_input(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != spec.input_channels)
    throw std::invalid_argument("segmentation input must be (B, " + std::to_string(spec.input_channels) +
                                ", H, W), got " + shape_string(images));
  const int d = spec.required_divisor();
  if (images.size(2) % d != 0 || images.size(3) % d != 0)
    throw std::invalid_argument("segmentation input " + std::to_string(images.size(2)) + "x" +
                                std::to_string(images.size(3)) + " rejected: height and width must be divisible by " +
                                std::to_string(d) + " for " + std::to_string(spec.n_encoder_stages) +
                                " encoder stages");
}

SegOutput SegmentationNetImpl::forward(const torch::Tensor& images) {
  check_input(images);
  SegOutput out;
  auto& pyr = out.pyramid;
  auto x = stem->forward(images);
  pyr.encoder.push_back(x);
  for (const auto& stage : *encoder_stages) {
    x = stage->as<nn::Sequential>()->forward(x);
    pyr.encoder.push_back(x);
  }
  const auto n = pyr.encoder.size();
  for (std::size_t i = 0; i < decoder_stages->size(); ++i) {
    x = decoder_stages[i]->as<DecoderStage>()->forward(x, pyr.encoder[n - 2 - i]);
    pyr.decoder.push_back(x);
  }
  out.probs = torch::sigmoid(head->forward(x));
  return out;
}

SegmentationNet build_segmentation_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  torch::manual_seed(seed);
  return SegmentationNet(spec);
}

torch::Tensor bce_loss(const torch::Tensor& probs, const torch::Tensor& targets, double eps) {
  if (!probs.sizes().equals(targets.sizes()))
    throw ShapeMismatch("bce: probabilities " + shape_string(probs) + " vs targets " + shape_string(targets));
  auto p = probs.clamp(eps, 1.0 - eps);
  return -(targets * torch::log(p) + (1.0 - targets) * torch::log(1.0 - p)).mean();
}

torch::Tensor segmentation_loss(const torch::Tensor& pred, const torch::Tensor& labels) {
  if (!pred.sizes().equals(labels.sizes()))
    throw ShapeMismatch("segmentation_loss: prediction " + shape_string(pred) + " vs labels " + shape_string(labels));
  return bce_loss(pred, labels);
}

std::vector<std::pair<std::int64_t, std::int64_t>> pyramid_dims(const NetworkSpec& spec, std::int64_t h,
                                                                std::int64_t w) {
  std::vector<std::pair<std::int64_t, std::int64_t>> dims{{h, w}};
  for (int i = 1; i < spec.n_encoder_stages; ++i) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
    dims.emplace_back(h, w);
  }
  for (int i = spec.n_encoder_stages - 2; i >= 0; --i) dims.push_back(dims[static_cast<std::size_t>(i)]);
  return dims;
}

std::string shape_string(const torch::Tensor& t) {
  if (!t.defined()) return "(undefined)";
  std::ostringstream os;
  os << "(";
  for (int64_t i = 0; i < t.dim(); ++i) os << (i ? ", " : "") << t.size(i);
  os << ")";
  return os.str();
}

}  // namespace mlda
