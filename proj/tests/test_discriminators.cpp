#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mlda/discriminators.hpp"
#include "test_util.hpp"

using namespace mlda;

namespace {

const double kLn2 = std::log(2.0);

torch::Tensor half_labels(int64_t b) {
  auto y = torch::zeros({b});
  y.narrow(0, 0, b / 2).fill_(1.0);
  return y;
}

FeaturePyramid random_pyramid(SegmentationNet& g, int64_t b, int64_t size) {
  torch::NoGradGuard ng;
  return g->forward(torch::rand({b, 3, size, size})).pyramid;
}

}  // namespace

TEST(DiscriminatorBce, KnownValues) {
  auto y = torch::tensor({1.f, 0.f});
  EXPECT_NEAR(discriminator_bce(torch::zeros({2}), y).item<double>(), kLn2, 1e-6);
  EXPECT_LT(discriminator_bce(torch::tensor({40.f, -40.f}), y).item<double>(), 1e-6);
  // flipped predictions hit the clip: about -ln(eps), float rounding near 1
  EXPECT_NEAR(discriminator_bce(torch::tensor({40.f, -40.f}), 1 - y).item<double>(), -std::log(kBceEps), 0.3);
  EXPECT_THROW(discriminator_bce(torch::zeros({3}), y), ShapeMismatch);
}

TEST(DiscriminatorBce, ClassBalancedOnUnbalancedBatch) {
  // one positive at logit 0 (ln 2), three negatives perfect (0): balanced mean is ln2/2
  auto logits = torch::tensor({0.f, -40.f, -40.f, -40.f});
  auto y = torch::tensor({1.f, 0.f, 0.f, 0.f});
  EXPECT_NEAR(discriminator_bce(logits, y).item<double>(), kLn2 / 2, 1e-6);
  // single class reduces to the plain mean
  EXPECT_NEAR(discriminator_bce(torch::zeros({3}), torch::ones({3})).item<double>(), kLn2, 1e-6);
}

TEST(Discriminators, InitialLossNearLn2Over50Seeds) {
  const auto spec = NetworkSpec{};
  auto g = build_segmentation_network(spec, 0);
  torch::manual_seed(99);
  const auto p = random_pyramid(g, 8, 32);
  const auto masks = (torch::rand({8, 1, 32, 32}) > 0.5).to(torch::kFloat);
  DomainBatch db{p, half_labels(8)};
  ShapeBatch sb{masks, half_labels(8)};
  const int sf_layer = 4;
  double sums[4] = {0, 0, 0, 0};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    torch::NoGradGuard ng;
    auto de = build_encoder_discriminator(spec, seed);
    auto dd = build_decoder_discriminator(spec, seed);
    auto ds = build_shape_discriminator(seed);
    auto sf = build_classifier_head(layer_channels(spec, sf_layer), seed);
    const double losses[] = {
        encoder_domain_loss(de, db).item<double>(), decoder_domain_loss(dd, db).item<double>(),
        shape_adversarial_loss(ds, sb).item<double>(),
        single_layer_domain_loss(sf, p.layer(sf_layer), db.domain_labels).item<double>()};
    for (int k = 0; k < 4; ++k) sums[k] += losses[k];
  }
  const char* names[] = {"D_e", "D_d", "D_s", "SF"};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(sums[k] / 50, kLn2, 0.15) << names[k];
}

TEST(Discriminators, MirrorFuzzOverRandomSpecs) {
  std::mt19937 rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    NetworkSpec s;
    s.n_encoder_stages = std::uniform_int_distribution<int>(2, 5)(rng);
    s.stage_widths.clear();
    s.blocks_per_stage.clear();
    s.decoder_widths.clear();
    std::uniform_int_distribution<int> width(1, 12), blocks(1, 2);
    for (int i = 0; i < s.n_encoder_stages; ++i) s.stage_widths.push_back(width(rng));
    for (int i = 1; i < s.n_encoder_stages; ++i) s.blocks_per_stage.push_back(blocks(rng));
    for (int i = 1; i < s.n_encoder_stages; ++i) s.decoder_widths.push_back(width(rng));
    const int64_t size = s.required_divisor() * std::uniform_int_distribution<int>(1, 3)(rng);

    auto g = build_segmentation_network(s, trial);
    EncoderDiscriminator de{nullptr};
    DecoderDiscriminator dd{nullptr};
    ASSERT_NO_THROW(de = build_encoder_discriminator(s, trial)) << "trial " << trial;
    ASSERT_NO_THROW(dd = build_decoder_discriminator(s, trial)) << "trial " << trial;
    const auto p = random_pyramid(g, 2, size);
    torch::NoGradGuard ng;
    EXPECT_EQ(de.forward(p).sizes(), (std::vector<int64_t>{2})) << "trial " << trial;
    EXPECT_EQ(dd.forward(p).sizes(), (std::vector<int64_t>{2})) << "trial " << trial;
    EXPECT_EQ(crop_concat_features(p).size(1), pyramid_channels(s));
    for (int l = 1; l <= static_cast<int>(p.size()); ++l) EXPECT_EQ(p.layer(l).size(1), layer_channels(s, l));
  }
}

TEST(Discriminators, CorruptedPyramidNamesTheStage) {
  const auto spec = NetworkSpec{};
  auto g = build_segmentation_network(spec, 0);
  auto de = build_encoder_discriminator(spec, 0);
  auto dd = build_decoder_discriminator(spec, 0);
  torch::NoGradGuard ng;

  auto p = random_pyramid(g, 2, 64);
  p.encoder[2] = torch::zeros({2, p.encoder[2].size(1), 7, 7});
  try {
    de.forward(p);
    FAIL();
  } catch (const MirrorAlignmentError& e) {
    EXPECT_EQ(e.stage(), 2);
    EXPECT_NE(std::string(e.what()).find("D_e"), std::string::npos);
  }

  p = random_pyramid(g, 2, 64);
  p.encoder[3] = torch::zeros({2, 5, p.encoder[3].size(2), p.encoder[3].size(3)});
  try {
    de.forward(p);
    FAIL();
  } catch (const MirrorAlignmentError& e) {
    EXPECT_EQ(e.stage(), 3);
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
  }

  p = random_pyramid(g, 2, 64);
  p.decoder.pop_back();
  EXPECT_THROW(dd.forward(p), MirrorAlignmentError);

  // decoder maps are consumed largest-first: decoder[0] is the last injection
  p = random_pyramid(g, 2, 64);
  p.decoder[0] = torch::zeros({2, p.decoder[0].size(1), 3, 3});
  try {
    dd.forward(p);
    FAIL();
  } catch (const MirrorAlignmentError& e) {
    EXPECT_EQ(e.stage(), 3);
  }
}

TEST(Discriminators, CropConcatMatchesSliceOracle) {
  FeaturePyramid p;
  torch::manual_seed(5);
  p.encoder = {torch::rand({2, 2, 8, 10}), torch::rand({2, 3, 4, 5})};
  p.decoder = {torch::rand({2, 1, 6, 6})};
  auto out = crop_concat_features(p);
  ASSERT_EQ(out.sizes(), (std::vector<int64_t>{2, 6, 4, 5}));
  // centre crop by explicit slicing, top = (H-h)/2, left = (W-w)/2
  auto a = p.encoder[0].index({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(2, 6),
                               torch::indexing::Slice(2, 7)});
  auto c = p.decoder[0].index({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(1, 5),
                               torch::indexing::Slice(0, 5)});
  EXPECT_TRUE(torch::equal(out.narrow(1, 0, 2), a));
  EXPECT_TRUE(torch::equal(out.narrow(1, 2, 3), p.encoder[1]));
  EXPECT_TRUE(torch::equal(out.narrow(1, 5, 1), c));
}

TEST(Discriminators, PerfectAndFlippedClassifier) {
  // logits are labels scaled: loss small; negated: large
  auto y = half_labels(6);
  const double good = discriminator_bce((y * 2 - 1) * 20, y).item<double>();
  const double bad = discriminator_bce((1 - 2 * y) * 20, y).item<double>();
  EXPECT_LT(good, 1e-6);
  EXPECT_GT(bad, 10.0);
}

TEST(Discriminators, GradientsReachEncoderAndDecoder) {
  const auto spec = test::tiny_spec(3);
  auto g = build_segmentation_network(spec, 1);
  auto de = build_encoder_discriminator(spec, 2);
  auto dd = build_decoder_discriminator(spec, 3);
  auto out = g->forward(torch::rand({4, 3, 16, 16}));
  DomainBatch b{out.pyramid, half_labels(4)};
  auto loss = encoder_domain_loss(de, b) + decoder_domain_loss(dd, b);
  loss.backward();
  double enc = 0, dec = 0;
  for (const auto& p : g->named_parameters()) {
    if (!p.value().grad().defined()) continue;
    const double n = p.value().grad().abs().sum().item<double>();
    if (p.key().rfind("encoder", 0) == 0 || p.key().rfind("stem", 0) == 0) enc += n;
    if (p.key().rfind("decoder", 0) == 0) dec += n;
  }
  EXPECT_GT(enc, 0.0);
  EXPECT_GT(dec, 0.0);
  for (const auto& p : de.net->parameters()) ASSERT_TRUE(p.grad().defined());
}

TEST(Discriminators, ShapeAndBatchValidation) {
  auto ds = build_shape_discriminator(0);
  EXPECT_THROW(ds->forward(torch::rand({2, 3, 16, 16})), ShapeMismatch);
  ShapeBatch bad{torch::rand({2, 1, 16, 16}), torch::zeros({3})};
  EXPECT_THROW(bad.validate(), ShapeMismatch);
  auto head = build_classifier_head(5, 0);
  EXPECT_THROW(head->forward(torch::rand({1, 4, 8, 8})), ShapeMismatch);
  ShapeDiscriminatorSpec s;
  s.blocks_per_stage.pop_back();
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Discriminators, SameSeedSameOutput) {
  const auto spec = test::tiny_spec(3);
  auto g = build_segmentation_network(spec, 0);
  const auto p = random_pyramid(g, 2, 16);
  auto a = build_encoder_discriminator(spec, 7), b = build_encoder_discriminator(spec, 7);
  torch::NoGradGuard ng;
  EXPECT_TRUE(torch::equal(a.forward(p), b.forward(p)));
}

namespace {

struct ToyGan {
  NetworkSpec spec = test::tiny_spec(2);
  SegmentationNet g{nullptr};
  EncoderDiscriminator de{nullptr};
  DecoderDiscriminator dd{nullptr};
  ShapeDiscriminator ds{nullptr};
  torch::Tensor x, y, dom;

  ToyGan() {
    g = build_segmentation_network(spec, 11);
    de = build_encoder_discriminator(spec, 12);
    dd = build_decoder_discriminator(spec, 13);
    ShapeDiscriminatorSpec s;
    s.stage_widths = {4, 4};
    s.blocks_per_stage = {1, 1};
    ds = build_shape_discriminator(14, s);
    for (auto* m : std::vector<torch::nn::Module*>{g.get(), de.net.get(), dd.net.get(), ds.get()})
      m->to(torch::kDouble);
    torch::manual_seed(15);
    x = torch::rand({4, 3, 8, 8}, torch::kDouble);
    y = (torch::rand({4, 1, 8, 8}) > 0.5).to(torch::kDouble);
    dom = half_labels(4).to(torch::kDouble);
  }

  std::vector<torch::Tensor> params(torch::nn::Module& d) {
    auto v = g->parameters();
    for (auto& p : d.parameters()) v.push_back(p);
    return v;
  }
};

}  // namespace

TEST(DiscriminatorLoss, GradientsMatchFiniteDifferences) {
  ToyGan t;
  auto r_de = test::grad_check(t.params(*t.de.net), [&] {
    return encoder_domain_loss(t.de, DomainBatch{t.g->forward(t.x).pyramid, t.dom});
  }, 30, 1);
  EXPECT_TRUE(r_de.ok()) << "L_De " << r_de.detail;
  auto r_dd = test::grad_check(t.params(*t.dd.net), [&] {
    return decoder_domain_loss(t.dd, DomainBatch{t.g->forward(t.x).pyramid, t.dom});
  }, 30, 2);
  EXPECT_TRUE(r_dd.ok()) << "L_Dd " << r_dd.detail;
  auto r_ds = test::grad_check(t.params(*t.ds), [&] {
    auto fake = t.g->forward(t.x).probs;
    return shape_adversarial_loss(
        t.ds, ShapeBatch{torch::cat({t.y, fake}), torch::cat({torch::ones({4}), torch::zeros({4})}).to(torch::kDouble)});
  }, 30, 3);
  EXPECT_TRUE(r_ds.ok()) << "L_Ds " << r_ds.detail;
}
