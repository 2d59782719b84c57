#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mlda/checkpoint.hpp"
#include "mlda/config_io.hpp"
#include "mlda/evaluation.hpp"
#include "mlda/training.hpp"
#include "test_util.hpp"

using namespace mlda;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(Variant v, Mode m = Mode::UDA) {
  TrainConfig c;
  c.variant = v;
  c.mode = m;
  c.network = test::tiny_spec(3);
  c.shape_discriminator.stage_widths = {4, 4};
  c.shape_discriminator.blocks_per_stage = {1, 1};
  c.head_width = 4;
  c.s0 = 1;
  c.d0 = 1;
  c.adv_epochs = 2;
  c.seed = 3;
  return c;
}

const Dataset& tiny_data() {
  static const Dataset ds = test::tiny_dataset(12, 4, 32, 5);
  return ds;
}

std::map<std::string, std::uint64_t> adversary_hashes(TrainingContext& ctx) {
  std::map<std::string, std::uint64_t> h;
  for (const auto& [role, m] : ctx.adversaries().modules()) h[role] = parameter_hash(*m);
  return h;
}

}  // namespace

TEST(CombinedLoss, WorkedExample) {
  EXPECT_NEAR(combined_loss(1.0, 0.6, 0.7, 0.65, {0.01, 0.05, 0.1}), 0.894, 1e-12);
  EXPECT_DOUBLE_EQ(combined_loss(0.3, 5, 6, 7, {0, 0, 0}), 0.3);
  EXPECT_DOUBLE_EQ(combined_loss(0.3, 0, 0, 0, {0.01, 0.05, 0.1}), 0.3);
}

TEST(CombinedLoss, AlgebraOver1000Tuples) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> loss(0, 5), alpha(0, 1);
  for (int i = 0; i < 1000; ++i) {
    const double s = loss(rng), e = loss(rng), d = loss(rng), sh = loss(rng);
    const LossWeights a{alpha(rng), alpha(rng), alpha(rng)};
    const double expect = s - (a.e * e + a.d * d + a.s * sh);
    ASSERT_NEAR(combined_loss(s, e, d, sh, a), expect, 1e-12) << i;
    const auto t = combined_loss(torch::tensor(s, torch::kDouble), torch::tensor(e, torch::kDouble),
                                 torch::tensor(d, torch::kDouble), torch::tensor(sh, torch::kDouble), a);
    ASSERT_NEAR(t.item<double>(), expect, 1e-12) << i;
  }
}

TEST(CombinedLoss, RejectsNonFinite) {
  EXPECT_THROW(combined_loss(std::nan(""), 0, 0, 0, {}), NonFiniteLoss);
  EXPECT_THROW(combined_loss(0, INFINITY, 0, 0, {}), NonFiniteLoss);
  auto z = torch::zeros({});
  EXPECT_THROW(combined_loss(z, z, torch::full({}, NAN), z, {}), NonFiniteLoss);
}

TEST(CombinedLoss, GradientMatchesFiniteDifferences) {
  // l_full through G and all three adversaries on a 2-stage double net
  auto spec = test::tiny_spec(2);
  auto g = build_segmentation_network(spec, 1);
  auto de = build_encoder_discriminator(spec, 2);
  auto dd = build_decoder_discriminator(spec, 3);
  ShapeDiscriminatorSpec ss;
  ss.stage_widths = {4, 4};
  ss.blocks_per_stage = {1, 1};
  auto ds = build_shape_discriminator(4, ss);
  for (auto* m : std::vector<torch::nn::Module*>{g.get(), de.net.get(), dd.net.get(), ds.get()}) m->to(torch::kDouble);
  torch::manual_seed(5);
  auto xs = torch::rand({2, 3, 8, 8}, torch::kDouble), xt = torch::rand({2, 3, 8, 8}, torch::kDouble);
  auto ys = (torch::rand({2, 1, 8, 8}) > 0.5).to(torch::kDouble);
  auto dom = torch::tensor({1.0, 1.0, 0.0, 0.0}, torch::kDouble);
  auto l_full = [&] {
    auto s = g->forward(xs), t = g->forward(xt);
    DomainBatch db{FeaturePyramid::cat(s.pyramid, t.pyramid), dom};
    ShapeBatch sb{torch::cat({ys, s.probs, t.probs}),
                  torch::tensor({1.0, 1.0, 0.0, 0.0, 0.0, 0.0}, torch::kDouble)};
    return combined_loss(segmentation_loss(s.probs, ys), encoder_domain_loss(de, db), decoder_domain_loss(dd, db),
                         shape_adversarial_loss(ds, sb), {0.01, 0.05, 0.1});
  };
  auto r = test::grad_check(g->parameters(), l_full, 30, 9);
  EXPECT_TRUE(r.ok()) << r.detail;
}

TEST(Variants, NamesRoundTrip) {
  for (Variant v : all_variants()) EXPECT_EQ(variant_from_string(to_string(v)), v);
  EXPECT_EQ(all_variants().size(), 13u);
  EXPECT_THROW(variant_from_string("uda_xyz"), std::invalid_argument);
  EXPECT_EQ(mode_from_string("sda"), Mode::SDA);
  EXPECT_THROW(mode_from_string("semi"), std::invalid_argument);
}

TEST(Variants, TraitsAndCompatibility) {
  EXPECT_FALSE(traits(Variant::OriginS).adversarial());
  EXPECT_TRUE(traits(Variant::OriginS).labels_S);
  EXPECT_FALSE(traits(Variant::OriginS).labels_T);
  EXPECT_TRUE(traits(Variant::OriginT).labels_T);
  const auto sed = traits(Variant::UdaSed);
  EXPECT_TRUE(sed.d_e && sed.d_d && sed.d_s && !sed.labels_T);
  const auto ed = traits(Variant::UdaEd);
  EXPECT_TRUE(ed.d_e && ed.d_d && !ed.d_s);
  EXPECT_TRUE(traits(Variant::SdaSed).labels_T);
  EXPECT_TRUE(traits(Variant::Afc).afc);
  EXPECT_FALSE(compatible(Variant::SdaSed, Mode::UDA));
  EXPECT_FALSE(compatible(Variant::UdaSed, Mode::SDA));
  EXPECT_FALSE(compatible(Variant::Sf4, Mode::SDA));
  EXPECT_TRUE(compatible(Variant::OriginS, Mode::SDA));
  EXPECT_TRUE(compatible(Variant::OriginS, Mode::UDA));
  auto c = tiny_config(Variant::UdaSed, Mode::SDA);
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Variants, SingleLayerIndex) {
  EXPECT_EQ(single_layer_index(Variant::Sf4, NetworkSpec{}), 4);
  EXPECT_EQ(single_layer_index(Variant::Sf9, NetworkSpec{}), 9);
  EXPECT_EQ(single_layer_index(Variant::Sf4, test::tiny_spec(3)), 2);
  EXPECT_EQ(single_layer_index(Variant::Sf9, test::tiny_spec(3)), 5);
  EXPECT_EQ(single_layer_index(Variant::UdaSed, NetworkSpec{}), 0);
}

TEST(TrainConfig, Validation) {
  auto c = tiny_config(Variant::UdaSed);
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.batch_size = 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.alpha_s = -0.1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.s0 = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.validation_fraction = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(PrepareData, UdaHidesTargetTrainingLabels) {
  const auto uda = prepare_data(tiny_data(), tiny_config(Variant::UdaSed));
  EXPECT_TRUE(uda.train_S.labeled());
  EXPECT_FALSE(uda.train_T.labeled());
  EXPECT_TRUE(uda.test_T.labeled());
  const auto sda = prepare_data(tiny_data(), tiny_config(Variant::SdaSed, Mode::SDA));
  EXPECT_TRUE(sda.train_T.labeled());
}

TEST(PrepareData, HoldoutIsSeededAndDisjoint) {
  auto c = tiny_config(Variant::OriginS);
  c.validation_fraction = 0.25;
  const auto a = prepare_data(tiny_data(), c), b = prepare_data(tiny_data(), c);
  EXPECT_EQ(a.val_S.ids, b.val_S.ids);
  EXPECT_EQ(a.val_S.size(), 3);
  EXPECT_EQ(a.train_S.size(), 9);
  for (const auto& id : a.val_S.ids)
    EXPECT_EQ(std::find(a.train_S.ids.begin(), a.train_S.ids.end(), id), a.train_S.ids.end());
  c.seed = 4;
  EXPECT_NE(prepare_data(tiny_data(), c).val_S.ids, a.val_S.ids);
}

TEST(Adversaries, BuiltPerVariant) {
  EXPECT_TRUE(build_adversaries(tiny_config(Variant::OriginS)).empty());
  auto sed = build_adversaries(tiny_config(Variant::UdaSed));
  ASSERT_EQ(sed.modules().size(), 3u);
  EXPECT_EQ(sed.modules()[0].first, "d_e");
  EXPECT_EQ(sed.modules()[2].first, "d_s");
  auto sf9 = build_adversaries(tiny_config(Variant::Sf9));
  EXPECT_EQ(sf9.sf_layer, 5);
  EXPECT_EQ(sf9.modules().size(), 1u);
  EXPECT_EQ(build_adversaries(tiny_config(Variant::Afc)).modules()[0].first, "afc_head");
}

TEST(ParameterIsolation, HundredRandomAlternatingSteps) {
  std::mt19937 rng(7);
  for (Variant v : {Variant::UdaSed, Variant::Sf4, Variant::Afc}) {
    TrainingContext ctx(tiny_config(v));
    const auto data = prepare_data(tiny_data(), ctx.config());
    std::uniform_int_distribution<std::int64_t> pick_s(0, data.train_S.size() - 1), pick_t(0, data.train_T.size() - 1);
    for (int step = 0; step < (v == Variant::UdaSed ? 100 : 20); ++step) {
      const StepBatch batch{data.train_S.select({pick_s(rng), pick_s(rng)}),
                            data.train_T.select({pick_t(rng), pick_t(rng)})};
      auto fwd = forward_generator(ctx, batch);
      const auto g_before = parameter_hash(*ctx.generator());
      const auto d_before = adversary_hashes(ctx);
      discriminator_update(ctx, fwd, batch);
      ASSERT_EQ(parameter_hash(*ctx.generator()), g_before) << to_string(v) << " step " << step;
      const auto d_mid = adversary_hashes(ctx);
      ASSERT_NE(d_mid, d_before);
      generator_update(ctx, fwd, batch);
      ASSERT_EQ(adversary_hashes(ctx), d_mid) << to_string(v) << " step " << step;
      ASSERT_NE(parameter_hash(*ctx.generator()), g_before);
    }
  }
}

TEST(PretrainDiscriminators, LeavesGeneratorUntouched) {
  TrainingContext ctx(tiny_config(Variant::UdaSed));
  const auto data = prepare_data(tiny_data(), ctx.config());
  const auto g = parameter_hash(*ctx.generator());
  const auto d = adversary_hashes(ctx);
  EXPECT_TRUE(pretrain_segmentation(ctx, data, 0).empty());
  EXPECT_EQ(parameter_hash(*ctx.generator()), g);
  const auto losses = pretrain_discriminators(ctx, data, 2);
  EXPECT_EQ(losses.size(), 2u);
  EXPECT_EQ(parameter_hash(*ctx.generator()), g);
  EXPECT_NE(adversary_hashes(ctx), d);
}

TEST(PretrainSegmentation, ReducesLoss) {
  auto c = tiny_config(Variant::OriginS);
  c.lr = 5e-3;
  TrainingContext ctx(c);
  const auto data = prepare_data(tiny_data(), c);
  const auto losses = pretrain_segmentation(ctx, data, 8);
  ASSERT_EQ(losses.size(), 8u);
  EXPECT_LT(losses.back().l_seg, losses.front().l_seg);
  for (const auto& b : losses) EXPECT_DOUBLE_EQ(b.l_full, b.l_seg);
}

TEST(Training, UdaIgnoresTargetTrainingLabels) {
  auto scrambled = tiny_data();
  std::mt19937 rng(1);
  for (auto& s : scrambled.samples.at({Domain::T, Split::Train}))
    for (auto& px : s.mask.data) px = static_cast<std::uint8_t>(rng() & 1);
  test::TempDir dir;
  const auto c = tiny_config(Variant::UdaSed);
  train(c, tiny_data(), dir.path() / "a");
  train(c, scrambled, dir.path() / "b");
  // validation on T uses held-out labels, so compare G only
  const auto a = read_checkpoint(dir.path() / "a" / "ckpt_final.bin");
  const auto b = read_checkpoint(dir.path() / "b" / "ckpt_final.bin");
  EXPECT_EQ(state_hash(a.section("g").tensors), state_hash(b.section("g").tensors));
}

TEST(Training, ZeroWeightsAndFrozenAdversariesMatchOrigin) {
  // uda_sed with every alpha 0 and no discriminator updates is origin_S step for step
  auto sed = tiny_config(Variant::UdaSed);
  sed.alpha_e = sed.alpha_d = sed.alpha_s = 0;
  sed.discriminator_updates = false;
  auto origin = tiny_config(Variant::OriginS);
  TrainingContext a(sed), b(origin);
  const auto data = prepare_data(tiny_data(), sed);
  for (int e = 0; e < 3; ++e) {
    const auto la = adversarial_epoch(a, data);
    const auto lb = adversarial_epoch(b, data);
    ASSERT_EQ(la.size(), lb.size());
    for (std::size_t i = 0; i < la.size(); ++i) {
      EXPECT_NEAR(la[i].l_seg, lb[i].l_seg, 1e-6);
      EXPECT_NEAR(la[i].l_full, la[i].l_seg, 1e-12);
    }
  }
  const auto pa = module_state(*a.generator()), pb = module_state(*b.generator());
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(torch::allclose(pa[i].second, pb[i].second, 1e-5, 1e-6)) << pa[i].first;
}

TEST(Training, HistoryIsComplete) {
  test::TempDir dir;
  const auto c = tiny_config(Variant::UdaSed);
  const auto result = train(c, tiny_data(), dir.path());
  for (const char* f : {"config.json", "history.jsonl", "ckpt_final.bin", "ckpt_best.bin", "loss_curve.png"})
    EXPECT_TRUE(fs::exists(dir.path() / f)) << f;
  const auto h = read_history(dir.path());
  EXPECT_EQ(h.config, c);
  EXPECT_EQ(h.status, "ok");
  ASSERT_EQ(h.losses.size(), static_cast<std::size_t>(c.s0 + c.d0 + c.adv_epochs));
  EXPECT_EQ(h.losses[0].phase, Phase::PretrainG);
  EXPECT_EQ(h.losses[1].phase, Phase::PretrainD);
  EXPECT_EQ(h.losses[2].phase, Phase::Adversarial);
  EXPECT_DOUBLE_EQ(h.losses[2].alphas.e, c.alpha_e);
  EXPECT_DOUBLE_EQ(h.losses[2].alphas.s, c.alpha_s);
  for (int e = 1; e <= 4; ++e)
    for (Domain d : {Domain::S, Domain::T})
      EXPECT_EQ(std::count_if(h.validation.begin(), h.validation.end(),
                              [&](const EpochMetrics& m) { return m.epoch == e && m.domain == d; }),
                1)
          << e;
  for (const char* which : {"best", "final"})
    for (Domain d : {Domain::S, Domain::T}) EXPECT_TRUE(h.test_metrics(d, which).has_value()) << which;
  EXPECT_GE(h.best_epoch, 3);
  EXPECT_EQ(h.test.size(), result.history.test.size());
}

TEST(Training, CheckpointReloadsToSameMetrics) {
  test::TempDir dir;
  const auto c = tiny_config(Variant::OriginS);
  const auto r = train(c, tiny_data(), dir.path());
  auto g = load_generator(r.final_checkpoint);
  const auto data = prepare_data(tiny_data(), c);
  const auto m = evaluate(g, data.test_T);
  const auto recorded = r.history.test_metrics(Domain::T, "final");
  ASSERT_TRUE(recorded);
  EXPECT_DOUBLE_EQ(m.dice, recorded->dice);
  EXPECT_DOUBLE_EQ(m.accuracy, recorded->accuracy);
  const auto ckpt = read_checkpoint(r.final_checkpoint);
  EXPECT_EQ(ckpt.meta.at("variant"), "origin_S");
  EXPECT_FALSE(ckpt.has_section("d_e"));
}

TEST(Training, DivergenceGuardAborts) {
  test::TempDir dir;
  auto c = tiny_config(Variant::UdaSed);
  c.divergence_limit = 1e-3;
  try {
    train(c, tiny_data(), dir.path());
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_TRUE(fs::exists(e.last_good_checkpoint()));
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
  }
  const auto h = read_history(dir.path());
  EXPECT_EQ(h.status, "aborted");
  EXPECT_FALSE(fs::exists(dir.path() / "ckpt_final.bin"));
}

TEST(Training, DeterministicCheckpointBytes) {
  test::TempDir dir;
  const auto c = tiny_config(Variant::UdaSed);
  const auto a = train(c, tiny_data(), dir.path() / "a");
  const auto b = train(c, tiny_data(), dir.path() / "b");
  EXPECT_TRUE(checkpoint_bytes_equal(a.final_checkpoint, b.final_checkpoint));
  EXPECT_TRUE(checkpoint_bytes_equal(a.best_checkpoint, b.best_checkpoint));
  for (Domain d : {Domain::S, Domain::T})
    EXPECT_EQ(a.history.test_metrics(d, "final")->dice, b.history.test_metrics(d, "final")->dice);
}

TEST(Training, FlippedLabelsUseNonSaturatingSign) {
  auto c = tiny_config(Variant::UdaE);
  c.flipped_labels = true;
  TrainingContext ctx(c);
  const auto data = prepare_data(tiny_data(), c);
  const StepBatch batch{data.train_S.select({0, 1}), data.train_T.select({0, 1})};
  const auto b = generator_update(ctx, forward_generator(ctx, batch), batch);
  EXPECT_NEAR(b.l_full, b.l_seg + c.alpha_e * b.l_de, 1e-9);
}

TEST(Training, AfcCarriesCombinedWeight) {
  const auto c = tiny_config(Variant::Afc);
  TrainingContext ctx(c);
  const auto data = prepare_data(tiny_data(), c);
  const StepBatch batch{data.train_S.select({0, 1}), data.train_T.select({0, 1})};
  const auto b = generator_update(ctx, forward_generator(ctx, batch), batch);
  EXPECT_DOUBLE_EQ(b.alphas.e, c.alpha_e + c.alpha_d);
  EXPECT_DOUBLE_EQ(b.alphas.d, 0.0);
  EXPECT_NEAR(b.l_full, b.l_seg - b.alphas.e * b.l_de, 1e-9);
}
