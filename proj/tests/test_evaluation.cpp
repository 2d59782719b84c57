#include <gtest/gtest.h>

#include <fstream>

#include "mlda/config_io.hpp"
#include "mlda/evaluation.hpp"
#include "test_util.hpp"

using namespace mlda;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void fake_run(const fs::path& dir, double dice_S, double dice_T, bool ok = true) {
  fs::create_directories(dir);
  std::ofstream out(dir / "history.jsonl");
  auto test = [&](const char* which, const char* d, double dice) {
    out << json{{"type", "test"}, {"checkpoint", which}, {"domain", d}, {"dice", dice}, {"accuracy", dice},
                {"n_samples", 4}}
               .dump()
        << '\n';
  };
  if (!ok) {
    out << json{{"type", "aborted"}, {"epoch", 3}, {"reason", "training diverged: l_full = nan"}}.dump() << '\n';
    return;
  }
  test("best", "S", dice_S);
  test("best", "T", dice_T);
  test("final", "S", 0.0);
  test("final", "T", 0.0);
  out << json{{"type", "summary"}, {"status", "ok"}, {"best_epoch", 5}}.dump() << '\n';
}

ExperimentMatrix fake_matrix(const fs::path& root) {
  ExperimentMatrix m;
  m.dataset = root / "data";
  m.output = root / "out";
  m.n_seeds = 2;
  for (Variant v : {Variant::UdaSed, Variant::OriginS, Variant::Afc}) {
    MatrixEntry e;
    e.variant = v;
    e.mode = Mode::UDA;
    m.entries.push_back(e);
  }
  return m;
}

}  // namespace

TEST(Evaluate, PerfectAndEmptyPredictions) {
  auto ds = test::tiny_dataset(0, 4, 32, 2);
  auto set = to_tensors(ds.get(Domain::S, Split::Test), Domain::S);
  auto g = build_segmentation_network(test::tiny_spec(3), 0);
  const auto m = evaluate(g, set, 0.5, 3);
  EXPECT_EQ(m.n_samples, 4);
  EXPECT_GE(m.dice, 0.0);
  EXPECT_LE(m.dice, 1.0);
  // batch size does not change the macro average
  const auto m1 = evaluate(g, set, 0.5, 1);
  EXPECT_NEAR(m.dice, m1.dice, 1e-6);
  EXPECT_NEAR(m.accuracy, m1.accuracy, 1e-6);
  EXPECT_THROW(evaluate(g, set.without_labels()), std::invalid_argument);
  EXPECT_THROW(evaluate(g, TensorSet{}), std::invalid_argument);
}

TEST(Report, AggregatesSeedsInRowOrder) {
  test::TempDir dir;
  auto m = fake_matrix(dir.path());
  fake_run(run_directory(m, m.entries[0], 0), 0.9, 0.80);
  fake_run(run_directory(m, m.entries[0], 1), 0.9, 0.90);
  fake_run(run_directory(m, m.entries[1], 0), 0.95, 0.50);
  fake_run(run_directory(m, m.entries[1], 1), 0.95, 0.60);
  fake_run(run_directory(m, m.entries[2], 0), 0.9, 0.7);
  fake_run(run_directory(m, m.entries[2], 1), 0.9, 0.7, false);

  const auto t = assemble_report(m);
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.rows[0].variant, Variant::OriginS);
  EXPECT_EQ(t.rows[1].variant, Variant::Afc);
  EXPECT_EQ(t.rows[2].variant, Variant::UdaSed);

  const auto* sed = t.find(Variant::UdaSed);
  ASSERT_NE(sed, nullptr);
  EXPECT_FALSE(sed->failed);
  EXPECT_NEAR(sed->cells.at(Domain::T).dice_mean, 0.85, 1e-12);
  EXPECT_NEAR(sed->cells.at(Domain::T).dice_std, 0.0707106781, 1e-9);
  EXPECT_EQ(sed->cells.at(Domain::T).n_runs, 2);

  const auto* afc = t.find(Variant::Afc);
  EXPECT_TRUE(afc->failed);
  EXPECT_NE(afc->reason.find("diverged"), std::string::npos);

  const auto j = report_to_json(t);
  EXPECT_TRUE(j.at("afc").at("T").at("failed").get<bool>());
  EXPECT_NEAR(j.at("uda_sed").at("T").at("dice_mean").get<double>(), 0.85, 1e-12);

  const auto text = report_to_text(t);
  EXPECT_EQ(text.rfind("# created ", 0), 0u);
  EXPECT_NE(text.find("85.00 ± 7.07"), std::string::npos) << text;
  EXPECT_NE(text.find("! afc failed"), std::string::npos);
  EXPECT_LT(text.find("origin (lower bound)"), text.find("UDA-sed (full)"));

  write_report(t, dir.path() / "rep");
  EXPECT_TRUE(fs::exists(dir.path() / "rep" / "report.json"));
  EXPECT_TRUE(fs::exists(dir.path() / "rep" / "report.txt"));
}

TEST(Report, MissingRunDirectoryFailsTheRow) {
  test::TempDir dir;
  auto m = fake_matrix(dir.path());
  m.entries.resize(1);
  fake_run(run_directory(m, m.entries[0], 0), 0.9, 0.8);
  const auto t = assemble_report(m);
  EXPECT_TRUE(t.rows[0].failed);
  EXPECT_NE(t.rows[0].reason.find("seed 1"), std::string::npos);
}

TEST(Report, TextColumnsAlign) {
  test::TempDir dir;
  auto m = fake_matrix(dir.path());
  for (const auto& e : m.entries)
    for (int k = 0; k < 2; ++k) fake_run(run_directory(m, e, k), 0.5 + 0.1 * k, 0.25);
  const auto text = report_to_text(assemble_report(m));
  // the T DC column starts at the same code-point offset on every table line
  std::istringstream in(text);
  std::string line;
  std::vector<std::size_t> offsets;
  auto cp = [](const std::string& s, std::size_t bytes) {
    return static_cast<std::size_t>(
        std::count_if(s.begin(), s.begin() + bytes, [](char c) { return (c & 0xC0) != 0x80; }));
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line[0] == '-') continue;
    const auto at = line.find("T DC") != std::string::npos ? line.find("T DC") : line.find("25.00 ±");
    ASSERT_NE(at, std::string::npos) << line;
    offsets.push_back(cp(line, at));
  }
  ASSERT_EQ(offsets.size(), 4u);
  for (auto o : offsets) EXPECT_EQ(o, offsets[0]);
}

TEST(Matrix, Validation) {
  test::TempDir dir;
  auto m = fake_matrix(dir.path());
  EXPECT_NO_THROW(m.validate());
  auto bad = m;
  bad.entries.clear();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = m;
  bad.entries.push_back(bad.entries[0]);
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = m;
  bad.entries[0].mode = Mode::SDA;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = m;
  bad.n_seeds = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Matrix, MissingDatasetRaisesBeforeTraining) {
  test::TempDir dir;
  auto m = fake_matrix(dir.path());
  EXPECT_THROW(run_experiment_matrix(m), DatasetError);
  EXPECT_FALSE(fs::exists(m.output / "runs"));
}

TEST(Matrix, Presets) {
  const auto t1 = preset_entries("table1");
  EXPECT_EQ(t1.size(), 5u);
  for (const auto& e : t1) EXPECT_EQ(e.mode, Mode::SDA);
  const auto t2 = preset_entries("table2");
  EXPECT_EQ(t2.size(), 11u);
  EXPECT_EQ(t2.front().variant, Variant::OriginS);
  EXPECT_EQ(t2.back().variant, Variant::SdaSed);
  const auto all = preset_entries("all");
  EXPECT_EQ(all.size(), 13u);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_LT(row_rank(all[i - 1].variant), row_rank(all[i].variant));
  EXPECT_THROW(preset_entries("table3"), std::invalid_argument);
}

TEST(Matrix, EndToEndTinyRun) {
  test::TempDir dir;
  const auto manifest = generate_dataset(dir.path() / "data", 6, SceneSpec{.image_size = 32}, style_source(),
                                         style_target(), 0.67, 1);
  ExperimentMatrix m;
  m.dataset = dir.path() / "data";
  m.output = dir.path() / "out";
  m.n_seeds = 1;
  m.train.network = test::tiny_spec(3);
  m.train.shape_discriminator.stage_widths = {4, 4};
  m.train.shape_discriminator.blocks_per_stage = {1, 1};
  m.train.head_width = 4;
  m.train.s0 = 1;
  m.train.d0 = 1;
  m.train.adv_epochs = 1;
  MatrixEntry a, b;
  a.variant = Variant::UdaSed;
  b.variant = Variant::OriginS;
  b.train = {{"s0", 2}};
  m.entries = {a, b};
  const auto t = run_experiment_matrix(m);
  ASSERT_EQ(t.rows.size(), 2u);
  for (const auto& r : t.rows) {
    EXPECT_FALSE(r.failed) << r.reason;
    EXPECT_EQ(r.cells.size(), 2u);
  }
  const auto h = read_history(run_directory(m, b, 0));
  EXPECT_EQ(h.config.s0, 2);
  EXPECT_EQ(h.config.variant, Variant::OriginS);
}
