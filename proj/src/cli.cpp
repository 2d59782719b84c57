#include "mlda/cli.hpp"

#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "mlda/config_io.hpp"
#include "mlda/evaluation.hpp"
#include "mlda/log.hpp"
#include "mlda/synthdata.hpp"
#include "mlda/training.hpp"

namespace mlda {

namespace fs = std::filesystem;

namespace {

// Bad arguments or an invalid configuration: exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename F>
auto as_usage(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(e.what());
  }
}

CliConfigFile load_config(const std::optional<std::string>& path) {
  if (!path) return {};
  return as_usage([&] { return read_cli_config(*path); });
}

struct GenDataArgs {
  std::string out;
  int n_per_domain = 200;
  std::optional<std::uint64_t> seed;
  std::optional<double> split;
  std::optional<std::string> config;
};

struct TrainArgs {
  std::string data;
  std::optional<std::string> variant, mode, config;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
  std::optional<int> s0, d0, adv_epochs, batch_size;
};

struct EvalArgs {
  std::string data, ckpt;
  std::string domain = "T";
  std::string split = "test";
  double threshold = kDefaultThreshold;
};

struct ReportArgs {
  std::string matrix;
  std::optional<std::string> out;
  bool assemble_only = false;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  const auto cfg = load_config(a.config);
  const SceneSpec scene = cfg.scene.value_or(SceneSpec{});
  const DomainStyle style_S = cfg.style_S.value_or(style_source());
  const DomainStyle style_T = cfg.style_T.value_or(style_target());
  const double split = a.split.value_or(cfg.split_fraction.value_or(0.8));
  const std::uint64_t seed = a.seed.value_or(0);
  as_usage([&] {
    scene.validate();
    if (!(split > 0 && split < 1)) throw std::invalid_argument("--split must lie in (0,1)");
    if (a.n_per_domain < 5) throw std::invalid_argument("--n-per-domain must be >= 5");
    return 0;
  });
  const auto m = generate_dataset(a.out, a.n_per_domain, scene, style_S, style_T, split, seed);
  out << m.manifest_path().string() << '\n';
  return kExitOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const auto cfg_file = load_config(a.config);
  TrainConfig cfg = cfg_file.train.value_or(TrainConfig{});
  as_usage([&] {
    if (a.variant) cfg.variant = variant_from_string(*a.variant);
    if (a.mode) cfg.mode = mode_from_string(*a.mode);
    if (a.seed) cfg.seed = *a.seed;
    if (a.s0) cfg.s0 = *a.s0;
    if (a.d0) cfg.d0 = *a.d0;
    if (a.adv_epochs) cfg.adv_epochs = *a.adv_epochs;
    if (a.batch_size) cfg.batch_size = *a.batch_size;
    cfg.validate();
    return 0;
  });
  fs::path manifest = a.data;
  if (fs::is_directory(manifest)) manifest /= "manifest.json";
  const auto result = train(cfg, manifest, a.run_dir);
  auto it = result.best_validation.find(Domain::T);
  if (it == result.best_validation.end()) it = result.best_validation.find(Domain::S);
  const Metrics m = it == result.best_validation.end() ? Metrics{} : it->second;
  out << "dice=" << m.dice << " acc=" << m.accuracy << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto [domain, split] = as_usage([&] {
    const Domain d = domain_from_string(a.domain);
    if (a.split != "test" && a.split != "train") throw std::invalid_argument("--split must be test or train");
    if (!(a.threshold > 0 && a.threshold < 1)) throw std::invalid_argument("--threshold must lie in (0,1)");
    return std::pair{d, a.split == "test" ? Split::Test : Split::Train};
  });
  fs::path manifest = a.data;
  if (fs::is_directory(manifest)) manifest /= "manifest.json";
  auto g = load_generator(a.ckpt);
  const auto ds = load_dataset(manifest);
  const auto m = evaluate(g, to_tensors(ds.get(domain, split), domain), a.threshold);
  out << "dice=" << m.dice << " acc=" << m.accuracy << " n=" << m.n_samples << '\n';
  return kExitOk;
}

int cmd_report(const ReportArgs& a, std::ostream& out) {
  ExperimentMatrix matrix = as_usage([&] {
    const auto j = read_json_file(a.matrix);
    ExperimentMatrix m;
    if (j.is_object() && j.contains("matrix")) {
      auto c = cli_config_from_json(j);
      m = *c.matrix;
      // A top-level train section supplies the matrix-wide TrainConfig.
      if (c.train && !j.at("matrix").contains("train")) m.train = *c.train;
    } else {
      apply_json(j, m);
    }
    if (a.out) m.output = *a.out;
    m.validate();
    return m;
  });
  const auto table = a.assemble_only ? assemble_report(matrix) : run_experiment_matrix(matrix);
  write_report(table, matrix.output);
  out << report_to_text(table);
  out << (matrix.output / "report.json").string() << '\n';
  for (const auto& row : table.rows)
    if (row.failed) return kExitFailure;
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-level adversarial domain adaptation for segmentation"};
  app.name("mlda");
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug | info | warn | error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic two-domain dataset");
  gen->add_option("--out", g.out, "Output directory (manifest.json is written here)")->required();
  gen->add_option("--n-per-domain", g.n_per_domain, "Images per domain")->capture_default_str();
  gen->add_option("--seed", g.seed, "Dataset seed (default 0)");
  gen->add_option("--split", g.split, "Train fraction per domain (default 0.8)");
  gen->add_option("--config", g.config, "JSON config with scene / style_S / style_T / split_fraction");

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train one variant; prints dice=<f> acc=<f>");
  tr->add_option("--data", t.data, "Dataset directory or manifest.json")->required();
  tr->add_option("--variant", t.variant, "origin_S origin_T from_scratch_joint sda_s sda_sed uda_s uda_e uda_d "
                                         "uda_ed uda_sed sf4 sf9 afc");
  tr->add_option("--mode", t.mode, "sda | uda");
  tr->add_option("--seed", t.seed, "Run seed");
  tr->add_option("--run-dir", t.run_dir, "Run directory")->required();
  tr->add_option("--config", t.config, "JSON config; its train section sets TrainConfig fields");
  tr->add_option("--s0", t.s0, "Phase-1 (segmentation pretraining) epochs");
  tr->add_option("--d0", t.d0, "Phase-2 (discriminator pretraining) epochs");
  tr->add_option("--adv-epochs", t.adv_epochs, "Phase-3 (adversarial) epochs");
  tr->add_option("--batch-size", t.batch_size, "Batch size (half source, half target in phase 3)");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one domain split");
  ev->add_option("--data", e.data, "Dataset directory or manifest.json")->required();
  ev->add_option("--ckpt", e.ckpt, "Checkpoint written by train")->required();
  ev->add_option("--domain", e.domain, "S | T")->capture_default_str();
  ev->add_option("--split", e.split, "test | train")->capture_default_str();
  ev->add_option("--threshold", e.threshold, "Binarisation threshold")->capture_default_str();

  ReportArgs r;
  auto* rep = app.add_subcommand("report", "Run an experiment matrix and write report.json / report.txt");
  rep->add_option("--matrix", r.matrix, "Matrix JSON (an ExperimentMatrix, or a config with a matrix section)")
      ->required();
  rep->add_option("--out", r.out, "Output directory (overrides the matrix output)");
  rep->add_flag("--assemble-only", r.assemble_only, "Rebuild the report from existing run directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const bool help = pe.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success);
    app.exit(pe, out, err);
    return help ? kExitOk : kExitUsage;
  }

  set_log_level(log_level == "debug" ? LogLevel::Debug
                : log_level == "warn" ? LogLevel::Warn
                : log_level == "error" ? LogLevel::Error
                                       : LogLevel::Info);
  try {
    if (*gen) return cmd_gen_data(g, out);
    if (*tr) return cmd_train(t, out);
    if (*ev) return cmd_eval(e, out);
    if (*rep) return cmd_report(r, out);
  } catch (const UsageError& ue) {
    err << "error: " << ue.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

int run_cli(int argc, const char* const* argv) { return run_cli(argc, argv, std::cout, std::cerr); }

}  // namespace mlda
