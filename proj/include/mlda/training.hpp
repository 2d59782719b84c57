#pragma once

// Three-phase training of G against its adversaries:
//   1. pretrain G on labelled data by minimising L_seg            (s0 epochs)
//   2. pretrain the enabled discriminators against the frozen G    (d0 epochs)
//   3. alternate: one discriminator update on detached features,
//      then one G update on L_full = L_seg - a_e L_De - a_d L_Dd - a_s L_Ds
//                                                                  (adv_epochs)
// In UDA mode only source labels ever reach L_seg; target images feed the
// domain and shape terms.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mlda/batch.hpp"
#include "mlda/checkpoint.hpp"
#include "mlda/discriminators.hpp"
#include "mlda/segnet.hpp"
#include "mlda/synthdata.hpp"

namespace mlda {

enum class Mode { SDA, UDA };

enum class Variant {
  OriginS,
  OriginT,
  FromScratchJoint,
  SdaS,
  SdaSed,
  UdaS,
  UdaE,
  UdaD,
  UdaEd,
  UdaSed,
  Sf4,
  Sf9,
  Afc,
};

std::string_view to_string(Mode m);
Mode mode_from_string(std::string_view s);
std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);
const std::vector<Variant>& all_variants();

/// Which adversaries a variant trains and which labels it may use.
struct VariantTraits {
  bool d_e = false;
  bool d_d = false;
  bool d_s = false;
  int single_layer = 0;  // pyramid layer adapted by an SF head, 0 = none
  bool afc = false;
  bool labels_S = false;
  bool labels_T = false;
  bool requires_sda = false;
  bool requires_uda = false;

  bool adversarial() const { return d_e || d_d || d_s || single_layer != 0 || afc; }
};

VariantTraits traits(Variant v);
bool compatible(Variant v, Mode m);

struct TrainConfig {
  Mode mode = Mode::UDA;
  Variant variant = Variant::UdaSed;
  int s0 = 50;
  int d0 = 10;
  int adv_epochs = 100;
  double alpha_e = 0.01;
  double alpha_d = 0.05;
  double alpha_s = 0.1;
  int batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  NetworkSpec network;
  ShapeDiscriminatorSpec shape_discriminator;
  int head_width = 32;
  double validation_fraction = 0.1;
  double threshold = kDefaultThreshold;
  int d_steps = 1;  // discriminator updates per alternating step
  int g_steps = 1;  // generator updates per alternating step
  bool flipped_labels = false;
  bool discriminator_updates = true;
  double divergence_limit = 1e4;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

enum class Phase { PretrainG, PretrainD, Adversarial };
std::string_view to_string(Phase p);
Phase phase_from_string(std::string_view s);

struct LossWeights {
  double e = 0.0;
  double d = 0.0;
  double s = 0.0;
};

struct LossBundle {
  Phase phase = Phase::PretrainG;
  int epoch = 0;
  int step = 0;
  double l_seg = 0.0;
  double l_de = 0.0;
  double l_dd = 0.0;
  double l_ds = 0.0;
  LossWeights alphas;
  double l_full = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::filesystem::path last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const std::filesystem::path& last_good_checkpoint() const { return last_good_; }

 private:
  std::filesystem::path last_good_;
};

/// l_seg - a_e l_de - a_d l_dd - a_s l_ds. Throws NonFiniteLoss on NaN/inf input.
double combined_loss(double l_seg, double l_de, double l_dd, double l_ds, const LossWeights& alphas);
torch::Tensor combined_loss(const torch::Tensor& l_seg, const torch::Tensor& l_de, const torch::Tensor& l_dd,
                            const torch::Tensor& l_ds, const LossWeights& alphas);

struct EpochMetrics {
  int epoch = 0;
  Phase phase = Phase::PretrainG;
  Domain domain = Domain::S;
  Metrics metrics;
};

struct TestMetrics {
  std::string checkpoint;  // "best" | "final"
  Domain domain = Domain::S;
  Metrics metrics;
};

struct RunHistory {
  TrainConfig config;
  std::string revision;
  std::vector<LossBundle> losses;        // one per epoch
  std::vector<EpochMetrics> validation;  // one per epoch and domain
  std::vector<TestMetrics> test;
  int best_epoch = 0;
  double wall_clock_seconds = 0.0;
  std::string status;  // "ok" | "aborted" | "" while running
  std::string abort_reason;

  std::optional<Metrics> test_metrics(Domain d, const std::string& checkpoint = "best") const;
};

std::string source_revision();

nlohmann::json to_json_record(const LossBundle& b);
nlohmann::json to_json_record(const EpochMetrics& m);
nlohmann::json to_json_record(const TestMetrics& m);

/// Append-only history.jsonl writer; every record is flushed immediately.
class HistoryWriter {
 public:
  explicit HistoryWriter(const std::filesystem::path& path);
  void write(const nlohmann::json& record);

 private:
  std::ofstream out_;
};

/// Rebuilds a RunHistory from a run directory (config.json + history.jsonl).
RunHistory read_history(const std::filesystem::path& run_dir);

struct TrainData {
  TensorSet train_S, train_T;
  TensorSet val_S, val_T;
  TensorSet test_S, test_T;

  const TensorSet& train(Domain d) const { return d == Domain::S ? train_S : train_T; }
  const TensorSet& val(Domain d) const { return d == Domain::S ? val_S : val_T; }
  const TensorSet& test(Domain d) const { return d == Domain::S ? test_S : test_T; }
};

/// Holds out validation_fraction of each training split (seeded by the run
/// seed) and drops target training labels when the variant may not see them.
TrainData prepare_data(const Dataset& ds, const TrainConfig& cfg);

/// The adversaries enabled for one variant; absent ones are empty holders.
struct Adversaries {
  EncoderDiscriminator d_e;
  DecoderDiscriminator d_d;
  ShapeDiscriminator d_s{nullptr};
  ClassifierHead sf_head{nullptr};
  int sf_layer = 0;
  ClassifierHead afc_head{nullptr};

  /// (role, module) for every present adversary, in a fixed order.
  std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> modules() const;
  bool empty() const { return modules().empty(); }
};

Adversaries build_adversaries(const TrainConfig& cfg);

struct StepBatch {
  TensorSet s;
  TensorSet t;
};

struct StepForward {
  std::optional<SegOutput> s;
  std::optional<SegOutput> t;
};

/// Everything one training run owns: G, its adversaries, their optimisers
/// and the history sink.
class TrainingContext {
 public:
  explicit TrainingContext(TrainConfig cfg, std::filesystem::path run_dir = {});

  const TrainConfig& config() const { return cfg_; }
  const VariantTraits& variant_traits() const { return traits_; }
  SegmentationNet& generator() { return g_; }
  Adversaries& adversaries() { return adv_; }
  RunHistory& history() { return history_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }

  int epoch() const { return epoch_; }
  int next_epoch() { return ++epoch_; }
  int& global_step() { return step_; }

  /// Fresh Adam state for G / for every adversary (phase transitions).
  void reset_generator_optimizer();
  void reset_adversary_optimizers();
  torch::optim::Adam& generator_optimizer() { return *opt_g_; }
  torch::optim::Adam& adversary_optimizer(const std::string& role) { return *opt_adv_.at(role); }

  void record(const LossBundle& b);
  void record(const EpochMetrics& m);
  void record(const TestMetrics& m);
  void record_raw(const nlohmann::json& j);

  Checkpoint snapshot() const;
  /// Writes ckpt_last_good.bin (when a run directory is set) and returns its path.
  std::filesystem::path save_last_good() const;

  /// Sampler that persists across calls, created on first use.
  EpochSampler& sampler(const std::string& key, std::int64_t n, std::uint64_t seed);

  /// Validation metrics of the current G on every nonempty validation split,
  /// recorded under the current epoch. With `reuse` the previous values are
  /// recorded again (G unchanged since).
  std::map<Domain, Metrics> record_validation(const TrainData& data, Phase phase, bool reuse = false);

 private:
  TrainConfig cfg_;
  VariantTraits traits_;
  std::filesystem::path run_dir_;
  SegmentationNet g_{nullptr};
  Adversaries adv_;
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::map<std::string, std::unique_ptr<torch::optim::Adam>> opt_adv_;
  RunHistory history_;
  std::unique_ptr<HistoryWriter> writer_;
  std::map<std::string, EpochSampler> samplers_;
  std::map<Domain, Metrics> last_validation_;
  int epoch_ = 0;
  int step_ = 0;
};

using EpochCallback = std::function<void(int epoch)>;

/// Phase 1. SDA variants draw batches from the labelled union of S and T;
/// UDA variants from labelled S only. Returns one LossBundle per epoch.
std::vector<LossBundle> pretrain_segmentation(TrainingContext& ctx, const TrainData& data, int epochs,
                                              const EpochCallback& on_epoch = {});

/// Phase 2. G is frozen; every enabled adversary is trained on balanced S/T
/// batches. Throws std::invalid_argument if the context's adversaries do not
/// match the variant.
std::vector<LossBundle> pretrain_discriminators(TrainingContext& ctx, const TrainData& data, int epochs);

/// Runs G on both halves of a step batch (halves the variant never uses are
/// skipped). Outputs keep their autograd graph.
StepForward forward_generator(TrainingContext& ctx, const StepBatch& batch);

/// Step (a): updates every enabled adversary on detached G outputs.
/// Returns the adversary losses in an otherwise empty bundle.
LossBundle discriminator_update(TrainingContext& ctx, const StepForward& fwd, const StepBatch& batch);

/// Step (b): one G update on L_full with adversary parameters frozen.
LossBundle generator_update(TrainingContext& ctx, const StepForward& fwd, const StepBatch& batch);

/// Phase 3 epoch: per-step bundles of the G updates.
std::vector<LossBundle> adversarial_epoch(TrainingContext& ctx, const TrainData& data);

/// Pyramid layer adapted by the SF baselines: the deepest skip-connected
/// encoder map (layer n-1, f4 for 5 stages) or the last decoder map (layer
/// 2n-1, f9 for 5 stages). 0 for every other variant.
int single_layer_index(Variant v, const NetworkSpec& spec);

/// Number of alternating steps in one phase-3 epoch.
std::int64_t adversarial_steps_per_epoch(const TrainData& data, const TrainConfig& cfg);

struct TrainResult {
  RunHistory history;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::map<Domain, Metrics> best_validation;
};

/// Runs all three phases, writing config.json, history.jsonl and
/// ckpt_{final,best}.bin under run_dir. Partial history is always on disk.
TrainResult train(const TrainConfig& cfg, const Dataset& ds, const std::filesystem::path& run_dir);
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& manifest, const std::filesystem::path& run_dir);

/// Loads G from a checkpoint written by train().
SegmentationNet load_generator(const std::filesystem::path& checkpoint);

}  // namespace mlda
