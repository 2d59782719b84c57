#include "mlda/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "mlda/config_io.hpp"
#include "mlda/evaluation.hpp"
#include "mlda/log.hpp"

#ifndef MLDA_SOURCE_REVISION
#define MLDA_SOURCE_REVISION "unknown"
#endif

namespace mlda {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct VariantName {
  Variant v;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {Variant::OriginS, "origin_S"}, {Variant::OriginT, "origin_T"}, {Variant::FromScratchJoint, "from_scratch_joint"},
    {Variant::SdaS, "sda_s"},       {Variant::SdaSed, "sda_sed"},   {Variant::UdaS, "uda_s"},
    {Variant::UdaE, "uda_e"},       {Variant::UdaD, "uda_d"},       {Variant::UdaEd, "uda_ed"},
    {Variant::UdaSed, "uda_sed"},   {Variant::Sf4, "sf4"},          {Variant::Sf9, "sf9"},
    {Variant::Afc, "afc"},
};

// Seed streams, so that e.g. the source sampler of phase 3 is identical for
// every variant trained with the same seed.
enum Stream : std::uint64_t {
  kStreamDe = 1,
  kStreamDd = 2,
  kStreamDs = 3,
  kStreamSf = 4,
  kStreamAfc = 5,
  kStreamPretrainG = 11,
  kStreamPretrainDS = 21,
  kStreamPretrainDT = 22,
  kStreamAdvS = 31,
  kStreamAdvT = 32,
  kStreamValidationS = 101,
  kStreamValidationT = 102,
};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

bool finite(double v) { return std::isfinite(v); }

torch::Tensor zero_scalar() { return torch::zeros({}); }

// Requires-grad off for a set of modules for the lifetime of the guard.
class FreezeGuard {
 public:
  explicit FreezeGuard(const std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>>& mods) {
    for (const auto& [role, m] : mods)
      for (auto& p : m->parameters()) {
        frozen_.push_back(p);
        p.requires_grad_(false);
      }
  }
  ~FreezeGuard() {
    for (auto& p : frozen_) p.requires_grad_(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<torch::Tensor> frozen_;
};

TensorSet concat_sets(const std::vector<const TensorSet*>& sets) {
  TensorSet out;
  std::vector<torch::Tensor> imgs, masks;
  for (const auto* s : sets) {
    imgs.push_back(s->images);
    masks.push_back(s->masks);
    out.ids.insert(out.ids.end(), s->ids.begin(), s->ids.end());
  }
  out.images = torch::cat(imgs);
  out.masks = torch::cat(masks);
  out.domain = sets.front()->domain;
  return out;
}

LossBundle mean_bundle(const std::vector<LossBundle>& steps, Phase phase, int epoch, int global_step) {
  LossBundle m;
  m.phase = phase;
  m.epoch = epoch;
  m.step = global_step;
  if (steps.empty()) return m;
  for (const auto& b : steps) {
    m.l_seg += b.l_seg;
    m.l_de += b.l_de;
    m.l_dd += b.l_dd;
    m.l_ds += b.l_ds;
    m.l_full += b.l_full;
  }
  const auto n = static_cast<double>(steps.size());
  m.l_seg /= n;
  m.l_de /= n;
  m.l_dd /= n;
  m.l_ds /= n;
  m.l_full /= n;
  m.alphas = steps.back().alphas;
  return m;
}

torch::Tensor domain_labels(std::int64_t n_s, std::int64_t n_t) {
  return torch::cat({torch::ones({n_s}), torch::zeros({n_t})});
}

// Pyramid of the whole step batch (S half first). Both halves are required.
FeaturePyramid step_pyramid(const StepForward& fwd, bool detach) {
  const auto& ps = fwd.s->pyramid;
  const auto& pt = fwd.t->pyramid;
  return detach ? FeaturePyramid::cat(ps.detached(), pt.detached()) : FeaturePyramid::cat(ps, pt);
}

// Real masks from the labelled halves the variant may use, generated masks
// from every half G was run on.
ShapeBatch shape_batch(const VariantTraits& tr, const StepForward& fwd, const StepBatch& batch, bool detach) {
  std::vector<torch::Tensor> real, fake;
  if (tr.labels_S && batch.s.labeled()) real.push_back(batch.s.masks);
  if (tr.labels_T && batch.t.labeled()) real.push_back(batch.t.masks);
  for (const auto* out : {&fwd.s, &fwd.t})
    if (out->has_value()) fake.push_back(detach ? (*out)->probs.detach() : (*out)->probs);
  auto r = torch::cat(real), f = torch::cat(fake);
  ShapeBatch sb;
  sb.masks = torch::cat({r, f});
  sb.realness_labels = torch::cat({torch::ones({r.size(0)}), torch::zeros({f.size(0)})});
  return sb;
}

// Whether the SF head adapts an encoder map (weighted like D_e) or a decoder
// map (weighted like D_d).
bool sf_layer_is_encoder(const TrainConfig& cfg, int layer) { return layer <= cfg.network.n_encoder_stages; }

std::int64_t half_s(const TrainConfig& cfg) { return cfg.batch_size / 2; }
std::int64_t half_t(const TrainConfig& cfg) { return cfg.batch_size - cfg.batch_size / 2; }

}  // namespace

std::string_view to_string(Mode m) { return m == Mode::SDA ? "sda" : "uda"; }

Mode mode_from_string(std::string_view s) {
  const auto l = lower(s);
  if (l == "sda") return Mode::SDA;
  if (l == "uda") return Mode::UDA;
  throw std::invalid_argument("unknown mode '" + std::string(s) + "', expected sda or uda");
}

std::string_view to_string(Variant v) {
  for (const auto& n : kVariantNames)
    if (n.v == v) return n.name;
  return "unknown";
}

Variant variant_from_string(std::string_view s) {
  for (const auto& n : kVariantNames)
    if (s == n.name) return n.v;
  for (const auto& n : kVariantNames)
    if (lower(s) == lower(n.name)) return n.v;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = [] {
    std::vector<Variant> out;
    for (const auto& n : kVariantNames) out.push_back(n.v);
    return out;
  }();
  return v;
}

VariantTraits traits(Variant v) {
  VariantTraits t;
  switch (v) {
    case Variant::OriginS: t.labels_S = true; break;
    case Variant::OriginT: t.labels_T = t.requires_sda = true; break;
    case Variant::FromScratchJoint: t.labels_S = t.labels_T = t.requires_sda = true; break;
    case Variant::SdaS: t.labels_S = t.labels_T = t.requires_sda = t.d_s = true; break;
    case Variant::SdaSed: t.labels_S = t.labels_T = t.requires_sda = t.d_s = t.d_e = t.d_d = true; break;
    case Variant::UdaS: t.labels_S = t.requires_uda = t.d_s = true; break;
    case Variant::UdaE: t.labels_S = t.requires_uda = t.d_e = true; break;
    case Variant::UdaD: t.labels_S = t.requires_uda = t.d_d = true; break;
    case Variant::UdaEd: t.labels_S = t.requires_uda = t.d_e = t.d_d = true; break;
    case Variant::UdaSed: t.labels_S = t.requires_uda = t.d_s = t.d_e = t.d_d = true; break;
    case Variant::Sf4: t.labels_S = t.requires_uda = true; t.single_layer = 4; break;
    case Variant::Sf9: t.labels_S = t.requires_uda = true; t.single_layer = 9; break;
    case Variant::Afc: t.labels_S = t.requires_uda = t.afc = true; break;
  }
  return t;
}

bool compatible(Variant v, Mode m) {
  const auto t = traits(v);
  return !(t.requires_sda && m == Mode::UDA) && !(t.requires_uda && m == Mode::SDA);
}

int single_layer_index(Variant v, const NetworkSpec& spec) {
  if (v == Variant::Sf4) return spec.n_encoder_stages - 1;
  if (v == Variant::Sf9) return 2 * spec.n_encoder_stages - 1;
  return 0;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (!compatible(variant, mode))
    fail("variant " + std::string(to_string(variant)) + " cannot run in " + std::string(to_string(mode)) + " mode");
  if (s0 < 0 || d0 < 0 || adv_epochs < 0) fail("epoch counts must be >= 0");
  if (!(alpha_e >= 0 && alpha_d >= 0 && alpha_s >= 0)) fail("alpha weights must be >= 0");
  if (batch_size < 2) fail("batch_size must be >= 2 (one source and one target half)");
  if (!(lr > 0)) fail("lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0,1)");
  if (head_width <= 0) fail("head_width must be > 0");
  if (!(validation_fraction >= 0 && validation_fraction < 1)) fail("validation_fraction must lie in [0,1)");
  if (!(threshold > 0 && threshold < 1)) fail("threshold must lie in (0,1)");
  if (d_steps < 1 || g_steps < 1) fail("d_steps and g_steps must be >= 1");
  if (!(divergence_limit > 0)) fail("divergence_limit must be > 0");
  network.validate();
  shape_discriminator.validate();
}

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::PretrainG: return "pretrain_g";
    case Phase::PretrainD: return "pretrain_d";
    case Phase::Adversarial: return "adversarial";
  }
  return "pretrain_g";
}

Phase phase_from_string(std::string_view s) {
  if (s == "pretrain_g") return Phase::PretrainG;
  if (s == "pretrain_d") return Phase::PretrainD;
  if (s == "adversarial") return Phase::Adversarial;
  throw std::invalid_argument("unknown phase '" + std::string(s) + "'");
}

double combined_loss(double l_seg, double l_de, double l_dd, double l_ds, const LossWeights& a) {
  const std::pair<const char*, double> parts[] = {{"l_seg", l_seg}, {"l_de", l_de}, {"l_dd", l_dd}, {"l_ds", l_ds}};
  for (const auto& [name, v] : parts)
    if (!finite(v)) throw NonFiniteLoss(std::string("combined_loss: component ") + name + " is " + std::to_string(v));
  return l_seg - a.e * l_de - a.d * l_dd - a.s * l_ds;
}

torch::Tensor combined_loss(const torch::Tensor& l_seg, const torch::Tensor& l_de, const torch::Tensor& l_dd,
                            const torch::Tensor& l_ds, const LossWeights& a) {
  const std::pair<const char*, const torch::Tensor*> parts[] = {
      {"l_seg", &l_seg}, {"l_de", &l_de}, {"l_dd", &l_dd}, {"l_ds", &l_ds}};
  for (const auto& [name, t] : parts)
    if (!torch::isfinite(*t).all().item<bool>())
      throw NonFiniteLoss(std::string("combined_loss: component ") + name + " is not finite");
  return l_seg - a.e * l_de - a.d * l_dd - a.s * l_ds;
}

std::optional<Metrics> RunHistory::test_metrics(Domain d, const std::string& checkpoint) const {
  for (const auto& t : test)
    if (t.domain == d && t.checkpoint == checkpoint) return t.metrics;
  return std::nullopt;
}

std::string source_revision() { return MLDA_SOURCE_REVISION; }

json to_json_record(const LossBundle& b) {
  return {{"type", "loss"},      {"phase", std::string(to_string(b.phase))},
          {"epoch", b.epoch},    {"step", b.step},
          {"l_seg", b.l_seg},    {"l_de", b.l_de},
          {"l_dd", b.l_dd},      {"l_ds", b.l_ds},
          {"alpha_e", b.alphas.e}, {"alpha_d", b.alphas.d},
          {"alpha_s", b.alphas.s}, {"l_full", b.l_full}};
}

json to_json_record(const EpochMetrics& m) {
  return {{"type", "metrics"},          {"split", "val"},
          {"phase", std::string(to_string(m.phase))},
          {"epoch", m.epoch},           {"domain", std::string(to_string(m.domain))},
          {"dice", m.metrics.dice},     {"accuracy", m.metrics.accuracy},
          {"n_samples", m.metrics.n_samples}};
}

json to_json_record(const TestMetrics& m) {
  return {{"type", "test"},
          {"checkpoint", m.checkpoint},
          {"domain", std::string(to_string(m.domain))},
          {"dice", m.metrics.dice},
          {"accuracy", m.metrics.accuracy},
          {"n_samples", m.metrics.n_samples}};
}

HistoryWriter::HistoryWriter(const fs::path& path) : out_(path, std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot write history " + path.string());
}

void HistoryWriter::write(const json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
}

RunHistory read_history(const fs::path& run_dir) {
  RunHistory h;
  const auto cfg_path = run_dir / "config.json";
  if (fs::exists(cfg_path)) {
    const auto cfg = cli_config_from_json(read_json_file(cfg_path));
    if (cfg.train) h.config = *cfg.train;
  }
  std::ifstream in(run_dir / "history.jsonl");
  if (!in) throw std::runtime_error("cannot open history in " + run_dir.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "loss") {
      LossBundle b;
      b.phase = phase_from_string(j.at("phase").get<std::string>());
      b.epoch = j.at("epoch");
      b.step = j.at("step");
      b.l_seg = j.at("l_seg");
      b.l_de = j.at("l_de");
      b.l_dd = j.at("l_dd");
      b.l_ds = j.at("l_ds");
      b.alphas = {j.at("alpha_e"), j.at("alpha_d"), j.at("alpha_s")};
      b.l_full = j.at("l_full");
      h.losses.push_back(b);
    } else if (type == "metrics") {
      EpochMetrics m;
      m.epoch = j.at("epoch");
      m.phase = phase_from_string(j.at("phase").get<std::string>());
      m.domain = domain_from_string(j.at("domain").get<std::string>());
      m.metrics = {j.at("dice"), j.at("accuracy"), j.at("n_samples")};
      h.validation.push_back(m);
    } else if (type == "test") {
      TestMetrics t;
      t.checkpoint = j.at("checkpoint");
      t.domain = domain_from_string(j.at("domain").get<std::string>());
      t.metrics = {j.at("dice"), j.at("accuracy"), j.at("n_samples")};
      h.test.push_back(t);
    } else if (type == "summary") {
      h.status = j.at("status");
      h.best_epoch = j.value("best_epoch", 0);
      h.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
      h.revision = j.value("revision", "");
    } else if (type == "aborted") {
      h.status = "aborted";
      h.abort_reason = j.value("reason", "");
    }
  }
  return h;
}

TrainData prepare_data(const Dataset& ds, const TrainConfig& cfg) {
  const auto tr = traits(cfg.variant);
  TrainData data;
  for (Domain d : {Domain::S, Domain::T}) {
    const auto& train = ds.get(d, Split::Train);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(cfg.seed, d == Domain::S ? kStreamValidationS : kStreamValidationT));
    std::shuffle(order.begin(), order.end(), rng);
    auto n_val = static_cast<std::size_t>(std::lround(cfg.validation_fraction * static_cast<double>(train.size())));
    if (cfg.validation_fraction > 0 && n_val == 0 && train.size() >= 2) n_val = 1;
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::vector<Sample> val, fit;
    for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val : fit).push_back(train[order[i]]);
    const bool labeled = d == Domain::S ? tr.labels_S : tr.labels_T;
    auto& train_set = d == Domain::S ? data.train_S : data.train_T;
    train_set = to_tensors(fit, d, labeled);
    (d == Domain::S ? data.val_S : data.val_T) = to_tensors(val, d);
    (d == Domain::S ? data.test_S : data.test_T) = to_tensors(ds.get(d, Split::Test), d);
  }
  return data;
}

std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> Adversaries::modules() const {
  std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> out;
  if (!d_e.net.is_empty()) out.emplace_back("d_e", d_e.net.ptr());
  if (!d_d.net.is_empty()) out.emplace_back("d_d", d_d.net.ptr());
  if (!d_s.is_empty()) out.emplace_back("d_s", d_s.ptr());
  if (!sf_head.is_empty()) out.emplace_back("sf_head", sf_head.ptr());
  if (!afc_head.is_empty()) out.emplace_back("afc_head", afc_head.ptr());
  return out;
}

Adversaries build_adversaries(const TrainConfig& cfg) {
  const auto tr = traits(cfg.variant);
  Adversaries a;
  if (tr.d_e) a.d_e = build_encoder_discriminator(cfg.network, mix_seed(cfg.seed, kStreamDe));
  if (tr.d_d) a.d_d = build_decoder_discriminator(cfg.network, mix_seed(cfg.seed, kStreamDd));
  if (tr.d_s) {
    auto spec = cfg.shape_discriminator;
    a.d_s = build_shape_discriminator(mix_seed(cfg.seed, kStreamDs), spec);
  }
  if (tr.single_layer) {
    a.sf_layer = single_layer_index(cfg.variant, cfg.network);
    a.sf_head = build_classifier_head(layer_channels(cfg.network, a.sf_layer), mix_seed(cfg.seed, kStreamSf),
                                      cfg.head_width, cfg.network.norm);
  }
  if (tr.afc)
    a.afc_head = build_classifier_head(pyramid_channels(cfg.network), mix_seed(cfg.seed, kStreamAfc), cfg.head_width,
                                       cfg.network.norm);
  return a;
}

TrainingContext::TrainingContext(TrainConfig cfg, fs::path run_dir)
    : cfg_(std::move(cfg)), traits_(traits(cfg_.variant)), run_dir_(std::move(run_dir)) {
  cfg_.validate();
  g_ = build_segmentation_network(cfg_.network, cfg_.seed);
  adv_ = build_adversaries(cfg_);
  reset_generator_optimizer();
  reset_adversary_optimizers();
  history_.config = cfg_;
  history_.revision = source_revision();
  if (!run_dir_.empty()) writer_ = std::make_unique<HistoryWriter>(run_dir_ / "history.jsonl");
}

void TrainingContext::reset_generator_optimizer() {
  opt_g_ = std::make_unique<torch::optim::Adam>(
      g_->parameters(), torch::optim::AdamOptions(cfg_.lr).betas({cfg_.beta1, cfg_.beta2}));
}

void TrainingContext::reset_adversary_optimizers() {
  opt_adv_.clear();
  for (const auto& [role, m] : adv_.modules())
    opt_adv_[role] = std::make_unique<torch::optim::Adam>(
        m->parameters(), torch::optim::AdamOptions(cfg_.lr).betas({cfg_.beta1, cfg_.beta2}));
}

void TrainingContext::record(const LossBundle& b) {
  history_.losses.push_back(b);
  if (writer_) writer_->write(to_json_record(b));
}

void TrainingContext::record(const EpochMetrics& m) {
  history_.validation.push_back(m);
  if (writer_) writer_->write(to_json_record(m));
}

void TrainingContext::record(const TestMetrics& m) {
  history_.test.push_back(m);
  if (writer_) writer_->write(to_json_record(m));
}

void TrainingContext::record_raw(const json& j) {
  if (writer_) writer_->write(j);
}

Checkpoint TrainingContext::snapshot() const {
  Checkpoint c;
  c.meta = {{"network", to_json(cfg_.network)},
            {"shape_discriminator", to_json(cfg_.shape_discriminator)},
            {"variant", std::string(to_string(cfg_.variant))},
            {"mode", std::string(to_string(cfg_.mode))},
            {"seed", cfg_.seed},
            {"epoch", epoch_},
            {"head_width", cfg_.head_width},
            {"sf_layer", adv_.sf_layer}};
  json roles = json::array({"g"});
  c.sections.push_back({"g", module_state(*g_)});
  for (const auto& [role, m] : adv_.modules()) {
    c.sections.push_back({role, module_state(*m)});
    roles.push_back(role);
  }
  c.meta["roles"] = roles;
  return c;
}

fs::path TrainingContext::save_last_good() const {
  if (run_dir_.empty()) return {};
  const auto path = run_dir_ / "ckpt_last_good.bin";
  write_checkpoint(path, snapshot());
  return path;
}

EpochSampler& TrainingContext::sampler(const std::string& key, std::int64_t n, std::uint64_t seed) {
  auto it = samplers_.find(key);
  if (it == samplers_.end()) it = samplers_.emplace(key, EpochSampler(n, seed)).first;
  return it->second;
}

std::map<Domain, Metrics> TrainingContext::record_validation(const TrainData& data, Phase phase, bool reuse) {
  if (!reuse || last_validation_.empty()) {
    last_validation_.clear();
    for (Domain d : {Domain::S, Domain::T})
      if (data.val(d).size() > 0) last_validation_[d] = evaluate(g_, data.val(d), cfg_.threshold);
  }
  for (const auto& [d, m] : last_validation_) record(EpochMetrics{epoch_, phase, d, m});
  return last_validation_;
}

namespace {

[[noreturn]] void abort_diverged(TrainingContext& ctx, const std::string& reason) {
  const auto path = ctx.save_last_good();
  ctx.history().status = "aborted";
  ctx.history().abort_reason = reason;
  ctx.record_raw({{"type", "aborted"}, {"epoch", ctx.epoch()}, {"reason", reason}, {"checkpoint", path.string()}});
  throw DivergenceError(reason + (path.empty() ? std::string() : "; last good checkpoint: " + path.string()), path);
}

void guard_loss(TrainingContext& ctx, double l_full, const char* what) {
  if (!finite(l_full) || std::abs(l_full) > ctx.config().divergence_limit)
    abort_diverged(ctx, std::string("training diverged: ") + what + " = " + std::to_string(l_full) +
                            " at epoch " + std::to_string(ctx.epoch()) + " step " +
                            std::to_string(ctx.global_step()));
}

}  // namespace

std::vector<LossBundle> pretrain_segmentation(TrainingContext& ctx, const TrainData& data, int epochs,
                                              const EpochCallback& on_epoch) {
  std::vector<LossBundle> out;
  if (epochs <= 0) return out;
  const auto& cfg = ctx.config();
  const auto& tr = ctx.variant_traits();
  if (!tr.labels_T && data.train_T.labeled())
    log_warn("pretrain_segmentation: target labels supplied to a variant that may not use them; ignored");
  std::vector<const TensorSet*> labeled;
  if (tr.labels_S && data.train_S.labeled() && data.train_S.size() > 0) labeled.push_back(&data.train_S);
  if (tr.labels_T && data.train_T.labeled() && data.train_T.size() > 0) labeled.push_back(&data.train_T);
  if (labeled.empty()) throw std::invalid_argument("pretrain_segmentation: no labelled training data");
  const TensorSet pool = labeled.size() == 1 ? *labeled.front() : concat_sets(labeled);

  auto& g = ctx.generator();
  auto& opt = ctx.generator_optimizer();
  EpochSampler sampler(pool.size(), mix_seed(cfg.seed, kStreamPretrainG));
  const auto steps = (pool.size() + cfg.batch_size - 1) / cfg.batch_size;
  g->train();
  for (int e = 0; e < epochs; ++e) {
    const int epoch = ctx.next_epoch();
    std::vector<LossBundle> step_losses;
    for (std::int64_t s = 0; s < steps; ++s) {
      const auto batch = pool.select(sampler.next(cfg.batch_size));
      auto l_seg = segmentation_loss(g->forward(batch.images).probs, batch.masks);
      LossBundle b;
      b.phase = Phase::PretrainG;
      b.epoch = epoch;
      b.l_seg = l_seg.item<double>();
      b.l_full = b.l_seg;
      guard_loss(ctx, b.l_full, "l_seg");
      opt.zero_grad();
      l_seg.backward();
      opt.step();
      b.step = ++ctx.global_step();
      step_losses.push_back(b);
    }
    const auto mean = mean_bundle(step_losses, Phase::PretrainG, epoch, ctx.global_step());
    ctx.record(mean);
    out.push_back(mean);
    ctx.record_validation(data, Phase::PretrainG);
    if (on_epoch) on_epoch(epoch);
  }
  return out;
}

namespace {

void check_adversaries_match(TrainingContext& ctx) {
  const auto& tr = ctx.variant_traits();
  auto& a = ctx.adversaries();
  const std::pair<const char*, std::pair<bool, bool>> roles[] = {
      {"D_e", {tr.d_e, !a.d_e.net.is_empty()}},
      {"D_d", {tr.d_d, !a.d_d.net.is_empty()}},
      {"D_s", {tr.d_s, !a.d_s.is_empty()}},
      {"SF head", {tr.single_layer != 0, !a.sf_head.is_empty()}},
      {"AFC head", {tr.afc, !a.afc_head.is_empty()}},
  };
  for (const auto& [name, expect_have] : roles)
    if (expect_have.first != expect_have.second)
      throw std::invalid_argument(std::string("variant ") + std::string(to_string(ctx.config().variant)) +
                                  (expect_have.first ? " requires " : " does not use ") + name);
}

}  // namespace

std::int64_t adversarial_steps_per_epoch(const TrainData& data, const TrainConfig& cfg) {
  const auto ns = (data.train_S.size() + half_s(cfg) - 1) / half_s(cfg);
  const auto nt = (data.train_T.size() + half_t(cfg) - 1) / half_t(cfg);
  return std::max<std::int64_t>(1, std::max(ns, nt));
}

std::vector<LossBundle> pretrain_discriminators(TrainingContext& ctx, const TrainData& data, int epochs) {
  check_adversaries_match(ctx);
  std::vector<LossBundle> out;
  const auto& cfg = ctx.config();
  if (epochs <= 0 || ctx.adversaries().empty() || !cfg.discriminator_updates) return out;
  auto& g = ctx.generator();
  const auto g_hash = parameter_hash(*g);
  EpochSampler sampler_s(data.train_S.size(), mix_seed(cfg.seed, kStreamPretrainDS));
  EpochSampler sampler_t(data.train_T.size(), mix_seed(cfg.seed, kStreamPretrainDT));
  const auto steps = adversarial_steps_per_epoch(data, cfg);
  for (int e = 0; e < epochs; ++e) {
    const int epoch = ctx.next_epoch();
    std::vector<LossBundle> step_losses;
    for (std::int64_t s = 0; s < steps; ++s) {
      StepBatch batch{data.train_S.select(sampler_s.next(half_s(cfg))),
                      data.train_T.select(sampler_t.next(half_t(cfg)))};
      StepForward fwd;
      {
        torch::NoGradGuard no_grad;
        fwd.s = g->forward(batch.s.images);
        fwd.t = g->forward(batch.t.images);
      }
      auto b = discriminator_update(ctx, fwd, batch);
      b.phase = Phase::PretrainD;
      b.epoch = epoch;
      step_losses.push_back(b);
    }
    const auto mean = mean_bundle(step_losses, Phase::PretrainD, epoch, ctx.global_step());
    ctx.record(mean);
    out.push_back(mean);
    ctx.record_validation(data, Phase::PretrainD, /*reuse=*/true);
  }
  if (parameter_hash(*g) != g_hash) throw std::logic_error("pretrain_discriminators modified G");
  return out;
}

StepForward forward_generator(TrainingContext& ctx, const StepBatch& batch) {
  const auto& tr = ctx.variant_traits();
  auto& g = ctx.generator();
  StepForward fwd;
  if ((tr.labels_S || tr.adversarial()) && batch.s.size() > 0) fwd.s = g->forward(batch.s.images);
  if ((tr.labels_T || tr.adversarial()) && batch.t.size() > 0) fwd.t = g->forward(batch.t.images);
  return fwd;
}

LossBundle discriminator_update(TrainingContext& ctx, const StepForward& fwd, const StepBatch& batch) {
  LossBundle b;
  b.phase = Phase::Adversarial;
  const auto& cfg = ctx.config();
  auto& adv = ctx.adversaries();
  if (!cfg.discriminator_updates || adv.empty()) return b;
  if (!fwd.s || !fwd.t) throw std::invalid_argument("discriminator_update: needs G outputs for both domains");
  const auto& tr = ctx.variant_traits();

  DomainBatch db{step_pyramid(fwd, /*detach=*/true), domain_labels(fwd.s->probs.size(0), fwd.t->probs.size(0))};
  auto update = [&](const std::string& role, const std::function<torch::Tensor()>& loss_fn) {
    auto& opt = ctx.adversary_optimizer(role);
    opt.zero_grad();
    auto loss = loss_fn();
    loss.backward();
    opt.step();
    return loss.item<double>();
  };
  for (int k = 0; k < cfg.d_steps; ++k) {
    if (tr.d_e) b.l_de = update("d_e", [&] { return encoder_domain_loss(adv.d_e, db); });
    if (tr.d_d) b.l_dd = update("d_d", [&] { return decoder_domain_loss(adv.d_d, db); });
    if (tr.d_s) {
      const auto sb = shape_batch(tr, fwd, batch, /*detach=*/true);
      b.l_ds = update("d_s", [&] { return shape_adversarial_loss(adv.d_s, sb); });
    }
    if (tr.single_layer) {
      const double l = update("sf_head", [&] {
        return single_layer_domain_loss(adv.sf_head, db.pyramids.layer(adv.sf_layer), db.domain_labels);
      });
      (sf_layer_is_encoder(cfg, adv.sf_layer) ? b.l_de : b.l_dd) = l;
    }
    if (tr.afc)
      b.l_de = update("afc_head", [&] {
        return single_layer_domain_loss(adv.afc_head, crop_concat_features(db.pyramids), db.domain_labels);
      });
  }
  return b;
}

LossBundle generator_update(TrainingContext& ctx, const StepForward& fwd, const StepBatch& batch) {
  const auto& cfg = ctx.config();
  const auto& tr = ctx.variant_traits();
  auto& adv = ctx.adversaries();
  LossBundle b;
  b.phase = Phase::Adversarial;
  b.epoch = ctx.epoch();

  std::vector<torch::Tensor> probs, masks;
  if (tr.labels_S && fwd.s && batch.s.labeled()) {
    probs.push_back(fwd.s->probs);
    masks.push_back(batch.s.masks);
  }
  if (tr.labels_T && fwd.t && batch.t.labeled()) {
    probs.push_back(fwd.t->probs);
    masks.push_back(batch.t.masks);
  }
  if (probs.empty()) throw std::invalid_argument("generator_update: no labelled half in the step batch");
  auto l_seg = segmentation_loss(torch::cat(probs), torch::cat(masks));

  FreezeGuard freeze(adv.modules());
  torch::Tensor l_de = zero_scalar(), l_dd = zero_scalar(), l_ds = zero_scalar();
  LossWeights alphas;
  if (tr.adversarial()) {
    if (!fwd.s || !fwd.t) throw std::invalid_argument("generator_update: needs G outputs for both domains");
    auto labels = domain_labels(fwd.s->probs.size(0), fwd.t->probs.size(0));
    if (cfg.flipped_labels) labels = 1.0 - labels;
    const DomainBatch db{step_pyramid(fwd, /*detach=*/false), labels};
    if (tr.d_e) {
      l_de = encoder_domain_loss(adv.d_e, db);
      alphas.e = cfg.alpha_e;
    }
    if (tr.d_d) {
      l_dd = decoder_domain_loss(adv.d_d, db);
      alphas.d = cfg.alpha_d;
    }
    if (tr.d_s) {
      auto sb = shape_batch(tr, fwd, batch, /*detach=*/false);
      if (cfg.flipped_labels) sb.realness_labels = 1.0 - sb.realness_labels;
      l_ds = shape_adversarial_loss(adv.d_s, sb);
      alphas.s = cfg.alpha_s;
    }
    if (tr.single_layer) {
      auto l = single_layer_domain_loss(adv.sf_head, db.pyramids.layer(adv.sf_layer), labels);
      if (sf_layer_is_encoder(cfg, adv.sf_layer)) {
        l_de = l;
        alphas.e = cfg.alpha_e;
      } else {
        l_dd = l;
        alphas.d = cfg.alpha_d;
      }
    }
    if (tr.afc) {
      // One head over every layer: carries the combined encoder+decoder weight.
      l_de = single_layer_domain_loss(adv.afc_head, crop_concat_features(db.pyramids), labels);
      alphas.e = cfg.alpha_e + cfg.alpha_d;
    }
  }

  b.l_seg = l_seg.item<double>();
  b.l_de = l_de.item<double>();
  b.l_dd = l_dd.item<double>();
  b.l_ds = l_ds.item<double>();
  b.alphas = alphas;
  torch::Tensor l_full;
  try {
    if (cfg.flipped_labels) {
      // Non-saturating form: G descends the discriminators' flipped-label BCE.
      l_full = l_seg + alphas.e * l_de + alphas.d * l_dd + alphas.s * l_ds;
      b.l_full = b.l_seg + alphas.e * b.l_de + alphas.d * b.l_dd + alphas.s * b.l_ds;
    } else {
      l_full = combined_loss(l_seg, l_de, l_dd, l_ds, alphas);
      b.l_full = combined_loss(b.l_seg, b.l_de, b.l_dd, b.l_ds, alphas);
    }
  } catch (const NonFiniteLoss& e) {
    abort_diverged(ctx, e.what());
  }
  guard_loss(ctx, b.l_full, "l_full");

  auto& opt = ctx.generator_optimizer();
  opt.zero_grad();
  l_full.backward();
  opt.step();
  b.step = ++ctx.global_step();
  return b;
}

std::vector<LossBundle> adversarial_epoch(TrainingContext& ctx, const TrainData& data) {
  const auto& cfg = ctx.config();
  const int epoch = ctx.next_epoch();
  auto& sampler_s = ctx.sampler("adv_S", data.train_S.size(), mix_seed(cfg.seed, kStreamAdvS));
  auto& sampler_t = ctx.sampler("adv_T", data.train_T.size(), mix_seed(cfg.seed, kStreamAdvT));
  const auto steps = adversarial_steps_per_epoch(data, cfg);
  const bool adversarial = ctx.variant_traits().adversarial();
  ctx.generator()->train();
  std::vector<LossBundle> out;
  for (std::int64_t s = 0; s < steps; ++s) {
    const StepBatch batch{data.train_S.select(sampler_s.next(half_s(cfg))),
                          data.train_T.select(sampler_t.next(half_t(cfg)))};
    auto fwd = forward_generator(ctx, batch);
    LossBundle d_losses;
    if (adversarial) d_losses = discriminator_update(ctx, fwd, batch);
    LossBundle b = generator_update(ctx, fwd, batch);
    for (int k = 1; k < cfg.g_steps; ++k) {
      fwd = forward_generator(ctx, batch);
      b = generator_update(ctx, fwd, batch);
    }
    b.epoch = epoch;
    out.push_back(b);
  }
  const auto mean = mean_bundle(out, Phase::Adversarial, epoch, ctx.global_step());
  ctx.record(mean);
  ctx.record_validation(data, Phase::Adversarial);
  return out;
}

namespace {

void remove_run_artifacts(const fs::path& run_dir) {
  for (const char* name : {"config.json", "history.jsonl", "ckpt_final.bin", "ckpt_best.bin", "ckpt_last_good.bin",
                           "loss_curve.png"})
    fs::remove(run_dir / name);
}

double selection_score(const std::map<Domain, Metrics>& val, const VariantTraits& tr) {
  double sum = 0;
  int n = 0;
  for (const auto& [d, m] : val)
    if ((d == Domain::S && tr.labels_S) || (d == Domain::T && tr.labels_T)) {
      sum += m.dice;
      ++n;
    }
  return n ? sum / n : 0.0;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& ds, const fs::path& run_dir) {
  cfg.validate();
  fs::create_directories(run_dir);
  remove_run_artifacts(run_dir);
  {
    std::ofstream out(run_dir / "config.json");
    if (!out) throw std::runtime_error("cannot write " + (run_dir / "config.json").string());
    out << json{{"train", to_json(cfg)}}.dump(2) << '\n';
  }
  const auto started = std::chrono::steady_clock::now();
  TrainingContext ctx(cfg, run_dir);
  const TrainData data = prepare_data(ds, cfg);
  const auto& tr = ctx.variant_traits();

  struct Best {
    int epoch = -1;
    double score = -1.0;
    std::map<Domain, Metrics> validation;
    Checkpoint snapshot;
  } best;
  auto consider = [&](int epoch) {
    std::map<Domain, Metrics> val;
    for (auto it = ctx.history().validation.rbegin(); it != ctx.history().validation.rend() && it->epoch == epoch; ++it)
      val[it->domain] = it->metrics;
    const double score = selection_score(val, tr);
    if (score > best.score) {
      best = {epoch, score, val, ctx.snapshot()};
    }
  };

  try {
    // Best-checkpoint candidates come from the last phase that trains G.
    pretrain_segmentation(ctx, data, cfg.s0, cfg.adv_epochs == 0 ? EpochCallback(consider) : EpochCallback());
    if (tr.adversarial()) {
      ctx.reset_adversary_optimizers();
      pretrain_discriminators(ctx, data, cfg.d0);
    }
    ctx.reset_generator_optimizer();
    ctx.reset_adversary_optimizers();
    for (int e = 0; e < cfg.adv_epochs; ++e) {
      adversarial_epoch(ctx, data);
      consider(ctx.epoch());
    }
  } catch (const DivergenceError&) {
    ctx.record_raw({{"type", "summary"},
                    {"status", "aborted"},
                    {"wall_clock_seconds",
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()},
                    {"revision", source_revision()}});
    throw;
  }

  if (best.epoch < 0) {
    best.epoch = ctx.epoch();
    best.snapshot = ctx.snapshot();
    best.validation = ctx.record_validation(data, Phase::Adversarial, true);
  }

  TrainResult result;
  result.final_checkpoint = run_dir / "ckpt_final.bin";
  result.best_checkpoint = run_dir / "ckpt_best.bin";
  write_checkpoint(result.final_checkpoint, ctx.snapshot());
  write_checkpoint(result.best_checkpoint, best.snapshot);

  auto final_state = module_state(*ctx.generator());
  for (const char* which : {"best", "final"}) {
    auto& g = ctx.generator();
    load_module_state(*g, std::string(which) == "best" ? best.snapshot.section("g").tensors : final_state);
    for (Domain d : {Domain::S, Domain::T})
      if (data.test(d).size() > 0) ctx.record(TestMetrics{which, d, evaluate(g, data.test(d), cfg.threshold)});
  }

  ctx.history().best_epoch = best.epoch;
  ctx.history().status = "ok";
  ctx.history().wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  ctx.record_raw({{"type", "summary"},
                  {"status", "ok"},
                  {"best_epoch", best.epoch},
                  {"wall_clock_seconds", ctx.history().wall_clock_seconds},
                  {"revision", source_revision()}});
  try {
    write_loss_curve_png(ctx.history(), run_dir / "loss_curve.png");
  } catch (const std::exception& e) {
    log_warn(std::string("could not write loss curve: ") + e.what());
  }
  result.history = ctx.history();
  result.best_validation = best.validation;
  return result;
}

TrainResult train(const TrainConfig& cfg, const fs::path& manifest, const fs::path& run_dir) {
  cfg.validate();
  return train(cfg, load_dataset(manifest), run_dir);
}

SegmentationNet load_generator(const fs::path& checkpoint) {
  const auto ckpt = read_checkpoint(checkpoint);
  NetworkSpec spec;
  if (!ckpt.meta.contains("network")) throw CheckpointError(checkpoint.string() + " carries no network spec");
  apply_json(ckpt.meta.at("network"), spec);
  SegmentationNet g(spec);
  load_module_state(*g, ckpt.section("g").tensors);
  return g;
}

}  // namespace mlda
