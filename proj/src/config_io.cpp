#include "mlda/config_io.hpp"

#include <fstream>
#include <set>

namespace mlda {

using nlohmann::json;

namespace {

class Reader {
 public:
  Reader(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
  }

  template <typename T>
  Reader& opt(const char* key, T& out) {
    return custom(key, [&](const json& v) { out = v.get<T>(); });
  }

  template <typename F>
  Reader& custom(const char* key, F&& f) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        f(*it);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError(ctx_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError(ctx_ + ": unknown key '" + item.key() + "'");
  }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const NetworkSpec& s) {
  return {{"n_encoder_stages", s.n_encoder_stages}, {"stage_widths", s.stage_widths},
          {"blocks_per_stage", s.blocks_per_stage}, {"decoder_widths", s.decoder_widths},
          {"input_channels", s.input_channels},     {"output_channels", s.output_channels},
          {"norm", std::string(to_string(s.norm))}};
}

void apply_json(const json& j, NetworkSpec& s) {
  Reader(j, "network")
      .opt("n_encoder_stages", s.n_encoder_stages)
      .opt("stage_widths", s.stage_widths)
      .opt("blocks_per_stage", s.blocks_per_stage)
      .opt("decoder_widths", s.decoder_widths)
      .opt("input_channels", s.input_channels)
      .opt("output_channels", s.output_channels)
      .custom("norm", [&](const json& v) { s.norm = norm_from_string(v.get<std::string>()); })
      .finish();
}

json to_json(const ShapeDiscriminatorSpec& s) {
  return {{"stage_widths", s.stage_widths},
          {"blocks_per_stage", s.blocks_per_stage},
          {"norm", std::string(to_string(s.norm))},
          {"negative_slope", s.negative_slope}};
}

void apply_json(const json& j, ShapeDiscriminatorSpec& s) {
  Reader(j, "shape_discriminator")
      .opt("stage_widths", s.stage_widths)
      .opt("blocks_per_stage", s.blocks_per_stage)
      .custom("norm", [&](const json& v) { s.norm = norm_from_string(v.get<std::string>()); })
      .opt("negative_slope", s.negative_slope)
      .finish();
}

json to_json(const TrainConfig& c) {
  return {{"mode", std::string(to_string(c.mode))},
          {"variant", std::string(to_string(c.variant))},
          {"s0", c.s0},
          {"d0", c.d0},
          {"adv_epochs", c.adv_epochs},
          {"alpha_e", c.alpha_e},
          {"alpha_d", c.alpha_d},
          {"alpha_s", c.alpha_s},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"seed", c.seed},
          {"network", to_json(c.network)},
          {"shape_discriminator", to_json(c.shape_discriminator)},
          {"head_width", c.head_width},
          {"validation_fraction", c.validation_fraction},
          {"threshold", c.threshold},
          {"d_steps", c.d_steps},
          {"g_steps", c.g_steps},
          {"flipped_labels", c.flipped_labels},
          {"discriminator_updates", c.discriminator_updates},
          {"divergence_limit", c.divergence_limit}};
}

void apply_json(const json& j, TrainConfig& c) {
  Reader(j, "train")
      .custom("mode", [&](const json& v) { c.mode = mode_from_string(v.get<std::string>()); })
      .custom("variant", [&](const json& v) { c.variant = variant_from_string(v.get<std::string>()); })
      .opt("s0", c.s0)
      .opt("d0", c.d0)
      .opt("adv_epochs", c.adv_epochs)
      .opt("alpha_e", c.alpha_e)
      .opt("alpha_d", c.alpha_d)
      .opt("alpha_s", c.alpha_s)
      .opt("batch_size", c.batch_size)
      .opt("lr", c.lr)
      .opt("beta1", c.beta1)
      .opt("beta2", c.beta2)
      .opt("seed", c.seed)
      .custom("network", [&](const json& v) { apply_json(v, c.network); })
      .custom("shape_discriminator", [&](const json& v) { apply_json(v, c.shape_discriminator); })
      .opt("head_width", c.head_width)
      .opt("validation_fraction", c.validation_fraction)
      .opt("threshold", c.threshold)
      .opt("d_steps", c.d_steps)
      .opt("g_steps", c.g_steps)
      .opt("flipped_labels", c.flipped_labels)
      .opt("discriminator_updates", c.discriminator_updates)
      .opt("divergence_limit", c.divergence_limit)
      .finish();
}

json to_json(const SceneSpec& s) {
  return {{"image_size", s.image_size},
          {"target_count_range", s.target_count_range},
          {"target_radius_range", s.target_radius_range},
          {"ellipticity_range", s.ellipticity_range}};
}

void apply_json(const json& j, SceneSpec& s) {
  Reader(j, "scene")
      .opt("image_size", s.image_size)
      .opt("target_count_range", s.target_count_range)
      .opt("target_radius_range", s.target_radius_range)
      .opt("ellipticity_range", s.ellipticity_range)
      .finish();
}

json to_json(const DomainStyle& s) {
  return {{"base_palette", {s.background, s.tissue, s.target}},
          {"noise_std", s.noise_std},
          {"texture_density", s.texture_density},
          {"contrast", s.contrast},
          {"distractor_count_range", s.distractor_count_range}};
}

void apply_json(const json& j, DomainStyle& s) {
  Reader(j, "style")
      .custom("base_palette",
              [&](const json& v) {
                if (!v.is_array() || v.size() != 3)
                  throw ConfigError("style.base_palette: expected [background, tissue, target] colors");
                s.background = v[0].get<Rgb>();
                s.tissue = v[1].get<Rgb>();
                s.target = v[2].get<Rgb>();
              })
      .opt("noise_std", s.noise_std)
      .opt("texture_density", s.texture_density)
      .opt("contrast", s.contrast)
      .opt("distractor_count_range", s.distractor_count_range)
      .finish();
}

json to_json(const MatrixEntry& e) {
  json j = {{"variant", std::string(to_string(e.variant))}, {"mode", std::string(to_string(e.mode))}};
  if (e.n_seeds > 0) j["n_seeds"] = e.n_seeds;
  if (!e.dataset.empty()) j["dataset"] = e.dataset.string();
  if (!e.train.empty()) j["train"] = e.train;
  return j;
}

void apply_json(const json& j, MatrixEntry& e) {
  Reader(j, "matrix.entries[]")
      .custom("variant", [&](const json& v) { e.variant = variant_from_string(v.get<std::string>()); })
      .custom("mode", [&](const json& v) { e.mode = mode_from_string(v.get<std::string>()); })
      .opt("n_seeds", e.n_seeds)
      .custom("dataset", [&](const json& v) { e.dataset = v.get<std::string>(); })
      .custom("train",
              [&](const json& v) {
                TrainConfig probe;
                apply_json(v, probe);  // reject unknown keys up front
                e.train = v;
              })
      .finish();
}

json to_json(const ExperimentMatrix& m) {
  json entries = json::array();
  for (const auto& e : m.entries) entries.push_back(to_json(e));
  return {{"dataset", m.dataset.string()}, {"n_seeds", m.n_seeds},   {"base_seed", m.base_seed},
          {"output", m.output.string()},   {"train", to_json(m.train)}, {"entries", entries}};
}

void apply_json(const json& j, ExperimentMatrix& m) {
  Reader(j, "matrix")
      .custom("dataset", [&](const json& v) { m.dataset = v.get<std::string>(); })
      .opt("n_seeds", m.n_seeds)
      .opt("base_seed", m.base_seed)
      .custom("output", [&](const json& v) { m.output = v.get<std::string>(); })
      .custom("train", [&](const json& v) { apply_json(v, m.train); })
      .custom("preset",
              [&](const json& v) {
                for (auto& e : preset_entries(v.get<std::string>())) m.entries.push_back(std::move(e));
              })
      .custom("entries",
              [&](const json& v) {
                if (!v.is_array()) throw ConfigError("matrix.entries: expected an array");
                for (const auto& item : v) {
                  MatrixEntry e;
                  apply_json(item, e);
                  m.entries.push_back(std::move(e));
                }
              })
      .finish();
}

json manifest_to_json(const DatasetManifest& m) {
  auto splits = [](const DomainSplits& s) { return json{{"train", s.train}, {"test", s.test}}; };
  return {{"seed", m.seed},
          {"scene", to_json(m.scene)},
          {"styles", {{"S", to_json(m.style_S)}, {"T", to_json(m.style_T)}}},
          {"splits", {{"S", splits(m.splits_S)}, {"T", splits(m.splits_T)}}}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  auto read_splits = [](const json& v, DomainSplits& s, const std::string& ctx) {
    Reader(v, ctx).opt("train", s.train).opt("test", s.test).finish();
  };
  Reader(j, "manifest")
      .opt("seed", m.seed)
      .custom("scene", [&](const json& v) { apply_json(v, m.scene); })
      .custom("styles",
              [&](const json& v) {
                Reader(v, "manifest.styles")
                    .custom("S", [&](const json& s) { apply_json(s, m.style_S); })
                    .custom("T", [&](const json& s) { apply_json(s, m.style_T); })
                    .finish();
              })
      .custom("splits",
              [&](const json& v) {
                Reader(v, "manifest.splits")
                    .custom("S", [&](const json& s) { read_splits(s, m.splits_S, "manifest.splits.S"); })
                    .custom("T", [&](const json& s) { read_splits(s, m.splits_T, "manifest.splits.T"); })
                    .finish();
              })
      .finish();
  for (const char* key : {"seed", "scene", "styles", "splits"})
    if (!j.contains(key)) throw ConfigError(std::string("manifest: missing key '") + key + "'");
  return m;
}

json to_json(const CliConfigFile& c) {
  json j = json::object();
  if (c.train) j["train"] = to_json(*c.train);
  if (c.scene) j["scene"] = to_json(*c.scene);
  if (c.style_S) j["style_S"] = to_json(*c.style_S);
  if (c.style_T) j["style_T"] = to_json(*c.style_T);
  if (c.split_fraction) j["split_fraction"] = *c.split_fraction;
  if (c.matrix) j["matrix"] = to_json(*c.matrix);
  return j;
}

CliConfigFile cli_config_from_json(const json& j) {
  CliConfigFile c;
  Reader(j, "config")
      .custom("train", [&](const json& v) { apply_json(v, c.train.emplace()); })
      .custom("scene", [&](const json& v) { apply_json(v, c.scene.emplace()); })
      .custom("style_S", [&](const json& v) { apply_json(v, c.style_S.emplace(style_source())); })
      .custom("style_T", [&](const json& v) { apply_json(v, c.style_T.emplace(style_target())); })
      .custom("split_fraction", [&](const json& v) { c.split_fraction = v.get<double>(); })
      .custom("matrix", [&](const json& v) { apply_json(v, c.matrix.emplace()); })
      .finish();
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

CliConfigFile read_cli_config(const std::filesystem::path& path) { return cli_config_from_json(read_json_file(path)); }

}  // namespace mlda
