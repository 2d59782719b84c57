#pragma once

// JSON mapping of every configuration type. Readers are strict (unknown keys
// are rejected) and layered: apply_json() only overwrites the keys present,
// so defaults < config file < command-line flags compose naturally.

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "mlda/discriminators.hpp"
#include "mlda/evaluation.hpp"
#include "mlda/segnet.hpp"
#include "mlda/synthdata.hpp"
#include "mlda/training.hpp"

namespace mlda {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

nlohmann::json to_json(const NetworkSpec& s);
nlohmann::json to_json(const ShapeDiscriminatorSpec& s);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const SceneSpec& s);
nlohmann::json to_json(const DomainStyle& s);
nlohmann::json to_json(const MatrixEntry& e);
nlohmann::json to_json(const ExperimentMatrix& m);

void apply_json(const nlohmann::json& j, NetworkSpec& s);
void apply_json(const nlohmann::json& j, ShapeDiscriminatorSpec& s);
void apply_json(const nlohmann::json& j, TrainConfig& c);
void apply_json(const nlohmann::json& j, SceneSpec& s);
void apply_json(const nlohmann::json& j, DomainStyle& s);
void apply_json(const nlohmann::json& j, MatrixEntry& e);
void apply_json(const nlohmann::json& j, ExperimentMatrix& m);

nlohmann::json manifest_to_json(const DatasetManifest& m);
/// Root path is left empty; read_manifest() fills it in.
DatasetManifest manifest_from_json(const nlohmann::json& j);

/// Top-level document accepted by every `--config` flag.
struct CliConfigFile {
  std::optional<TrainConfig> train;
  std::optional<SceneSpec> scene;
  std::optional<DomainStyle> style_S;
  std::optional<DomainStyle> style_T;
  std::optional<double> split_fraction;
  std::optional<ExperimentMatrix> matrix;

  bool operator==(const CliConfigFile&) const = default;
};

nlohmann::json to_json(const CliConfigFile& c);
/// Sections start from built-in defaults, then take the document's keys.
CliConfigFile cli_config_from_json(const nlohmann::json& j);
CliConfigFile read_cli_config(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace mlda
