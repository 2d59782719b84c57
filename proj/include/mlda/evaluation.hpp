#pragma once

// Final-model evaluation and the variant x seed experiment matrix behind the
// supervised / unsupervised comparison tables.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlda/batch.hpp"
#include "mlda/core.hpp"
#include "mlda/segnet.hpp"
#include "mlda/training.hpp"

namespace mlda {

/// Per-image dice and pixel accuracy of G on `split`, averaged over images.
Metrics evaluate(SegmentationNet& g, const TensorSet& split, double threshold = kDefaultThreshold,
                 std::int64_t batch_size = 16);

struct MatrixEntry {
  Variant variant = Variant::UdaSed;
  Mode mode = Mode::UDA;
  int n_seeds = 0;                    // 0: use the matrix default
  std::filesystem::path dataset;      // empty: use the matrix default
  nlohmann::json train = nlohmann::json::object();  // per-entry TrainConfig overrides

  bool operator==(const MatrixEntry&) const = default;
};

struct ExperimentMatrix {
  std::filesystem::path dataset;
  int n_seeds = 3;
  std::uint64_t base_seed = 0;
  std::filesystem::path output = "report";
  TrainConfig train;
  std::vector<MatrixEntry> entries;

  void validate() const;
  bool operator==(const ExperimentMatrix&) const = default;
};

/// Method rows of the supervised table: origin_S, origin_T, from-scratch, SDA-s, SDA-sed.
std::vector<MatrixEntry> supervised_table_entries();
/// Method rows of the unsupervised table, lower bound to upper bound.
std::vector<MatrixEntry> unsupervised_table_entries();
/// Union of both tables, each (variant, mode) once.
std::vector<MatrixEntry> all_entries();
std::vector<MatrixEntry> preset_entries(const std::string& name);

/// Position of a variant in the report: lower bound, target-only, joint,
/// baselines, ablations, full method, upper bound.
int row_rank(Variant v);
std::string training_set_label(Variant v, Mode m);
std::string method_label(Variant v);

struct ReportRow {
  std::string training_set;
  std::string method;
  Variant variant = Variant::UdaSed;
  Mode mode = Mode::UDA;
  std::map<Domain, RunAggregate> cells;
  int n_runs = 0;
  bool failed = false;
  std::string reason;
  std::vector<std::filesystem::path> run_dirs;
};

struct ReportTable {
  std::vector<ReportRow> rows;
  int n_seeds = 0;
  std::string created;

  const ReportRow* find(Variant v) const;
};

std::filesystem::path run_directory(const ExperimentMatrix& m, const MatrixEntry& e, int seed_index);

/// Trains every (entry, seed) cell, then assembles the report from the
/// persisted run histories. A failing run marks its row failed without
/// stopping the matrix. Throws DatasetError before training if a dataset is
/// missing.
ReportTable run_experiment_matrix(const ExperimentMatrix& matrix);

/// Builds the report purely from the run directories on disk.
ReportTable assemble_report(const ExperimentMatrix& matrix);

nlohmann::json report_to_json(const ReportTable& table);
std::string report_to_text(const ReportTable& table);
/// Writes report.json and report.txt into `out_dir`.
void write_report(const ReportTable& table, const std::filesystem::path& out_dir);

/// Per-epoch L_seg / L_full curves of one run as a PNG.
void write_loss_curve_png(const RunHistory& history, const std::filesystem::path& path);

}  // namespace mlda
