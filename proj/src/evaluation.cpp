#include "mlda/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mlda/config_io.hpp"
#include "mlda/log.hpp"

namespace mlda {

namespace fs = std::filesystem;
using nlohmann::json;

Metrics evaluate(SegmentationNet& g, const TensorSet& split, double threshold, std::int64_t batch_size) {
  if (split.size() == 0) throw std::invalid_argument("evaluate: empty split");
  if (!split.labeled()) throw std::invalid_argument("evaluate: split has no masks");
  if (batch_size <= 0) throw std::invalid_argument("evaluate: batch_size must be > 0");
  torch::NoGradGuard no_grad;
  std::vector<Metrics> per_image;
  per_image.reserve(static_cast<std::size_t>(split.size()));
  for (std::int64_t begin = 0; begin < split.size(); begin += batch_size) {
    const auto end = std::min(split.size(), begin + batch_size);
    auto probs = g->forward(split.images.slice(0, begin, end)).probs;
    for (std::int64_t i = 0; i < end - begin; ++i) {
      const auto pred = prediction_from_tensor(probs[i]);
      const auto truth = mask_from_tensor(split.masks[begin + i]);
      per_image.push_back({dice_coefficient(pred, truth, threshold), pixel_accuracy(pred, truth, threshold), 1});
    }
  }
  return average_metrics(per_image);
}

void ExperimentMatrix::validate() const {
  if (entries.empty()) throw std::invalid_argument("experiment matrix has no entries");
  if (n_seeds < 1) throw std::invalid_argument("experiment matrix: n_seeds must be >= 1");
  std::set<std::pair<Variant, Mode>> seen;
  for (const auto& e : entries) {
    if (e.n_seeds < 0) throw std::invalid_argument("experiment matrix: entry n_seeds must be >= 1");
    if (!compatible(e.variant, e.mode))
      throw std::invalid_argument("experiment matrix: variant " + std::string(to_string(e.variant)) +
                                  " is not valid in " + std::string(to_string(e.mode)) + " mode");
    if (!seen.insert({e.variant, e.mode}).second)
      throw std::invalid_argument("experiment matrix: duplicate entry " + std::string(to_string(e.variant)) + "/" +
                                  std::string(to_string(e.mode)));
    if (e.dataset.empty() && dataset.empty())
      throw std::invalid_argument("experiment matrix: no dataset for " + std::string(to_string(e.variant)));
  }
}

namespace {

MatrixEntry entry(Variant v, Mode m) {
  MatrixEntry e;
  e.variant = v;
  e.mode = m;
  return e;
}

fs::path manifest_of(const fs::path& dataset) {
  return fs::is_directory(dataset) ? dataset / "manifest.json" : dataset;
}

}  // namespace

std::vector<MatrixEntry> supervised_table_entries() {
  return {entry(Variant::OriginS, Mode::SDA), entry(Variant::OriginT, Mode::SDA),
          entry(Variant::FromScratchJoint, Mode::SDA), entry(Variant::SdaS, Mode::SDA),
          entry(Variant::SdaSed, Mode::SDA)};
}

std::vector<MatrixEntry> unsupervised_table_entries() {
  return {entry(Variant::OriginS, Mode::UDA), entry(Variant::OriginT, Mode::SDA), entry(Variant::Sf4, Mode::UDA),
          entry(Variant::Sf9, Mode::UDA),     entry(Variant::Afc, Mode::UDA),     entry(Variant::UdaS, Mode::UDA),
          entry(Variant::UdaE, Mode::UDA),    entry(Variant::UdaD, Mode::UDA),    entry(Variant::UdaEd, Mode::UDA),
          entry(Variant::UdaSed, Mode::UDA),  entry(Variant::SdaSed, Mode::SDA)};
}

std::vector<MatrixEntry> all_entries() {
  // origin_S trains on labelled S alone in either mode, so one row serves both tables.
  std::vector<MatrixEntry> out;
  std::set<Variant> seen;
  for (const auto& list : {unsupervised_table_entries(), supervised_table_entries()})
    for (const auto& e : list)
      if (seen.insert(e.variant).second) out.push_back(e);
  std::stable_sort(out.begin(), out.end(),
                   [](const MatrixEntry& a, const MatrixEntry& b) { return row_rank(a.variant) < row_rank(b.variant); });
  return out;
}

std::vector<MatrixEntry> preset_entries(const std::string& name) {
  if (name == "table1" || name == "supervised") return supervised_table_entries();
  if (name == "table2" || name == "unsupervised") return unsupervised_table_entries();
  if (name == "all") return all_entries();
  throw std::invalid_argument("unknown matrix preset '" + name + "' (table1, table2, all)");
}

int row_rank(Variant v) {
  static const Variant order[] = {Variant::OriginS, Variant::OriginT, Variant::FromScratchJoint, Variant::Sf4,
                                  Variant::Sf9,     Variant::Afc,     Variant::UdaS,             Variant::UdaE,
                                  Variant::UdaD,    Variant::UdaEd,   Variant::UdaSed,           Variant::SdaS,
                                  Variant::SdaSed};
  return static_cast<int>(std::find(std::begin(order), std::end(order), v) - std::begin(order));
}

std::string training_set_label(Variant v, Mode m) {
  switch (v) {
    case Variant::OriginS: return "S";
    case Variant::OriginT: return "T";
    case Variant::FromScratchJoint: return "S+T";
    default: return m == Mode::SDA ? "S+T (labelled)" : "S+T (T unlabelled)";
  }
}

std::string method_label(Variant v) {
  switch (v) {
    case Variant::OriginS: return "origin (lower bound)";
    case Variant::OriginT: return "origin";
    case Variant::FromScratchJoint: return "from scratch";
    case Variant::SdaS: return "SDA-s";
    case Variant::SdaSed: return "SDA-sed (upper bound)";
    case Variant::UdaS: return "UDA-s";
    case Variant::UdaE: return "UDA-e";
    case Variant::UdaD: return "UDA-d";
    case Variant::UdaEd: return "UDA-ed";
    case Variant::UdaSed: return "UDA-sed (full)";
    case Variant::Sf4: return "SF-4";
    case Variant::Sf9: return "SF-9";
    case Variant::Afc: return "AFC";
  }
  return "?";
}

const ReportRow* ReportTable::find(Variant v) const {
  for (const auto& r : rows)
    if (r.variant == v) return &r;
  return nullptr;
}

fs::path run_directory(const ExperimentMatrix& m, const MatrixEntry& e, int seed_index) {
  return m.output / "runs" /
         (std::string(to_string(e.variant)) + "-" + std::string(to_string(e.mode)) + "-seed" +
          std::to_string(seed_index));
}

namespace {

int seeds_of(const ExperimentMatrix& m, const MatrixEntry& e) { return e.n_seeds > 0 ? e.n_seeds : m.n_seeds; }

TrainConfig entry_config(const ExperimentMatrix& m, const MatrixEntry& e, int k) {
  TrainConfig cfg = m.train;
  if (!e.train.empty()) apply_json(e.train, cfg);
  cfg.variant = e.variant;
  cfg.mode = e.mode;
  cfg.seed = m.base_seed + static_cast<std::uint64_t>(k);
  return cfg;
}

}  // namespace

ReportTable run_experiment_matrix(const ExperimentMatrix& matrix) {
  matrix.validate();
  std::map<fs::path, Dataset> datasets;
  for (const auto& e : matrix.entries) {
    const auto path = manifest_of(e.dataset.empty() ? matrix.dataset : e.dataset);
    if (!datasets.count(path)) {
      if (!fs::exists(path)) throw DatasetError("dataset manifest not found: " + path.string());
      datasets.emplace(path, load_dataset(path));
    }
  }
  for (const auto& e : matrix.entries) {
    const auto& ds = datasets.at(manifest_of(e.dataset.empty() ? matrix.dataset : e.dataset));
    for (int k = 0; k < seeds_of(matrix, e); ++k) {
      const auto dir = run_directory(matrix, e, k);
      log_info("training " + dir.filename().string());
      try {
        const auto r = train(entry_config(matrix, e, k), ds, dir);
        const auto t = r.history.test_metrics(Domain::T);
        if (t) {
          std::ostringstream msg;
          msg << dir.filename().string() << ": test T dice=" << t->dice << " acc=" << t->accuracy << " ("
              << std::fixed << std::setprecision(0) << r.history.wall_clock_seconds << "s)";
          log_info(msg.str());
        }
      } catch (const std::exception& ex) {
        log_warn(dir.filename().string() + " failed: " + ex.what());
        fs::create_directories(dir);
        std::ofstream out(dir / "history.jsonl", std::ios::app);
        out << json{{"type", "aborted"}, {"reason", ex.what()}}.dump() << '\n';
      }
    }
  }
  return assemble_report(matrix);
}

ReportTable assemble_report(const ExperimentMatrix& matrix) {
  matrix.validate();
  ReportTable table;
  table.created = utc_timestamp();
  table.n_seeds = matrix.n_seeds;
  auto entries = matrix.entries;
  std::stable_sort(entries.begin(), entries.end(), [](const MatrixEntry& a, const MatrixEntry& b) {
    return row_rank(a.variant) < row_rank(b.variant);
  });
  for (const auto& e : entries) {
    ReportRow row;
    row.variant = e.variant;
    row.mode = e.mode;
    row.training_set = training_set_label(e.variant, e.mode);
    row.method = method_label(e.variant);
    std::map<Domain, std::vector<Metrics>> per_domain;
    std::vector<std::string> failures;
    for (int k = 0; k < seeds_of(matrix, e); ++k) {
      const auto dir = run_directory(matrix, e, k);
      row.run_dirs.push_back(dir);
      RunHistory h;
      try {
        h = read_history(dir);
      } catch (const std::exception& ex) {
        failures.push_back("seed " + std::to_string(k) + ": " + ex.what());
        continue;
      }
      if (h.status != "ok") {
        failures.push_back("seed " + std::to_string(k) + ": " +
                           (h.abort_reason.empty() ? std::string("run did not finish") : h.abort_reason));
        continue;
      }
      for (Domain d : {Domain::S, Domain::T})
        if (auto m = h.test_metrics(d)) per_domain[d].push_back(*m);
      ++row.n_runs;
    }
    if (!failures.empty()) {
      row.failed = true;
      for (std::size_t i = 0; i < failures.size(); ++i) row.reason += (i ? "; " : "") + failures[i];
    } else {
      for (auto& [d, runs] : per_domain) row.cells[d] = aggregate_runs(runs);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

json report_to_json(const ReportTable& table) {
  json j = json::object();
  for (const auto& row : table.rows) {
    json cells = json::object();
    if (row.failed) {
      for (Domain d : {Domain::S, Domain::T})
        cells[std::string(to_string(d))] = {{"failed", true}, {"reason", row.reason}};
    } else {
      for (const auto& [d, a] : row.cells)
        cells[std::string(to_string(d))] = {{"dice_mean", a.dice_mean}, {"dice_std", a.dice_std},
                                            {"acc_mean", a.acc_mean},   {"acc_std", a.acc_std},
                                            {"n_runs", a.n_runs}};
    }
    j[std::string(to_string(row.variant))] = cells;
  }
  return j;
}

std::string report_to_text(const ReportTable& table) {
  auto pct = [](double mean, double std) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * mean << " ± " << std::setprecision(2) << 100.0 * std;
    return s.str();
  };
  const std::vector<std::string> header{"Training set", "Method", "S DC", "S Acc", "T DC", "T Acc"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& row : table.rows) {
    std::vector<std::string> cells{row.training_set, row.method};
    for (Domain d : {Domain::S, Domain::T}) {
      if (row.failed) {
        cells.push_back("failed");
        cells.push_back("failed");
      } else if (auto it = row.cells.find(d); it != row.cells.end()) {
        cells.push_back(pct(it->second.dice_mean, it->second.dice_std));
        cells.push_back(pct(it->second.acc_mean, it->second.acc_std));
      } else {
        cells.push_back("-");
        cells.push_back("-");
      }
    }
    rows.push_back(std::move(cells));
  }
  // Display width counts code points, not bytes ("±" is two bytes).
  auto width = [](const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
  };
  std::vector<std::size_t> w(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    w[c] = width(header[c]);
    for (const auto& r : rows) w[c] = std::max(w[c], width(r[c]));
  }
  std::ostringstream out;
  out << "# created " << table.created << '\n';
  out << "# test-split dice (DC) and pixel accuracy (Acc) in percent, mean ± sample std over " << table.n_seeds
      << " seeds\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out << cells[c];
      if (c + 1 < cells.size()) out << std::string(w[c] - width(cells[c]) + 2, ' ');
    }
    out << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto x : w) total += x + 2;
  out << std::string(total - 2, '-') << '\n';
  for (const auto& r : rows) line(r);
  for (const auto& row : table.rows)
    if (row.failed) out << "! " << to_string(row.variant) << " failed: " << row.reason << '\n';
  return out.str();
}

void write_report(const ReportTable& table, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "report.json");
    if (!out) throw std::runtime_error("cannot write " + (out_dir / "report.json").string());
    out << report_to_json(table).dump(2) << '\n';
  }
  std::ofstream out(out_dir / "report.txt");
  if (!out) throw std::runtime_error("cannot write " + (out_dir / "report.txt").string());
  out << report_to_text(table);
}

void write_loss_curve_png(const RunHistory& history, const fs::path& path) {
  std::vector<const LossBundle*> pts;
  for (const auto& b : history.losses)
    if (b.phase != Phase::PretrainD) pts.push_back(&b);
  const int W = 720, H = 400, L = 60, R = 20, T = 30, B = 40;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo = 0, hi = 1e-6;
  int e_min = 1, e_max = 1;
  if (!pts.empty()) {
    lo = hi = pts.front()->l_seg;
    e_min = e_max = pts.front()->epoch;
    for (const auto* b : pts) {
      for (double v : {b->l_seg, b->l_full}) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      e_min = std::min(e_min, b->epoch);
      e_max = std::max(e_max, b->epoch);
    }
  }
  if (hi - lo < 1e-9) hi = lo + 1.0;
  const int e_span = std::max(1, e_max - e_min);
  auto px = [&](int epoch) { return L + static_cast<int>(std::lround((W - L - R) * double(epoch - e_min) / e_span)); };
  auto py = [&](double v) { return T + static_cast<int>(std::lround((H - T - B) * (hi - v) / (hi - lo))); };
  const cv::Scalar axis(0, 0, 0), grey(200, 200, 200), seg(200, 80, 0), full(0, 0, 200);
  cv::rectangle(img, {L, T}, {W - R, H - B}, axis);
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    std::ostringstream s;
    s << std::setprecision(3) << v;
    cv::line(img, {L, py(v)}, {W - R, py(v)}, grey);
    cv::putText(img, s.str(), {4, py(v) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis);
  }
  cv::putText(img, std::to_string(e_min), {L - 4, H - B + 16}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis);
  cv::putText(img, std::to_string(e_max), {W - R - 16, H - B + 16}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis);
  cv::putText(img, "epoch", {W / 2 - 20, H - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis);
  cv::putText(img, "L_seg", {L + 10, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, seg, 1);
  cv::putText(img, "L_full", {L + 80, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, full, 1);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (pts[i]->phase != pts[i - 1]->phase)
      cv::line(img, {px(pts[i]->epoch), T}, {px(pts[i]->epoch), H - B}, grey);
    cv::line(img, {px(pts[i - 1]->epoch), py(pts[i - 1]->l_seg)}, {px(pts[i]->epoch), py(pts[i]->l_seg)}, seg, 2);
    cv::line(img, {px(pts[i - 1]->epoch), py(pts[i - 1]->l_full)}, {px(pts[i]->epoch), py(pts[i]->l_full)}, full, 1);
  }
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace mlda
