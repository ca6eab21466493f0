#include "spiralscope/report.hpp"

#include "spiralscope/digest.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace spiralscope {
namespace {

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json matrix_json(const Eigen::MatrixXi& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> matrix_from(const nlohmann::json& j) {
  const auto rows = static_cast<Index>(j.size());
  const auto cols = rows ? static_cast<Index>(j.at(0).size()) : 0;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    if (static_cast<Index>(j[r].size()) != cols) throw std::invalid_argument("ragged matrix in report");
    for (Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<Scalar>();
  }
  return m;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void strip_timestamps(nlohmann::json& j) {
  if (j.is_object()) {
    j.erase("timestamps");
    for (auto& [key, value] : j.items()) strip_timestamps(value);
  } else if (j.is_array()) {
    for (auto& value : j) strip_timestamps(value);
  }
}

}  // namespace

nlohmann::json to_json(const FoldReport& f) {
  return {{"fold", f.fold},
          {"repeat", f.repeat},
          {"n_train", f.n_train},
          {"n_test", f.n_test},
          {"accuracy", f.accuracy},
          {"precision", f.precision},
          {"recall", f.recall},
          {"confusion", matrix_json(f.confusion)},
          {"split_digest", f.split_digest},
          {"augment_digest", f.augment_digest},
          {"head_losses", f.head_losses},
          {"finetune_losses", f.finetune_losses}};
}

FoldReport fold_report_from_json(const nlohmann::json& j) {
  FoldReport f;
  f.fold = j.at("fold").get<int>();
  f.repeat = j.value("repeat", 0);
  f.n_train = j.value("n_train", 0);
  f.n_test = j.at("n_test").get<int>();
  f.accuracy = j.at("accuracy").get<double>();
  f.precision = j.value("precision", std::vector<double>{});
  f.recall = j.value("recall", std::vector<double>{});
  f.confusion = matrix_from<int>(j.at("confusion"));
  f.split_digest = j.value("split_digest", "");
  f.augment_digest = j.value("augment_digest", "");
  f.head_losses = j.value("head_losses", std::vector<double>{});
  f.finetune_losses = j.value("finetune_losses", std::vector<double>{});
  if (f.confusion.sum() != f.n_test) throw std::invalid_argument("fold confusion counts do not sum to n_test");
  return f;
}

nlohmann::json to_json(const CVReport& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const FoldReport& f : r.folds) folds.push_back(to_json(f));
  return {{"artifact_version", kArtifactVersion},
          {"config", to_json(r.config)},
          {"class_names", r.class_names},
          {"folds", std::move(folds)},
          {"mean_accuracy", r.mean_accuracy},
          {"std_accuracy", r.std_accuracy},
          {"repeat_means", r.repeat_means},
          {"repeat_std", r.repeat_std},
          {"normalized_confusion", matrix_json(r.normalized_confusion)},
          {"timestamps", {{"generated_at", utc_now()}, {"elapsed_seconds", r.elapsed_seconds}}}};
}

CVReport cv_report_from_json(const nlohmann::json& j) {
  try {
    CVReport r;
    r.config = train_config_from_json(j.at("config"));
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& f : j.at("folds")) r.folds.push_back(fold_report_from_json(f));
    if (r.folds.empty()) throw std::invalid_argument("report has no folds");
    const auto c = static_cast<Index>(r.class_names.size());
    for (const FoldReport& f : r.folds) {
      if (f.confusion.rows() != c || f.confusion.cols() != c) {
        throw std::invalid_argument("fold confusion matrix does not match the class count");
      }
    }
    summarize(r);
    if (j.contains("timestamps")) r.elapsed_seconds = j["timestamps"].value("elapsed_seconds", 0.0);
    const double stated = j.at("mean_accuracy").get<double>();
    if (std::abs(stated - r.mean_accuracy) > 1e-9) {
      throw std::invalid_argument("mean_accuracy disagrees with the fold accuracies");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed report: ") + e.what());
  }
}

nlohmann::json to_json(const AblationReport& r) {
  return {{"artifact_version", kArtifactVersion},
          {"with_hpo", to_json(r.with_hpo)},
          {"without_hpo", to_json(r.without_hpo)},
          {"delta", r.delta},
          {"splits_identical", r.splits_identical},
          {"augment_identical", r.augment_identical}};
}

std::string content_digest(const nlohmann::json& report) {
  nlohmann::json copy = report;
  strip_timestamps(copy);
  return hex64(fnv1a(copy.dump()));
}

std::string render_confusion_table(const CVReport& r) {
  const auto& m = r.normalized_confusion;
  std::size_t label_width = 4;
  for (const auto& name : r.class_names) label_width = std::max(label_width, name.size());
  const int cell = static_cast<int>(std::max<std::size_t>(label_width, 6)) + 2;

  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << std::setw(static_cast<int>(label_width)) << "true" << " |";
  for (const auto& name : r.class_names) out << std::setw(cell) << name;
  out << '\n' << std::string(label_width + 2 + cell * r.class_names.size(), '-') << '\n';
  for (Index row = 0; row < m.rows(); ++row) {
    out << std::setw(static_cast<int>(label_width)) << r.class_names[row] << " |";
    for (Index col = 0; col < m.cols(); ++col) out << std::setw(cell) << m(row, col);
    out << '\n';
  }
  out << std::setprecision(4) << "accuracy " << r.mean_accuracy << " +/- " << r.std_accuracy << " over "
      << r.folds.size() << " folds\n";
  return out.str();
}

Image8 confusion_heatmap(const Eigen::MatrixXd& normalized, int cell) {
  if (cell < 1) throw std::invalid_argument("cell size must be >= 1");
  Image8 img;
  img.width = static_cast<int>(normalized.cols()) * cell;
  img.height = static_cast<int>(normalized.rows()) * cell;
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  const std::array<double, 3> lo{255, 255, 255}, hi{8, 48, 107};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = std::clamp(normalized(y / cell, x / cell), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(lo[c] + (hi[c] - lo[c]) * v));
      }
    }
  }
  return img;
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

}  // namespace spiralscope
