#pragma once

#include "spiralscope/image.hpp"
#include "spiralscope/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <string>

namespace spiralscope {

inline constexpr const char* kArtifactVersion = "spiralscope 1.0.0";

nlohmann::json to_json(const FoldReport& fold);
FoldReport fold_report_from_json(const nlohmann::json& j);

/// Report JSON. Wall-clock data lives under "timestamps" only.
nlohmann::json to_json(const CVReport& report);
/// Parses and re-validates a report (mean over folds, row sums). Throws
/// std::invalid_argument on malformed input.
CVReport cv_report_from_json(const nlohmann::json& j);

nlohmann::json to_json(const AblationReport& report);

/// Digest of a report JSON with the "timestamps" keys removed at every level.
std::string content_digest(const nlohmann::json& report);

/// Normalized confusion matrix as an aligned text table plus an accuracy line.
std::string render_confusion_table(const CVReport& report);

/// Heatmap of the normalized matrix, `cell` pixels per entry, white (0) to
/// dark blue (1).
Image8 confusion_heatmap(const Eigen::MatrixXd& normalized, int cell = 32);

void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace spiralscope
