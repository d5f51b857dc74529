#pragma once

#include <filesystem>
#include <istream>
#include <string>
#include <string_view>
#include <vector>

#include "indexfuse/estimator.hpp"
#include "indexfuse/evaluate.hpp"
#include "indexfuse/inference.hpp"
#include "indexfuse/model.hpp"
#include "indexfuse/simulate.hpp"

namespace indexfuse::io {

inline constexpr std::string_view kFitFormatVersion = "indexfuse-fit-v1";

/// Long-format CSV: subject_id,time,response,z1..z{d_w},x1..x{d_beta}.
/// Header row mandatory, matched case-insensitively; every row complete;
/// rows grouped by subject in first-appearance order, then stably sorted by
/// time within subject. A constant x column is rejected (identifiability).
model::LongitudinalDataset read_dataset(const std::filesystem::path& path);
model::LongitudinalDataset read_dataset(std::istream& in, const std::string& source_name);

void write_dataset(const model::LongitudinalDataset& dataset,
                   const std::filesystem::path& path);

/// Fit serialization (JSON, versioned). Writes are atomic: temp file plus
/// rename, so a failed run never leaves a partial file behind.
void write_fit(const estimator::ModelFit& fit, const std::filesystem::path& path);
estimator::ModelFit read_fit(const std::filesystem::path& path);

void write_text_atomic(const std::filesystem::path& path, const std::string& content);

// plot-ready data files
struct NamedBand {
    std::string target;  // "m", "w1".., "risk"
    inference::ConfidenceBand band;
    std::vector<double> truth;  // optional, aligned with the grid
};
void write_band_csv(const std::filesystem::path& path, const std::vector<NamedBand>& bands);

void write_monte_carlo_summary_csv(const std::filesystem::path& path,
                                   const simulate::MonteCarloSummary& summary);
std::string monte_carlo_summary_json(const simulate::MonteCarloSummary& summary);

void write_curves_csv(const std::filesystem::path& path,
                      const std::vector<evaluate::PredictiveErrorCurve>& curves);
std::string curves_summary_json(const evaluate::CrossValidationResult& result);

/// 17-significant-digit decimal rendering (lossless double round trip).
std::string format_double(double v);

}  // namespace indexfuse::io
