#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vlmopt/core.hpp"

namespace vlmopt {

struct FoldResult {
  int fold = 0;
  std::string best_template;
  double train_score = 0.0;
  std::optional<double> test_score;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

MeanStd aggregate_folds(const std::vector<double>& values);

enum class Metric { train, test };

// Throws InvalidArgument if empty or, for Metric::test, any fold lacks a test score.
MeanStd aggregate_folds(const std::vector<FoldResult>& results, Metric metric);

// Plain-text per-fold table followed by "mean ± std" rows.
std::string render_fold_report(const std::string& run_id, const std::vector<FoldResult>& results);

// Machine-readable counterpart of render_fold_report (one JSON object).
std::string fold_summary_json(const std::string& run_id, const std::vector<FoldResult>& results);

std::string fold_result_json(const FoldResult& result);
FoldResult parse_fold_result_json(const std::string& text);

// Reads <run_dir>/fold-*/summary.json, ordered by fold.
std::vector<FoldResult> load_fold_results(const std::filesystem::path& run_dir);

struct ComparisonRow {
  std::string method;
  std::vector<double> values;  // one per dataset
  double average = 0.0;
};

// Method-by-dataset accuracy table with an Avg column, one decimal.
std::string render_comparison_table(const std::vector<std::string>& datasets, const std::vector<ComparisonRow>& rows);

struct CurvePoint {
  std::uint64_t proposer_calls = 0;
  double best_score = 0.0;
};

// Best-so-far after each proposal entry, indexed by cumulative proposer calls.
std::vector<CurvePoint> efficiency_curve(const std::vector<LedgerEntry>& ledger);

// Proposer calls spent when best-so-far first reaches `threshold`; 0 if the
// initial pool already does, nullopt if never.
std::optional<std::uint64_t> calls_to_reach(const std::vector<LedgerEntry>& ledger, double threshold);

// "calls\tbest" rows for external plotting.
std::string render_curve_columns(const std::vector<CurvePoint>& curve);

// "$7.50", "$0.375": two decimals, up to four when needed.
std::string format_dollars(double amount);

}  // namespace vlmopt
