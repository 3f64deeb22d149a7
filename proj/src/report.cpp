#include "vlmopt/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace vlmopt {

using nlohmann::json;

MeanStd aggregate_folds(const std::vector<double>& values) {
  if (values.empty()) throw InvalidArgument("no fold results to aggregate");
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

MeanStd aggregate_folds(const std::vector<FoldResult>& results, Metric metric) {
  std::vector<double> values;
  for (const auto& r : results) {
    if (metric == Metric::train) {
      values.push_back(r.train_score);
    } else {
      if (!r.test_score) throw InvalidArgument("fold " + std::to_string(r.fold) + " has no test score");
      values.push_back(*r.test_score);
    }
  }
  return aggregate_folds(values);
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

}  // namespace

std::string render_fold_report(const std::string& run_id, const std::vector<FoldResult>& results) {
  if (results.empty()) throw InvalidArgument("no fold results to report");
  std::ostringstream os;
  os << "run " << run_id << "\n\n";
  os << pad("fold", 6) << pad("train %", 10) << pad("test %", 10) << "best template\n";
  bool all_test = true;
  for (const auto& r : results) {
    os << pad(std::to_string(r.fold), 6) << pad(pct(r.train_score), 10)
       << pad(r.test_score ? pct(*r.test_score) : "-", 10) << r.best_template << '\n';
    all_test = all_test && r.test_score.has_value();
  }
  const MeanStd train = aggregate_folds(results, Metric::train);
  os << "\ntrain: " << pct(train.mean) << " ± " << pct(train.std) << '\n';
  if (all_test) {
    const MeanStd test = aggregate_folds(results, Metric::test);
    os << "test:  " << pct(test.mean) << " ± " << pct(test.std) << '\n';
  }
  return os.str();
}

std::string fold_result_json(const FoldResult& r) {
  json j = {{"fold", r.fold}, {"best_template", r.best_template}, {"train_score", r.train_score}};
  j["test_score"] = r.test_score ? json(*r.test_score) : json(nullptr);
  return j.dump();
}

FoldResult parse_fold_result_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    FoldResult r;
    r.fold = j.at("fold").get<int>();
    r.best_template = j.at("best_template").get<std::string>();
    r.train_score = validate_score(j.at("train_score").get<double>());
    if (j.contains("test_score") && !j["test_score"].is_null()) r.test_score = j["test_score"].get<double>();
    return r;
  } catch (const json::exception& ex) {
    throw InvalidArgument(std::string("malformed fold summary: ") + ex.what());
  }
}

std::string fold_summary_json(const std::string& run_id, const std::vector<FoldResult>& results) {
  json folds = json::array();
  for (const auto& r : results) folds.push_back(json::parse(fold_result_json(r)));
  const MeanStd train = aggregate_folds(results, Metric::train);
  json j = {{"run_id", run_id}, {"folds", folds}, {"train_mean", train.mean}, {"train_std", train.std}};
  const bool all_test = std::all_of(results.begin(), results.end(), [](const FoldResult& r) { return r.test_score.has_value(); });
  if (all_test) {
    const MeanStd test = aggregate_folds(results, Metric::test);
    j["test_mean"] = test.mean;
    j["test_std"] = test.std;
  }
  return j.dump();
}

std::vector<FoldResult> load_fold_results(const std::filesystem::path& run_dir) {
  if (!std::filesystem::is_directory(run_dir)) throw InvalidArgument("no run directory " + run_dir.string());
  std::vector<FoldResult> out;
  for (const auto& entry : std::filesystem::directory_iterator(run_dir)) {
    const auto name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("fold-", 0) != 0) continue;
    const auto summary = entry.path() / "summary.json";
    std::ifstream in(summary);
    if (!in) continue;
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    out.push_back(parse_fold_result_json(text));
  }
  std::sort(out.begin(), out.end(), [](const FoldResult& a, const FoldResult& b) { return a.fold < b.fold; });
  return out;
}

std::string render_comparison_table(const std::vector<std::string>& datasets, const std::vector<ComparisonRow>& rows) {
  std::size_t method_w = 6;
  for (const auto& r : rows) method_w = std::max(method_w, r.method.size());
  std::vector<std::size_t> widths;
  for (const auto& d : datasets) widths.push_back(std::max<std::size_t>(d.size(), 5));

  std::ostringstream os;
  os << pad("Method", method_w);
  for (std::size_t i = 0; i < datasets.size(); ++i) os << "  " << pad(datasets[i], widths[i]);
  os << "  Avg\n";
  for (const auto& r : rows) {
    if (r.values.size() != datasets.size())
      throw InvalidArgument("row " + r.method + " has " + std::to_string(r.values.size()) + " values for " +
                            std::to_string(datasets.size()) + " datasets");
    os << pad(r.method, method_w);
    char buf[32];
    for (std::size_t i = 0; i < r.values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.1f", r.values[i]);
      os << "  " << pad(buf, widths[i]);
    }
    std::snprintf(buf, sizeof buf, "%.1f", r.average);
    os << "  " << buf << '\n';
  }
  return os.str();
}

std::vector<CurvePoint> efficiency_curve(const std::vector<LedgerEntry>& ledger) {
  std::vector<CurvePoint> out;
  std::optional<double> best;
  std::uint64_t calls = 0;
  for (const auto& e : ledger) {
    if (e.score && (!best || *e.score > *best)) best = e.score;
    if (e.origin == Origin::initial_pool) continue;
    auto it = e.extra.find("attempts");
    calls += it == e.extra.end() ? 1 : std::stoull(it->second);
    out.push_back({calls, best.value_or(0.0)});
  }
  return out;
}

std::optional<std::uint64_t> calls_to_reach(const std::vector<LedgerEntry>& ledger, double threshold) {
  std::optional<double> best;
  std::uint64_t calls = 0;
  for (const auto& e : ledger) {
    if (e.origin != Origin::initial_pool) {
      auto it = e.extra.find("attempts");
      calls += it == e.extra.end() ? 1 : std::stoull(it->second);
    }
    if (e.score && (!best || *e.score > *best)) best = e.score;
    if (best && *best >= threshold) return calls;
  }
  return std::nullopt;
}

std::string render_curve_columns(const std::vector<CurvePoint>& curve) {
  std::ostringstream os;
  os << "calls\tbest\n";
  for (const auto& p : curve) os << p.proposer_calls << '\t' << p.best_score << '\n';
  return os.str();
}

std::string format_dollars(double amount) {
  // Cents always shown; sub-cent digits only when non-zero.
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", amount);
  std::string s = buf;
  const auto dot = s.find('.');
  while (s.size() > dot + 3 && s.back() == '0') s.pop_back();
  return "$" + s;
}

}  // namespace vlmopt
