#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlmopt/core.hpp"
#include "vlmopt/http.hpp"
#include "vlmopt/retry.hpp"

namespace vlmopt {

enum class Split { train, test };

std::string_view to_string(Split split);
Split split_from_string(std::string_view name);

struct ClassificationTask {
  std::string dataset_id;
  std::vector<std::string> class_names;
  int shots = 1;
  int fold = 0;
  Split split = Split::train;

  // Non-empty, duplicate-free class names.
  void validate() const;
};

// One prompt per class with every "{}" replaced by the class name.
std::vector<std::string> render_class_prompts(const Template& templ, const std::vector<std::string>& class_names);

struct ScoreResult {
  double score = 0.0;
  bool cached = false;
};

/// The black-box objective: train-split accuracy of a template on a task.
/// Implementations must tolerate concurrent calls.
class Evaluator {
 public:
  virtual ~Evaluator() = default;

  virtual ScoreResult evaluate(const Template& templ, const ClassificationTask& task) = 0;

  double score(const Template& templ, const ClassificationTask& task) { return evaluate(templ, task).score; }
};

struct SyntheticOracleSpec {
  std::map<std::string, double> keyword_weights;
  double length_penalty = 0.0;
  double noise_scale = 0.0;
};

/// Keyword-weighted stand-in for classifier accuracy.
///
/// score = clip(sum of weights of distinct keywords present
///              - length_penalty * word_count + noise, 0, 1)
///
/// Keywords match case-insensitively on whole words; noise is a pure
/// function of (template text, seed).
class SyntheticOracle final : public Evaluator {
 public:
  SyntheticOracle(SyntheticOracleSpec spec, std::uint64_t seed);

  ScoreResult evaluate(const Template& templ, const ClassificationTask& task) override;

  double score_text(const std::string& text) const;
  const SyntheticOracleSpec& spec() const { return spec_; }

  // Highest attainable score over templates built from the keywords, each
  // used at most once plus one placeholder. Ignores noise.
  double optimum() const;

 private:
  SyntheticOracleSpec spec_;
  std::uint64_t seed_;
};

// Lower-cased alphanumeric runs (apostrophes kept), "{}" excluded.
std::vector<std::string> oracle_words(const std::string& text);

/// Client for the POST /v1/score protocol.
class RemoteEvaluator final : public Evaluator {
 public:
  RemoteEvaluator(std::string base_url, std::shared_ptr<HttpTransport> transport, RetryPolicy retry = {},
                  Sleeper sleeper = default_sleep);

  ScoreResult evaluate(const Template& templ, const ClassificationTask& task) override;

  std::uint64_t requests() const { return requests_.load(); }

 private:
  std::string url_;
  std::shared_ptr<HttpTransport> transport_;
  RetryPolicy retry_;
  Sleeper sleeper_;
  std::atomic<std::uint64_t> requests_{0};
};

struct CacheKey {
  std::string template_text;
  std::string dataset_id;
  int shots;
  int fold;
  Split split;

  static CacheKey of(const Template& templ, const ClassificationTask& task);
  std::string serialize() const;
  friend bool operator==(const CacheKey&, const CacheKey&) = default;
};

/// Memoizing wrapper keyed on (template, dataset, shots, fold, split).
///
/// With a file path, every new score is appended as a JSON line and the
/// file is reloaded on construction. A corrupt file is discarded with a
/// warning. Concurrent misses on the same key call the backend once.
class CachedEvaluator final : public Evaluator {
 public:
  explicit CachedEvaluator(std::shared_ptr<Evaluator> inner, std::filesystem::path cache_file = {});

  ScoreResult evaluate(const Template& templ, const ClassificationTask& task) override;

  std::uint64_t backend_calls() const { return backend_calls_.load(); }
  std::uint64_t hits() const { return hits_.load(); }
  std::size_t size() const;

 private:
  struct Slot {
    std::mutex mu;
    bool ready = false;
    double score = 0.0;
  };

  void load_file();
  void persist(const CacheKey& key, double score);

  std::shared_ptr<Evaluator> inner_;
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::shared_ptr<Slot>> slots_;
  std::mutex file_mu_;
  std::ofstream out_;
  std::atomic<std::uint64_t> backend_calls_{0};
  std::atomic<std::uint64_t> hits_{0};
};

}  // namespace vlmopt
