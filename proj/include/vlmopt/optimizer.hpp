#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vlmopt/core.hpp"
#include "vlmopt/evaluator.hpp"
#include "vlmopt/ledger.hpp"
#include "vlmopt/pool_builder.hpp"
#include "vlmopt/proposer.hpp"

namespace vlmopt {

struct ExtremeSets {
  std::vector<ScoredTemplate> top;     // descending
  std::vector<ScoredTemplate> bottom;  // ascending; empty in p_only mode
};

/// Orders the pool by score (descending, older entries first on ties) and
/// takes the first k as `top` and the last k, reversed, as `bottom`. In
/// p_only mode `top` gets the first 2k and `bottom` stays empty. Both modes
/// need |pool| >= 2k, which keeps the two sets disjoint.
ExtremeSets select_extremes(const PromptPool& pool, int k, FeedbackMode mode);

enum class Strategy { feedback, ape };

struct RunOptions {
  std::string run_id = "run";
  ClassificationTask task;
  Strategy strategy = Strategy::feedback;
  // Empty keeps the ledger in memory only.
  std::filesystem::path ledger_path;
  // Continue an existing ledger file instead of refusing to overwrite it.
  bool resume = false;
  // Restarts run on up to this many threads.
  int jobs = 1;
  double price_per_1k_tokens = 0.0015;
  // Test hook: stop (as if killed) once this many restarts are committed.
  int stop_after_restarts = -1;
};

struct RunResult {
  ScoredTemplate best;
  std::vector<LedgerEntry> ledger;
  Budget budget;
  // Restarts completed in this process (resumed ones excluded).
  int restarts_run = 0;
  bool stopped_early = false;
};

/// Random-restart hill climbing over templates.
///
/// For each restart: sample m templates, score them once, then run n_reset
/// conversations that each start from that scored sample and take n_iter
/// propose/parse/score/admit steps. Every iteration writes exactly one
/// ledger entry, and entries are committed in (restart, reset) order so the
/// ledger is identical for any `jobs`. With `resume`, units already in the
/// ledger are skipped. Returns the ledger argmax.
RunResult run(const RunConfig& config, const TemplateCorpus& corpus, Evaluator& evaluator, Proposer& proposer,
              const RunOptions& options);

// Same loop with each iteration paraphrasing the current best template.
RunResult run_ape_baseline(const RunConfig& config, const TemplateCorpus& corpus, Evaluator& evaluator,
                           Proposer& proposer, RunOptions options);

// Proposer spend in dollars: restarts * resets * iters * tokens / 1000 * price.
double estimate_cost(const RunConfig& config, double avg_tokens_per_call, double price_per_1k);

}  // namespace vlmopt
