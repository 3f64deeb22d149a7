#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vlmopt {

// Base for every error the library raises deliberately.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition or configuration violation.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Network or service failure that may succeed on retry.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Backend failure that must abort the run (bad score, unknown dataset...).
class FatalBackendError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::string_view kPlaceholder = "{}";

// Number of literal "{}" occurrences.
std::size_t count_placeholders(std::string_view text);

// Whitespace-split word count; "{}" counts as one word like any other token.
std::size_t count_words(std::string_view text);

// Trims ASCII whitespace on both ends.
std::string trim(std::string_view text);

// Collapses runs of spaces into one and trims.
std::string collapse_spaces(std::string_view text);

/// A natural-language prompt whose `{}` slots are filled with class names.
///
/// Construction normalizes nothing: text with surrounding whitespace or a
/// newline is rejected, so two templates compare equal iff their text does.
/// Slot count may be zero here; pools enforce `admissible()`.
class Template {
 public:
  explicit Template(std::string text);

  const std::string& text() const { return text_; }
  std::size_t placeholder_count() const { return placeholders_; }

  // Characters outside the placeholders, whitespace excluded.
  std::size_t content_length() const;

  // Pool admission rule: at least one slot and at least 3 characters of
  // non-placeholder content.
  bool admissible() const;

  friend bool operator==(const Template& a, const Template& b) { return a.text_ == b.text_; }

 private:
  std::string text_;
  std::size_t placeholders_;
};

inline constexpr std::size_t kMinContentChars = 3;

enum class Origin { initial_pool, llm_proposal, ape_paraphrase };

std::string_view to_string(Origin origin);
Origin origin_from_string(std::string_view name);

struct ScoredTemplate {
  Template templ;
  double score;
  Origin origin;
  std::uint64_t seq;
};

// Throws FatalBackendError unless score is finite and within [0,1].
double validate_score(double score);

/// Ordered set of scored templates keyed by text.
class PromptPool {
 public:
  // Returns false (and keeps the existing score) when the text is present.
  bool admit(ScoredTemplate entry);

  bool contains(std::string_view text) const;
  const ScoredTemplate* find(std::string_view text) const;

  const std::vector<ScoredTemplate>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<ScoredTemplate> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class FeedbackMode { p_only, p_plus_n };
enum class ConversationMode { multi_turn, iterative, non_iterative };

std::string_view to_string(FeedbackMode mode);
std::string_view to_string(ConversationMode mode);
FeedbackMode feedback_mode_from_string(std::string_view name);
ConversationMode conversation_mode_from_string(std::string_view name);

struct RunConfig {
  int n_restart = 20;
  int n_reset = 50;
  int n_iter = 10;
  int m = 100;
  int k = 15;
  FeedbackMode feedback_mode = FeedbackMode::p_plus_n;
  ConversationMode conversation_mode = ConversationMode::iterative;
  double proposer_temperature = 1.0;
  std::uint64_t seed = 0;
  int shots = 1;
  std::vector<int> folds{0, 1, 2};
  // Oldest multi-turn exchanges beyond this many are dropped from the chat.
  int history_limit = 20;

  // Throws InvalidArgument describing the first violated invariant.
  void validate() const;

  long long proposer_calls_per_restart() const {
    return static_cast<long long>(n_reset) * n_iter;
  }
  long long total_proposer_calls() const {
    return static_cast<long long>(n_restart) * proposer_calls_per_restart();
  }
};

struct Budget {
  std::uint64_t proposer_calls = 0;
  std::uint64_t evaluator_calls = 0;
  std::uint64_t evaluator_cache_hits = 0;
  std::uint64_t tokens_in = 0;
  std::uint64_t tokens_out = 0;
  double price_per_1k_tokens = 0.0015;

  double cost() const {
    return static_cast<double>(tokens_in + tokens_out) / 1000.0 * price_per_1k_tokens;
  }

  Budget& operator+=(const Budget& other);
};

struct LedgerEntry {
  std::string run_id;
  int restart = 0;
  // -1 marks initial-pool scoring; iter then holds the sample index.
  int reset = 0;
  int iter = 0;
  std::string template_text;
  std::optional<double> score;
  std::uint64_t tokens_in = 0;
  std::uint64_t tokens_out = 0;
  Origin origin = Origin::llm_proposal;
  std::string timestamp;
  std::map<std::string, std::string> extra;

  bool same_event(const LedgerEntry& other) const;
};

inline constexpr int kInitialPoolReset = -1;

// Entry with maximal score; ties go to the earliest entry.
// Throws InvalidArgument when no entry carries a score.
ScoredTemplate best_so_far(const std::vector<LedgerEntry>& entries);

// Best-so-far score after each entry (entries without a score repeat the
// previous value; leading unscored entries yield nullopt).
std::vector<std::optional<double>> best_so_far_trajectory(const std::vector<LedgerEntry>& entries);

// Token and call totals reconstructed from ledger columns.
Budget budget_from_ledger(const std::vector<LedgerEntry>& entries, double price_per_1k_tokens);

std::string utc_timestamp_now();

}  // namespace vlmopt
