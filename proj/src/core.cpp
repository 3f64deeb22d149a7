#include "vlmopt/core.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <sstream>

namespace vlmopt {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::size_t count_placeholders(std::string_view text) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(kPlaceholder); pos != std::string_view::npos;
       pos = text.find(kPlaceholder, pos + kPlaceholder.size())) {
    ++n;
  }
  return n;
}

std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : text) {
    if (is_space(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++n;
    }
  }
  return n;
}

std::string trim(std::string_view text) {
  std::size_t b = 0;
  std::size_t e = text.size();
  while (b < e && is_space(text[b])) ++b;
  while (e > b && is_space(text[e - 1])) --e;
  return std::string(text.substr(b, e - b));
}

std::string collapse_spaces(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    if (c == ' ' && !out.empty() && out.back() == ' ') continue;
    out.push_back(c);
  }
  return trim(out);
}

Template::Template(std::string text) : text_(std::move(text)), placeholders_(count_placeholders(text_)) {
  if (text_.empty()) throw InvalidArgument("template text is empty");
  if (is_space(text_.front()) || is_space(text_.back()))
    throw InvalidArgument("template has surrounding whitespace: \"" + text_ + "\"");
  if (text_.find('\n') != std::string::npos || text_.find('\r') != std::string::npos)
    throw InvalidArgument("template contains a newline");
}

std::size_t Template::content_length() const {
  std::size_t n = 0;
  std::size_t i = 0;
  while (i < text_.size()) {
    if (text_.compare(i, kPlaceholder.size(), kPlaceholder) == 0) {
      i += kPlaceholder.size();
      continue;
    }
    if (!is_space(text_[i])) ++n;
    ++i;
  }
  return n;
}

bool Template::admissible() const { return placeholders_ >= 1 && content_length() >= kMinContentChars; }

std::string_view to_string(Origin origin) {
  switch (origin) {
    case Origin::initial_pool: return "initial_pool";
    case Origin::llm_proposal: return "llm_proposal";
    case Origin::ape_paraphrase: return "ape_paraphrase";
  }
  return "unknown";
}

Origin origin_from_string(std::string_view name) {
  if (name == "initial_pool") return Origin::initial_pool;
  if (name == "llm_proposal") return Origin::llm_proposal;
  if (name == "ape_paraphrase") return Origin::ape_paraphrase;
  throw InvalidArgument("unknown origin: " + std::string(name));
}

double validate_score(double score) {
  if (!std::isfinite(score) || score < 0.0 || score > 1.0) {
    std::ostringstream os;
    os << "score out of range [0,1]: " << score;
    throw FatalBackendError(os.str());
  }
  return score;
}

bool PromptPool::admit(ScoredTemplate entry) {
  if (index_.count(entry.templ.text())) return false;
  validate_score(entry.score);
  index_.emplace(entry.templ.text(), entries_.size());
  entries_.push_back(std::move(entry));
  return true;
}

bool PromptPool::contains(std::string_view text) const { return index_.count(std::string(text)) > 0; }

const ScoredTemplate* PromptPool::find(std::string_view text) const {
  auto it = index_.find(std::string(text));
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::string_view to_string(FeedbackMode mode) {
  return mode == FeedbackMode::p_only ? "p_only" : "p_plus_n";
}

std::string_view to_string(ConversationMode mode) {
  switch (mode) {
    case ConversationMode::multi_turn: return "multi_turn";
    case ConversationMode::iterative: return "iterative";
    case ConversationMode::non_iterative: return "non_iterative";
  }
  return "unknown";
}

FeedbackMode feedback_mode_from_string(std::string_view name) {
  if (name == "p_only") return FeedbackMode::p_only;
  if (name == "p_plus_n") return FeedbackMode::p_plus_n;
  throw InvalidArgument("unknown feedback_mode: " + std::string(name));
}

ConversationMode conversation_mode_from_string(std::string_view name) {
  if (name == "multi_turn") return ConversationMode::multi_turn;
  if (name == "iterative") return ConversationMode::iterative;
  if (name == "non_iterative") return ConversationMode::non_iterative;
  throw InvalidArgument("unknown conversation_mode: " + std::string(name));
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidArgument("invalid config: " + what);
  };
  require(n_restart >= 1, "n_restart must be >= 1");
  require(n_reset >= 1, "n_reset must be >= 1");
  require(n_iter >= 1, "n_iter must be >= 1");
  require(m >= 1, "m must be >= 1");
  require(k >= 1, "k must be >= 1");
  require(2 * k <= m, "2k must not exceed m (k=" + std::to_string(k) + ", m=" + std::to_string(m) + ")");
  require(std::isfinite(proposer_temperature) && proposer_temperature >= 0.0, "temperature must be >= 0");
  require(shots >= 1, "shots must be >= 1");
  require(!folds.empty(), "folds must not be empty");
  require(history_limit >= 0, "history_limit must be >= 0");
}

Budget& Budget::operator+=(const Budget& other) {
  proposer_calls += other.proposer_calls;
  evaluator_calls += other.evaluator_calls;
  evaluator_cache_hits += other.evaluator_cache_hits;
  tokens_in += other.tokens_in;
  tokens_out += other.tokens_out;
  return *this;
}

bool LedgerEntry::same_event(const LedgerEntry& o) const {
  return run_id == o.run_id && restart == o.restart && reset == o.reset && iter == o.iter &&
         template_text == o.template_text && score == o.score && tokens_in == o.tokens_in &&
         tokens_out == o.tokens_out && origin == o.origin && extra == o.extra;
}

ScoredTemplate best_so_far(const std::vector<LedgerEntry>& entries) {
  const LedgerEntry* best = nullptr;
  std::uint64_t best_seq = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (!e.score) continue;
    if (best == nullptr || *e.score > *best->score) {
      best = &e;
      best_seq = i;
    }
  }
  if (best == nullptr) throw InvalidArgument("ledger has no scored entry");
  return ScoredTemplate{Template(best->template_text), *best->score, best->origin, best_seq};
}

std::vector<std::optional<double>> best_so_far_trajectory(const std::vector<LedgerEntry>& entries) {
  std::vector<std::optional<double>> out;
  out.reserve(entries.size());
  std::optional<double> best;
  for (const auto& e : entries) {
    if (e.score && (!best || *e.score > *best)) best = e.score;
    out.push_back(best);
  }
  return out;
}

Budget budget_from_ledger(const std::vector<LedgerEntry>& entries, double price_per_1k_tokens) {
  Budget b;
  b.price_per_1k_tokens = price_per_1k_tokens;
  for (const auto& e : entries) {
    b.tokens_in += e.tokens_in;
    b.tokens_out += e.tokens_out;
    if (e.origin != Origin::initial_pool) {
      auto it = e.extra.find("attempts");
      b.proposer_calls += it == e.extra.end() ? 1 : std::stoull(it->second);
    }
  }
  return b;
}

std::string utc_timestamp_now() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const std::time_t t = system_clock::to_time_t(now);
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

}  // namespace vlmopt
