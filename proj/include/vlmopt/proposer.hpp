#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlmopt/core.hpp"
#include "vlmopt/http.hpp"
#include "vlmopt/retry.hpp"
#include "vlmopt/rng.hpp"

namespace vlmopt {

enum class Role { system, user, assistant };

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);

struct Message {
  Role role;
  std::string content;
  friend bool operator==(const Message&, const Message&) = default;
};

using MessageSequence = std::vector<Message>;

// One multi-turn round: what the model said and how its template scored.
struct Exchange {
  std::string reply;
  std::string template_text;
  double score = 0.0;
  bool improved = false;
};

struct FeedbackContext {
  // Descending by score; k entries (2k in p_only mode).
  std::vector<ScoredTemplate> top;
  // Ascending by score; k entries, empty in p_only mode.
  std::vector<ScoredTemplate> bottom;
  FeedbackMode feedback_mode = FeedbackMode::p_plus_n;
  ConversationMode conversation_mode = ConversationMode::iterative;
  // Prior exchanges of this conversation; rendered in multi_turn mode only.
  std::vector<Exchange> history;
  int history_limit = 20;
};

/// Renders the pattern-learner prompt for `context`.
///
/// The caller chooses which extremes go in: current ones for iterative and
/// multi_turn, the reset's initial ones for non_iterative. In multi_turn
/// mode each exchange in `history` (newest `history_limit` kept) adds the
/// assistant reply and an "improves to"/"drops to" user turn.
/// Throws InvalidArgument when list sizes do not match k and the mode.
MessageSequence build_feedback_messages(const FeedbackContext& context, int k);

// Just the first user message body.
std::string render_pattern_prompt(const std::vector<std::string>& good, const std::vector<std::string>& bad,
                                  FeedbackMode mode);

// "62.00" for 0.62.
std::string format_percent(double score);

std::string performance_feedback(const Exchange& exchange);

MessageSequence build_ape_message(const Template& templ);

// Follow-up sent once after a reply that failed to parse.
std::string repair_instruction();

inline constexpr std::size_t kAdvisoryWordLimit = 15;

struct ParsedTemplate {
  std::optional<Template> templ;
  std::string reject_reason;
  // Set when the template has more words than the prompt asked for.
  bool over_length = false;

  explicit operator bool() const { return templ.has_value(); }
};

/// Extracts a template from a raw chat reply: the first non-empty line that
/// contains "{}" (or the first non-empty line, for the error message),
/// trimmed, with a leading "- " and wrapping quotes removed. Rejects when no
/// placeholder or too little content remains.
ParsedTemplate parse_reply(std::string_view raw);

struct ProposerReply {
  std::string text;
  std::uint64_t tokens_in = 0;
  std::uint64_t tokens_out = 0;
  int attempts = 1;
};

// What the proposer is asked. `context` is set for feedback proposals and
// `ape_source` for paraphrase requests so structured backends (the mock) can
// act on them; chat backends read only `messages`.
struct ProposalRequest {
  MessageSequence messages;
  double temperature = 1.0;
  const FeedbackContext* context = nullptr;
  const Template* ape_source = nullptr;
};

// Raised when a backend gave up after retrying; attempts are still billable.
class ProposalFailed : public TransportError {
 public:
  ProposalFailed(const std::string& what, int attempts, std::uint64_t tokens_in = 0)
      : TransportError(what), attempts_(attempts), tokens_in_(tokens_in) {}
  int attempts() const { return attempts_; }
  std::uint64_t tokens_in() const { return tokens_in_; }

 private:
  int attempts_;
  std::uint64_t tokens_in_;
};

class Proposer {
 public:
  virtual ~Proposer() = default;
  // `rng` is the caller's stream for this conversation; remote backends
  // ignore it.
  virtual ProposerReply propose(const ProposalRequest& request, Rng& rng) = 0;
};

// Whitespace-token count over all message contents.
std::uint64_t count_message_words(const MessageSequence& messages);

struct ChatBackendConfig {
  std::string endpoint = "https://api.openai.com/v1";
  std::string model = "gpt-3.5-turbo-0301";
  std::string api_key_env = "OPENAI_API_KEY";
  RetryPolicy retry{};
};

/// OpenAI-compatible /chat/completions client. Token counts come from the
/// response "usage" block.
class ChatProposer final : public Proposer {
 public:
  ChatProposer(ChatBackendConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper = default_sleep);

  ProposerReply propose(const ProposalRequest& request, Rng& rng) override;

 private:
  ChatBackendConfig config_;
  std::string api_key_;
  std::shared_ptr<HttpTransport> transport_;
  Sleeper sleeper_;
};

/// Decorator appending every exchange to a JSONL transcript:
/// {"messages": [...], "temperature": t, "reply": "...", "tokens_in": n, "tokens_out": n}
class RecordingProposer final : public Proposer {
 public:
  RecordingProposer(std::shared_ptr<Proposer> inner, const std::filesystem::path& transcript);
  ProposerReply propose(const ProposalRequest& request, Rng& rng) override;

 private:
  std::shared_ptr<Proposer> inner_;
  std::mutex mu_;
  std::ofstream out_;
};

/// Serves replies from a recorded transcript in order. Each request's
/// messages must equal the recorded ones, otherwise Error is thrown.
class ReplayProposer final : public Proposer {
 public:
  explicit ReplayProposer(const std::filesystem::path& transcript);
  ProposerReply propose(const ProposalRequest& request, Rng& rng) override;

  std::size_t remaining() const;

 private:
  struct Record {
    MessageSequence messages;
    ProposerReply reply;
  };
  mutable std::mutex mu_;
  std::vector<Record> records_;
  std::size_t next_ = 0;
};

struct MockProposerOptions {
  // Words the mock may insert; when empty, words seen in the request are used.
  std::vector<std::string> vocabulary;
  // Fraction of replies formatted as a "- " list item.
  double bullet_probability = 0.3;
};

/// Deterministic stand-in for the chat model.
///
/// With a bottom list it composes a candidate from words over-represented
/// in the top templates relative to the bottom ones, starting from a random
/// top template as the skeleton. Without one (p_only) it applies a single
/// swap, insert, or delete to a random top template. Paraphrase requests get
/// the same single-word edit applied to the source template.
class MockProposer final : public Proposer {
 public:
  explicit MockProposer(MockProposerOptions options = {});

  ProposerReply propose(const ProposalRequest& request, Rng& rng) override;

  // The template text the mock would propose (no list formatting).
  std::string mock_propose(const FeedbackContext& context, Rng& rng) const;
  std::string mock_paraphrase(const Template& source, Rng& rng) const;

 private:
  std::string compose(const FeedbackContext& context, Rng& rng) const;
  std::string edit_one_word(const std::string& text, const std::vector<std::string>& vocab, Rng& rng) const;

  MockProposerOptions options_;
};

// Whitespace tokens of a template; tokens containing "{}" are placeholders.
std::vector<std::string> template_tokens(std::string_view text);

}  // namespace vlmopt
