#include "vlmopt/proposer.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "vlmopt/log.hpp"

namespace vlmopt {

using nlohmann::json;

namespace {

constexpr std::string_view kPatternIntroPN =
    "Hi ChatGPT, assume you are a pattern learner. I have two lists of CLIP templates: one with good templates and "
    "the other with bad templates. There are latent patterns that make a template good or bad. Based on these "
    "patterns, give me a better template for image classification while avoiding worse template.";

constexpr std::string_view kPatternIntroP =
    "Hi ChatGPT, assume you are a pattern learner. I have one list of CLIP templates: one with good templates. There "
    "are latent patterns that make a template good. Based on these patterns, give me a better template for image "
    "classification.";

constexpr std::string_view kRequirements =
    "Here are my requirements:\n"
    "- Please only reply with the template.\n"
    "- The template should be fewer than 15 words.\n"
    "- The template should have a similar structure to the above templates.";

constexpr std::string_view kApeIntro =
    "Hi ChatGPT, generate a single variation of the following template while keeping the semantic meaning:";

constexpr std::string_view kApeRequirement =
    "Here is my requirement:\n"
    "- Please return a single template starting with '-'";

std::string lower_key(std::string_view token) {
  std::string out;
  for (unsigned char c : token) {
    if (std::isalnum(c) || c == '\'' || c >= 0x80) out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

bool is_placeholder_token(std::string_view token) { return token.find(kPlaceholder) != std::string_view::npos; }

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::string strip_wrapping(std::string s) {
  static const std::vector<std::pair<std::string, std::string>> quotes = {
      {"\"", "\""}, {"'", "'"}, {"`", "`"}, {"\xE2\x80\x9C", "\xE2\x80\x9D"}, {"\xE2\x80\x98", "\xE2\x80\x99"}};
  for (bool changed = true; changed;) {
    changed = false;
    s = trim(s);
    if (s.rfind("- ", 0) == 0 || (s.size() > 1 && s[0] == '-' && s[1] != '-')) {
      s = trim(s.substr(1));
      changed = true;
    }
    for (const auto& [open, close] : quotes) {
      if (s.size() >= open.size() + close.size() && s.compare(0, open.size(), open) == 0 &&
          s.compare(s.size() - close.size(), close.size(), close) == 0) {
        s = s.substr(open.size(), s.size() - open.size() - close.size());
        changed = true;
        break;
      }
    }
  }
  return s;
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "user";
}

Role role_from_string(std::string_view name) {
  if (name == "system") return Role::system;
  if (name == "user") return Role::user;
  if (name == "assistant") return Role::assistant;
  throw InvalidArgument("unknown role: " + std::string(name));
}

std::string render_pattern_prompt(const std::vector<std::string>& good, const std::vector<std::string>& bad,
                                  FeedbackMode mode) {
  std::string s(mode == FeedbackMode::p_plus_n ? kPatternIntroPN : kPatternIntroP);
  s += "\nHere is the list of good templates:\n";
  for (const auto& g : good) s += "- " + g + "\n";
  if (mode == FeedbackMode::p_plus_n) {
    s += "Here is the list of bad templates:\n";
    for (const auto& b : bad) s += "- " + b + "\n";
  }
  s += kRequirements;
  return s;
}

std::string format_percent(double score) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", score * 100.0);
  return buf;
}

std::string performance_feedback(const Exchange& exchange) {
  return "The performance of the template \"" + exchange.template_text + "\" " +
         (exchange.improved ? "improves" : "drops") + " to " + format_percent(exchange.score) +
         "%. Please give me a better template.";
}

MessageSequence build_feedback_messages(const FeedbackContext& ctx, int k) {
  if (k < 1) throw InvalidArgument("k must be >= 1");
  const auto uk = static_cast<std::size_t>(k);
  if (ctx.feedback_mode == FeedbackMode::p_plus_n) {
    if (ctx.top.size() != uk || ctx.bottom.size() != uk)
      throw InvalidArgument("p_plus_n needs k=" + std::to_string(k) + " top and bottom templates, got " +
                            std::to_string(ctx.top.size()) + " and " + std::to_string(ctx.bottom.size()));
  } else {
    if (ctx.top.size() != 2 * uk || !ctx.bottom.empty())
      throw InvalidArgument("p_only needs 2k=" + std::to_string(2 * k) + " top templates and no bottom, got " +
                            std::to_string(ctx.top.size()) + " and " + std::to_string(ctx.bottom.size()));
  }
  std::vector<std::string> good, bad;
  for (const auto& t : ctx.top) good.push_back(t.templ.text());
  for (const auto& t : ctx.bottom) bad.push_back(t.templ.text());

  MessageSequence messages{{Role::user, render_pattern_prompt(good, bad, ctx.feedback_mode)}};
  if (ctx.conversation_mode == ConversationMode::multi_turn) {
    const std::size_t limit = static_cast<std::size_t>(std::max(0, ctx.history_limit));
    const std::size_t first = ctx.history.size() > limit ? ctx.history.size() - limit : 0;
    for (std::size_t i = first; i < ctx.history.size(); ++i) {
      messages.push_back({Role::assistant, ctx.history[i].reply});
      messages.push_back({Role::user, performance_feedback(ctx.history[i])});
    }
  }
  return messages;
}

MessageSequence build_ape_message(const Template& templ) {
  std::string s(kApeIntro);
  s += "\n- " + templ.text() + "\n";
  s += kApeRequirement;
  return {{Role::user, std::move(s)}};
}

std::string repair_instruction() {
  return "Please only reply with the template. The template must contain {} where the class name goes.";
}

ParsedTemplate parse_reply(std::string_view raw) {
  ParsedTemplate out;
  std::vector<std::string> lines;
  std::istringstream in{std::string(raw)};
  for (std::string line; std::getline(in, line);) {
    std::string cleaned = strip_wrapping(line);
    if (!cleaned.empty()) lines.push_back(std::move(cleaned));
  }
  if (lines.empty()) {
    out.reject_reason = "empty reply";
    return out;
  }
  auto it = std::find_if(lines.begin(), lines.end(), [](const std::string& l) { return count_placeholders(l) > 0; });
  if (it == lines.end()) {
    out.reject_reason = "no placeholder in reply: " + lines.front();
    return out;
  }
  Template t(*it);
  if (!t.admissible()) {
    out.reject_reason = "too little content besides the placeholder: " + t.text();
    return out;
  }
  if (count_words(t.text()) > kAdvisoryWordLimit) {
    out.over_length = true;
    warn("proposed template exceeds " + std::to_string(kAdvisoryWordLimit) + " words: " + t.text());
  }
  out.templ = std::move(t);
  return out;
}

std::uint64_t count_message_words(const MessageSequence& messages) {
  std::uint64_t n = 0;
  for (const auto& m : messages) n += count_words(m.content);
  return n;
}

std::vector<std::string> template_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

// ---------------------------------------------------------------------------
// Chat backend

ChatProposer::ChatProposer(ChatBackendConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
  if (!transport_) throw InvalidArgument("chat proposer needs a transport");
  if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
  if (api_key_.empty()) warn("environment variable " + config_.api_key_env + " is unset; sending unauthenticated requests");
}

ProposerReply ChatProposer::propose(const ProposalRequest& request, Rng&) {
  json msgs = json::array();
  for (const auto& m : request.messages) msgs.push_back({{"role", std::string(to_string(m.role))}, {"content", m.content}});
  const json body = {{"model", config_.model}, {"messages", msgs}, {"temperature", request.temperature}};
  const std::string payload = body.dump();
  HttpHeaders headers;
  if (!api_key_.empty()) headers.emplace_back("Authorization", "Bearer " + api_key_);
  const std::string url = join_url(config_.endpoint, "/chat/completions");

  int attempts = 0;
  HttpResponse res;
  try {
    res = with_retry(
        config_.retry,
        [&] {
          HttpResponse r = transport_->post_json(url, payload, headers);
          if (retryable_status(r.status)) throw TransportError("chat endpoint returned " + std::to_string(r.status));
          return r;
        },
        attempts, sleeper_);
  } catch (const TransportError& ex) {
    throw ProposalFailed(ex.what(), attempts, count_message_words(request.messages));
  }
  if (res.status != 200) throw FatalBackendError("chat endpoint returned " + std::to_string(res.status) + ": " + res.body);

  try {
    const json j = json::parse(res.body);
    ProposerReply reply;
    reply.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
    reply.attempts = attempts;
    if (j.contains("usage")) {
      reply.tokens_in = j["usage"].value("prompt_tokens", 0ULL);
      reply.tokens_out = j["usage"].value("completion_tokens", 0ULL);
    } else {
      reply.tokens_in = count_message_words(request.messages);
      reply.tokens_out = count_words(reply.text);
    }
    return reply;
  } catch (const json::exception& ex) {
    throw FatalBackendError(std::string("malformed chat response: ") + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Record / replay

namespace {

json messages_to_json(const MessageSequence& messages) {
  json arr = json::array();
  for (const auto& m : messages) arr.push_back({{"role", std::string(to_string(m.role))}, {"content", m.content}});
  return arr;
}

}  // namespace

RecordingProposer::RecordingProposer(std::shared_ptr<Proposer> inner, const std::filesystem::path& transcript)
    : inner_(std::move(inner)) {
  if (transcript.has_parent_path()) std::filesystem::create_directories(transcript.parent_path());
  out_.open(transcript, std::ios::app);
  if (!out_) throw Error("cannot open transcript " + transcript.string());
}

ProposerReply RecordingProposer::propose(const ProposalRequest& request, Rng& rng) {
  ProposerReply reply = inner_->propose(request, rng);
  const json rec = {{"messages", messages_to_json(request.messages)},
                    {"temperature", request.temperature},
                    {"reply", reply.text},
                    {"tokens_in", reply.tokens_in},
                    {"tokens_out", reply.tokens_out}};
  std::lock_guard lock(mu_);
  out_ << rec.dump() << '\n';
  out_.flush();
  return reply;
}

ReplayProposer::ReplayProposer(const std::filesystem::path& transcript) {
  std::ifstream in(transcript);
  if (!in) throw InvalidArgument("cannot open transcript " + transcript.string());
  for (std::string line; std::getline(in, line);) {
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      Record r;
      for (const auto& m : j.at("messages"))
        r.messages.push_back({role_from_string(m.at("role").get<std::string>()), m.at("content").get<std::string>()});
      r.reply.text = j.at("reply").get<std::string>();
      r.reply.tokens_in = j.value("tokens_in", 0ULL);
      r.reply.tokens_out = j.value("tokens_out", 0ULL);
      records_.push_back(std::move(r));
    } catch (const json::exception& ex) {
      throw Error(std::string("malformed transcript line: ") + ex.what());
    }
  }
}

ProposerReply ReplayProposer::propose(const ProposalRequest& request, Rng&) {
  std::lock_guard lock(mu_);
  if (next_ >= records_.size()) throw Error("transcript exhausted after " + std::to_string(records_.size()) + " replies");
  const Record& r = records_[next_];
  if (!(r.messages == request.messages))
    throw Error("transcript mismatch at reply " + std::to_string(next_) + ": request messages differ from the recording");
  ++next_;
  return r.reply;
}

std::size_t ReplayProposer::remaining() const {
  std::lock_guard lock(mu_);
  return records_.size() - next_;
}

// ---------------------------------------------------------------------------
// Mock

MockProposer::MockProposer(MockProposerOptions options) : options_(std::move(options)) {}

std::string MockProposer::edit_one_word(const std::string& text, const std::vector<std::string>& vocab, Rng& rng) const {
  std::vector<std::string> tokens = template_tokens(text);
  std::vector<std::size_t> words;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (!is_placeholder_token(tokens[i])) words.push_back(i);

  enum { kSwap, kInsert, kDelete };
  int op = static_cast<int>(rng.index(3));
  if (vocab.empty() && op != kDelete) op = kDelete;
  if (op == kSwap && words.empty()) op = kInsert;
  if (op == kDelete && words.size() < 2) op = vocab.empty() ? -1 : kInsert;

  switch (op) {
    case kSwap: tokens[words[rng.index(words.size())]] = vocab[rng.index(vocab.size())]; break;
    case kInsert: {
      const std::size_t at = rng.index(tokens.size() + 1);
      tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(at), vocab[rng.index(vocab.size())]);
      break;
    }
    case kDelete: tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(words[rng.index(words.size())])); break;
    default: break;
  }
  std::string out = join_tokens(tokens);
  if (!Template(out).admissible()) return text;
  return out;
}

std::string MockProposer::compose(const FeedbackContext& ctx, Rng& rng) const {
  // Share of templates in each list containing a word.
  auto presence = [](const std::vector<ScoredTemplate>& list) {
    std::unordered_map<std::string, double> share;
    for (const auto& st : list) {
      std::set<std::string> seen;
      for (const auto& tok : template_tokens(st.templ.text())) {
        if (is_placeholder_token(tok)) continue;
        const std::string key = lower_key(tok);
        if (!key.empty() && seen.insert(key).second) share[key] += 1.0;
      }
    }
    for (auto& [k, v] : share) v /= static_cast<double>(list.size());
    return share;
  };
  const auto top_share = presence(ctx.top);
  const auto bottom_share = presence(ctx.bottom);
  auto lift = [&](const std::string& key) {
    auto t = top_share.find(key);
    auto b = bottom_share.find(key);
    return (t == top_share.end() ? 0.0 : t->second) - (b == bottom_share.end() ? 0.0 : b->second);
  };

  const Template& skeleton = ctx.top[rng.index(ctx.top.size())].templ;
  std::vector<std::string> out;
  std::set<std::string> used;
  for (const auto& tok : template_tokens(skeleton.text())) {
    if (is_placeholder_token(tok)) {
      out.push_back(tok);
      continue;
    }
    const std::string key = lower_key(tok);
    if (lift(key) > 0.0 && used.insert(key).second) out.push_back(tok);
  }

  // Other over-represented words join with probability equal to their lift,
  // in order of first appearance in the top list.
  for (const auto& st : ctx.top) {
    for (const auto& tok : template_tokens(st.templ.text())) {
      if (is_placeholder_token(tok)) continue;
      const std::string key = lower_key(tok);
      const double l = lift(key);
      if (l <= 0.0 || used.count(key)) continue;
      used.insert(key);
      if (rng.bernoulli(l)) {
        const std::size_t at = rng.index(out.size() + 1);
        out.insert(out.begin() + static_cast<std::ptrdiff_t>(at), tok);
      }
    }
  }
  if (std::none_of(out.begin(), out.end(), [](const std::string& t) { return is_placeholder_token(t); }))
    out.push_back(std::string(kPlaceholder));
  std::string text = join_tokens(out);
  if (!Template(text).admissible()) return skeleton.text();
  return text;
}

std::string MockProposer::mock_propose(const FeedbackContext& ctx, Rng& rng) const {
  if (ctx.top.empty()) throw InvalidArgument("mock proposer needs at least one top template");
  if (!ctx.bottom.empty()) return compose(ctx, rng);

  std::vector<std::string> vocab = options_.vocabulary;
  if (vocab.empty()) {
    std::set<std::string> seen;
    for (const auto& st : ctx.top)
      for (const auto& tok : template_tokens(st.templ.text()))
        if (!is_placeholder_token(tok) && seen.insert(tok).second) vocab.push_back(tok);
  }
  const Template& base = ctx.top[rng.index(ctx.top.size())].templ;
  return edit_one_word(base.text(), vocab, rng);
}

std::string MockProposer::mock_paraphrase(const Template& source, Rng& rng) const {
  std::vector<std::string> vocab = options_.vocabulary;
  if (vocab.empty()) {
    for (const auto& tok : template_tokens(source.text()))
      if (!is_placeholder_token(tok)) vocab.push_back(tok);
  }
  return edit_one_word(source.text(), vocab, rng);
}

ProposerReply MockProposer::propose(const ProposalRequest& request, Rng& rng) {
  std::string text;
  bool bullet;
  if (request.ape_source != nullptr) {
    text = mock_paraphrase(*request.ape_source, rng);
    bullet = true;  // the paraphrase prompt asks for a leading '-'
  } else if (request.context != nullptr) {
    text = mock_propose(*request.context, rng);
    bullet = rng.bernoulli(options_.bullet_probability);
  } else {
    throw InvalidArgument("mock proposer needs a feedback context or a paraphrase source");
  }
  ProposerReply reply;
  reply.text = bullet ? "- " + text : text;
  reply.tokens_in = count_message_words(request.messages);
  reply.tokens_out = count_words(reply.text);
  return reply;
}

}  // namespace vlmopt
