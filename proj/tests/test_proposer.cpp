#include <doctest.h>

#include <json.hpp>

#include <cstdlib>

#include "support.hpp"
#include "vlmopt/proposer.hpp"
#include "vlmopt/synthetic.hpp"

using namespace vlmopt;
using nlohmann::json;
using testing::golden;

namespace {

ScoredTemplate st(const std::string& text, double score, std::uint64_t seq = 0) {
  return {Template(text), score, Origin::initial_pool, seq};
}

FeedbackContext pn_context() {
  FeedbackContext c;
  c.top = {st("a bright photo of a {}", 0.6), st("a close-up photo of the {}", 0.55)};
  c.bottom = {st("a blurry sketch of {}", 0.1), st("{} in the dark", 0.2)};
  return c;
}

// Word-level Levenshtein distance.
std::size_t word_distance(const std::string& a, const std::string& b) {
  auto x = template_tokens(a), y = template_tokens(b);
  std::vector<std::vector<std::size_t>> d(x.size() + 1, std::vector<std::size_t>(y.size() + 1));
  for (std::size_t i = 0; i <= x.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= y.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= x.size(); ++i)
    for (std::size_t j = 1; j <= y.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1)});
  return d[x.size()][y.size()];
}

bool has_word(const std::string& text, const std::string& w) {
  for (const auto& t : template_tokens(text))
    if (t == w) return true;
  return false;
}

}  // namespace

TEST_CASE("p_plus_n message matches the golden text") {
  MessageSequence m = build_feedback_messages(pn_context(), 2);
  REQUIRE(m.size() == 1);
  CHECK(m[0].role == Role::user);
  CHECK(m[0].content == golden("pn_prompt.txt"));
}

TEST_CASE("p_only message matches the golden text") {
  FeedbackContext c = pn_context();
  c.feedback_mode = FeedbackMode::p_only;
  c.top.insert(c.top.end(), c.bottom.begin(), c.bottom.end());
  c.bottom.clear();
  MessageSequence m = build_feedback_messages(c, 2);
  REQUIRE(m.size() == 1);
  CHECK(m[0].content == golden("p_only_prompt.txt"));
}

TEST_CASE("k=1 p_plus_n message has both lists and all three requirements") {
  FeedbackContext c;
  c.top = {st("a photo of a {}", 0.5)};
  c.bottom = {st("{}", 0.1)};
  const std::string s = build_feedback_messages(c, 1)[0].content;
  CHECK(s.find("Here is the list of good templates:\n- a photo of a {}\n") != std::string::npos);
  CHECK(s.find("Here is the list of bad templates:\n- {}\n") != std::string::npos);
  CHECK(s.find("- Please only reply with the template.") != std::string::npos);
  CHECK(s.find("- The template should be fewer than 15 words.") != std::string::npos);
  CHECK(s.find("- The template should have a similar structure to the above templates.") != std::string::npos);
}

TEST_CASE("list sizes must match k and the mode") {
  FeedbackContext c = pn_context();
  CHECK_THROWS_AS(build_feedback_messages(c, 1), InvalidArgument);
  CHECK_THROWS_AS(build_feedback_messages(c, 0), InvalidArgument);
  c.feedback_mode = FeedbackMode::p_only;
  CHECK_THROWS_AS(build_feedback_messages(c, 2), InvalidArgument);  // bottom must be empty
}

TEST_CASE("multi_turn appends replies and performance feedback") {
  FeedbackContext c = pn_context();
  c.conversation_mode = ConversationMode::multi_turn;
  c.history = {{"- a sketch of a {}", "a sketch of a {}", 0.075, false},
               {"a bright centered photo of a {}", "a bright centered photo of a {}", 0.62, true}};
  MessageSequence m = build_feedback_messages(c, 2);
  REQUIRE(m.size() == 5);
  CHECK(m[0].content == golden("pn_prompt.txt"));
  CHECK(m[1] == Message{Role::assistant, "- a sketch of a {}"});
  CHECK(m[2] == Message{Role::user, golden("feedback_drops.txt")});
  CHECK(m[3].role == Role::assistant);
  CHECK(m[4] == Message{Role::user, golden("feedback_improves.txt")});
  CHECK(m[4].content.find("improves to 62.00%") != std::string::npos);
}

TEST_CASE("multi_turn history is truncated to the newest exchanges") {
  FeedbackContext c = pn_context();
  c.conversation_mode = ConversationMode::multi_turn;
  for (int i = 0; i < 5; ++i) c.history.push_back({"r" + std::to_string(i), "t{} " + std::to_string(i), 0.1, false});
  c.history_limit = 2;
  MessageSequence m = build_feedback_messages(c, 2);
  REQUIRE(m.size() == 5);
  CHECK(m[1].content == "r3");
  CHECK(m[3].content == "r4");
}

TEST_CASE("iterative and non_iterative modes ignore history") {
  FeedbackContext c = pn_context();
  c.history = {{"x {}", "x {}", 0.5, true}};
  CHECK(build_feedback_messages(c, 2).size() == 1);
  c.conversation_mode = ConversationMode::non_iterative;
  CHECK(build_feedback_messages(c, 2).size() == 1);
}

TEST_CASE("format_percent") {
  CHECK(format_percent(0.62) == "62.00");
  CHECK(format_percent(0.0) == "0.00");
  CHECK(format_percent(1.0) == "100.00");
  CHECK(format_percent(0.12345) == "12.35");
}

TEST_CASE("APE message matches the golden text") {
  MessageSequence m = build_ape_message(Template("a photo of a {}"));
  REQUIRE(m.size() == 1);
  CHECK(m[0].content == golden("ape_prompt.txt"));
  CHECK(m[0].content.find("\n- a photo of a {}\n") != std::string::npos);
}

TEST_CASE("parse_reply") {
  auto text = [](std::string_view raw) {
    ParsedTemplate p = parse_reply(raw);
    REQUIRE(p);
    return p.templ->text();
  };
  CHECK(text("- A photo of a {} at night") == "A photo of a {} at night");
  CHECK(text("\"a {} in motion\"") == "a {} in motion");
  CHECK(text("- a picture of a {}") == "a picture of a {}");
  CHECK(text("  `a {} on display`  ") == "a {} on display");
  CHECK(text("\xE2\x80\x9C" "a {} in the wild" "\xE2\x80\x9D") == "a {} in the wild");
  CHECK(text("Here is a better template:\n\n- \"a bright photo of a {}\"\n") == "a bright photo of a {}");
  CHECK(text("a {} with two {} slots") == "a {} with two {} slots");

  ParsedTemplate none = parse_reply("An image of a dog");
  CHECK_FALSE(none);
  CHECK(none.reject_reason.find("no placeholder") != std::string::npos);
  CHECK_FALSE(parse_reply(""));
  CHECK_FALSE(parse_reply("  \n \n"));
  CHECK_FALSE(parse_reply("- {}"));
  CHECK_FALSE(parse_reply("a {}"));
}

TEST_CASE("over-length replies are accepted with a warning") {
  testing::WarningCapture w;
  ParsedTemplate p = parse_reply("a very very very very very very very very very very very very long photo of a {}");
  REQUIRE(p);
  CHECK(p.over_length);
  CHECK(w.messages().size() == 1);
  CHECK_FALSE(parse_reply("a photo of a {}").over_length);
}

TEST_CASE("mock proposer follows the top-minus-bottom direction") {
  FeedbackContext c;
  c.top = {st("bright photo {}", 0.8)};
  c.bottom = {st("dark sketch {}", 0.1)};
  MockProposer mock(MockProposerOptions{synthetic_vocabulary()});
  for (int s = 0; s < 100; ++s) {
    Rng rng = seeded_rng(static_cast<std::uint64_t>(s), "mock");
    const std::string p = mock.mock_propose(c, rng);
    CHECK_MESSAGE((has_word(p, "bright") || has_word(p, "photo")), p);
    CHECK_MESSAGE(!has_word(p, "dark"), p);
    CHECK(count_placeholders(p) >= 1);
  }
}

TEST_CASE("mock proposer in p_only mode makes a small edit") {
  FeedbackContext c;
  c.feedback_mode = FeedbackMode::p_only;
  c.top = {st("a bright photo of a {}", 0.6), st("the {} in a sketch", 0.5)};
  MockProposer mock(MockProposerOptions{synthetic_vocabulary()});
  for (int s = 0; s < 100; ++s) {
    Rng rng = seeded_rng(static_cast<std::uint64_t>(s), "p-only");
    const std::string p = mock.mock_propose(c, rng);
    std::size_t best = 99;
    for (const auto& t : c.top) best = std::min(best, word_distance(p, t.templ.text()));
    CHECK_MESSAGE(best <= 2, p);
    CHECK(count_placeholders(p) >= 1);
  }
}

TEST_CASE("mock proposer is deterministic per seed") {
  FeedbackContext c = pn_context();
  MessageSequence msgs = build_feedback_messages(c, 2);
  MockProposer mock(MockProposerOptions{synthetic_vocabulary()});
  ProposalRequest req{msgs, 1.0, &c, nullptr};
  Rng a = seeded_rng(5, "x"), b = seeded_rng(5, "x");
  for (int i = 0; i < 10; ++i) {
    ProposerReply ra = mock.propose(req, a), rb = mock.propose(req, b);
    CHECK(ra.text == rb.text);
    CHECK(ra.tokens_in == count_message_words(msgs));
    CHECK(ra.tokens_out == count_words(ra.text));
    CHECK(parse_reply(ra.text));
  }
  ProposalRequest bare{msgs, 1.0, nullptr, nullptr};
  CHECK_THROWS_AS(mock.propose(bare, a), InvalidArgument);
}

TEST_CASE("mock paraphrase keeps a leading dash and a placeholder") {
  MockProposer mock(MockProposerOptions{synthetic_vocabulary()});
  const Template src("a photo of a {}");
  MessageSequence msgs = build_ape_message(src);
  ProposalRequest req{msgs, 1.0, nullptr, &src};
  for (int s = 0; s < 30; ++s) {
    Rng rng = seeded_rng(static_cast<std::uint64_t>(s), "ape");
    ProposerReply r = mock.propose(req, rng);
    CHECK(r.text.rfind("- ", 0) == 0);
    ParsedTemplate p = parse_reply(r.text);
    REQUIRE(p);
    CHECK(word_distance(p.templ->text(), src.text()) <= 2);
  }
}

TEST_CASE("template_tokens") {
  CHECK(template_tokens(" a  {}, photo ") == std::vector<std::string>{"a", "{},", "photo"});
}

TEST_CASE("chat proposer request and usage accounting") {
  auto transport = std::make_shared<testing::ScriptedTransport>();
  transport->push(429, "slow down");
  transport->push(200, R"({"choices": [{"message": {"role": "assistant", "content": "- a photo of a {}"}}],
                           "usage": {"prompt_tokens": 321, "completion_tokens": 7}})");
  ::setenv("VLMOPT_TEST_KEY", "sk-test", 1);
  ChatBackendConfig cfg;
  cfg.endpoint = "http://chat.local/v1";
  cfg.api_key_env = "VLMOPT_TEST_KEY";
  std::vector<long long> slept;
  ChatProposer p(cfg, transport, [&](std::chrono::milliseconds d) { slept.push_back(d.count()); });
  FeedbackContext c = pn_context();
  ProposalRequest req{build_feedback_messages(c, 2), 1.0, &c, nullptr};
  Rng rng = seeded_rng(0, "chat");
  ProposerReply r = p.propose(req, rng);
  CHECK(r.text == "- a photo of a {}");
  CHECK(r.tokens_in == 321);
  CHECK(r.tokens_out == 7);
  CHECK(r.attempts == 2);
  REQUIRE(transport->requests.size() == 2);
  CHECK(transport->requests[0].url == "http://chat.local/v1/chat/completions");
  const json body = json::parse(transport->requests[0].body);
  CHECK(body["model"] == "gpt-3.5-turbo-0301");
  CHECK(body["temperature"] == 1.0);
  CHECK(body["messages"][0]["role"] == "user");
  CHECK(body["messages"][0]["content"] == golden("pn_prompt.txt"));
  bool auth = false;
  for (const auto& [k, v] : transport->requests[0].headers) auth = auth || (k == "Authorization" && v == "Bearer sk-test");
  CHECK(auth);
  CHECK(slept == std::vector<long long>{0, 500});
}

TEST_CASE("chat proposer gives up after bounded retries") {
  auto transport = std::make_shared<testing::ScriptedTransport>();
  for (int i = 0; i < 3; ++i) transport->push(-1, "");
  ::setenv("VLMOPT_TEST_KEY", "sk-test", 1);
  ChatBackendConfig cfg;
  cfg.api_key_env = "VLMOPT_TEST_KEY";
  cfg.retry = RetryPolicy::immediate(3);
  ChatProposer p(cfg, transport, [](std::chrono::milliseconds) {});
  FeedbackContext c = pn_context();
  ProposalRequest req{build_feedback_messages(c, 2), 1.0, &c, nullptr};
  Rng rng = seeded_rng(0, "chat");
  try {
    p.propose(req, rng);
    FAIL("expected ProposalFailed");
  } catch (const ProposalFailed& e) {
    CHECK(e.attempts() == 3);
    CHECK(e.tokens_in() == count_message_words(req.messages));
  }

  auto auth_fail = std::make_shared<testing::ScriptedTransport>();
  auth_fail->push(401, R"({"error": "bad key"})");
  ChatProposer q(cfg, auth_fail, [](std::chrono::milliseconds) {});
  CHECK_THROWS_AS(q.propose(req, rng), FatalBackendError);
}

TEST_CASE("record then replay gives identical replies") {
  testing::TempDir dir;
  const auto transcript = dir / "transcript.jsonl";
  auto mock = std::make_shared<MockProposer>(MockProposerOptions{synthetic_vocabulary()});
  FeedbackContext c = pn_context();
  ProposalRequest req{build_feedback_messages(c, 2), 1.0, &c, nullptr};
  std::vector<std::string> live;
  {
    RecordingProposer rec(mock, transcript);
    Rng rng = seeded_rng(11, "rec");
    for (int i = 0; i < 5; ++i) live.push_back(rec.propose(req, rng).text);
  }
  ReplayProposer replay(transcript);
  CHECK(replay.remaining() == 5);
  Rng unused = seeded_rng(0, "other");
  for (int i = 0; i < 5; ++i) CHECK(replay.propose(req, unused).text == live[static_cast<std::size_t>(i)]);
  CHECK(replay.remaining() == 0);
  CHECK_THROWS_AS(replay.propose(req, unused), Error);

  ReplayProposer strict(transcript);
  ProposalRequest other{build_ape_message(Template("a photo of a {}")), 1.0, nullptr, nullptr};
  CHECK_THROWS_AS(strict.propose(other, unused), Error);
}
