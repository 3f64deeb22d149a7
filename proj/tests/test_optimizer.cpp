#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "support.hpp"
#include "vlmopt/optimizer.hpp"
#include "vlmopt/synthetic.hpp"

using namespace vlmopt;
using testing::TempDir;

namespace {

PromptPool make_pool(const std::vector<std::pair<std::string, double>>& items) {
  PromptPool pool;
  std::uint64_t seq = 0;
  for (const auto& [t, s] : items) pool.admit({Template(t), s, Origin::initial_pool, seq++});
  return pool;
}

std::vector<std::string> texts(const std::vector<ScoredTemplate>& v) {
  std::vector<std::string> out;
  for (const auto& s : v) out.push_back(s.templ.text());
  return out;
}

const TemplateCorpus& corpus() {
  static const TemplateCorpus c = synthetic_corpus(400, 1);
  return c;
}

RunConfig small_config(std::uint64_t seed = 0) {
  RunConfig c;
  c.n_restart = 2;
  c.n_reset = 3;
  c.n_iter = 4;
  c.m = 10;
  c.k = 2;
  c.seed = seed;
  return c;
}

ClassificationTask synthetic_task() { return {"synthetic", {"object"}, 1, 0, Split::train}; }

struct Harness {
  std::shared_ptr<SyntheticOracle> oracle = std::make_shared<SyntheticOracle>(default_oracle_spec(), 0);
  CachedEvaluator evaluator{oracle};
  MockProposer proposer{MockProposerOptions{synthetic_vocabulary()}};

  RunResult go(const RunConfig& cfg, RunOptions opts = {}) {
    opts.task = synthetic_task();
    return run(cfg, corpus(), evaluator, proposer, opts);
  }
};

// Replies from a fixed list, cycling; throws ProposalFailed on "FAIL".
class ScriptedProposer final : public Proposer {
 public:
  explicit ScriptedProposer(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  ProposerReply propose(const ProposalRequest& req, Rng&) override {
    requests.push_back(req.messages);
    const std::string r = replies_[next_++ % replies_.size()];
    if (r == "FAIL") throw ProposalFailed("down", 4, 10);
    return {r, 10, 3, 1};
  }
  std::vector<MessageSequence> requests;

 private:
  std::vector<std::string> replies_;
  std::size_t next_ = 0;
};

std::size_t proposal_count(const std::vector<LedgerEntry>& ledger) {
  return static_cast<std::size_t>(std::count_if(ledger.begin(), ledger.end(),
                                                [](const LedgerEntry& e) { return e.origin != Origin::initial_pool; }));
}

std::uint64_t attempts(const std::vector<LedgerEntry>& ledger) {
  std::uint64_t n = 0;
  for (const auto& e : ledger)
    if (e.origin != Origin::initial_pool) n += std::stoull(e.extra.at("attempts"));
  return n;
}

}  // namespace

TEST_CASE("select_extremes examples") {
  PromptPool pool = make_pool({{"a {}", 0.9}, {"b {}", 0.5}, {"c {}", 0.1}});
  ExtremeSets e = select_extremes(pool, 1, FeedbackMode::p_plus_n);
  CHECK(texts(e.top) == std::vector<std::string>{"a {}"});
  CHECK(texts(e.bottom) == std::vector<std::string>{"c {}"});

  PromptPool four = make_pool({{"a {}", 0.9}, {"b {}", 0.5}, {"c {}", 0.1}, {"d {}", 0.4}});
  ExtremeSets p = select_extremes(four, 2, FeedbackMode::p_only);
  CHECK(texts(p.top) == std::vector<std::string>{"a {}", "b {}", "d {}", "c {}"});
  CHECK(p.bottom.empty());

  ExtremeSets pn = select_extremes(four, 2, FeedbackMode::p_plus_n);
  CHECK(texts(pn.top) == std::vector<std::string>{"a {}", "b {}"});
  CHECK(texts(pn.bottom) == std::vector<std::string>{"c {}", "d {}"});

  CHECK_THROWS_AS(select_extremes(pool, 2, FeedbackMode::p_plus_n), InvalidArgument);
  CHECK_THROWS_AS(select_extremes(pool, 0, FeedbackMode::p_plus_n), InvalidArgument);
}

TEST_CASE("select_extremes agrees with a rank oracle over all admission orders") {
  // Equal scores everywhere, then a mix with ties, across all 720 orders.
  for (const std::vector<double> scores : {std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.5, 0.5},
                                           std::vector<double>{0.3, 0.7, 0.3, 0.1, 0.7, 0.3}}) {
    std::vector<int> order(6);
    std::iota(order.begin(), order.end(), 0);
    do {
      std::vector<std::pair<std::string, double>> items;
      for (int i : order) items.push_back({"t" + std::to_string(i) + " {}", scores[static_cast<std::size_t>(i)]});
      PromptPool pool = make_pool(items);

      // rank = entries strictly better + equal entries admitted earlier
      std::vector<std::string> by_rank(6);
      for (std::size_t a = 0; a < 6; ++a) {
        std::size_t rank = 0;
        for (std::size_t b = 0; b < 6; ++b)
          if (items[b].second > items[a].second || (items[b].second == items[a].second && b < a)) ++rank;
        by_rank[rank] = items[a].first;
      }
      ExtremeSets e = select_extremes(pool, 2, FeedbackMode::p_plus_n);
      CHECK(texts(e.top) == std::vector<std::string>{by_rank[0], by_rank[1]});
      CHECK(texts(e.bottom) == std::vector<std::string>{by_rank[5], by_rank[4]});
      std::set<std::string> top(by_rank.begin(), by_rank.begin() + 2);
      for (const auto& b : texts(e.bottom)) CHECK(top.count(b) == 0);

      ExtremeSets p = select_extremes(pool, 3, FeedbackMode::p_only);
      CHECK(texts(p.top) == by_rank);
    } while (std::next_permutation(order.begin(), order.end()));
  }
}

TEST_CASE("select_extremes is stable when called twice") {
  PromptPool pool = make_pool({{"a {}", 0.2}, {"b {}", 0.2}, {"c {}", 0.4}, {"d {}", 0.2}});
  auto x = select_extremes(pool, 2, FeedbackMode::p_plus_n);
  auto y = select_extremes(pool, 2, FeedbackMode::p_plus_n);
  CHECK(texts(x.top) == texts(y.top));
  CHECK(texts(x.bottom) == texts(y.bottom));
}

TEST_CASE("run: budget and ledger layout for 2x3x4, m=10, k=2") {
  Harness h;
  RunResult r = h.go(small_config());
  const auto& L = r.ledger;
  CHECK(L.size() == 20 + 24);
  CHECK(proposal_count(L) == 24);
  CHECK(attempts(L) == 24);
  CHECK(r.budget.proposer_calls == 24);
  CHECK(h.oracle.use_count() >= 1);
  // Initial pools scored once per distinct template; proposals at most once each.
  CHECK(h.evaluator.backend_calls() <= 20 + 24);
  CHECK(h.evaluator.backend_calls() >= 20);

  std::set<std::tuple<int, int, int>> keys;
  for (const auto& e : L) keys.insert({e.restart, e.reset, e.iter});
  CHECK(keys.size() == L.size());

  int initial = 0;
  for (const auto& e : L) {
    if (e.origin == Origin::initial_pool) {
      ++initial;
      CHECK(e.reset == kInitialPoolReset);
      CHECK(e.score.has_value());
    } else {
      CHECK(e.reset >= 0);
      CHECK(e.reset < 3);
      CHECK(e.iter < 4);
    }
    CHECK(e.run_id == "run");
    CHECK_FALSE(e.timestamp.empty());
  }
  CHECK(initial == 20);
  CHECK(r.restarts_run == 2);
  CHECK_FALSE(r.stopped_early);
}

TEST_CASE("run: returned best equals the ledger argmax") {
  Harness h;
  RunResult r = h.go(small_config(3));
  ScoredTemplate replayed = best_so_far(r.ledger);
  CHECK(replayed.templ.text() == r.best.templ.text());
  CHECK(replayed.score == r.best.score);
}

TEST_CASE("run: config errors") {
  Harness h;
  RunConfig c = small_config();
  c.n_iter = 0;
  CHECK_THROWS_AS(h.go(c), InvalidArgument);
  RunConfig big = small_config();
  big.m = 100000;
  CHECK_THROWS_AS(h.go(big), InvalidArgument);
  RunOptions bad_jobs;
  bad_jobs.jobs = 0;
  CHECK_THROWS_AS(h.go(small_config(), bad_jobs), InvalidArgument);
}

TEST_CASE("run: p_only and p_plus_n spend the same budget") {
  Harness a, b;
  RunConfig c = small_config(1);
  RunResult pn = a.go(c);
  c.feedback_mode = FeedbackMode::p_only;
  RunResult po = b.go(c);
  CHECK(attempts(pn.ledger) == attempts(po.ledger));
  CHECK(pn.ledger.size() == po.ledger.size());
}

TEST_CASE("run: all conversation modes run and stay within budget") {
  for (auto mode : {ConversationMode::iterative, ConversationMode::non_iterative, ConversationMode::multi_turn}) {
    Harness h;
    RunConfig c = small_config(2);
    c.conversation_mode = mode;
    RunResult r = h.go(c);
    CHECK(proposal_count(r.ledger) == 24);
  }
}

TEST_CASE("run: non_iterative sends identical messages within a reset") {
  RunConfig c = small_config();
  c.n_restart = 1;
  c.n_reset = 1;
  c.n_iter = 5;
  c.conversation_mode = ConversationMode::non_iterative;
  ScriptedProposer p({"a bright photo of a {}", "a centered closeup photo {}", "photo bright {} centered",
                      "closeup {} photo bright", "bright centered closeup photo {}"});
  SyntheticOracle oracle(default_oracle_spec(), 0);
  RunOptions o;
  o.task = synthetic_task();
  run(c, corpus(), oracle, p, o);
  REQUIRE(p.requests.size() == 5);
  for (const auto& m : p.requests) CHECK(m == p.requests[0]);

  c.conversation_mode = ConversationMode::iterative;
  ScriptedProposer q({"a bright photo of a {}", "a centered closeup photo {}", "photo bright {} centered",
                      "closeup {} photo bright", "bright centered closeup photo {}"});
  run(c, corpus(), oracle, q, o);
  CHECK(q.requests[0] != q.requests[4]);
}

TEST_CASE("run: multi_turn carries the conversation") {
  RunConfig c = small_config();
  c.n_restart = 1;
  c.n_reset = 1;
  c.n_iter = 3;
  c.conversation_mode = ConversationMode::multi_turn;
  ScriptedProposer p({"- a bright centered closeup photo of a {}", "a sketch {}", "a dark {} blurry sketch"});
  SyntheticOracle oracle(default_oracle_spec(), 0);
  RunOptions o;
  o.task = synthetic_task();
  run(c, corpus(), oracle, p, o);
  REQUIRE(p.requests.size() == 3);
  CHECK(p.requests[0].size() == 1);
  REQUIRE(p.requests[2].size() == 5);
  CHECK(p.requests[2][1].content == "- a bright centered closeup photo of a {}");
  CHECK(p.requests[2][2].content.find("\"a bright centered closeup photo of a {}\" improves to") != std::string::npos);
  CHECK(p.requests[2][4].content.find("\"a sketch {}\" drops to") != std::string::npos);
}

TEST_CASE("run: unparseable reply gets one repair, then the iteration is skipped") {
  RunConfig c = small_config();
  c.n_restart = 1;
  c.n_reset = 1;
  c.n_iter = 2;
  ScriptedProposer p({"An image of a dog", "still no slot", "An image of a dog", "- a bright photo {}"});
  SyntheticOracle oracle(default_oracle_spec(), 0);
  RunOptions o;
  o.task = synthetic_task();
  RunResult r = run(c, corpus(), oracle, p, o);
  REQUIRE(p.requests.size() == 4);
  CHECK(p.requests[1].size() == p.requests[0].size() + 2);
  CHECK(p.requests[1].back().content == repair_instruction());

  std::vector<LedgerEntry> props;
  for (const auto& e : r.ledger)
    if (e.origin != Origin::initial_pool) props.push_back(e);
  REQUIRE(props.size() == 2);
  CHECK(props[0].extra.at("skipped") == "unparseable");
  CHECK(props[0].extra.at("attempts") == "2");
  CHECK(props[0].extra.at("raw_reply") == "still no slot");
  CHECK_FALSE(props[0].score.has_value());
  CHECK(props[1].extra.at("repaired") == "true");
  CHECK(props[1].template_text == "a bright photo {}");
  CHECK(props[1].score.has_value());
  CHECK(r.budget.proposer_calls == 4);
}

TEST_CASE("run: transport failure skips the iteration but charges the attempts") {
  RunConfig c = small_config();
  c.n_restart = 1;
  c.n_reset = 1;
  c.n_iter = 2;
  ScriptedProposer p({"FAIL", "a bright photo {}"});
  SyntheticOracle oracle(default_oracle_spec(), 0);
  RunOptions o;
  o.task = synthetic_task();
  RunResult r = run(c, corpus(), oracle, p, o);
  std::vector<LedgerEntry> props;
  for (const auto& e : r.ledger)
    if (e.origin != Origin::initial_pool) props.push_back(e);
  REQUIRE(props.size() == 2);
  CHECK(props[0].extra.at("skipped") == "transport");
  CHECK(props[0].extra.at("attempts") == "4");
  CHECK(props[0].tokens_in == 10);
  CHECK(r.budget.proposer_calls == 5);
}

TEST_CASE("run: duplicate proposals reuse the pool score") {
  RunConfig c = small_config();
  c.n_restart = 1;
  c.n_reset = 1;
  c.n_iter = 3;
  ScriptedProposer p({"a bright photo {}", "a bright photo {}", "\"a bright photo {}\""});
  auto oracle = std::make_shared<SyntheticOracle>(default_oracle_spec(), 0);
  testing::CountingEvaluator counting([&](const Template& t, const ClassificationTask& task) {
    return oracle->score(t, task);
  });
  RunOptions o;
  o.task = synthetic_task();
  RunResult r = run(c, corpus(), counting, p, o);
  CHECK(counting.calls == 10 + 1);
  std::vector<LedgerEntry> props;
  for (const auto& e : r.ledger)
    if (e.origin != Origin::initial_pool) props.push_back(e);
  CHECK_FALSE(props[0].extra.count("duplicate"));
  CHECK(props[1].extra.at("duplicate") == "true");
  CHECK(props[2].extra.at("duplicate") == "true");
  CHECK(*props[1].score == *props[0].score);
}

TEST_CASE("run: fatal backend errors abort the run") {
  RunConfig c = small_config();
  testing::CountingEvaluator broken([](const Template&, const ClassificationTask&) -> double {
    throw FatalBackendError("unknown dataset");
  });
  MockProposer p(MockProposerOptions{synthetic_vocabulary()});
  RunOptions o;
  o.task = synthetic_task();
  CHECK_THROWS_AS(run(c, corpus(), broken, p, o), FatalBackendError);
  o.jobs = 2;
  CHECK_THROWS_AS(run(c, corpus(), broken, p, o), FatalBackendError);
}

TEST_CASE("run: identical seeds give identical ledgers") {
  Harness a, b, c;
  RunResult x = a.go(small_config(7)), y = b.go(small_config(7)), z = c.go(small_config(8));
  auto lx = without_timestamps(x.ledger), ly = without_timestamps(y.ledger), lz = without_timestamps(z.ledger);
  REQUIRE(lx.size() == ly.size());
  for (std::size_t i = 0; i < lx.size(); ++i) CHECK(lx[i].same_event(ly[i]));
  bool differs = false;
  for (std::size_t i = 0; i < lx.size() && i < lz.size(); ++i) differs = differs || !lx[i].same_event(lz[i]);
  CHECK(differs);
}

TEST_CASE("run: ledger does not depend on the worker count") {
  RunConfig cfg = small_config(4);
  cfg.n_restart = 5;
  Harness a, b;
  RunOptions serial, parallel;
  parallel.jobs = 4;
  auto x = without_timestamps(a.go(cfg, serial).ledger);
  auto y = without_timestamps(b.go(cfg, parallel).ledger);
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].same_event(y[i]));
}

TEST_CASE("run: resume after an interrupted run reproduces the full ledger") {
  TempDir dir;
  RunConfig cfg = small_config(9);
  cfg.n_restart = 3;

  Harness full;
  RunOptions mem;
  auto reference = without_timestamps(full.go(cfg, mem).ledger);

  RunOptions o;
  o.ledger_path = dir / "ledger.jsonl";
  o.stop_after_restarts = 1;
  Harness first;
  RunResult partial = first.go(cfg, o);
  CHECK(partial.stopped_early);
  const auto on_disk = Ledger::load(o.ledger_path);
  CHECK(on_disk.size() < reference.size());

  // Simulate a torn write on top of the kill.
  {
    std::ofstream f(o.ledger_path, std::ios::app);
    f << "{\"run_id\": \"run\", \"resta";
  }

  RunOptions again;
  again.ledger_path = o.ledger_path;
  CHECK_THROWS_AS(Harness{}.go(cfg, again), InvalidArgument);  // refuses to clobber without resume

  again.resume = true;
  Harness second;
  RunResult resumed = second.go(cfg, again);
  CHECK(resumed.restarts_run == 2);
  auto got = without_timestamps(Ledger::load(o.ledger_path));
  REQUIRE(got.size() == reference.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].same_event(reference[i]));
  CHECK(resumed.best.templ.text() == best_so_far(reference).templ.text());

  // Resuming a finished run does no work.
  Harness third;
  RunResult noop = third.go(cfg, again);
  CHECK(noop.restarts_run == 0);
  CHECK(third.evaluator.backend_calls() == 0);
  CHECK(Ledger::load(o.ledger_path).size() == reference.size());
}

TEST_CASE("run: resume drops a partially written reset") {
  TempDir dir;
  RunConfig cfg = small_config(5);
  Harness full;
  auto reference = without_timestamps(full.go(cfg).ledger);

  RunOptions o;
  o.ledger_path = dir / "ledger.jsonl";
  Harness h;
  h.go(cfg, o);
  // Keep the first restart plus half of one reset of the second.
  Ledger l(o.ledger_path);
  l.truncate(10 + 12 + 10 + 2);
  o.resume = true;
  Harness again;
  again.go(cfg, o);
  auto got = without_timestamps(Ledger::load(o.ledger_path));
  REQUIRE(got.size() == reference.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].same_event(reference[i]));
}

TEST_CASE("APE baseline uses the same budget and parser") {
  Harness a, b;
  RunConfig cfg = small_config(1);
  RunOptions o;
  o.task = synthetic_task();
  RunResult main = a.go(cfg);
  RunResult ape = run_ape_baseline(cfg, corpus(), b.evaluator, b.proposer, o);
  CHECK(attempts(main.ledger) == attempts(ape.ledger));
  CHECK(main.ledger.size() == ape.ledger.size());
  for (const auto& e : ape.ledger)
    if (e.origin != Origin::initial_pool) CHECK(e.origin == Origin::ape_paraphrase);

  RunConfig one = cfg;
  one.n_restart = 1;
  one.n_reset = 1;
  one.n_iter = 1;
  ScriptedProposer bad({"- a picture of a dog", "- still none"});
  SyntheticOracle oracle(default_oracle_spec(), 0);
  RunResult r = run_ape_baseline(one, corpus(), oracle, bad, o);
  REQUIRE(bad.requests.size() == 2);
  CHECK(bad.requests[0][0].content.rfind("Hi ChatGPT, generate a single variation", 0) == 0);
  CHECK(r.ledger.back().extra.at("skipped") == "unparseable");
}

TEST_CASE("APE loses to pattern feedback on the synthetic oracle") {
  RunConfig cfg;
  cfg.n_restart = 1;
  cfg.n_reset = 10;
  cfg.n_iter = 10;
  cfg.m = 100;
  cfg.k = 15;
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    Harness a, b;
    RunOptions o;
    o.task = synthetic_task();
    const double main = a.go(cfg).best.score;
    const double ape = run_ape_baseline(cfg, corpus(), b.evaluator, b.proposer, o).best.score;
    wins += main >= ape ? 1 : 0;
  }
  CHECK(wins >= 14);
}

TEST_CASE("estimate_cost") {
  RunConfig one;
  one.n_restart = 1;
  CHECK(estimate_cost(one, 500, 0.0015) == doctest::Approx(0.375));
  RunConfig fold;
  CHECK(estimate_cost(fold, 500, 0.0015) == doctest::Approx(7.5));
  CHECK(estimate_cost(fold, 500, 0.0015) * 11 == doctest::Approx(82.5));
  RunConfig zero;
  zero.n_iter = 0;
  CHECK_THROWS_AS(estimate_cost(zero, 500, 0.0015), InvalidArgument);
  CHECK_THROWS_AS(estimate_cost(fold, -1, 0.0015), InvalidArgument);
}
