#include "vlmopt/optimizer.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <exception>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

#include "vlmopt/rng.hpp"

namespace vlmopt {

ExtremeSets select_extremes(const PromptPool& pool, int k, FeedbackMode mode) {
  if (k < 1) throw InvalidArgument("k must be >= 1");
  const std::size_t need = 2 * static_cast<std::size_t>(k);
  if (pool.size() < need)
    throw InvalidArgument("pool of " + std::to_string(pool.size()) + " templates is smaller than 2k=" +
                          std::to_string(need));
  const auto& entries = pool.entries();
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return entries[a].score > entries[b].score; });

  ExtremeSets out;
  const std::size_t n_top = mode == FeedbackMode::p_only ? need : static_cast<std::size_t>(k);
  for (std::size_t i = 0; i < n_top; ++i) out.top.push_back(entries[order[i]]);
  if (mode == FeedbackMode::p_plus_n) {
    for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) out.bottom.push_back(entries[order[order.size() - 1 - i]]);
  }
  return out;
}

double estimate_cost(const RunConfig& config, double avg_tokens_per_call, double price_per_1k) {
  config.validate();
  if (!(avg_tokens_per_call > 0.0) || !(price_per_1k > 0.0)) throw InvalidArgument("tokens and price must be positive");
  return static_cast<double>(config.total_proposer_calls()) * avg_tokens_per_call / 1000.0 * price_per_1k;
}

namespace {

// Ledger positions are fixed by the config: each restart writes m initial
// entries followed by n_reset units of n_iter entries.
struct Layout {
  std::size_t m, resets, iters;
  std::size_t restart_size() const { return m + resets * iters; }
  std::size_t init_pos(int r) const { return static_cast<std::size_t>(r) * restart_size(); }
  std::size_t reset_pos(int r, int j) const { return init_pos(r) + m + static_cast<std::size_t>(j) * iters; }
};

struct RestartProgress {
  bool init_done = false;
  int resets_done = 0;
  std::vector<ScoredTemplate> initial;  // when init_done
};

// Keeps the longest prefix of `entries` made of complete units in canonical
// order; fills `progress` and returns the prefix length.
std::size_t complete_prefix(const std::vector<LedgerEntry>& entries, const RunConfig& cfg, const std::string& run_id,
                            Origin proposal_origin, std::vector<RestartProgress>& progress) {
  const Layout lay{static_cast<std::size_t>(cfg.m), static_cast<std::size_t>(cfg.n_reset),
                   static_cast<std::size_t>(cfg.n_iter)};
  auto unit_ok = [&](std::size_t pos, std::size_t len, int r, int reset, Origin origin) {
    if (pos + len > entries.size()) return false;
    for (std::size_t i = 0; i < len; ++i) {
      const auto& e = entries[pos + i];
      if (e.run_id != run_id || e.restart != r || e.reset != reset || e.iter != static_cast<int>(i) ||
          e.origin != origin)
        return false;
      if (origin == Origin::initial_pool && !e.score) return false;
    }
    return true;
  };
  std::size_t kept = 0;
  for (int r = 0; r < cfg.n_restart; ++r) {
    if (!unit_ok(lay.init_pos(r), lay.m, r, kInitialPoolReset, Origin::initial_pool)) return kept;
    auto& p = progress[static_cast<std::size_t>(r)];
    p.init_done = true;
    for (std::size_t i = 0; i < lay.m; ++i) {
      const auto& e = entries[lay.init_pos(r) + i];
      p.initial.push_back(ScoredTemplate{Template(e.template_text), *e.score, Origin::initial_pool, lay.init_pos(r) + i});
    }
    kept = lay.init_pos(r) + lay.m;
    for (int j = 0; j < cfg.n_reset; ++j) {
      if (!unit_ok(lay.reset_pos(r, j), lay.iters, r, j, proposal_origin)) return kept;
      p.resets_done = j + 1;
      kept = lay.reset_pos(r, j) + lay.iters;
    }
  }
  return kept;
}

// Appends units to the ledger strictly in restart order.
class OrderedCommitter {
 public:
  OrderedCommitter(Ledger& ledger, int n_restart, int first_open, int stop_after)
      : ledger_(ledger), pending_(static_cast<std::size_t>(n_restart)), done_(static_cast<std::size_t>(n_restart), false),
        head_(first_open), stop_after_(stop_after) {
    for (int r = 0; r < first_open; ++r) done_[static_cast<std::size_t>(r)] = true;
    check_stop();
  }

  void submit(int r, std::vector<LedgerEntry> unit) {
    std::lock_guard lock(mu_);
    pending_[static_cast<std::size_t>(r)].push_back(std::move(unit));
    drain();
  }

  void finish(int r) {
    std::lock_guard lock(mu_);
    done_[static_cast<std::size_t>(r)] = true;
    drain();
  }

  bool stopped() const { return stop_.load(); }
  void stop() { stop_.store(true); }

 private:
  void drain() {
    while (!stop_.load() && head_ < static_cast<int>(pending_.size())) {
      auto& q = pending_[static_cast<std::size_t>(head_)];
      while (!q.empty()) {
        ledger_.append_batch(std::move(q.front()));
        q.pop_front();
      }
      if (!done_[static_cast<std::size_t>(head_)]) break;
      ++head_;
      check_stop();
    }
  }

  void check_stop() {
    if (stop_after_ >= 0 && head_ >= stop_after_ && head_ < static_cast<int>(pending_.size())) stop_.store(true);
  }

  Ledger& ledger_;
  std::mutex mu_;
  std::vector<std::deque<std::vector<LedgerEntry>>> pending_;
  std::vector<bool> done_;
  int head_;
  int stop_after_;
  std::atomic<bool> stop_{false};
};

class RunEngine {
 public:
  RunEngine(const RunConfig& cfg, const TemplateCorpus& corpus, Evaluator& evaluator, Proposer& proposer,
            const RunOptions& opts)
      : cfg_(cfg),
        corpus_(corpus),
        evaluator_(evaluator),
        proposer_(proposer),
        opts_(opts),
        layout_{static_cast<std::size_t>(cfg.m), static_cast<std::size_t>(cfg.n_reset),
                static_cast<std::size_t>(cfg.n_iter)},
        origin_(opts.strategy == Strategy::ape ? Origin::ape_paraphrase : Origin::llm_proposal) {}

  RunResult execute() {
    cfg_.validate();
    opts_.task.validate();
    if (opts_.jobs < 1) throw InvalidArgument("jobs must be >= 1");
    if (corpus_.size() < static_cast<std::size_t>(cfg_.m))
      throw InvalidArgument("corpus has " + std::to_string(corpus_.size()) + " templates but m=" + std::to_string(cfg_.m));

    std::unique_ptr<Ledger> ledger = opts_.ledger_path.empty() ? std::make_unique<Ledger>()
                                                               : std::make_unique<Ledger>(opts_.ledger_path);
    std::vector<RestartProgress> progress(static_cast<std::size_t>(cfg_.n_restart));
    if (ledger->size() > 0) {
      if (!opts_.resume)
        throw InvalidArgument("ledger " + opts_.ledger_path.string() + " already has " + std::to_string(ledger->size()) +
                              " entries; resume it or choose a new run id");
      const auto existing = ledger->snapshot();
      const std::size_t keep = complete_prefix(existing, cfg_, opts_.run_id, origin_, progress);
      ledger->truncate(keep);
    }

    int first_open = 0;
    while (first_open < cfg_.n_restart &&
           progress[static_cast<std::size_t>(first_open)].resets_done == cfg_.n_reset)
      ++first_open;

    OrderedCommitter committer(*ledger, cfg_.n_restart, first_open, opts_.stop_after_restarts);
    std::vector<int> todo;
    for (int r = first_open; r < cfg_.n_restart; ++r) todo.push_back(r);

    std::atomic<std::size_t> next{0};
    std::atomic<int> restarts_run{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= todo.size() || committer.stopped()) return;
        const int r = todo[i];
        try {
          if (run_restart(r, progress[static_cast<std::size_t>(r)], committer)) {
            committer.finish(r);
            ++restarts_run;
          }
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
          committer.stop();
          return;
        }
      }
    };
    const int jobs = std::max(1, std::min<int>(opts_.jobs, static_cast<int>(todo.size())));
    if (jobs <= 1) {
      worker();
    } else {
      std::vector<std::thread> threads;
      for (int t = 0; t < jobs; ++t) threads.emplace_back(worker);
      for (auto& th : threads) th.join();
    }
    if (failure) std::rethrow_exception(failure);

    RunResult result{best_so_far_or_throw(*ledger), ledger->snapshot(), {}, restarts_run.load(), committer.stopped()};
    result.budget = budget_from_ledger(result.ledger, opts_.price_per_1k_tokens);
    result.budget.evaluator_calls = evaluator_calls_.load();
    result.budget.evaluator_cache_hits = cache_hits_.load();
    return result;
  }

 private:
  static ScoredTemplate best_so_far_or_throw(const Ledger& ledger) { return best_so_far(ledger.snapshot()); }

  LedgerEntry make_entry(int r, int reset, int iter, Origin origin) const {
    LedgerEntry e;
    e.run_id = opts_.run_id;
    e.restart = r;
    e.reset = reset;
    e.iter = iter;
    e.origin = origin;
    e.timestamp = utc_timestamp_now();
    return e;
  }

  double score(const Template& t) {
    const ScoreResult res = evaluator_.evaluate(t, opts_.task);
    ++evaluator_calls_;
    if (res.cached) ++cache_hits_;
    return validate_score(res.score);
  }

  // Returns false when the committer asked to stop before the restart ended.
  bool run_restart(int r, RestartProgress& progress, OrderedCommitter& committer) {
    std::vector<ScoredTemplate> initial = progress.initial;
    if (!progress.init_done) {
      Rng rng = seeded_rng(cfg_.seed, "restart-" + std::to_string(r));
      const auto sample = sample_initial(corpus_, static_cast<std::size_t>(cfg_.m), rng);
      std::vector<LedgerEntry> unit;
      initial.clear();
      for (std::size_t i = 0; i < sample.size(); ++i) {
        const double s = score(sample[i]);
        initial.push_back(ScoredTemplate{sample[i], s, Origin::initial_pool, layout_.init_pos(r) + i});
        LedgerEntry e = make_entry(r, kInitialPoolReset, static_cast<int>(i), Origin::initial_pool);
        e.template_text = sample[i].text();
        e.score = s;
        unit.push_back(std::move(e));
      }
      if (committer.stopped()) return false;
      committer.submit(r, std::move(unit));
    }
    for (int j = progress.resets_done; j < cfg_.n_reset; ++j) {
      if (committer.stopped()) return false;
      auto unit = run_reset(r, j, initial);
      committer.submit(r, std::move(unit));
    }
    return !committer.stopped();
  }

  struct Attempt {
    ProposerReply reply;
    int attempts = 0;
    std::uint64_t tokens_in = 0;
    std::uint64_t tokens_out = 0;
    bool failed = false;
  };

  void ask(Attempt& a, const ProposalRequest& req, Rng& rng) {
    try {
      ProposerReply rep = proposer_.propose(req, rng);
      a.attempts += rep.attempts;
      a.tokens_in += rep.tokens_in;
      a.tokens_out += rep.tokens_out;
      a.reply = std::move(rep);
    } catch (const ProposalFailed& ex) {
      a.attempts += ex.attempts();
      a.tokens_in += ex.tokens_in();
      a.failed = true;
    } catch (const TransportError&) {
      a.attempts += 1;
      a.failed = true;
    }
  }

  std::vector<LedgerEntry> run_reset(int r, int j, const std::vector<ScoredTemplate>& initial) {
    Rng rng = seeded_rng(cfg_.seed, "restart-" + std::to_string(r) + "/reset-" + std::to_string(j));
    PromptPool pool;
    for (const auto& st : initial) pool.admit(st);
    const ExtremeSets initial_extremes =
        opts_.strategy == Strategy::feedback ? select_extremes(pool, cfg_.k, cfg_.feedback_mode) : ExtremeSets{};
    std::vector<Exchange> history;
    std::vector<LedgerEntry> unit;

    for (int i = 0; i < cfg_.n_iter; ++i) {
      LedgerEntry entry = make_entry(r, j, i, origin_);
      const std::uint64_t seq = layout_.reset_pos(r, j) + static_cast<std::size_t>(i);

      FeedbackContext ctx;
      std::optional<Template> ape_source;
      ProposalRequest req;
      req.temperature = cfg_.proposer_temperature;
      if (opts_.strategy == Strategy::feedback) {
        const bool fresh = cfg_.conversation_mode == ConversationMode::iterative;
        const ExtremeSets ex = fresh ? select_extremes(pool, cfg_.k, cfg_.feedback_mode) : initial_extremes;
        ctx.top = ex.top;
        ctx.bottom = ex.bottom;
        ctx.feedback_mode = cfg_.feedback_mode;
        ctx.conversation_mode = cfg_.conversation_mode;
        ctx.history = history;
        ctx.history_limit = cfg_.history_limit;
        req.messages = build_feedback_messages(ctx, cfg_.k);
        req.context = &ctx;
      } else {
        ape_source = select_extremes(pool, 1, FeedbackMode::p_only).top.front().templ;
        req.messages = build_ape_message(*ape_source);
        req.ape_source = &*ape_source;
      }

      Attempt a;
      ask(a, req, rng);
      ParsedTemplate parsed;
      if (!a.failed) {
        parsed = parse_reply(a.reply.text);
        if (!parsed) {
          ProposalRequest repair = req;
          repair.messages.push_back({Role::assistant, a.reply.text});
          repair.messages.push_back({Role::user, repair_instruction()});
          const std::string first_reason = parsed.reject_reason;
          ask(a, repair, rng);
          if (!a.failed) parsed = parse_reply(a.reply.text);
          if (!parsed && parsed.reject_reason.empty()) parsed.reject_reason = first_reason;
          entry.extra["repaired"] = "true";
        }
      }
      entry.tokens_in = a.tokens_in;
      entry.tokens_out = a.tokens_out;
      entry.extra["attempts"] = std::to_string(a.attempts);

      if (a.failed) {
        entry.extra["skipped"] = "transport";
      } else if (!parsed) {
        entry.extra["skipped"] = "unparseable";
        entry.extra["reject_reason"] = parsed.reject_reason;
        entry.extra["raw_reply"] = a.reply.text;
      } else {
        const Template& t = *parsed.templ;
        entry.template_text = t.text();
        if (parsed.over_length) entry.extra["over_length"] = "true";
        const double pool_best = select_extremes(pool, 1, FeedbackMode::p_only).top.front().score;
        double s;
        if (const ScoredTemplate* existing = pool.find(t.text())) {
          s = existing->score;
          entry.extra["duplicate"] = "true";
        } else {
          s = score(t);
          pool.admit(ScoredTemplate{t, s, origin_, seq});
        }
        entry.score = s;
        history.push_back(Exchange{a.reply.text, t.text(), s, s > pool_best});
      }
      unit.push_back(std::move(entry));
    }
    return unit;
  }

  const RunConfig& cfg_;
  const TemplateCorpus& corpus_;
  Evaluator& evaluator_;
  Proposer& proposer_;
  RunOptions opts_;
  Layout layout_;
  Origin origin_;
  std::atomic<std::uint64_t> evaluator_calls_{0};
  std::atomic<std::uint64_t> cache_hits_{0};
};

}  // namespace

RunResult run(const RunConfig& config, const TemplateCorpus& corpus, Evaluator& evaluator, Proposer& proposer,
              const RunOptions& options) {
  return RunEngine(config, corpus, evaluator, proposer, options).execute();
}

RunResult run_ape_baseline(const RunConfig& config, const TemplateCorpus& corpus, Evaluator& evaluator,
                           Proposer& proposer, RunOptions options) {
  options.strategy = Strategy::ape;
  return run(config, corpus, evaluator, proposer, options);
}

}  // namespace vlmopt
