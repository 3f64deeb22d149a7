#include "cli.hpp"

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "vlmopt/config.hpp"
#include "vlmopt/evaluator.hpp"
#include "vlmopt/optimizer.hpp"
#include "vlmopt/pool_builder.hpp"
#include "vlmopt/proposer.hpp"
#include "vlmopt/report.hpp"
#include "vlmopt/synthetic.hpp"
#include "vlmopt/t2i.hpp"

namespace vlmopt::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kMockCorpusCaptions = 2000;
constexpr std::uint64_t kMockCorpusSeed = 1;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

// Settings shared by `optimize classify` and `optimize ape`.
struct ClassifyArgs {
  std::string config_file;
  std::string corpus;
  std::string dataset;
  std::string classes;
  std::string run_id;
  std::string resume;
  std::string runs_dir = "runs";
  std::string score_url;
  std::string chat_url;
  std::string chat_model;
  std::string api_key_env;
  std::string record_transcript;
  std::string replay_transcript;
  bool mock = false;
  int jobs = 1;
  double price = 0.0015;

  // Flag values; applied only when given on the command line.
  std::uint64_t seed = 0;
  int restarts = 0, resets = 0, iters = 0, m = 0, k = 0, shots = 0, history_limit = 0;
  double temperature = 0.0;
  std::string feedback_mode, conversation_mode, folds;
};

void add_classify_options(CLI::App& app, ClassifyArgs& a) {
  app.add_option("--config", a.config_file, "key=value config file");
  app.add_option("--corpus", a.corpus, "template corpus (one per line)");
  app.add_option("--dataset", a.dataset, "dataset id sent to the score service");
  app.add_option("--classes", a.classes, "comma-separated class names");
  app.add_option("--run-id", a.run_id, "run identifier (default: derived from seed)");
  app.add_option("--resume", a.resume, "continue the run with this id");
  app.add_option("--runs-dir", a.runs_dir, "directory holding run outputs");
  app.add_option("--score-url", a.score_url, "base URL of the scoring service");
  app.add_option("--chat-url", a.chat_url, "base URL of the chat completion API");
  app.add_option("--chat-model", a.chat_model, "chat model name");
  app.add_option("--api-key-env", a.api_key_env, "environment variable holding the API key");
  app.add_option("--record-transcript", a.record_transcript, "append proposer exchanges to this file");
  app.add_option("--replay-transcript", a.replay_transcript, "serve proposer replies from this file");
  app.add_flag("--mock", a.mock, "synthetic oracle and mock proposer");
  app.add_option("--jobs", a.jobs, "restarts run in parallel")->check(CLI::PositiveNumber);
  app.add_option("--price", a.price, "dollars per 1000 tokens");
  app.add_option("--seed", a.seed, "random seed");
  app.add_option("--restarts", a.restarts, "n_restart");
  app.add_option("--resets", a.resets, "n_reset");
  app.add_option("--iters", a.iters, "n_iter");
  app.add_option("-m,--m", a.m, "initial templates per restart");
  app.add_option("-k,--k", a.k, "extremes shown to the proposer");
  app.add_option("--shots", a.shots, "shots per class");
  app.add_option("--history-limit", a.history_limit, "multi-turn exchanges kept");
  app.add_option("--temperature", a.temperature, "proposer sampling temperature");
  app.add_option("--feedback-mode", a.feedback_mode, "p_plus_n or p_only");
  app.add_option("--conversation-mode", a.conversation_mode, "iterative, non_iterative or multi_turn");
  app.add_option("--folds", a.folds, "comma-separated fold ids");
}

struct ResolvedClassify {
  RunConfig config;
  std::string corpus;
  std::string dataset = "synthetic";
  std::vector<std::string> classes{"object"};
  std::string score_url;
  ChatBackendConfig chat;
  double price = 0.0015;
};

ResolvedClassify resolve(const CLI::App& app, const ClassifyArgs& a) {
  ResolvedClassify r;
  ConfigMap rest;
  if (!a.config_file.empty()) rest = apply_run_config(r.config, load_config_file(a.config_file));
  for (const auto& [key, v] : rest) {
    if (key == "corpus") r.corpus = v;
    else if (key == "dataset") r.dataset = v;
    else if (key == "classes") r.classes = split_list(v);
    else if (key == "score_url") r.score_url = v;
    else if (key == "chat_url") r.chat.endpoint = v;
    else if (key == "chat_model") r.chat.model = v;
    else if (key == "api_key_env") r.chat.api_key_env = v;
    else if (key == "price_per_1k_tokens") r.price = std::stod(v);
    else throw InvalidArgument("unknown config key: " + key);
  }
  auto given = [&](const char* name) { return app.count(name) > 0; };
  ConfigMap flags;
  if (given("--seed")) flags["seed"] = std::to_string(a.seed);
  if (given("--restarts")) flags["n_restart"] = std::to_string(a.restarts);
  if (given("--resets")) flags["n_reset"] = std::to_string(a.resets);
  if (given("--iters")) flags["n_iter"] = std::to_string(a.iters);
  if (given("--m")) flags["m"] = std::to_string(a.m);
  if (given("--k")) flags["k"] = std::to_string(a.k);
  if (given("--shots")) flags["shots"] = std::to_string(a.shots);
  if (given("--history-limit")) flags["history_limit"] = std::to_string(a.history_limit);
  if (given("--feedback-mode")) flags["feedback_mode"] = a.feedback_mode;
  if (given("--conversation-mode")) flags["conversation_mode"] = a.conversation_mode;
  if (given("--folds")) flags["folds"] = a.folds;
  apply_run_config(r.config, flags);
  if (given("--temperature")) r.config.proposer_temperature = a.temperature;
  if (given("--corpus")) r.corpus = a.corpus;
  if (given("--dataset")) r.dataset = a.dataset;
  if (given("--classes")) r.classes = split_list(a.classes);
  if (given("--score-url")) r.score_url = a.score_url;
  if (given("--chat-url")) r.chat.endpoint = a.chat_url;
  if (given("--chat-model")) r.chat.model = a.chat_model;
  if (given("--api-key-env")) r.chat.api_key_env = a.api_key_env;
  if (given("--price")) r.price = a.price;
  r.config.validate();
  return r;
}

std::vector<std::string> corpus_vocabulary(const TemplateCorpus& corpus) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  for (const auto& t : corpus)
    for (const auto& tok : template_tokens(t.text()))
      if (tok.find(kPlaceholder) == std::string::npos && seen.insert(tok).second) out.push_back(tok);
  return out;
}

int optimize_classify(const CLI::App& app, const ClassifyArgs& a, Strategy strategy, std::ostream& out) {
  const ResolvedClassify r = resolve(app, a);

  TemplateCorpus corpus;
  std::vector<std::string> vocab;
  if (!r.corpus.empty()) {
    corpus = load_corpus(r.corpus);
    vocab = corpus_vocabulary(corpus);
  } else if (a.mock) {
    corpus = synthetic_corpus(kMockCorpusCaptions, kMockCorpusSeed);
    vocab = synthetic_vocabulary();
  } else {
    throw InvalidArgument("--corpus is required unless --mock is given");
  }

  std::shared_ptr<Evaluator> backend;
  std::shared_ptr<Proposer> proposer;
  if (a.mock) {
    backend = std::make_shared<SyntheticOracle>(default_oracle_spec(), r.config.seed);
    proposer = std::make_shared<MockProposer>(MockProposerOptions{vocab});
  } else {
    if (r.score_url.empty()) throw InvalidArgument("--score-url is required unless --mock is given");
    backend = std::make_shared<RemoteEvaluator>(r.score_url, make_http_transport());
    proposer = std::make_shared<ChatProposer>(r.chat, make_http_transport());
  }
  if (!a.replay_transcript.empty()) proposer = std::make_shared<ReplayProposer>(a.replay_transcript);
  if (!a.record_transcript.empty()) proposer = std::make_shared<RecordingProposer>(proposer, a.record_transcript);

  const bool resume = !a.resume.empty();
  std::string run_id = resume ? a.resume : a.run_id;
  if (run_id.empty())
    run_id = std::string(strategy == Strategy::ape ? "ape" : "classify") + "-seed" + std::to_string(r.config.seed);
  const fs::path run_dir = fs::path(a.runs_dir) / run_id;
  if (!resume && fs::exists(run_dir))
    throw InvalidArgument("run directory " + run_dir.string() + " exists; pass --resume " + run_id + " to continue it");
  fs::create_directories(run_dir);
  {
    std::ofstream cfg(run_dir / "config.txt", std::ios::trunc);
    cfg << render_run_config(r.config) << "strategy = " << (strategy == Strategy::ape ? "ape" : "feedback") << '\n';
  }

  std::vector<FoldResult> results;
  for (int fold : r.config.folds) {
    const fs::path fold_dir = run_dir / ("fold-" + std::to_string(fold));
    ClassificationTask task{r.dataset, r.classes, r.config.shots, fold, Split::train};
    CachedEvaluator evaluator(backend, fold_dir / "score_cache.jsonl");
    RunOptions opts;
    opts.run_id = run_id;
    opts.task = task;
    opts.strategy = strategy;
    opts.ledger_path = fold_dir / "ledger.jsonl";
    opts.resume = resume;
    opts.jobs = a.jobs;
    opts.price_per_1k_tokens = r.price;
    const RunResult res = run(r.config, corpus, evaluator, *proposer, opts);

    FoldResult fr{fold, res.best.templ.text(), res.best.score, std::nullopt};
    ClassificationTask test_task = task;
    test_task.split = Split::test;
    fr.test_score = evaluator.score(res.best.templ, test_task);
    {
      std::ofstream f(fold_dir / "summary.json", std::ios::trunc);
      f << fold_result_json(fr) << '\n';
    }
    {
      std::ofstream f(fold_dir / "efficiency.tsv", std::ios::trunc);
      f << render_curve_columns(efficiency_curve(res.ledger));
    }
    out << "fold " << fold << ": best \"" << fr.best_template << "\" train " << format_percent(fr.train_score)
        << "% test " << format_percent(*fr.test_score) << "% (" << res.budget.proposer_calls << " proposer calls, "
        << format_dollars(res.budget.cost()) << ")\n";
    results.push_back(fr);
  }
  {
    std::ofstream f(run_dir / "summary.json", std::ios::trunc);
    f << fold_summary_json(run_id, results) << '\n';
  }
  out << "run " << run_id << " written to " << run_dir.string() << '\n';
  return 0;
}

struct GenerativeArgs {
  std::string queries;
  std::string out_dir;
  std::string run_id = "generative";
  std::string image_url = "https://api.openai.com/v1";
  std::string image_model = "dall-e-3";
  std::string critic_url = "https://api.openai.com/v1";
  std::string critic_model = "gpt-4-vision-preview";
  std::string api_key_env = "OPENAI_API_KEY";
  int rounds = 3;
  std::uint64_t seed = 0;
  bool mock = false;
};

void add_generative_options(CLI::App& app, GenerativeArgs& a) {
  app.add_option("--queries", a.queries, "query file (one JSON record per line)")->required();
  app.add_option("--out", a.out_dir, "output directory (default: runs/<run-id>)");
  app.add_option("--run-id", a.run_id, "run identifier");
  app.add_option("--rounds", a.rounds, "critique rounds")->check(CLI::PositiveNumber);
  app.add_option("--seed", a.seed, "random seed");
  app.add_flag("--mock", a.mock, "bag-of-words generator and set-difference critic");
  app.add_option("--image-url", a.image_url, "base URL of the image generation API");
  app.add_option("--image-model", a.image_model, "image model name");
  app.add_option("--critic-url", a.critic_url, "base URL of the multimodal chat API");
  app.add_option("--critic-model", a.critic_model, "critic model name");
  app.add_option("--api-key-env", a.api_key_env, "environment variable holding the API key");
}

int optimize_generative(const GenerativeArgs& a, QueryType type, std::ostream& out) {
  const auto queries = load_queries(a.queries);
  std::unique_ptr<ImageGenerator> generator;
  std::unique_ptr<Critic> critic;
  if (a.mock) {
    generator = std::make_unique<MockImageGenerator>();
    critic = std::make_unique<MockCritic>();
  } else {
    ImageBackendConfig ic;
    ic.endpoint = a.image_url;
    ic.model = a.image_model;
    ic.api_key_env = a.api_key_env;
    generator = std::make_unique<ImageApiGenerator>(ic, make_http_transport(std::chrono::seconds{180}));
    ChatBackendConfig cc;
    cc.endpoint = a.critic_url;
    cc.model = a.critic_model;
    cc.api_key_env = a.api_key_env;
    critic = std::make_unique<ChatCritic>(cc, make_http_transport(std::chrono::seconds{180}));
  }
  const fs::path root = a.out_dir.empty() ? fs::path("runs") / a.run_id : fs::path(a.out_dir);
  int done = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    if (q.type != type) continue;
    Rng rng = seeded_rng(a.seed, "query-" + std::to_string(i));
    const GenerativeResult res = type == QueryType::t2i
                                     ? t2i_optimize(q.text, a.rounds, *generator, *critic, rng)
                                     : invert_prompt(query_image_from_path(q.image_path), a.rounds, *generator, *critic, rng);
    const fs::path dir = root / ("query-" + std::to_string(i));
    write_generative_output(dir, res);
    out << "query " << i << ": " << res.final_prompt << "\n  (" << res.stats.generator_calls << " generations, "
        << res.stats.critic_calls << " critiques) -> " << dir.string() << '\n';
    ++done;
  }
  if (done == 0) throw InvalidArgument("no queries of the requested type in " + a.queries);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Black-box prompt search for vision-language models", "vlmopt"};
  app.require_subcommand(1);

  // pool build
  auto* pool = app.add_subcommand("pool", "template pool construction");
  pool->require_subcommand(1);
  auto* pool_build = pool->add_subcommand("build", "templatize annotated captions into a corpus");
  std::string pool_in, pool_out;
  std::size_t max_captions = 0;
  bool naive = false;
  pool_build->add_option("--input", pool_in, "annotation file (JSON lines)")->required();
  pool_build->add_option("--output", pool_out, "corpus file to write")->required();
  pool_build->add_option("--max-captions", max_captions, "stop after this many captions (0 = all)");
  pool_build->add_flag("--naive-chunker", naive, "chunk noun phrases heuristically when a record has none");

  // optimize *
  auto* optimize = app.add_subcommand("optimize", "run an optimization loop");
  optimize->require_subcommand(1);
  ClassifyArgs classify_args, ape_args;
  auto* classify = optimize->add_subcommand("classify", "template search with top/bottom feedback");
  add_classify_options(*classify, classify_args);
  auto* ape = optimize->add_subcommand("ape", "iterative paraphrase baseline");
  add_classify_options(*ape, ape_args);
  GenerativeArgs t2i_args, invert_args;
  auto* t2i = optimize->add_subcommand("t2i", "text-to-image prompt refinement");
  add_generative_options(*t2i, t2i_args);
  auto* invert = optimize->add_subcommand("invert", "prompt inversion from reference images");
  add_generative_options(*invert, invert_args);

  // report
  auto* report = app.add_subcommand("report", "summarize a classification run across folds");
  std::string report_run, report_dir = "runs";
  bool report_json = false;
  report->add_option("run_id", report_run, "run identifier")->required();
  report->add_option("--runs-dir", report_dir, "directory holding run outputs");
  report->add_flag("--json", report_json, "print the machine-readable summary");

  // cost
  auto* cost = app.add_subcommand("cost", "estimate proposer spend");
  RunConfig cost_cfg;
  double tokens = 500, price = 0.0015;
  int datasets = 11;
  cost->add_option("--restarts", cost_cfg.n_restart, "restarts per dataset-fold");
  cost->add_option("--resets", cost_cfg.n_reset, "resets per restart");
  cost->add_option("--iters", cost_cfg.n_iter, "iterations per reset");
  cost->add_option("--tokens", tokens, "average tokens per proposer call");
  cost->add_option("--price", price, "dollars per 1000 tokens");
  cost->add_option("--datasets", datasets, "datasets per fold")->check(CLI::PositiveNumber);

  std::vector<std::string> argv_rest(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(argv_rest.begin(), argv_rest.end());
  try {
    app.parse(argv_rest);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (auto* sub : {pool_build, classify, ape, t2i, invert, report, cost})
      if (sub->parsed()) failing = sub;
    err << failing->help();
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  try {
    if (pool_build->parsed()) {
      std::ifstream in(pool_in);
      if (!in) throw InvalidArgument("cannot open " + pool_in);
      if (fs::path(pool_out).has_parent_path()) fs::create_directories(fs::path(pool_out).parent_path());
      std::ofstream corpus(pool_out, std::ios::trunc);
      const PoolBuildStats s = build_pool(in, corpus, PoolBuildOptions{max_captions, naive});
      out << "captions read: " << s.captions_read << "\nmalformed skipped: " << s.malformed
          << "\ntemplates emitted: " << s.templates_emitted << "\ndegenerate rejected: " << s.degenerate_rejected
          << "\nduplicates dropped: " << s.duplicates_dropped << "\ncorpus size: " << s.corpus_size << '\n';
      return 0;
    }
    if (classify->parsed()) return optimize_classify(*classify, classify_args, Strategy::feedback, out);
    if (ape->parsed()) return optimize_classify(*ape, ape_args, Strategy::ape, out);
    if (t2i->parsed()) return optimize_generative(t2i_args, QueryType::t2i, out);
    if (invert->parsed()) return optimize_generative(invert_args, QueryType::invert, out);
    if (report->parsed()) {
      const fs::path dir = fs::path(report_dir) / report_run;
      const auto results = load_fold_results(dir);
      if (results.empty()) throw InvalidArgument("run " + report_run + " has no completed folds in " + dir.string());
      const std::string summary = fold_summary_json(report_run, results);
      {
        std::ofstream f(dir / "summary.json", std::ios::trunc);
        f << summary << '\n';
      }
      out << (report_json ? summary + "\n" : render_fold_report(report_run, results));
      return 0;
    }
    if (cost->parsed()) {
      cost_cfg.m = 2 * cost_cfg.k;  // irrelevant to cost; keeps validation focused on loop counts
      RunConfig one = cost_cfg;
      one.n_restart = 1;
      const double per_restart = estimate_cost(one, tokens, price);
      const double per_fold = estimate_cost(cost_cfg, tokens, price);
      out << "proposer calls per restart: " << one.total_proposer_calls() << '\n'
          << "tokens per restart: " << static_cast<long long>(one.total_proposer_calls() * tokens) << '\n'
          << "cost per restart: " << format_dollars(per_restart) << '\n'
          << "cost per dataset-fold: " << format_dollars(per_fold) << " (" << cost_cfg.n_restart << " restarts)\n"
          << "cost per fold over " << datasets << " datasets: " << format_dollars(per_fold * datasets) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace vlmopt::cli
