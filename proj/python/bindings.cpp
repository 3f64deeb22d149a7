#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <sstream>

#include "vlmopt/log.hpp"
#include "vlmopt/ledger.hpp"
#include "vlmopt/optimizer.hpp"
#include "vlmopt/pool_builder.hpp"
#include "vlmopt/proposer.hpp"
#include "vlmopt/report.hpp"
#include "vlmopt/synthetic.hpp"
#include "vlmopt/t2i.hpp"

namespace py = pybind11;
using namespace vlmopt;

namespace {

ScoredTemplate scored(const std::pair<std::string, double>& p, std::uint64_t seq) {
  return {Template(p.first), validate_score(p.second), Origin::initial_pool, seq};
}

py::dict entry_dict(const LedgerEntry& e) {
  py::dict d;
  d["restart"] = e.restart;
  d["reset"] = e.reset;
  d["iter"] = e.iter;
  d["template"] = e.template_text;
  d["score"] = e.score ? py::cast(*e.score) : py::none();
  d["origin"] = std::string(to_string(e.origin));
  d["tokens_in"] = e.tokens_in;
  d["tokens_out"] = e.tokens_out;
  d["extra"] = e.extra;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Black-box prompt search over template pools";

  auto error = py::register_exception<Error>(m, "VlmoptError", PyExc_RuntimeError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<FatalBackendError>(m, "FatalBackendError", error.ptr());

  py::enum_<FeedbackMode>(m, "FeedbackMode")
      .value("p_only", FeedbackMode::p_only)
      .value("p_plus_n", FeedbackMode::p_plus_n);
  py::enum_<ConversationMode>(m, "ConversationMode")
      .value("multi_turn", ConversationMode::multi_turn)
      .value("iterative", ConversationMode::iterative)
      .value("non_iterative", ConversationMode::non_iterative);

  py::class_<Template>(m, "Template")
      .def(py::init<std::string>())
      .def_property_readonly("text", &Template::text)
      .def_property_readonly("placeholder_count", &Template::placeholder_count)
      .def_property_readonly("content_length", &Template::content_length)
      .def("admissible", &Template::admissible)
      .def("__eq__", [](const Template& a, const Template& b) { return a == b; })
      .def("__hash__", [](const Template& t) { return py::hash(py::str(t.text())); })
      .def("__repr__", [](const Template& t) { return "Template(" + py::repr(py::str(t.text())).cast<std::string>() + ")"; });

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("n_restart", &RunConfig::n_restart)
      .def_readwrite("n_reset", &RunConfig::n_reset)
      .def_readwrite("n_iter", &RunConfig::n_iter)
      .def_readwrite("m", &RunConfig::m)
      .def_readwrite("k", &RunConfig::k)
      .def_readwrite("feedback_mode", &RunConfig::feedback_mode)
      .def_readwrite("conversation_mode", &RunConfig::conversation_mode)
      .def_readwrite("proposer_temperature", &RunConfig::proposer_temperature)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("shots", &RunConfig::shots)
      .def_readwrite("folds", &RunConfig::folds)
      .def_readwrite("history_limit", &RunConfig::history_limit)
      .def("validate", &RunConfig::validate)
      .def("proposer_calls_per_restart", &RunConfig::proposer_calls_per_restart)
      .def("total_proposer_calls", &RunConfig::total_proposer_calls);

  m.def("estimate_cost", &estimate_cost, py::arg("config"), py::arg("avg_tokens_per_call") = 500.0,
        py::arg("price_per_1k") = 0.0015);
  m.def("format_dollars", &format_dollars);
  m.def("count_words", [](const std::string& s) { return count_words(s); });

  m.def(
      "build_pool",
      [](const std::string& annotations, std::size_t max_captions, bool naive_chunker) {
        std::istringstream in(annotations);
        std::ostringstream out;
        PoolBuildStats s = build_pool(in, out, PoolBuildOptions{max_captions, naive_chunker});
        std::vector<std::string> corpus;
        std::istringstream lines(out.str());
        for (std::string l; std::getline(lines, l);) corpus.push_back(l);
        py::dict stats;
        stats["captions_read"] = s.captions_read;
        stats["malformed"] = s.malformed;
        stats["templates_emitted"] = s.templates_emitted;
        stats["degenerate_rejected"] = s.degenerate_rejected;
        stats["duplicates_dropped"] = s.duplicates_dropped;
        stats["corpus_size"] = s.corpus_size;
        return py::make_tuple(corpus, stats);
      },
      py::arg("annotations"), py::arg("max_captions") = 0, py::arg("naive_chunker") = false,
      "Templatize JSONL caption annotations; returns (corpus lines, stats).");

  m.def(
      "feedback_prompt",
      [](const std::vector<std::pair<std::string, double>>& top,
         const std::vector<std::pair<std::string, double>>& bottom, FeedbackMode mode) {
        FeedbackContext c;
        c.feedback_mode = mode;
        std::uint64_t seq = 0;
        for (const auto& p : top) c.top.push_back(scored(p, seq++));
        for (const auto& p : bottom) c.bottom.push_back(scored(p, seq++));
        const int k = static_cast<int>(mode == FeedbackMode::p_only ? top.size() / 2 : top.size());
        return build_feedback_messages(c, k).at(0).content;
      },
      py::arg("top"), py::arg("bottom") = std::vector<std::pair<std::string, double>>{},
      py::arg("mode") = FeedbackMode::p_plus_n);
  m.def("ape_prompt", [](const std::string& t) { return build_ape_message(Template(t)).at(0).content; });
  m.def("generation_wrapper", &generation_wrapper);
  m.def("t2i_critic_prompt", &t2i_critic_prompt);
  m.def("inversion_critic_prompt", &inversion_critic_prompt);

  m.def("parse_critic_reply", [](const std::string& raw) -> py::object {
    ParsedCritic p = parse_critic_reply(raw);
    if (!p) return py::none();
    return py::make_tuple(p.reply->feedback, p.reply->new_prompt);
  });
  m.def("parse_reply", [](const std::string& raw) -> py::object {
    ParsedTemplate p = parse_reply(raw);
    if (!p) return py::none();
    return py::str(p.templ->text());
  });

  m.def(
      "run_mock",
      [](const RunConfig& config, std::size_t corpus_captions, std::uint64_t corpus_seed, int jobs, bool ape) {
        const TemplateCorpus corpus = synthetic_corpus(corpus_captions, corpus_seed);
        std::optional<RunResult> held;
        {
          py::gil_scoped_release release;
          CachedEvaluator ev(std::make_shared<SyntheticOracle>(default_oracle_spec(), config.seed));
          MockProposer proposer(MockProposerOptions{synthetic_vocabulary()});
          RunOptions opts;
          opts.run_id = "python";
          opts.task = {"synthetic", {"object"}, config.shots, 0, Split::train};
          opts.jobs = jobs;
          opts.strategy = ape ? Strategy::ape : Strategy::feedback;
          held.emplace(run(config, corpus, ev, proposer, opts));
        }
        const RunResult& r = *held;
        py::list ledger;
        for (const auto& e : r.ledger) ledger.append(entry_dict(e));
        py::dict out;
        out["best_template"] = r.best.templ.text();
        out["best_score"] = r.best.score;
        out["proposer_calls"] = r.budget.proposer_calls;
        out["cost"] = r.budget.cost();
        out["ledger"] = ledger;
        return out;
      },
      py::arg("config"), py::arg("corpus_captions") = 2000, py::arg("corpus_seed") = 1, py::arg("jobs") = 1,
      py::arg("ape") = false, "Hill climbing against the synthetic oracle with the mock proposer.");

  m.def(
      "t2i_mock",
      [](const std::string& query, int rounds, std::uint64_t seed) {
        MockImageGenerator g;
        MockCritic c;
        Rng rng = seeded_rng(seed, "python-t2i");
        GenerativeResult r = t2i_optimize(query, rounds, g, c, rng);
        py::list prompts;
        for (const auto& e : r.ledger) prompts.append(e.prompt);
        py::dict out;
        out["final_prompt"] = r.final_prompt;
        out["prompts"] = prompts;
        out["generator_calls"] = r.stats.generator_calls;
        out["critic_calls"] = r.stats.critic_calls;
        return out;
      },
      py::arg("query"), py::arg("rounds") = 3, py::arg("seed") = 0);

  m.def("quiet", [] { set_warning_sink([](std::string_view) {}); }, "Silence library warnings.");
}
