#include "vlmopt/synthetic.hpp"

#include <sstream>

#include <json.hpp>

#include "vlmopt/rng.hpp"

namespace vlmopt {

SyntheticOracleSpec default_oracle_spec() {
  SyntheticOracleSpec spec;
  spec.keyword_weights = {
      {"photo", 0.30},   {"bright", 0.25}, {"centered", 0.20}, {"closeup", 0.15},
      {"blurry", -0.10}, {"dark", -0.10},  {"sketch", -0.08},  {"cropped", -0.08},
  };
  spec.length_penalty = 0.01;
  spec.noise_scale = 0.0;
  return spec;
}

std::vector<std::string> synthetic_vocabulary() {
  return {"a",       "an",     "the",      "of",      "in",      "with",     "on",       "at",
          "image",   "picture", "view",    "scene",   "showing", "small",    "large",    "old",
          "street",  "table",   "night",   "day",     "painting", "rendering", "quality", "low",
          "cartoon", "two",     "some",    "style",   "outdoor", "indoor",   "colorful", "simple",
          "detailed", "natural", "photo",   "bright",  "centered", "closeup", "blurry",   "dark",
          "sketch",  "cropped"};
}

std::vector<AnnotatedCaption> synthetic_captions(std::size_t count, std::uint64_t seed) {
  static const std::vector<std::string> nouns = {"dog", "cat", "car", "tree", "house", "bird", "boat", "flower"};
  const auto vocab = synthetic_vocabulary();
  Rng rng = seeded_rng(seed, "synthetic-captions");
  std::vector<AnnotatedCaption> out;
  out.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t n_words = 4 + rng.index(5);
    std::vector<std::string> words;
    for (std::size_t i = 0; i < n_words; ++i) words.push_back(vocab[rng.index(vocab.size())]);
    // Noun phrases are "the <noun>" inserted at one or two positions.
    const std::size_t n_phrases = 1 + rng.index(2);
    for (std::size_t p = 0; p < n_phrases; ++p) {
      const std::size_t at = rng.index(words.size() + 1);
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), "the " + nouns[rng.index(nouns.size())]);
    }
    AnnotatedCaption cap;
    for (const auto& w : words) {
      if (!cap.caption.empty()) cap.caption += ' ';
      const std::size_t start = cap.caption.size();
      cap.caption += w;
      if (w.rfind("the ", 0) == 0 && w.size() > 4) cap.noun_phrase_spans.push_back({start, cap.caption.size()});
    }
    out.push_back(std::move(cap));
  }
  return out;
}

std::string annotation_line(const AnnotatedCaption& caption) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : caption.noun_phrase_spans) spans.push_back({s.start, s.end});
  return nlohmann::json{{"caption", caption.caption}, {"noun_phrases", spans}}.dump();
}

TemplateCorpus synthetic_corpus(std::size_t captions, std::uint64_t seed) {
  std::stringstream annotations;
  for (const auto& c : synthetic_captions(captions, seed)) annotations << annotation_line(c) << '\n';
  std::stringstream corpus;
  build_pool(annotations, corpus);
  return load_corpus(corpus);
}

}  // namespace vlmopt
