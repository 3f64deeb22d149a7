#include "vlmopt/pool_builder.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_set>

#include <json.hpp>

namespace vlmopt {

using nlohmann::json;

namespace {

bool ascii_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

// Collapse space runs touching the placeholder that starts at `at`.
std::string collapse_seam(std::string text, std::size_t at) {
  std::size_t after = at + kPlaceholder.size();
  std::size_t run_end = after;
  while (run_end < text.size() && text[run_end] == ' ') ++run_end;
  if (run_end - after > 1) text.erase(after + 1, run_end - after - 1);

  std::size_t run_begin = at;
  while (run_begin > 0 && text[run_begin - 1] == ' ') --run_begin;
  if (at - run_begin > 1) text.erase(run_begin, at - run_begin - 1);
  return trim(text);
}

}  // namespace

void AnnotatedCaption::validate() const {
  if (caption.find('\n') != std::string::npos || caption.find('\r') != std::string::npos)
    throw InvalidArgument("caption contains a newline");
  std::vector<Span> sorted = noun_phrase_spans;
  std::sort(sorted.begin(), sorted.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const Span& s = sorted[i];
    if (s.start >= s.end || s.end > caption.size())
      throw InvalidArgument("span out of bounds: [" + std::to_string(s.start) + "," + std::to_string(s.end) + ")");
    if (std::all_of(caption.begin() + s.start, caption.begin() + s.end, ascii_space))
      throw InvalidArgument("span covers only whitespace");
    if (i > 0 && sorted[i - 1].end > s.start) throw InvalidArgument("overlapping spans");
  }
}

AnnotatedCaption parse_annotation_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    AnnotatedCaption out;
    out.caption = j.at("caption").get<std::string>();
    if (j.contains("noun_phrases")) {
      for (const auto& pair : j.at("noun_phrases")) {
        if (!pair.is_array() || pair.size() != 2) throw InvalidArgument("noun phrase must be [start,end]");
        const auto s = pair[0].get<long long>();
        const auto e = pair[1].get<long long>();
        if (s < 0 || e < 0) throw InvalidArgument("negative span offset");
        out.noun_phrase_spans.push_back({static_cast<std::size_t>(s), static_cast<std::size_t>(e)});
      }
    }
    return out;
  } catch (const json::exception& ex) {
    throw InvalidArgument(std::string("malformed annotation: ") + ex.what());
  }
}

std::vector<Template> templatize(const AnnotatedCaption& annotated) {
  annotated.validate();
  std::vector<Template> out;
  out.reserve(annotated.noun_phrase_spans.size());
  const std::string& c = annotated.caption;
  for (const Span& s : annotated.noun_phrase_spans) {
    std::string text = c.substr(0, s.start);
    const std::size_t at = text.size();
    text += kPlaceholder;
    text += c.substr(s.end);
    std::string collapsed = collapse_seam(std::move(text), at);
    out.emplace_back(std::move(collapsed));
  }
  return out;
}

std::vector<Span> naive_noun_phrases(const std::string& caption) {
  static const std::unordered_set<std::string> starters = {
      "a", "an", "the", "this", "that", "these", "those", "my", "your",
      "his", "her", "its", "our", "their", "some", "two", "three", "several"};
  static const std::unordered_set<std::string> stoppers = {
      "in", "on", "at", "of", "with", "by", "for", "from", "to", "into", "over", "under",
      "near", "and", "or", "but", "is", "are", "was", "were", "be", "has", "have", "while",
      "that", "which", "who", "runs", "sits", "stands", "holding", "sitting", "standing"};
  constexpr std::size_t kMaxTokens = 4;

  struct Token {
    std::size_t start, end;
    std::string word;
    bool punct_after;
  };
  std::vector<Token> tokens;
  for (std::size_t i = 0; i < caption.size();) {
    while (i < caption.size() && ascii_space(caption[i])) ++i;
    if (i >= caption.size()) break;
    std::size_t j = i;
    while (j < caption.size() && !ascii_space(caption[j])) ++j;
    std::size_t word_end = j;
    bool punct = false;
    while (word_end > i && std::ispunct(static_cast<unsigned char>(caption[word_end - 1]))) {
      --word_end;
      punct = true;
    }
    if (word_end > i) tokens.push_back({i, word_end, lower(caption.substr(i, word_end - i)), punct});
    i = j;
  }

  std::vector<Span> spans;
  for (std::size_t t = 0; t < tokens.size();) {
    if (!starters.count(tokens[t].word) || tokens[t].punct_after) {
      ++t;
      continue;
    }
    std::size_t last = t;
    for (std::size_t u = t + 1; u < tokens.size() && u - t < kMaxTokens; ++u) {
      if (stoppers.count(tokens[u].word) || starters.count(tokens[u].word)) break;
      last = u;
      if (tokens[u].punct_after) break;
    }
    if (last > t) spans.push_back({tokens[t].start, tokens[last].end});
    t = last + 1;
  }
  return spans;
}

PoolBuildStats build_pool(std::istream& annotations, std::ostream& corpus, const PoolBuildOptions& options) {
  PoolBuildStats stats;
  std::unordered_set<std::string> seen;
  std::string line;
  while (std::getline(annotations, line)) {
    if (trim(line).empty()) continue;
    if (options.max_captions != 0 && stats.captions_read >= options.max_captions) break;
    ++stats.captions_read;
    std::vector<Template> templates;
    try {
      AnnotatedCaption rec = parse_annotation_line(line);
      if (options.naive_chunker && rec.noun_phrase_spans.empty()) rec.noun_phrase_spans = naive_noun_phrases(rec.caption);
      templates = templatize(rec);
    } catch (const Error&) {
      ++stats.malformed;
      continue;
    }
    for (auto& t : templates) {
      ++stats.templates_emitted;
      if (!t.admissible()) {
        ++stats.degenerate_rejected;
        continue;
      }
      if (!seen.insert(t.text()).second) {
        ++stats.duplicates_dropped;
        continue;
      }
      corpus << t.text() << '\n';
      ++stats.corpus_size;
    }
  }
  return stats;
}

TemplateCorpus load_corpus(std::istream& in) {
  TemplateCorpus out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    Template t(line);
    if (!t.admissible()) throw InvalidArgument("corpus line " + std::to_string(lineno) + " is not an admissible template");
    if (seen.insert(t.text()).second) out.push_back(std::move(t));
  }
  return out;
}

TemplateCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open corpus " + path.string());
  return load_corpus(in);
}

std::vector<Template> sample_initial(const TemplateCorpus& corpus, std::size_t m, Rng& rng) {
  if (corpus.size() < m)
    throw InvalidArgument("corpus has " + std::to_string(corpus.size()) + " templates but m=" + std::to_string(m));
  std::vector<std::size_t> idx(corpus.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::vector<Template> out;
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.index(idx.size() - i);
    std::swap(idx[i], idx[j]);
    out.push_back(corpus[idx[i]]);
  }
  return out;
}

}  // namespace vlmopt
