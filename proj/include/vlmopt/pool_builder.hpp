#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "vlmopt/core.hpp"
#include "vlmopt/rng.hpp"

namespace vlmopt {

struct Span {
  std::size_t start;
  std::size_t end;  // exclusive
  friend bool operator==(const Span&, const Span&) = default;
};

struct AnnotatedCaption {
  std::string caption;
  std::vector<Span> noun_phrase_spans;

  // Throws InvalidArgument if spans overlap, run out of bounds, cover only
  // whitespace, or the caption contains a newline.
  void validate() const;
};

// Parses {"caption": "...", "noun_phrases": [[s,e], ...]}.
AnnotatedCaption parse_annotation_line(const std::string& line);

// One template per span, in span order, with that span replaced by "{}".
std::vector<Template> templatize(const AnnotatedCaption& caption);

/// Heuristic noun-phrase chunker: runs that start at an article or
/// possessive and end before a preposition, conjunction, common verb, or
/// punctuation. Only a convenience for inputs without tagger output.
std::vector<Span> naive_noun_phrases(const std::string& caption);

struct PoolBuildStats {
  std::size_t captions_read = 0;
  std::size_t malformed = 0;
  std::size_t templates_emitted = 0;
  std::size_t degenerate_rejected = 0;
  std::size_t duplicates_dropped = 0;
  std::size_t corpus_size = 0;
};

struct PoolBuildOptions {
  // 0 reads the whole stream.
  std::size_t max_captions = 0;
  // Annotate records lacking "noun_phrases" with naive_noun_phrases().
  bool naive_chunker = false;
};

// Reads annotation records, writes one deduplicated template per line.
PoolBuildStats build_pool(std::istream& annotations, std::ostream& corpus, const PoolBuildOptions& options = {});

using TemplateCorpus = std::vector<Template>;

// One template per line; blank lines are ignored, inadmissible lines throw.
TemplateCorpus load_corpus(const std::filesystem::path& path);
TemplateCorpus load_corpus(std::istream& in);

// m distinct corpus entries drawn uniformly without replacement.
std::vector<Template> sample_initial(const TemplateCorpus& corpus, std::size_t m, Rng& rng);

}  // namespace vlmopt
