#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vlmopt/evaluator.hpp"
#include "vlmopt/pool_builder.hpp"

namespace vlmopt {

// Oracle used by --mock runs: a handful of rewarded and penalized words
// plus a per-word length penalty.
SyntheticOracleSpec default_oracle_spec();

// Every word the synthetic captions draw from.
std::vector<std::string> synthetic_vocabulary();

// Random captions over synthetic_vocabulary() with one or two annotated
// noun-phrase spans each.
std::vector<AnnotatedCaption> synthetic_captions(std::size_t count, std::uint64_t seed);

std::string annotation_line(const AnnotatedCaption& caption);

// synthetic_captions() run through build_pool().
TemplateCorpus synthetic_corpus(std::size_t captions, std::uint64_t seed);

}  // namespace vlmopt
