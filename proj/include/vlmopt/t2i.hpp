#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vlmopt/core.hpp"
#include "vlmopt/http.hpp"
#include "vlmopt/proposer.hpp"
#include "vlmopt/retry.hpp"
#include "vlmopt/rng.hpp"

namespace vlmopt {

enum class ImageSource { generated, user_query };

struct ImageRef {
  std::string id;
  ImageSource source = ImageSource::generated;
  // File path or URL handed to the critic.
  std::string reference;
  // For generated images: the exact prompt that produced it.
  std::string prompt;
  // Mock payload: sorted distinct words.
  std::vector<std::string> descriptor;
};

struct CriticReply {
  std::string feedback;
  std::string new_prompt;
};

// Fixed prompt texts; arguments fill the slots verbatim.
std::string generation_wrapper(const std::string& prompt);
std::string first_round_generation(const std::string& query_text);
std::string t2i_critic_prompt(const std::string& generated_image, const std::string& query_text,
                              const std::string& prompt);
std::string inversion_first_prompt(const std::string& query_image);
std::string inversion_critic_prompt(const std::string& query_image, const std::string& generated_image,
                                    const std::string& prompt);
std::string critic_repair_instruction();

struct ParsedCritic {
  std::optional<CriticReply> reply;
  std::string reject_reason;
  explicit operator bool() const { return reply.has_value(); }
};

/// Finds the first well-formed JSON object anywhere in `raw` (prose and
/// code fences around it are ignored) and reads "feedback" and
/// "new_prompt" from it. Both must be non-empty strings.
ParsedCritic parse_critic_reply(const std::string& raw);

// inverted + " " + edit. Throws InvalidArgument if either is blank.
std::string customize(const std::string& inverted_prompt, const std::string& user_edit);

// Thrown by generators when the service declines the prompt.
class GenerationRefused : public Error {
 public:
  using Error::Error;
};

struct GenerationRequest {
  // Exact text sent to the service.
  std::string text;
  // The unwrapped prompt (empty for the first T2I round).
  std::string prompt;
  // First T2I round: the service expands `query` itself.
  bool expand_query = false;
  std::string query;
};

class ImageGenerator {
 public:
  virtual ~ImageGenerator() = default;
  virtual ImageRef generate(const GenerationRequest& request, Rng& rng) = 0;
};

// Wraps `prompt` verbatim and binds the resulting image to it.
ImageRef generate_image(ImageGenerator& generator, const std::string& prompt, Rng& rng);

enum class CriticTask { t2i_critique, invert_initial, invert_compare };

struct CriticRequest {
  CriticTask task = CriticTask::t2i_critique;
  std::string text;
  std::vector<ImageRef> images;
  // Structured copies of the slots, for mocks.
  std::string query_text;
  std::string current_prompt;
};

struct CriticResponse {
  std::string text;
  std::uint64_t tokens_in = 0;
  std::uint64_t tokens_out = 0;
};

class Critic {
 public:
  virtual ~Critic() = default;
  virtual CriticResponse critique(const CriticRequest& request, Rng& rng) = 0;
};

struct GenerativeLedgerEntry {
  int round = 0;
  std::string prompt;
  ImageRef image;
  std::optional<std::string> feedback;
  std::map<std::string, std::string> extra;
};

struct GenerativeStats {
  int generator_calls = 0;
  int critic_calls = 0;
  std::uint64_t tokens_in = 0;
  std::uint64_t tokens_out = 0;
};

struct GenerativeResult {
  std::string final_prompt;
  ImageRef final_image;
  std::vector<GenerativeLedgerEntry> ledger;
  GenerativeStats stats;
};

/// Text-to-image refinement. Round 0 lets the generator expand the query;
/// each of the `rounds` later rounds shows the critic the latest image,
/// the query and the prompt, then regenerates from its new_prompt. A reply
/// that still fails to parse after one repair keeps the current prompt
/// and image for that round.
GenerativeResult t2i_optimize(const std::string& query_text, int rounds, ImageGenerator& generator, Critic& critic,
                              Rng& rng);

/// Prompt inversion. Round 0 asks the critic for a prompt recreating the
/// query image; each later round compares query and generated images and
/// regenerates from the revised prompt. The final prompt is the artifact.
GenerativeResult invert_prompt(const ImageRef& query_image, int rounds, ImageGenerator& generator, Critic& critic,
                               Rng& rng);

// Distinct lower-cased words of a prompt, sorted.
std::vector<std::string> word_set(const std::string& text);

// Query image whose mock descriptor comes from the file stem
// ("shiba_inu_on_grass.png" -> {grass, inu, on, shiba}).
ImageRef query_image_from_path(const std::string& path);

std::size_t descriptor_overlap(const std::vector<std::string>& a, const std::vector<std::string>& b);
std::size_t descriptor_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);

/// Bag-of-words generator. Verbatim requests yield the prompt's word set;
/// query expansion keeps each query word with probability 1/2 (at least
/// one), standing in for a generator that drops details.
class MockImageGenerator final : public ImageGenerator {
 public:
  ImageRef generate(const GenerationRequest& request, Rng& rng) override;
};

/// Set-difference critic. It appends up to three query words missing from
/// the image and, when inverting, drops words the query image lacks.
/// Replies are JSON, sometimes inside a code fence or a sentence.
class MockCritic final : public Critic {
 public:
  CriticResponse critique(const CriticRequest& request, Rng& rng) override;
};

struct ImageBackendConfig {
  std::string endpoint = "https://api.openai.com/v1";
  std::string model = "dall-e-3";
  std::string size = "1024x1024";
  std::string api_key_env = "OPENAI_API_KEY";
  RetryPolicy retry{};
};

// OpenAI-compatible /images/generations client.
class ImageApiGenerator final : public ImageGenerator {
 public:
  ImageApiGenerator(ImageBackendConfig config, std::shared_ptr<HttpTransport> transport,
                    Sleeper sleeper = default_sleep);
  ImageRef generate(const GenerationRequest& request, Rng& rng) override;

 private:
  ImageBackendConfig config_;
  std::string api_key_;
  std::shared_ptr<HttpTransport> transport_;
  Sleeper sleeper_;
  int counter_ = 0;
};

// Multimodal chat critic: text plus image_url parts. Local files are sent
// as base64 data URLs.
class ChatCritic final : public Critic {
 public:
  ChatCritic(ChatBackendConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper = default_sleep);
  CriticResponse critique(const CriticRequest& request, Rng& rng) override;

 private:
  ChatBackendConfig config_;
  std::string api_key_;
  std::shared_ptr<HttpTransport> transport_;
  Sleeper sleeper_;
};

enum class QueryType { t2i, invert };

struct GenerativeQuery {
  QueryType type = QueryType::t2i;
  std::string text;
  std::string image_path;
};

// {"type":"t2i","text":"..."} or {"type":"invert","image_path":"..."}.
GenerativeQuery parse_query_line(const std::string& line);
std::vector<GenerativeQuery> load_queries(const std::filesystem::path& path);

std::string generative_ledger_line(const GenerativeLedgerEntry& entry);

// Writes ledger.jsonl, final_prompt.txt and images.txt under `dir`.
void write_generative_output(const std::filesystem::path& dir, const GenerativeResult& result);

}  // namespace vlmopt
