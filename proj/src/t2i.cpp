#include "vlmopt/t2i.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

#include <json.hpp>

#include "vlmopt/evaluator.hpp"
#include "vlmopt/log.hpp"

namespace vlmopt {

using nlohmann::json;

std::string generation_wrapper(const std::string& prompt) {
  return "Create this exact image without any changes to the prompt: " + prompt + ".";
}

std::string first_round_generation(const std::string& query_text) {
  return "Create an image that shows " + query_text + ".";
}

namespace {

constexpr std::string_view kJsonRequest =
    "Please provide a response in a JSON file format containing: (1) \"feedback\" summarizing the key points, and "
    "(2) \"new_prompt\" with the revised text.";

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// End of the object starting at `open`, or npos. String-aware.
std::size_t matching_brace(const std::string& s, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (c == '\\') ++i;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i;
  }
  return std::string::npos;
}

}  // namespace

std::string t2i_critic_prompt(const std::string& generated_image, const std::string& query_text,
                              const std::string& prompt) {
  return "Do you think this image " + generated_image + " correctly depicts " + query_text +
         "? If not, briefly explain why and suggest modifications. Then, help me adjust the prompt to make it "
         "correct: " +
         prompt + ". " + std::string(kJsonRequest);
}

std::string inversion_first_prompt(const std::string& query_image) {
  return "Generate a detailed text prompt to recreate the attached image " + query_image + " using an image generator.";
}

std::string inversion_critic_prompt(const std::string& query_image, const std::string& generated_image,
                                    const std::string& prompt) {
  return "Compare the original image " + query_image + " and generated image " + generated_image +
         ", analyze their differences, and then propose changes to update the original prompt in-place: " + prompt +
         ". " + std::string(kJsonRequest);
}

std::string critic_repair_instruction() {
  return "Please reply with only a JSON object containing the keys \"feedback\" and \"new_prompt\".";
}

ParsedCritic parse_critic_reply(const std::string& raw) {
  ParsedCritic out;
  for (std::size_t open = raw.find('{'); open != std::string::npos; open = raw.find('{', open + 1)) {
    const std::size_t close = matching_brace(raw, open);
    if (close == std::string::npos) continue;
    json j;
    try {
      j = json::parse(raw.substr(open, close - open + 1));
    } catch (const json::exception&) {
      continue;
    }
    if (!j.is_object()) continue;
    for (const char* key : {"feedback", "new_prompt"}) {
      if (!j.contains(key) || !j[key].is_string() || trim(j[key].get<std::string>()).empty()) {
        out.reject_reason = std::string("reply object lacks a non-empty \"") + key + "\"";
        return out;
      }
    }
    out.reply = CriticReply{trim(j["feedback"].get<std::string>()), trim(j["new_prompt"].get<std::string>())};
    return out;
  }
  out.reject_reason = "no JSON object in reply";
  return out;
}

std::string customize(const std::string& inverted_prompt, const std::string& user_edit) {
  if (trim(inverted_prompt).empty() || trim(user_edit).empty())
    throw InvalidArgument("customize needs a non-empty prompt and edit");
  return inverted_prompt + " " + user_edit;
}

ImageRef generate_image(ImageGenerator& generator, const std::string& prompt, Rng& rng) {
  if (trim(prompt).empty()) throw InvalidArgument("cannot generate from an empty prompt");
  GenerationRequest req;
  req.text = generation_wrapper(prompt);
  req.prompt = prompt;
  ImageRef img = generator.generate(req, rng);
  img.source = ImageSource::generated;
  img.prompt = prompt;
  return img;
}

std::vector<std::string> word_set(const std::string& text) {
  const auto words = oracle_words(text);
  std::set<std::string> s(words.begin(), words.end());
  return {s.begin(), s.end()};
}

ImageRef query_image_from_path(const std::string& path) {
  ImageRef img;
  img.source = ImageSource::user_query;
  img.reference = path;
  const std::string stem = std::filesystem::path(path).stem().string();
  img.id = "query-" + stem;
  std::string spaced = stem;
  std::replace_if(spaced.begin(), spaced.end(), [](char c) { return c == '_' || c == '-' || c == '.'; }, ' ');
  img.descriptor = word_set(spaced);
  return img;
}

std::size_t descriptor_overlap(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::string> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out.size();
}

std::size_t descriptor_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::string> out;
  std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out.size();
}

// ---------------------------------------------------------------------------
// Loops

namespace {

struct CriticCall {
  std::optional<CriticReply> reply;
  std::string raw;
  std::string reject_reason;
};

CriticCall ask_critic(Critic& critic, CriticRequest req, GenerativeStats& stats, Rng& rng, bool structured) {
  CriticCall call;
  CriticResponse res = critic.critique(req, rng);
  ++stats.critic_calls;
  stats.tokens_in += res.tokens_in;
  stats.tokens_out += res.tokens_out;
  call.raw = res.text;
  if (!structured) return call;
  ParsedCritic parsed = parse_critic_reply(res.text);
  if (!parsed) {
    req.text += "\n" + critic_repair_instruction();
    res = critic.critique(req, rng);
    ++stats.critic_calls;
    stats.tokens_in += res.tokens_in;
    stats.tokens_out += res.tokens_out;
    call.raw = res.text;
    const std::string first_reason = parsed.reject_reason;
    parsed = parse_critic_reply(res.text);
    if (!parsed) call.reject_reason = parsed.reject_reason.empty() ? first_reason : parsed.reject_reason;
  }
  call.reply = parsed.reply;
  return call;
}

// Shared refinement rounds 1..rounds; `make_request` builds the critic request
// for the current prompt/image.
template <typename MakeRequest>
void refine(GenerativeResult& result, int rounds, ImageGenerator& generator, Critic& critic, Rng& rng,
            MakeRequest make_request) {
  for (int round = 1; round <= rounds; ++round) {
    GenerativeLedgerEntry entry;
    entry.round = round;
    CriticCall call = ask_critic(critic, make_request(result.final_prompt, result.final_image), result.stats, rng, true);
    if (!call.reply) {
      warn("critic reply unusable in round " + std::to_string(round) + ": " + call.reject_reason);
      entry.prompt = result.final_prompt;
      entry.image = result.final_image;
      entry.extra["parse_failed"] = call.reject_reason;
      entry.extra["raw_reply"] = call.raw;
      result.ledger.push_back(std::move(entry));
      continue;
    }
    entry.feedback = call.reply->feedback;
    try {
      ++result.stats.generator_calls;
      ImageRef img = generate_image(generator, call.reply->new_prompt, rng);
      result.final_prompt = call.reply->new_prompt;
      result.final_image = img;
    } catch (const GenerationRefused& ex) {
      entry.extra["refused"] = ex.what();
      entry.extra["refused_prompt"] = call.reply->new_prompt;
    }
    entry.prompt = result.final_prompt;
    entry.image = result.final_image;
    result.ledger.push_back(std::move(entry));
  }
}

}  // namespace

GenerativeResult t2i_optimize(const std::string& query_text, int rounds, ImageGenerator& generator, Critic& critic,
                              Rng& rng) {
  if (rounds < 1) throw InvalidArgument("rounds must be >= 1");
  if (trim(query_text).empty()) throw InvalidArgument("empty query text");
  GenerativeResult result;

  GenerationRequest first;
  first.text = first_round_generation(query_text);
  first.expand_query = true;
  first.query = query_text;
  ++result.stats.generator_calls;
  ImageRef img;
  try {
    img = generator.generate(first, rng);
  } catch (const GenerationRefused& ex) {
    throw FatalBackendError(std::string("first-round generation refused: ") + ex.what());
  }
  img.source = ImageSource::generated;
  if (img.prompt.empty()) img.prompt = first.text;
  result.final_prompt = img.prompt;
  result.final_image = img;
  result.ledger.push_back(GenerativeLedgerEntry{0, img.prompt, img, std::nullopt, {}});

  refine(result, rounds, generator, critic, rng, [&](const std::string& prompt, const ImageRef& current) {
    CriticRequest req;
    req.task = CriticTask::t2i_critique;
    req.text = t2i_critic_prompt(current.reference, query_text, prompt);
    req.images = {current};
    req.query_text = query_text;
    req.current_prompt = prompt;
    return req;
  });
  return result;
}

GenerativeResult invert_prompt(const ImageRef& query_image, int rounds, ImageGenerator& generator, Critic& critic,
                               Rng& rng) {
  if (rounds < 1) throw InvalidArgument("rounds must be >= 1");
  GenerativeResult result;

  CriticRequest first;
  first.task = CriticTask::invert_initial;
  first.text = inversion_first_prompt(query_image.reference);
  first.images = {query_image};
  CriticCall call = ask_critic(critic, first, result.stats, rng, false);
  // The first round asks for a bare prompt, but accept a structured reply too.
  ParsedCritic structured = parse_critic_reply(call.raw);
  std::string prompt = structured ? structured.reply->new_prompt : trim(call.raw);
  if (prompt.empty()) throw FatalBackendError("critic returned an empty initial prompt");

  ++result.stats.generator_calls;
  ImageRef img;
  try {
    img = generate_image(generator, prompt, rng);
  } catch (const GenerationRefused& ex) {
    throw FatalBackendError(std::string("initial generation refused: ") + ex.what());
  }
  result.final_prompt = prompt;
  result.final_image = img;
  result.ledger.push_back(GenerativeLedgerEntry{0, prompt, img, std::nullopt, {}});

  refine(result, rounds, generator, critic, rng, [&](const std::string& current_prompt, const ImageRef& current) {
    CriticRequest req;
    req.task = CriticTask::invert_compare;
    req.text = inversion_critic_prompt(query_image.reference, current.reference, current_prompt);
    req.images = {query_image, current};
    req.current_prompt = current_prompt;
    return req;
  });
  return result;
}

// ---------------------------------------------------------------------------
// Mocks

ImageRef MockImageGenerator::generate(const GenerationRequest& request, Rng& rng) {
  ImageRef img;
  img.source = ImageSource::generated;
  if (request.expand_query) {
    const auto words = word_set(request.query);
    std::vector<std::string> kept;
    for (const auto& w : words)
      if (rng.bernoulli(0.5)) kept.push_back(w);
    if (kept.empty() && !words.empty()) kept.push_back(words[rng.index(words.size())]);
    img.prompt = join_words(kept);
  } else {
    img.prompt = request.prompt;
  }
  img.descriptor = word_set(img.prompt);
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(img.prompt)));
  img.id = std::string("gen-") + hex;
  img.reference = "mock://image/" + img.id;
  return img;
}

CriticResponse MockCritic::critique(const CriticRequest& request, Rng& rng) {
  CriticResponse res;
  auto wrap = [&](const json& obj) {
    switch (rng.index(3)) {
      case 0: return obj.dump();
      case 1: return "```json\n" + obj.dump(2) + "\n```";
      default: return "Here is my assessment of the image.\n" + obj.dump() + "\nLet me know if you need more changes.";
    }
  };

  if (request.task == CriticTask::invert_initial) {
    if (request.images.empty()) throw InvalidArgument("inversion needs a query image");
    const auto& q = request.images.front().descriptor;
    std::vector<std::string> kept;
    for (const auto& w : q)
      if (rng.bernoulli(0.5)) kept.push_back(w);
    if (kept.empty() && !q.empty()) kept.push_back(q[rng.index(q.size())]);
    res.text = join_words(kept);
  } else {
    std::vector<std::string> target;
    std::vector<std::string> seen;
    if (request.task == CriticTask::t2i_critique) {
      if (request.images.empty()) throw InvalidArgument("critique needs the generated image");
      target = oracle_words(request.query_text);
      seen = request.images.front().descriptor;
    } else {
      if (request.images.size() < 2) throw InvalidArgument("comparison needs query and generated images");
      target = request.images[0].descriptor;
      seen = request.images[1].descriptor;
    }
    std::vector<std::string> missing;
    std::set<std::string> target_set(target.begin(), target.end());
    for (const auto& w : target)
      if (!std::binary_search(seen.begin(), seen.end(), w) &&
          std::find(missing.begin(), missing.end(), w) == missing.end())
        missing.push_back(w);

    std::vector<std::string> tokens = template_tokens(request.current_prompt);
    std::vector<std::string> extra;
    if (request.task == CriticTask::invert_compare) {
      std::vector<std::string> keep;
      for (const auto& tok : tokens) {
        const auto ws = oracle_words(tok);
        const bool foreign = !ws.empty() && std::all_of(ws.begin(), ws.end(), [&](const std::string& w) {
          return !target_set.count(w);
        });
        if (foreign) extra.push_back(tok);
        else keep.push_back(tok);
      }
      tokens = std::move(keep);
    }
    const std::size_t add = std::min<std::size_t>(3, missing.size());
    for (std::size_t i = 0; i < add; ++i) tokens.push_back(missing[i]);

    std::string feedback;
    if (missing.empty() && extra.empty()) {
      feedback = "The image matches; no changes needed.";
    } else {
      if (!missing.empty()) feedback += "Missing: " + join_words(missing) + ".";
      if (!extra.empty()) feedback += std::string(feedback.empty() ? "" : " ") + "Not in the original: " + join_words(extra) + ".";
    }
    std::string new_prompt = join_words(tokens);
    if (trim(new_prompt).empty()) new_prompt = request.current_prompt;
    res.text = wrap(json{{"feedback", feedback}, {"new_prompt", new_prompt}});
  }
  res.tokens_in = count_words(request.text);
  res.tokens_out = count_words(res.text);
  return res;
}

// ---------------------------------------------------------------------------
// Remote backends

namespace {

std::string env_or_empty(const std::string& name) {
  const char* v = std::getenv(name.c_str());
  return v ? v : "";
}

std::string mime_for(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".webp") return "image/webp";
  if (ext == ".gif") return "image/gif";
  return "image/png";
}

std::string image_url_for(const ImageRef& img) {
  const std::string& ref = img.reference;
  if (ref.rfind("http://", 0) == 0 || ref.rfind("https://", 0) == 0 || ref.rfind("data:", 0) == 0) return ref;
  std::ifstream in(ref, std::ios::binary);
  if (!in) throw InvalidArgument("cannot read image " + ref);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return "data:" + mime_for(ref) + ";base64," + base64_encode(bytes);
}

template <typename Fn>
HttpResponse post_with_retry(const RetryPolicy& policy, const Sleeper& sleeper, Fn&& fn) {
  int attempts = 0;
  return with_retry(
      policy,
      [&] {
        HttpResponse r = fn();
        if (retryable_status(r.status)) throw TransportError("service returned " + std::to_string(r.status));
        return r;
      },
      attempts, sleeper);
}

}  // namespace

ImageApiGenerator::ImageApiGenerator(ImageBackendConfig config, std::shared_ptr<HttpTransport> transport,
                                     Sleeper sleeper)
    : config_(std::move(config)), api_key_(env_or_empty(config_.api_key_env)), transport_(std::move(transport)),
      sleeper_(std::move(sleeper)) {
  if (!transport_) throw InvalidArgument("image generator needs a transport");
}

ImageRef ImageApiGenerator::generate(const GenerationRequest& request, Rng&) {
  const json body = {{"model", config_.model}, {"prompt", request.text}, {"n", 1}, {"size", config_.size}};
  HttpHeaders headers;
  if (!api_key_.empty()) headers.emplace_back("Authorization", "Bearer " + api_key_);
  const std::string url = join_url(config_.endpoint, "/images/generations");
  const HttpResponse res =
      post_with_retry(config_.retry, sleeper_, [&] { return transport_->post_json(url, body.dump(), headers); });
  json j;
  try {
    j = json::parse(res.body);
  } catch (const json::exception&) {
    throw FatalBackendError("malformed image response (status " + std::to_string(res.status) + ")");
  }
  if (res.status != 200) {
    const std::string code = j.contains("error") && j["error"].is_object() ? j["error"].value("code", "") : "";
    if (code == "content_policy_violation") throw GenerationRefused(j["error"].value("message", code));
    throw FatalBackendError("image service returned " + std::to_string(res.status) + ": " + res.body);
  }
  try {
    const json& d = j.at("data").at(0);
    ImageRef img;
    img.source = ImageSource::generated;
    img.reference = d.value("url", "");
    img.prompt = request.expand_query ? d.value("revised_prompt", "") : request.prompt;
    img.id = "gen-" + std::to_string(++counter_);
    return img;
  } catch (const json::exception& ex) {
    throw FatalBackendError(std::string("malformed image response: ") + ex.what());
  }
}

ChatCritic::ChatCritic(ChatBackendConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper)
    : config_(std::move(config)), api_key_(env_or_empty(config_.api_key_env)), transport_(std::move(transport)),
      sleeper_(std::move(sleeper)) {
  if (!transport_) throw InvalidArgument("critic needs a transport");
}

CriticResponse ChatCritic::critique(const CriticRequest& request, Rng&) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", request.text}});
  for (const auto& img : request.images) content.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url_for(img)}}}});
  const json body = {{"model", config_.model},
                     {"messages", json::array({{{"role", "user"}, {"content", content}}})}};
  HttpHeaders headers;
  if (!api_key_.empty()) headers.emplace_back("Authorization", "Bearer " + api_key_);
  const std::string url = join_url(config_.endpoint, "/chat/completions");
  const HttpResponse res =
      post_with_retry(config_.retry, sleeper_, [&] { return transport_->post_json(url, body.dump(), headers); });
  if (res.status != 200) throw FatalBackendError("critic endpoint returned " + std::to_string(res.status) + ": " + res.body);
  try {
    const json j = json::parse(res.body);
    CriticResponse out;
    out.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
    if (j.contains("usage")) {
      out.tokens_in = j["usage"].value("prompt_tokens", 0ULL);
      out.tokens_out = j["usage"].value("completion_tokens", 0ULL);
    }
    return out;
  } catch (const json::exception& ex) {
    throw FatalBackendError(std::string("malformed critic response: ") + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Files

GenerativeQuery parse_query_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    GenerativeQuery q;
    const std::string type = j.at("type").get<std::string>();
    if (type == "t2i") {
      q.type = QueryType::t2i;
      q.text = j.at("text").get<std::string>();
      if (trim(q.text).empty()) throw InvalidArgument("t2i query has empty text");
    } else if (type == "invert") {
      q.type = QueryType::invert;
      q.image_path = j.at("image_path").get<std::string>();
      if (trim(q.image_path).empty()) throw InvalidArgument("invert query has empty image_path");
    } else {
      throw InvalidArgument("unknown query type: " + type);
    }
    return q;
  } catch (const json::exception& ex) {
    throw InvalidArgument(std::string("malformed query: ") + ex.what());
  }
}

std::vector<GenerativeQuery> load_queries(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open queries " + path.string());
  std::vector<GenerativeQuery> out;
  for (std::string line; std::getline(in, line);)
    if (!trim(line).empty()) out.push_back(parse_query_line(line));
  return out;
}

std::string generative_ledger_line(const GenerativeLedgerEntry& e) {
  json j;
  j["round"] = e.round;
  j["prompt"] = e.prompt;
  j["image"] = {{"id", e.image.id},
                {"source", e.image.source == ImageSource::generated ? "generated" : "user_query"},
                {"reference", e.image.reference},
                {"prompt", e.image.prompt},
                {"descriptor", e.image.descriptor}};
  j["feedback"] = e.feedback ? json(*e.feedback) : json(nullptr);
  j["extra"] = e.extra;
  return j.dump();
}

void write_generative_output(const std::filesystem::path& dir, const GenerativeResult& result) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "ledger.jsonl", std::ios::trunc);
    for (const auto& e : result.ledger) f << generative_ledger_line(e) << '\n';
  }
  {
    std::ofstream f(dir / "final_prompt.txt", std::ios::trunc);
    f << result.final_prompt << '\n';
  }
  {
    std::ofstream f(dir / "images.txt", std::ios::trunc);
    for (const auto& e : result.ledger) f << e.round << '\t' << e.image.reference << '\n';
  }
}

}  // namespace vlmopt
