#include "vlmopt/evaluator.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "vlmopt/log.hpp"
#include "vlmopt/rng.hpp"

namespace vlmopt {

using nlohmann::json;

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw InvalidArgument("unknown split: " + std::string(name));
}

void ClassificationTask::validate() const {
  if (trim(dataset_id).empty()) throw InvalidArgument("task has no dataset id");
  if (class_names.empty()) throw InvalidArgument("task " + dataset_id + " has no classes");
  std::unordered_set<std::string> seen;
  for (const auto& c : class_names)
    if (!seen.insert(c).second) throw InvalidArgument("duplicate class name: " + c);
}

std::vector<std::string> render_class_prompts(const Template& templ, const std::vector<std::string>& class_names) {
  if (templ.placeholder_count() < 1) throw InvalidArgument("template has no placeholder: " + templ.text());
  std::vector<std::string> out;
  out.reserve(class_names.size());
  const std::string& t = templ.text();
  for (const auto& name : class_names) {
    std::string s;
    s.reserve(t.size() + name.size() * templ.placeholder_count());
    std::size_t pos = 0;
    for (std::size_t hit = t.find(kPlaceholder); hit != std::string::npos; hit = t.find(kPlaceholder, pos)) {
      s.append(t, pos, hit - pos);
      s += name;
      pos = hit + kPlaceholder.size();
    }
    s.append(t, pos, std::string::npos);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::string> oracle_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c) || c == '\'' || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return words;
}

SyntheticOracle::SyntheticOracle(SyntheticOracleSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
  if (spec_.noise_scale < 0.0) throw InvalidArgument("noise_scale must be >= 0");
  std::map<std::string, double> lowered;
  for (const auto& [word, w] : spec_.keyword_weights) {
    std::string l = word;
    std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
    lowered[l] = w;
  }
  spec_.keyword_weights = std::move(lowered);
}

double SyntheticOracle::score_text(const std::string& text) const {
  const auto words = oracle_words(text);
  std::set<std::string> distinct(words.begin(), words.end());
  double s = 0.0;
  for (const auto& w : distinct) {
    auto it = spec_.keyword_weights.find(w);
    if (it != spec_.keyword_weights.end()) s += it->second;
  }
  s -= spec_.length_penalty * static_cast<double>(count_words(text));
  if (spec_.noise_scale > 0.0) {
    Rng rng = seeded_rng(seed_, "oracle-noise|" + text);
    s += spec_.noise_scale * rng.normal();
  }
  return std::clamp(s, 0.0, 1.0);
}

ScoreResult SyntheticOracle::evaluate(const Template& templ, const ClassificationTask&) {
  return {score_text(templ.text()), false};
}

double SyntheticOracle::optimum() const {
  double s = -spec_.length_penalty;  // the placeholder word
  for (const auto& [word, w] : spec_.keyword_weights)
    if (w > spec_.length_penalty) s += w - spec_.length_penalty;
  return std::clamp(s, 0.0, 1.0);
}

RemoteEvaluator::RemoteEvaluator(std::string base_url, std::shared_ptr<HttpTransport> transport, RetryPolicy retry,
                                 Sleeper sleeper)
    : url_(join_url(base_url, "/v1/score")),
      transport_(std::move(transport)),
      retry_(retry),
      sleeper_(std::move(sleeper)) {}

ScoreResult RemoteEvaluator::evaluate(const Template& templ, const ClassificationTask& task) {
  const json body = {{"template", templ.text()},
                     {"dataset", task.dataset_id},
                     {"shots", task.shots},
                     {"fold", task.fold},
                     {"split", std::string(to_string(task.split))}};
  const std::string payload = body.dump();
  int attempts = 0;
  const HttpResponse res = with_retry(
      retry_,
      [&] {
        ++requests_;
        HttpResponse r = transport_->post_json(url_, payload, {});
        if (retryable_status(r.status)) throw TransportError("score service returned " + std::to_string(r.status));
        return r;
      },
      attempts, sleeper_);

  if (res.status != 200) {
    std::string detail = res.body;
    try {
      const json e = json::parse(res.body);
      if (e.contains("error")) detail = e["error"].is_string() ? e["error"].get<std::string>() : e["error"].dump();
    } catch (const json::exception&) {
    }
    switch (res.status) {
      case 400: throw FatalBackendError("score request rejected as malformed: " + detail);
      case 404: throw FatalBackendError("unknown dataset or fold " + task.dataset_id + "/" + std::to_string(task.fold) + ": " + detail);
      case 422: throw FatalBackendError("template rejected by score service: " + detail);
      default: throw FatalBackendError("score service returned " + std::to_string(res.status) + ": " + detail);
    }
  }
  try {
    const json j = json::parse(res.body);
    return {validate_score(j.at("accuracy").get<double>()), false};
  } catch (const json::exception& ex) {
    throw FatalBackendError(std::string("malformed score response: ") + ex.what());
  }
}

CacheKey CacheKey::of(const Template& templ, const ClassificationTask& task) {
  return {templ.text(), task.dataset_id, task.shots, task.fold, task.split};
}

std::string CacheKey::serialize() const {
  return json{{"template", template_text},
              {"dataset", dataset_id},
              {"shots", shots},
              {"fold", fold},
              {"split", std::string(to_string(split))}}
      .dump();
}

CachedEvaluator::CachedEvaluator(std::shared_ptr<Evaluator> inner, std::filesystem::path cache_file)
    : inner_(std::move(inner)), path_(std::move(cache_file)) {
  if (!inner_) throw InvalidArgument("cached evaluator needs a backend");
  if (!path_.empty()) load_file();
}

void CachedEvaluator::load_file() {
  std::unordered_map<std::string, std::shared_ptr<Slot>> loaded;
  bool corrupt = false;
  {
    std::ifstream in(path_, std::ios::binary);
    std::string content;
    if (in) content.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    while (pos < content.size()) {
      const std::size_t nl = content.find('\n', pos);
      if (nl == std::string::npos) break;  // torn final write
      const std::string line = content.substr(pos, nl - pos);
      pos = nl + 1;
      if (line.empty()) continue;
      try {
        const json j = json::parse(line);
        CacheKey key{j.at("template").get<std::string>(), j.at("dataset").get<std::string>(), j.at("shots").get<int>(),
                     j.at("fold").get<int>(), split_from_string(j.at("split").get<std::string>())};
        auto slot = std::make_shared<Slot>();
        slot->score = validate_score(j.at("score").get<double>());
        slot->ready = true;
        loaded[key.serialize()] = std::move(slot);
      } catch (const std::exception&) {
        corrupt = true;
        break;
      }
    }
  }
  if (corrupt) {
    warn("score cache " + path_.string() + " is corrupt; starting from an empty cache");
    loaded.clear();
  }
  slots_ = std::move(loaded);
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  // Rewrite so a torn tail or corrupt content never precedes new appends.
  {
    std::ofstream f(path_, std::ios::trunc);
    for (const auto& [k, slot] : slots_) {
      json j = json::parse(k);
      j["score"] = slot->score;
      f << j.dump() << '\n';
    }
  }
  out_.open(path_, std::ios::app);
  if (!out_) throw Error("cannot open score cache " + path_.string());
}

void CachedEvaluator::persist(const CacheKey& key, double score) {
  if (path_.empty()) return;
  json j = json::parse(key.serialize());
  j["score"] = score;
  std::lock_guard lock(file_mu_);
  out_ << j.dump() << '\n';
  out_.flush();
}

ScoreResult CachedEvaluator::evaluate(const Template& templ, const ClassificationTask& task) {
  const CacheKey key = CacheKey::of(templ, task);
  const std::string k = key.serialize();
  std::shared_ptr<Slot> slot;
  {
    std::lock_guard lock(mu_);
    auto& s = slots_[k];
    if (!s) s = std::make_shared<Slot>();
    slot = s;
  }
  std::lock_guard slot_lock(slot->mu);
  if (slot->ready) {
    ++hits_;
    return {slot->score, true};
  }
  ++backend_calls_;
  const double score = validate_score(inner_->evaluate(templ, task).score);
  slot->score = score;
  slot->ready = true;
  persist(key, score);
  return {score, false};
}

std::size_t CachedEvaluator::size() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [k, s] : slots_) {
    std::lock_guard slot_lock(s->mu);
    n += s->ready ? 1 : 0;
  }
  return n;
}

}  // namespace vlmopt
