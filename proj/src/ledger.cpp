#include "vlmopt/ledger.hpp"

#include <json.hpp>

namespace vlmopt {

using nlohmann::json;

std::string ledger_line(const LedgerEntry& e) {
  json j;
  j["run_id"] = e.run_id;
  j["restart"] = e.restart;
  j["reset"] = e.reset;
  j["iter"] = e.iter;
  j["template_text"] = e.template_text;
  j["score"] = e.score ? json(*e.score) : json(nullptr);
  j["tokens_in"] = e.tokens_in;
  j["tokens_out"] = e.tokens_out;
  j["origin"] = std::string(to_string(e.origin));
  j["timestamp"] = e.timestamp;
  j["extra"] = e.extra;
  return j.dump();
}

LedgerEntry parse_ledger_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
    LedgerEntry e;
    e.run_id = j.at("run_id").get<std::string>();
    e.restart = j.at("restart").get<int>();
    e.reset = j.at("reset").get<int>();
    e.iter = j.at("iter").get<int>();
    e.template_text = j.at("template_text").get<std::string>();
    if (!j.at("score").is_null()) e.score = j.at("score").get<double>();
    e.tokens_in = j.at("tokens_in").get<std::uint64_t>();
    e.tokens_out = j.at("tokens_out").get<std::uint64_t>();
    e.origin = origin_from_string(j.at("origin").get<std::string>());
    e.timestamp = j.value("timestamp", "");
    if (j.contains("extra")) e.extra = j.at("extra").get<std::map<std::string, std::string>>();
    return e;
  } catch (const json::exception& ex) {
    throw Error(std::string("malformed ledger line: ") + ex.what());
  }
}

Ledger::Ledger(std::filesystem::path path) : path_(std::move(path)) {
  entries_ = load(path_);
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  // Rewriting drops any torn tail so later appends start on a clean line.
  rewrite_locked();
}

void Ledger::append(LedgerEntry entry) {
  std::vector<LedgerEntry> batch;
  batch.push_back(std::move(entry));
  append_batch(std::move(batch));
}

void Ledger::append_batch(std::vector<LedgerEntry> batch) {
  std::lock_guard lock(mu_);
  if (out_.is_open()) {
    std::string buf;
    for (const auto& e : batch) {
      buf += ledger_line(e);
      buf += '\n';
    }
    out_ << buf;
    out_.flush();
    if (!out_) throw Error("failed writing ledger " + path_.string());
  }
  for (auto& e : batch) entries_.push_back(std::move(e));
}

std::vector<LedgerEntry> Ledger::snapshot() const {
  std::lock_guard lock(mu_);
  return entries_;
}

std::size_t Ledger::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

void Ledger::truncate(std::size_t n) {
  std::lock_guard lock(mu_);
  if (n >= entries_.size()) return;
  entries_.resize(n);
  if (!path_.empty()) rewrite_locked();
}

void Ledger::rewrite_locked() {
  if (path_.empty()) return;
  if (out_.is_open()) out_.close();
  const auto tmp = std::filesystem::path(path_.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::trunc);
    for (const auto& e : entries_) f << ledger_line(e) << '\n';
    if (!f) throw Error("failed writing ledger " + tmp.string());
  }
  std::filesystem::rename(tmp, path_);
  out_.open(path_, std::ios::app);
  if (!out_) throw Error("cannot open ledger " + path_.string());
}

std::vector<LedgerEntry> Ledger::load(const std::filesystem::path& path) {
  std::vector<LedgerEntry> out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  while (pos < content.size()) {
    const std::size_t nl = content.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    const std::string line = content.substr(pos, terminated ? nl - pos : std::string::npos);
    const std::size_t next = terminated ? nl + 1 : content.size();
    const bool last = next >= content.size();
    if (!terminated) break;  // torn final write
    if (!line.empty()) {
      try {
        out.push_back(parse_ledger_line(line));
      } catch (const Error&) {
        if (!last) throw;
      }
    }
    pos = next;
  }
  return out;
}

std::vector<LedgerEntry> without_timestamps(std::vector<LedgerEntry> entries) {
  for (auto& e : entries) e.timestamp.clear();
  return entries;
}

}  // namespace vlmopt
