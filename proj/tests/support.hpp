#pragma once

#include <atomic>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vlmopt/evaluator.hpp"
#include "vlmopt/http.hpp"
#include "vlmopt/log.hpp"

namespace testing {

namespace fs = std::filesystem;

inline fs::path data_dir() { return fs::path(VLMOPT_TEST_DATA_DIR); }

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Golden files end with one newline the rendered text does not have.
inline std::string golden(const std::string& name) {
  std::string s = read_file(data_dir() / "golden" / name);
  if (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

inline void write_file(const fs::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << body;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("vlmopt-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// Scores through a plain function and counts the calls.
class CountingEvaluator final : public vlmopt::Evaluator {
 public:
  using Fn = std::function<double(const vlmopt::Template&, const vlmopt::ClassificationTask&)>;
  explicit CountingEvaluator(Fn fn) : fn_(std::move(fn)) {}

  vlmopt::ScoreResult evaluate(const vlmopt::Template& t, const vlmopt::ClassificationTask& task) override {
    ++calls;
    return {fn_(t, task), false};
  }

  std::atomic<int> calls{0};

 private:
  Fn fn_;
};

// Collects warn() output while alive.
class WarningCapture {
 public:
  WarningCapture() {
    previous_ = vlmopt::set_warning_sink([this](std::string_view m) {
      std::lock_guard<std::mutex> lock(mu_);
      messages_.emplace_back(m);
    });
  }
  ~WarningCapture() { vlmopt::set_warning_sink(previous_); }

  std::vector<std::string> messages() const {
    std::lock_guard<std::mutex> lock(mu_);
    return messages_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::string> messages_;
  vlmopt::WarningSink previous_;
};

// Canned responses in order; records every request.
class ScriptedTransport final : public vlmopt::HttpTransport {
 public:
  struct Request {
    std::string url;
    std::string body;
    vlmopt::HttpHeaders headers;
  };

  // status < 0 means "no response" (TransportError).
  void push(int status, std::string body) {
    std::lock_guard<std::mutex> lock(mu_);
    script_.push_back({status, std::move(body)});
  }

  vlmopt::HttpResponse post_json(const std::string& url, const std::string& body,
                                 const vlmopt::HttpHeaders& headers) override {
    std::lock_guard<std::mutex> lock(mu_);
    requests.push_back({url, body, headers});
    if (script_.empty()) throw vlmopt::TransportError("script exhausted");
    auto r = script_.front();
    script_.pop_front();
    if (r.status < 0) throw vlmopt::TransportError("connection refused");
    return r;
  }

  std::vector<Request> requests;

 private:
  std::mutex mu_;
  std::deque<vlmopt::HttpResponse> script_;
};

}  // namespace testing
