#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "vlmopt/core.hpp"
#include "vlmopt/http.hpp"

namespace vlmopt {

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw InvalidArgument("URL lacks a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttplibTransport final : public HttpTransport {
 public:
  explicit HttplibTransport(std::chrono::seconds timeout) : timeout_(timeout) {}

  HttpResponse post_json(const std::string& url, const std::string& body, const HttpHeaders& headers) override {
    const SplitUrl parts = split_url(url);
    httplib::Client client(parts.origin);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(parts.path, h, body, "application/json");
    if (!res) throw TransportError("POST " + url + " failed: " + httplib::to_string(res.error()));
    return HttpResponse{res->status, res->body};
  }

 private:
  std::chrono::seconds timeout_;
};

}  // namespace

std::shared_ptr<HttpTransport> make_http_transport(std::chrono::seconds timeout) {
  return std::make_shared<HttplibTransport>(timeout);
}

bool retryable_status(int status) { return status == 408 || status == 425 || status == 429 || status >= 500; }

std::string base64_encode(const std::string& bytes) { return httplib::detail::base64_encode(bytes); }

std::string join_url(const std::string& base, const std::string& path) {
  if (base.empty()) return path;
  const bool base_slash = base.back() == '/';
  const bool path_slash = !path.empty() && path.front() == '/';
  if (base_slash && path_slash) return base + path.substr(1);
  if (!base_slash && !path_slash) return base + "/" + path;
  return base + path;
}

}  // namespace vlmopt
