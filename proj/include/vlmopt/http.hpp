#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace vlmopt {

struct HttpResponse {
  int status = 0;
  std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

// Minimal POST-JSON transport; implementations throw TransportError when no
// HTTP response was obtained at all.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post_json(const std::string& url, const std::string& body, const HttpHeaders& headers) = 0;
};

std::shared_ptr<HttpTransport> make_http_transport(std::chrono::seconds timeout = std::chrono::seconds{60});

// Status codes worth retrying: 408, 425, 429 and 5xx.
bool retryable_status(int status);

std::string base64_encode(const std::string& bytes);

// Appends `path` to `base`, handling the joining slash.
std::string join_url(const std::string& base, const std::string& path);

}  // namespace vlmopt
