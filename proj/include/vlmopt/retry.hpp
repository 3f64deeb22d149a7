#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <thread>

#include "vlmopt/core.hpp"

namespace vlmopt {

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds base_delay{500};
  std::chrono::milliseconds max_delay{8000};
  double multiplier = 2.0;

  // Delay before attempt `attempt` (1-based; attempt 1 has none).
  std::chrono::milliseconds delay_before(int attempt) const {
    if (attempt <= 1) return std::chrono::milliseconds{0};
    double d = static_cast<double>(base_delay.count());
    for (int i = 2; i < attempt; ++i) d *= multiplier;
    return std::chrono::milliseconds{static_cast<long long>(std::min(d, static_cast<double>(max_delay.count())))};
  }

  static RetryPolicy immediate(int attempts) {
    return RetryPolicy{attempts, std::chrono::milliseconds{0}, std::chrono::milliseconds{0}, 1.0};
  }
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void default_sleep(std::chrono::milliseconds d) {
  if (d.count() > 0) std::this_thread::sleep_for(d);
}

/// Runs `fn` until it returns without throwing TransportError or the policy
/// is exhausted, in which case the last TransportError propagates. Other
/// exceptions propagate immediately. `attempts` receives the number of
/// calls made either way.
template <typename Fn>
auto with_retry(const RetryPolicy& policy, Fn&& fn, int& attempts, const Sleeper& sleep = default_sleep)
    -> decltype(fn()) {
  attempts = 0;
  const int max_attempts = std::max(1, policy.max_attempts);
  for (int attempt = 1;; ++attempt) {
    sleep(policy.delay_before(attempt));
    ++attempts;
    try {
      return fn();
    } catch (const TransportError&) {
      if (attempt >= max_attempts) throw;
    }
  }
}

}  // namespace vlmopt
