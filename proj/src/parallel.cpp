#include "mocha/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace mocha {

namespace {

std::size_t env_threads() {
  const char* env = std::getenv("MOCHA_THREADS");
  if (!env) return 1;
  try {
    long v = std::stol(env);
    return v < 1 ? 1 : static_cast<std::size_t>(v);
  } catch (...) {
    return 1;
  }
}

std::atomic<std::size_t> g_override{0};

}  // namespace

std::size_t thread_count() {
  static const std::size_t from_env = env_threads();
  std::size_t o = g_override.load();
  return o ? o : from_env;
}

void set_thread_count(std::size_t n) { g_override.store(n); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    std::size_t begin = w * chunk;
    std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace mocha
