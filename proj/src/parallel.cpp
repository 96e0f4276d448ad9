#include <bitgen/parallel.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

BITGEN_NAMESPACE_BEGIN

namespace {

int read_env_workers() {
  const char* env = std::getenv("BITGEN_THREADS");
  if (env == nullptr) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (const std::exception&) {
    return 1;
  }
}

std::atomic<int>& workers() {
  static std::atomic<int> value{read_env_workers()};
  return value;
}

}  // namespace

int worker_count() { return workers().load(); }

void set_worker_count(int n) { workers().store(std::max(1, n)); }

int chunk_count(int64_t n) {
  if (n <= 0) return 0;
  return static_cast<int>(std::min<int64_t>(n, worker_count()));
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t, int)>& fn) {
  const int chunks = chunk_count(n);
  if (chunks == 0) return;
  if (chunks == 1) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(chunks - 1);
  auto bounds = [n, chunks](int c) { return n * c / chunks; };
  for (int c = 1; c < chunks; ++c) {
    pool.emplace_back([&fn, &bounds, c] { fn(bounds(c), bounds(c + 1), c); });
  }
  fn(bounds(0), bounds(1), 0);
}

BITGEN_NAMESPACE_END
