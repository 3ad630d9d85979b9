#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace define::detail {

// Builds an error/message string from heterogeneous parts.
template <typename... Parts>
std::string str(const Parts&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Worker cap for internal parallelism. DEFINE_THREADS defaults to 1;
// set_thread_cap overrides the environment (used by tests and tools).
inline int& thread_cap_storage() {
  static int cap = [] {
    if (const char* env = std::getenv("DEFINE_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    return 1;
  }();
  return cap;
}

inline int thread_cap() { return thread_cap_storage(); }
inline void set_thread_cap(int cap) { thread_cap_storage() = cap > 1 ? cap : 1; }

// Runs fn(lo, hi) over fixed-size index blocks. The block decomposition does
// not depend on the worker count, so any per-block computation yields results
// bit-identical to a single-threaded run.
inline void parallel_blocks(std::size_t count, std::size_t block,
                            const std::function<void(std::size_t, std::size_t)>& fn) {
  if (count == 0) return;
  const std::size_t nblocks = (count + block - 1) / block;
  const int workers = std::min<std::size_t>(thread_cap(), nblocks);
  if (workers <= 1) {
    for (std::size_t b = 0; b < nblocks; ++b)
      fn(b * block, std::min(count, (b + 1) * block));
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t b = w; b < nblocks; b += workers)
        fn(b * block, std::min(count, (b + 1) * block));
    });
  }
  for (auto& t : pool) t.join();
}

// CRC-32 (reflected 0xEDB88320, the zlib/PNG polynomial).
inline std::uint32_t crc32(const void* bytes, std::size_t len,
                           std::uint32_t seed = 0) {
  static const auto table = [] {
    std::vector<std::uint32_t> t(256);
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = seed ^ 0xFFFFFFFFu;
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

}  // namespace define::detail
