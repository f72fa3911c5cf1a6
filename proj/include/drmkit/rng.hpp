#pragma once

#include <cstdint>

namespace drmkit {

// Counter-based random stream. A draw is a pure function of
// (seed, stream, counter), so any stream can be recreated at any position
// and streams derived with split() do not depend on how many draws the
// parent has made.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0);

  std::uint64_t next_u64();
  double uniform();   // in (0, 1]
  double normal();    // standard normal; consumes exactly two counters
  std::uint64_t below(std::uint64_t n);  // uniform integer in [0, n)

  // Child stream keyed by `id`; independent of this stream's counter.
  RngStream split(std::uint64_t id) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
  std::uint64_t key_;
};

}  // namespace drmkit
