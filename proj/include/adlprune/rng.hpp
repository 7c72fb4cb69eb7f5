#pragma once

#include <cstdint>
#include <string_view>

namespace adlprune {

/// Counter-based random stream: every draw is a pure function of
/// (seed, stream name, counter pair), so consumers can sample in any order
/// and a stream needs no mutable state to checkpoint.
class RandomStream {
 public:
  RandomStream() = default;
  RandomStream(std::uint64_t seed, std::string_view name);

  RandomStream child(std::string_view name) const;

  std::uint64_t bits(std::uint64_t hi, std::uint64_t lo) const;
  // Open interval (0, 1).
  double uniform(std::uint64_t hi, std::uint64_t lo) const;
  double normal(std::uint64_t hi, std::uint64_t lo) const;

  std::uint64_t key() const { return key_; }

 private:
  explicit RandomStream(std::uint64_t key) : key_(key) {}
  std::uint64_t key_ = 0;
};

// Sequential view over one counter row of a stream, for bulk initialization.
class StreamCursor {
 public:
  StreamCursor(const RandomStream& stream, std::uint64_t row)
      : stream_(stream), row_(row) {}
  double uniform() { return stream_.uniform(row_, next_++); }
  double normal() { return stream_.normal(row_, next_++); }

 private:
  RandomStream stream_;
  std::uint64_t row_;
  std::uint64_t next_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace adlprune
