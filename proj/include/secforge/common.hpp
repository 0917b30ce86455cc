#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace secforge {

inline constexpr std::string_view kToolVersion = "0.4.0";

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input bytes. Carries the byte offset when the underlying parser reports one.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& message, std::optional<std::size_t> byte_offset = std::nullopt)
      : Error(byte_offset ? message + " (at byte " + std::to_string(*byte_offset) + ")" : message),
        byte_offset_(byte_offset) {}

  std::optional<std::size_t> byte_offset() const noexcept { return byte_offset_; }

 private:
  std::optional<std::size_t> byte_offset_;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Hex SHA-256 of arbitrary bytes.
std::string sha256_hex(std::string_view bytes);

// First 16 hex chars of the SHA-256; used for record and checkpoint ids.
std::string short_digest(std::string_view bytes);

// Stable 64-bit value derived from a seed and a tag, for splitting RNG streams.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

/// Seeded generator whose draws are identical across standard-library
/// implementations (the std distributions are not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, n). n must be > 0.
  std::size_t below(std::size_t n);

  // Uniform real in [0, 1) with 53 bits of precision.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  // k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
};

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
std::string collapse_whitespace(std::string_view s);
bool starts_with_icase(std::string_view s, std::string_view prefix);

// Lower-cased maximal runs of ASCII alphanumerics.
std::vector<std::string> alnum_tokens(std::string_view text);

std::size_t whitespace_token_count(std::string_view text);

// First sentence (up to and including the first ". ") or the whole text.
std::string first_sentence(std::string_view text);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, std::string_view contents);

}  // namespace secforge
