#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace dipt {

// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

// Incremental SHA-256 for hashing many pieces without concatenating them.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  Sha256& update(std::span<const std::uint8_t> bytes);
  Sha256& update(std::string_view text);
  std::string hex();

 private:
  void* ctx_;
};

// Sub-seed derivation: splitmix64 finalizer applied to FNV-1a of the label,
// xor-folded with the parent seed and each integer component. The same
// (parent, label, parts) always yields the same seed, and different labels
// decorrelate the streams.
std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t a);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t a, std::uint64_t b);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t a, std::uint64_t b,
                          std::uint64_t c);

}  // namespace dipt
