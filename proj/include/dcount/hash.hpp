#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace dcount {

// Incremental SHA-256 (OpenSSL EVP). Digests are reported as lowercase hex.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t len);
  Sha256& update(std::string_view s);
  template <typename T>
  Sha256& update_pod(const T& v) {
    return update(&v, sizeof(T));
  }
  std::string hex();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// First 8 bytes of SHA-256(key || '\0' || text), big-endian.
std::uint64_t keyed_hash64(std::uint64_t key, std::string_view text);

}  // namespace dcount
