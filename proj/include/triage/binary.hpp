#pragma once

// Byte-level helpers: fixed-endian encoding, whole-file reads/writes, CRC-32
// (zlib) and SHA-256 (OpenSSL) digests, and the IoError type.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>
#include <zlib.h>

namespace triage {

enum class IoErrc {
  open_failed = 1,
  write_failed,
  bad_magic,
  unsupported_version,
  unsupported_dtype,
  dim_overflow,
  truncated,
  trailing_data,
  checksum_mismatch,
  malformed,
};

inline std::string_view to_string(IoErrc c) {
  switch (c) {
    case IoErrc::open_failed: return "open_failed";
    case IoErrc::write_failed: return "write_failed";
    case IoErrc::bad_magic: return "bad_magic";
    case IoErrc::unsupported_version: return "unsupported_version";
    case IoErrc::unsupported_dtype: return "unsupported_dtype";
    case IoErrc::dim_overflow: return "dim_overflow";
    case IoErrc::truncated: return "truncated";
    case IoErrc::trailing_data: return "trailing_data";
    case IoErrc::checksum_mismatch: return "checksum_mismatch";
    case IoErrc::malformed: return "malformed";
  }
  return "unknown";
}

class IoError : public std::runtime_error {
 public:
  IoError(IoErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  IoErrc code() const noexcept { return code_; }

 private:
  IoErrc code_;
};

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::open_failed, "cannot open '" + path.string() + "' for reading");
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrc::write_failed, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(IoErrc::write_failed, "short write to '" + path.string() + "'");
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline std::string read_text(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return {b.begin(), b.end()};
}

// Little-endian writer/reader used by the tensor and model formats; big-endian
// variants for the IDX dataset layout.
class ByteWriter {
 public:
  void u32le(std::uint32_t v) { put(v, 4, false); }
  void u64le(std::uint64_t v) { put(v, 8, false); }
  void u32be(std::uint32_t v) { put(v, 4, true); }
  void f32le(float v) { u32le(std::bit_cast<std::uint32_t>(v)); }
  void f32be(float v) { u32be(std::bit_cast<std::uint32_t>(v)); }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void raw(std::span<const std::uint8_t> s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  std::size_t size() const noexcept { return bytes_.size(); }
  const Bytes& bytes() const noexcept { return bytes_; }
  Bytes take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int width, bool big) {
    for (int i = 0; i < width; ++i) {
      const int shift = big ? 8 * (width - 1 - i) : 8 * i;
      bytes_.push_back(static_cast<std::uint8_t>((v >> shift) & 0xffu));
    }
  }
  Bytes bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  std::uint32_t u32le() { return static_cast<std::uint32_t>(get(4, false)); }
  std::uint64_t u64le() { return get(8, false); }
  std::uint32_t u32be() { return static_cast<std::uint32_t>(get(4, true)); }
  float f32le() { return std::bit_cast<float>(u32le()); }
  float f32be() { return std::bit_cast<float>(u32be()); }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  const std::string& source() const noexcept { return source_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw IoError(IoErrc::truncated, source_ + ": expected " + std::to_string(pos_ + n) + " bytes but file has " +
                                           std::to_string(bytes_.size()) + " (at byte offset " +
                                           std::to_string(pos_) + ")");
    }
  }

 private:
  std::uint64_t get(int width, bool big) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      const int shift = big ? 8 * (width - 1 - i) : 8 * i;
      v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << shift;
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return os.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace triage
