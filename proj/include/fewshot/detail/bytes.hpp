#pragma once

// Little-endian packing helpers and whole-file io used by the binary
// container formats (EMB1 / ENC1 / ENS1). Byte order is explicit so the
// files are portable regardless of host endianness.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "fewshot/error.hpp"

namespace fewshot::detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  put_u32(out, static_cast<uint32_t>(v));
  put_u32(out, static_cast<uint32_t>(v >> 32));
}

inline void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline void put_f64(std::vector<uint8_t>& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

// Sequential reader with bounds checking; errors surface as FormatError
// tagged with the container name.
class ByteReader {
 public:
  ByteReader(const std::vector<uint8_t>& bytes, std::string context)
      : bytes_(&bytes), context_(std::move(context)) {}

  uint32_t u32() {
    need(4);
    uint32_t v = static_cast<uint32_t>((*bytes_)[pos_]) |
                 static_cast<uint32_t>((*bytes_)[pos_ + 1]) << 8 |
                 static_cast<uint32_t>((*bytes_)[pos_ + 2]) << 16 |
                 static_cast<uint32_t>((*bytes_)[pos_ + 3]) << 24;
    pos_ += 4;
    return v;
  }

  uint64_t u64() {
    uint64_t lo = u32();
    uint64_t hi = u32();
    return lo | (hi << 32);
  }

  uint8_t u8() {
    need(1);
    return (*bytes_)[pos_++];
  }

  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  void magic(const char (&tag)[5]) {
    need(4);
    if (std::memcmp(bytes_->data() + pos_, tag, 4) != 0) {
      throw FormatError(context_ + ": bad magic, expected '" + tag + "'");
    }
    pos_ += 4;
  }

  void expect_end() const {
    if (pos_ != bytes_->size()) {
      throw FormatError(context_ + ": " + std::to_string(bytes_->size() - pos_) +
                        " unexpected trailing bytes");
    }
  }

  size_t remaining() const { return bytes_->size() - pos_; }

 private:
  void need(size_t n) {
    if (bytes_->size() - pos_ < n) {
      throw FormatError(context_ + ": truncated (needed " + std::to_string(n) +
                        " more bytes at offset " + std::to_string(pos_) + ")");
    }
  }

  const std::vector<uint8_t>* bytes_;
  std::string context_;
  size_t pos_ = 0;
};

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);
std::string read_file_text(const std::filesystem::path& path);
void write_file_text(const std::filesystem::path& path, const std::string& text);

}  // namespace fewshot::detail
