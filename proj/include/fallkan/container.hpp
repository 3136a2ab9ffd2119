#pragma once

// Versioned model container:
//   8 bytes  magic "FALLKAN\0"
//   u32 LE   format version
//   u64 LE   header length, then that many bytes of UTF-8 JSON
//   u64 LE   payload count, then that many IEEE-754 binary64 values (LE)

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fallkan/csv.hpp"
#include "fallkan/error.hpp"

namespace fallkan::container {

inline constexpr std::string_view kMagic{"FALLKAN\0", 8};
inline constexpr std::uint32_t kVersion = 1;

struct Blob {
  nlohmann::json header;
  std::vector<double> payload;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode(const Blob& blob) {
  std::string out(kMagic);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((kVersion >> (8 * i)) & 0xFF));
  const auto header = blob.header.dump();
  detail::put_u64(out, header.size());
  out += header;
  detail::put_u64(out, blob.payload.size());
  for (double v : blob.payload) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

/// `what` names the file in error messages.
inline Blob decode(std::string_view bytes, const std::string& what, std::string_view kind) {
  if (bytes.size() < 12 || bytes.substr(0, 8) != kMagic) throw ValidationError(what + ": bad magic bytes");
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i)
    version |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + static_cast<std::size_t>(i)])) << (8 * i);
  if (version != kVersion)
    throw ValidationError(what + ": unsupported container version " + std::to_string(version));
  std::size_t at = 12;
  if (bytes.size() < at + 8) throw ValidationError(what + ": truncated header length");
  const auto header_len = detail::get_u64(bytes, at);
  at += 8;
  if (bytes.size() - at < header_len) throw ValidationError(what + ": truncated header");
  Blob blob;
  try {
    blob.header = nlohmann::json::parse(bytes.substr(at, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(what + ": header is not valid JSON: " + e.what());
  }
  at += header_len;
  if (!blob.header.is_object() || blob.header.value("kind", "") != kind)
    throw ValidationError(what + ": expected a '" + std::string(kind) + "' container");
  if (bytes.size() < at + 8) throw ValidationError(what + ": truncated payload length");
  const auto count = detail::get_u64(bytes, at);
  at += 8;
  if ((bytes.size() - at) / 8 < count || (bytes.size() - at) != count * 8)
    throw ValidationError(what + ": payload size does not match its declared length");
  blob.payload.resize(count);
  for (std::size_t i = 0; i < count; ++i, at += 8)
    blob.payload[i] = std::bit_cast<double>(detail::get_u64(bytes, at));
  return blob;
}

inline void save(const std::string& path, const Blob& blob) { csv::write_file(path, encode(blob)); }

inline Blob load(const std::string& path, std::string_view kind) {
  return decode(csv::read_file(path), path, kind);
}

}  // namespace fallkan::container
