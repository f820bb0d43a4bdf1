// SPDX-License-Identifier: Apache-2.0
#pragma once

// Container shared by dataset and checkpoint files:
//
//   bytes 0..7    magic "EDRLBLOB"
//   bytes 8..15   header length H, unsigned 64-bit little-endian
//   next H bytes  JSON header: kind, version, crc32, blob_bytes, blobs[]
//   remainder     blob section, 64-bit little-endian IEEE-754 doubles
//
// Each blobs[] entry carries name, shape, offset (in elements) and count.
// crc32 covers the blob section only.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "edrl/tensor.hpp"
#include "json.hpp"

namespace edrl {

/// Unreadable or inconsistent data files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};

struct Blob {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct BlobFile {
  nlohmann::json header;
  std::vector<Blob> blobs;

  const Blob& get(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return b;
    throw DataError("missing blob '" + name + "'");
  }
};

inline constexpr char kBlobMagic[8] = {'E', 'D', 'R', 'L', 'B', 'L', 'O', 'B'};

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t offset = 0) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data() + offset), static_cast<uInt>(bytes.size() - offset)));
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

/// `meta` fields are merged into the header next to the container fields.
inline std::string encode_blob_file(const std::string& kind, int version, nlohmann::json meta,
                                    const std::vector<Blob>& blobs) {
  std::string section;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& b : blobs) {
    if (b.values.size() != shape_numel(b.shape)) {
      throw std::invalid_argument("blob '" + b.name + "' size does not match its shape");
    }
    entries.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset}, {"count", b.values.size()}});
    for (double v : b.values) detail::put_u64(section, std::bit_cast<std::uint64_t>(v));
    offset += b.values.size();
  }
  meta["kind"] = kind;
  meta["version"] = version;
  meta["blobs"] = std::move(entries);
  meta["blob_bytes"] = section.size();
  meta["crc32"] = crc32_of(section);
  const std::string header = meta.dump();
  std::string out(kBlobMagic, sizeof(kBlobMagic));
  detail::put_u64(out, header.size());
  out += header;
  out += section;
  return out;
}

inline BlobFile decode_blob_file(const std::string& bytes, const std::string& kind, int version) {
  if (bytes.size() < 16) throw TruncatedError("file shorter than its fixed preamble");
  if (std::memcmp(bytes.data(), kBlobMagic, sizeof(kBlobMagic)) != 0) throw DataError("bad magic bytes");
  const std::uint64_t header_len = detail::get_u64(bytes, 8);
  if (header_len > bytes.size() - 16) throw TruncatedError("header extends past end of file");
  BlobFile file;
  try {
    file.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed header: ") + e.what());
  }
  try {
    if (file.header.at("kind").get<std::string>() != kind) {
      throw DataError("expected a '" + kind + "' file, found '" + file.header.at("kind").get<std::string>() + "'");
    }
    const int found = file.header.at("version").get<int>();
    if (found != version) {
      throw VersionError("format version " + std::to_string(found) + " is not supported (expected version " +
                         std::to_string(version) + ")");
    }
    const std::size_t start = 16 + header_len;
    const auto declared = file.header.at("blob_bytes").get<std::size_t>();
    if (bytes.size() - start < declared) {
      throw TruncatedError("blob section has " + std::to_string(bytes.size() - start) + " bytes, header declares " +
                           std::to_string(declared));
    }
    if (bytes.size() - start > declared) throw DataError("trailing bytes after blob section");
    if (crc32_of(bytes, start) != file.header.at("crc32").get<std::uint32_t>()) {
      throw ChecksumError("blob section CRC-32 mismatch");
    }
    for (const auto& e : file.header.at("blobs")) {
      Blob b;
      b.name = e.at("name").get<std::string>();
      b.shape = e.at("shape").get<Shape>();
      const auto off = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (count != shape_numel(b.shape)) throw DataError("blob '" + b.name + "' count does not match shape");
      if (8 * (off + count) > declared) {
        throw TruncatedError("blob '" + b.name + "' extends past the blob section");
      }
      b.values.resize(count);
      for (std::size_t i = 0; i < count; ++i)
        b.values[i] = std::bit_cast<double>(detail::get_u64(bytes, start + 8 * (off + i)));
      file.blobs.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed header: ") + e.what());
  }
  return file;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to '" + path + "' failed");
}

}  // namespace edrl
