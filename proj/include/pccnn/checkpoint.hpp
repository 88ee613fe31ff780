#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pccnn/data.hpp"
#include "pccnn/mask.hpp"
#include "pccnn/model.hpp"

namespace pccnn {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native little-endian order");

// "PCCN", u32 version, u32 header length, JSON header, then float32 blobs in
// manifest order. Offsets in the manifest are relative to the blob section.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ArchitectureConfig config;
  ModelParams<float> params;
  nlohmann::json train_config = nlohmann::json::object();
};

inline std::vector<std::uint8_t> encode_checkpoint(const ArchitectureConfig& config, const ModelParams<float>& params,
                                                   const nlohmann::json& train_config = nlohmann::json::object()) {
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : params.entries()) {
    manifest.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"dtype", "float32"}, {"offset", offset}});
    offset += e.value.size() * sizeof(float);
  }
  const std::string header =
      nlohmann::json{{"architecture", config}, {"train_config", train_config}, {"tensors", manifest}}.dump();

  std::vector<std::uint8_t> out{'P', 'C', 'C', 'N'};
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, header.size(), 4);
  out.insert(out.end(), header.begin(), header.end());
  std::size_t pos = out.size();
  out.resize(pos + offset);
  for (const auto& e : params.entries()) {
    std::memcpy(out.data() + pos, e.value.ptr(), e.value.size() * sizeof(float));
    pos += e.value.size() * sizeof(float);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& name = "checkpoint") {
  if (bytes.size() < 12) {
    throw FormatError(name + ": truncated header, missing " + std::to_string(12 - bytes.size()) + " bytes");
  }
  if (!(bytes[0] == 'P' && bytes[1] == 'C' && bytes[2] == 'C' && bytes[3] == 'N')) {
    throw FormatError(name + ": bad magic, expected \"PCCN\"");
  }
  const auto version = detail::get_le(bytes, 4, 4);
  if (version != kCheckpointVersion) {
    throw FormatError(name + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t header_len = detail::get_le(bytes, 8, 4);
  if (12 + header_len > bytes.size()) {
    throw FormatError(name + ": truncated JSON header, missing " + std::to_string(12 + header_len - bytes.size()) +
                      " bytes");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": malformed JSON header: " + e.what());
  }

  Checkpoint ck;
  try {
    ck.config = header.at("architecture").get<ArchitectureConfig>();
    ck.train_config = header.value("train_config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": bad architecture header: " + e.what());
  }
  ck.config.validate();

  const std::size_t blob_start = 12 + header_len;
  const std::size_t blob_len = bytes.size() - blob_start;
  struct Blob {
    std::string name;
    Shape shape;
    std::size_t offset, nbytes;
  };
  std::vector<Blob> blobs;
  std::size_t expected_end = 0;
  nlohmann::json tensors;
  try {
    tensors = header.at("tensors");
    for (const auto& t : tensors) {
      (void)t.at("name").get<std::string>();
      (void)t.at("shape").get<Shape>();
      (void)t.at("offset").get<std::size_t>();
      (void)t.at("dtype");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": bad tensor manifest: " + e.what());
  }
  for (const auto& t : tensors) {
    Blob b{t.at("name"), t.at("shape").get<Shape>(), t.at("offset"), 0};
    if (t.at("dtype") != "float32") throw FormatError(name + ": tensor " + b.name + " has unsupported dtype");
    b.nbytes = element_count(b.shape) * sizeof(float);
    if (b.offset != expected_end) {
      throw FormatError(name + ": tensor " + b.name + " at offset " + std::to_string(b.offset) + ", expected " +
                        std::to_string(expected_end));
    }
    expected_end += b.nbytes;
    blobs.push_back(std::move(b));
  }
  if (expected_end > blob_len) {
    std::string first;
    for (const auto& b : blobs) {
      if (b.offset + b.nbytes > blob_len) {
        first = b.name;
        break;
      }
    }
    throw FormatError(name + ": truncated, missing " + std::to_string(expected_end - blob_len) +
                      " bytes from tensor " + first + " on");
  }
  if (expected_end != blob_len) {
    throw FormatError(name + ": manifest covers " + std::to_string(expected_end) + " blob bytes but file holds " +
                      std::to_string(blob_len));
  }
  for (auto& b : blobs) {
    Tensor<float> value(std::move(b.shape));
    std::memcpy(value.ptr(), bytes.data() + blob_start + b.offset, b.nbytes);
    ck.params.add(b.name, std::move(value));
  }
  Model<float> check(ck.config, ck.params);  // validates names and shapes against the layout
  (void)check;
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ArchitectureConfig& config,
                            const ModelParams<float>& params,
                            const nlohmann::json& train_config = nlohmann::json::object()) {
  detail::write_file(path, encode_checkpoint(config, params, train_config));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

/// Lowercase hex SHA-256.
inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw RuntimeFault("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 15]);
  }
  return out;
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(detail::read_file(path)); }

inline std::string mask_digest(const Mask& mask) { return sha256_hex(mask.bits()); }

}  // namespace pccnn
