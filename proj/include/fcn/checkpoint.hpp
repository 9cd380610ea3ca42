#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fcn/errors.hpp"
#include "fcn/model.hpp"

namespace fcn {

// Layout, all integers little-endian:
//   "FCNC" | u32 version | u32 len + config JSON | u32 param count |
//   per param: u16 len + name, u8 rank, u32 dims[rank], f32 values |
//   u32 CRC-32 of every preceding byte.

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrc {
  io,
  bad_magic,
  unsupported_version,
  truncated,
  checksum,
  malformed,
};

const char* to_string(CheckpointErrc code);

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}
  CheckpointErrc code() const { return code_; }

 private:
  CheckpointErrc code_;
};

/// Header and parameter shapes of a checkpoint, without building a model.
struct CheckpointInfo {
  std::uint32_t version = 0;
  std::string config_json;
  struct Entry {
    std::string name;
    std::vector<std::uint32_t> dims;
  };
  std::vector<Entry> params;
  std::uint32_t crc = 0;
};

std::vector<std::uint8_t> serialize(const Model<float>& model);
Model<float> deserialize(const std::vector<std::uint8_t>& bytes);
CheckpointInfo inspect(const std::vector<std::uint8_t>& bytes);

void save(const Model<float>& model, const std::filesystem::path& path);
Model<float> load(const std::filesystem::path& path);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

}  // namespace fcn
