#include "doctest.h"

#include <cstring>
#include <filesystem>

#include "fcn/checkpoint.hpp"

using namespace fcn;

namespace {

ModelConfig small_config(const std::string& variant) {
  ModelConfig cfg;
  cfg.vocab_size = 30;
  cfg.embed_dim = 6;
  cfg.stack_layers = 3;
  cfg.stack_kernel = 3;
  cfg.stack_channels = 16;
  cfg.num_classes = 25;
  cfg.attention = variant_attention(variant);
  return cfg;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fcn_test_" + name);
}

// Bitwise CRC-32 (reflected, polynomial 0xEDB88320).
std::uint32_t crc32_oracle(const std::uint8_t* data, std::size_t size) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < size; ++i) {
    crc ^= data[i];
    for (int b = 0; b < 8; ++b) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

CheckpointErrc error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize(bytes);
  } catch (const CheckpointError& e) {
    return e.code();
  }
  FAIL("expected CheckpointError");
  return CheckpointErrc::io;
}

}  // namespace

TEST_CASE("crc32 agrees with a bitwise oracle") {
  const std::string check = "123456789";
  const auto* p = reinterpret_cast<const std::uint8_t*>(check.data());
  CHECK(crc32(p, check.size()) == 0xCBF43926u);
  std::vector<std::uint8_t> bytes(1000);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i * 31 + 7);
  CHECK(crc32(bytes.data(), bytes.size()) == crc32_oracle(bytes.data(), bytes.size()));
}

TEST_CASE("round trip is bit-exact for every variant") {
  for (const auto& v : variant_names()) {
    const Model<float> m(small_config(v));
    const auto path = temp_path("rt.fcn");
    save(m, path);
    const Model<float> back = load(path);
    REQUIRE(back.params().size() == m.params().size());
    for (std::size_t i = 0; i < m.params().size(); ++i) {
      const auto& a = m.params()[i].value;
      const auto& b = back.params()[i].value;
      CHECK(back.params()[i].name == m.params()[i].name);
      REQUIRE(a.size() == b.size());
      CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0);
    }
    CHECK(to_json(back.config()) == to_json(m.config()));
    CHECK(serialize(back) == read_file(path));
    std::filesystem::remove(path);
  }
}

TEST_CASE("single-byte corruption is detected") {
  const auto bytes = serialize(Model<float>(small_config("dot1")));
  std::uint32_t config_len = 0;
  std::memcpy(&config_len, bytes.data() + 8, 4);
  // Payload: the config text and the values of the last tensor (output.bias).
  std::vector<std::size_t> payload;
  for (std::size_t i = 12; i < 12 + config_len; i += 7) payload.push_back(i);
  for (std::size_t i = bytes.size() - 4 - 25 * 4; i < bytes.size(); ++i) payload.push_back(i);
  for (std::size_t i : payload) {
    auto bad = bytes;
    bad[i] ^= 0x5A;
    INFO("byte " << i);
    CHECK(error_of(bad) == CheckpointErrc::checksum);
  }
  // Structural bytes may surface as truncation, but never load.
  for (std::size_t i = 8; i < bytes.size(); i += 53) {
    auto bad = bytes;
    bad[i] ^= 0x01;
    CHECK_THROWS_AS(deserialize(bad), CheckpointError);
  }
}

TEST_CASE("header errors") {
  const auto bytes = serialize(Model<float>(small_config("none")));
  auto magic = bytes;
  magic[0] = 'X';
  CHECK(error_of(magic) == CheckpointErrc::bad_magic);

  auto version = bytes;
  version[4] = 7;
  try {
    deserialize(version);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrc::unsupported_version);
    const std::string what = e.what();
    CHECK(what.find("7") != std::string::npos);
    CHECK(what.find(std::to_string(kCheckpointVersion)) != std::string::npos);
  }

  CHECK(error_of({bytes.begin(), bytes.begin() + 3}) == CheckpointErrc::truncated);
  CHECK(error_of({bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2)}) ==
        CheckpointErrc::truncated);
}

TEST_CASE("inspect lists shapes without building a model") {
  const Model<float> m(small_config("local8"));
  const auto bytes = serialize(m);
  const CheckpointInfo info = inspect(bytes);
  CHECK(info.version == kCheckpointVersion);
  REQUIRE(info.params.size() == m.params().size());
  CHECK(info.params.front().name == "embedding");
  CHECK(info.params.front().dims == std::vector<std::uint32_t>{30, 6});
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  CHECK(info.crc == stored);
  CHECK(stored == crc32_oracle(bytes.data(), bytes.size() - 4));
}

TEST_CASE("missing file is an io error") {
  try {
    load(temp_path("does_not_exist.fcn"));
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrc::io);
  }
}
