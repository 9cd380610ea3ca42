#include "fcn/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace fcn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

const char* to_string(CheckpointErrc code) {
  switch (code) {
    case CheckpointErrc::io: return "io error";
    case CheckpointErrc::bad_magic: return "bad magic";
    case CheckpointErrc::unsupported_version: return "unsupported version";
    case CheckpointErrc::truncated: return "truncated file";
    case CheckpointErrc::checksum: return "checksum mismatch";
    case CheckpointErrc::malformed: return "malformed checkpoint";
  }
  return "checkpoint error";
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

constexpr char kMagic[4] = {'F', 'C', 'N', 'C'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > end_ - pos_) {
      throw CheckpointError(CheckpointErrc::truncated,
                            std::string("file ends inside ") + what + " at byte " +
                                std::to_string(pos_));
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

struct RawParam {
  std::string name;
  std::vector<std::uint32_t> dims;
  const std::uint8_t* values = nullptr;
  std::size_t count = 0;
};

struct Parsed {
  std::uint32_t version = 0;
  std::string config_json;
  std::vector<RawParam> params;
  std::uint32_t crc = 0;
};

// Magic and version come first so that a newer file is reported as such
// rather than as corrupt. Structure is walked before the CRC is checked;
// running out of bytes means truncation.
Parsed parse(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) {
    throw CheckpointError(CheckpointErrc::truncated,
                          "only " + std::to_string(bytes.size()) + " bytes");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrc::bad_magic, "file does not start with FCNC");
  }
  Parsed out;
  std::memcpy(&out.version, bytes.data() + 4, 4);
  if (out.version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrc::unsupported_version,
                          "file has version " + std::to_string(out.version) +
                              ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < 12) {
    throw CheckpointError(CheckpointErrc::truncated, "no room for the trailing CRC");
  }
  const std::size_t body_end = bytes.size() - 4;
  Reader r(bytes, body_end);
  r.take(8, "header");
  const auto config_len = r.get<std::uint32_t>("config length");
  const std::uint8_t* config = r.take(config_len, "config");
  out.config_json.assign(reinterpret_cast<const char*>(config), config_len);
  const auto count = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    RawParam p;
    const auto name_len = r.get<std::uint16_t>("parameter name length");
    const std::uint8_t* name = r.take(name_len, "parameter name");
    p.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto rank = r.get<std::uint8_t>("parameter rank");
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      p.dims.push_back(r.get<std::uint32_t>("parameter dims"));
      n *= p.dims.back();
      if (n > body_end) n = body_end + 1;  // saturate; cannot fit anyway
    }
    p.count = n;
    if (n > (body_end - r.pos()) / 4) {
      throw CheckpointError(CheckpointErrc::truncated,
                            "file ends inside values of '" + p.name + "'");
    }
    p.values = r.take(n * 4, "parameter values");
    out.params.push_back(std::move(p));
  }
  std::memcpy(&out.crc, bytes.data() + body_end, 4);
  const std::uint32_t actual = crc32(bytes.data(), body_end);
  if (r.pos() != body_end || actual != out.crc) {
    throw CheckpointError(CheckpointErrc::checksum,
                          "stored CRC " + std::to_string(out.crc) + ", computed " +
                              std::to_string(actual));
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize(const Model<float>& model) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string config = to_json(model.config()).dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  w.put_bytes(config.data(), config.size());
  const auto& params = model.params();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    if (p.name.size() > 0xFFFF || p.dims.size() > 0xFF) {
      throw CheckpointError(CheckpointErrc::malformed, "parameter '" + p.name + "' too large");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name.data(), p.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.dims.size()));
    for (std::uint32_t d : p.dims) w.put<std::uint32_t>(d);
    w.put_bytes(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(float));
  }
  w.put<std::uint32_t>(crc32(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Model<float> deserialize(const std::vector<std::uint8_t>& bytes) {
  Parsed parsed = parse(bytes);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(parsed.config_json));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrc::malformed, std::string("config: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrc::malformed, std::string("config: ") + e.what());
  }
  try {
    ParamSet<float> params;
    for (const RawParam& raw : parsed.params) {
      if (raw.dims.empty()) throw ConfigError("parameter '" + raw.name + "' has rank 0");
      auto& p = params.add(raw.name, raw.dims, false);
      std::memcpy(p.value.data(), raw.values, raw.count * sizeof(float));
    }
    return Model<float>(cfg, std::move(params));
  } catch (const Error& e) {
    throw CheckpointError(CheckpointErrc::malformed, e.what());
  }
}

CheckpointInfo inspect(const std::vector<std::uint8_t>& bytes) {
  const Parsed parsed = parse(bytes);
  CheckpointInfo info;
  info.version = parsed.version;
  info.config_json = parsed.config_json;
  info.crc = parsed.crc;
  for (const auto& p : parsed.params) info.params.push_back({p.name, p.dims});
  return info;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void save(const Model<float>& model, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrc::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrc::io, "write failed for " + path.string());
}

Model<float> load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace fcn
