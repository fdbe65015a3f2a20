#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spade/model.hpp"

namespace spade {

// Layout, all integers little-endian:
//   "SPADE\0"  u16 version
//   u32 length, metadata text (key=value lines)
//   u32 tensor count, then per tensor: u16 name length, name, u8 rank, u32 dims
//   float32 values of every tensor in table order
inline constexpr std::array<char, 6> kCheckpointMagic{'S', 'P', 'A', 'D', 'E', '\0'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void put_f32(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, sizeof u);
    put(u);
  }
  void put_bytes(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
  std::string bytes;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float get_f32(const char* what) {
    const auto u = get<std::uint32_t>(what);
    float f;
    std::memcpy(&f, &u, sizeof f);
    return f;
  }
  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ResourceError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct CheckpointHeader {
  Metadata metadata;
  std::vector<std::pair<std::string, Shape>> shapes;
};

inline CheckpointHeader read_header(ByteReader& r) {
  const auto magic = r.get_bytes(kCheckpointMagic.size(), "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw FormatError("not a SPADE checkpoint (bad magic bytes)");
  }
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointHeader h;
  std::istringstream meta(r.get_bytes(r.get<std::uint32_t>("metadata length"), "metadata"));
  for (std::string line; std::getline(meta, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed checkpoint metadata line '" + line + "'");
    h.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_bytes(r.get<std::uint16_t>("name length"), "tensor name");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& s : shape) s = r.get<std::uint32_t>("dimension");
    h.shapes.emplace_back(std::move(name), std::move(shape));
  }
  return h;
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const SpadeModel<T>& model, const Metadata& extra = {}) {
  detail::ByteWriter w;
  w.put_bytes(std::string(kCheckpointMagic.begin(), kCheckpointMagic.end()));
  w.put(kCheckpointVersion);
  std::string meta;
  for (const auto& [k, v] : model_config_entries(model.config())) meta += k + "=" + v + "\n";
  for (const auto& [k, v] : extra) meta += k + "=" + v + "\n";
  w.put(static_cast<std::uint32_t>(meta.size()));
  w.put_bytes(meta);
  const auto params = model.parameters();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name);
    w.put(static_cast<std::uint8_t>(p.tensor.ndim()));
    for (auto s : p.tensor.shape()) w.put(static_cast<std::uint32_t>(s));
  }
  for (const auto& p : params)
    for (auto v : p.tensor.data()) w.put_f32(static_cast<float>(v));
  return std::move(w.bytes);
}

// Writes through a temporary file so a crash never leaves a torn checkpoint.
template <typename T>
void save_checkpoint(const SpadeModel<T>& model, const std::filesystem::path& path, const Metadata& extra = {}) {
  const auto bytes = serialize_checkpoint(model, extra);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ResourceError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ResourceError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Metadata read_checkpoint_metadata(const std::filesystem::path& path) {
  const auto data = detail::read_file(path);
  detail::ByteReader r(data);
  return detail::read_header(r).metadata;
}

template <typename T>
SpadeModel<T> deserialize_checkpoint(const std::string& data) {
  detail::ByteReader r(data);
  const auto header = detail::read_header(r);
  ModelConfig cfg;
  for (const auto& [k, v] : header.metadata) {
    try {
      set_model_config_entry(cfg, k, v, "");
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
  }
  SpadeModel<T> model(cfg);
  const auto params = model.parameters();
  if (params.size() != header.shapes.size()) {
    throw FormatError("checkpoint shape table lists " + std::to_string(header.shapes.size()) +
                      " tensors, the model described by its metadata has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, shape] = header.shapes[i];
    if (name != params[i].name || shape != params[i].tensor.shape()) {
      throw FormatError("checkpoint shape table entry " + name + " " + to_string(shape) + " does not match " +
                        params[i].name + " " + to_string(params[i].tensor.shape()));
    }
  }
  for (auto& p : params) {
    auto t = p.tensor;
    for (auto& v : t.data()) v = static_cast<T>(r.get_f32("tensor data"));
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes after the tensor data");
  for (auto& layer : model.layers()) layer.ssm.invalidate_kernels();
  return model;
}

template <typename T>
SpadeModel<T> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<T>(detail::read_file(path));
}

}  // namespace spade
