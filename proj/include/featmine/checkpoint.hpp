#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "featmine/config.hpp"

namespace featmine {

// Layout, all integers little-endian:
//   8 bytes  magic "FMCKPT\0\1"
//   u32      format version
//   u32      header length, then a JSON header {model, fm, meta, counts}
//   model tensors, then FM head tensors, each as
//     u32 name length, name bytes, 4 x i64 shape (N, C, H, W), float32 data
inline constexpr char kCheckpointMagic[8] = {'F', 'M', 'C', 'K', 'P', 'T', '\0', '\1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelSpec spec;
  std::optional<FMConfig> fm;  // present only when head tensors are stored
  NamedTensors<float> model_state;
  NamedTensors<float> fm_state;
  json meta = json::object();
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void i64(std::int64_t v) {
    const auto u = static_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const char* p, std::size_t n) { bytes.insert(bytes.end(), p, p + n); }
  void tensor(const std::string& name, const Tensor& t) {
    u32(static_cast<std::uint32_t>(name.size()));
    raw(name.data(), name.size());
    const Shape s = t.shape();
    for (auto d : {s.n, s.c, s.h, s.w}) i64(d);
    for (float v : t.data()) f32(v);
  }
  std::vector<char> bytes;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> data, std::string source)
      : bytes_(std::move(data)), source_(std::move(source)) {}

  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(detail::concat(source_, ": truncated while reading ", what), pos_);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::int64_t i64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return static_cast<std::int64_t>(v);
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor> tensor() {
    const std::size_t start = pos_;
    const auto len = u32("tensor name length");
    std::string name = str(len, "tensor name");
    Shape s;
    s.n = i64("shape");
    s.c = i64("shape");
    s.h = i64("shape");
    s.w = i64("shape");
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 || s.numel() > (std::int64_t{1} << 32)) {
      throw FormatError(source_ + ": implausible shape for tensor '" + name + "'", start);
    }
    need(static_cast<std::size_t>(s.numel()) * 4, "tensor data");
    Tensor t(s);
    for (auto& v : t.data()) v = std::bit_cast<float>(u32("tensor data"));
    return {std::move(name), std::move(t)};
  }
  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

// Writes to a sibling temporary file and renames, so a failed write never
// leaves a partial file under the final name.
inline void write_file_atomically(const std::filesystem::path& path, const std::vector<char>& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Snapshot of a model (and optionally its auxiliary heads).
inline Checkpoint make_checkpoint(Model& model, FeatureMining<float>* fm = nullptr,
                                  bool keep_heads = false) {
  Checkpoint c;
  c.spec = model.spec();
  c.model_state = model.state();
  if (fm && keep_heads && fm->config().enabled) {
    c.fm = fm->config();
    c.fm_state = fm->state();
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  json header{{"model", model_spec_to_json(c.spec)},
              {"fm", c.fm ? fm_config_to_json(*c.fm) : json(nullptr)},
              {"meta", c.meta},
              {"model_tensors", c.model_state.size()},
              {"fm_tensors", c.fm_state.size()}};
  const std::string text = header.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text.data(), text.size());
  for (const auto& [name, t] : c.model_state) w.tensor(name, t);
  for (const auto& [name, t] : c.fm_state) w.tensor(name, t);
  detail::write_file_atomically(path, w.bytes);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader r(std::move(bytes), path.string());

  if (r.str(sizeof(kCheckpointMagic), "magic") !=
      std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw FormatError(path.string() + ": not a featmine checkpoint", 0);
  }
  const auto version = r.u32("format version");
  if (version != kCheckpointVersion) {
    throw FormatError(detail::concat(path.string(), ": unsupported checkpoint version ", version), 8);
  }
  const auto header_len = r.u32("header length");
  const std::size_t header_pos = r.position();
  json header;
  try {
    header = json::parse(r.str(header_len, "header"));
  } catch (const nlohmann::json::exception&) {
    throw FormatError(path.string() + ": malformed checkpoint header", header_pos);
  }

  Checkpoint c;
  try {
    c.spec = model_spec_from_json(header.at("model"));
    if (!header.at("fm").is_null()) c.fm = fm_config_from_json(header.at("fm"));
    c.meta = header.value("meta", json::object());
    const auto n_model = header.at("model_tensors").get<std::size_t>();
    const auto n_fm = header.at("fm_tensors").get<std::size_t>();
    for (std::size_t i = 0; i < n_model; ++i) c.model_state.push_back(r.tensor());
    for (std::size_t i = 0; i < n_fm; ++i) c.fm_state.push_back(r.tensor());
  } catch (const nlohmann::json::exception&) {
    throw FormatError(path.string() + ": checkpoint header is missing fields", header_pos);
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after last tensor", r.position());
  return c;
}

/// Rebuilds the main network. Auxiliary head tensors, if any, are ignored,
/// so checkpoints trained with Feature Mining load into a plain model.
inline Model model_from_checkpoint(const Checkpoint& c) {
  Model model(c.spec, RngStream("init", 0));
  model.load_state(c.model_state);
  return model;
}

}  // namespace featmine
