#pragma once

// Binary container for named tensors plus a JSON metadata block.
//
// Layout (all integers little-endian, see docs/formats.md):
//
//   magic     8 bytes  "COTDCKPT"
//   version   u32      kCheckpointVersion
//   meta_len  u64      length of the metadata block
//   meta      bytes    UTF-8 JSON object
//   count     u32      number of tensors
//   per tensor:
//     name_len u32, name bytes
//     rank     u32, rank x u64 dims
//     data     product(dims) x f64 (IEEE-754 binary64, little-endian)
//
// Policies, CVAE ensembles, dynamics baselines and calibration sets all use
// this container; the metadata "kind" field says which.

#include "cotd/hash.hpp"
#include "cotd/nn.hpp"
#include "cotd/tensor.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cotd {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'T', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Raised for unreadable, truncated or foreign checkpoint files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  json metadata = json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError("checkpoint: missing tensor '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }

  std::string to_bytes() const;
  static Checkpoint from_bytes(const std::string& bytes);

  /// Writes to a temp file then renames, so readers never see a partial file.
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw FormatError("checkpoint: truncated data");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string Checkpoint::to_bytes() const {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  const std::string meta = metadata.dump();
  detail::put_u64(out, meta.size());
  out += meta;
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u64(out, d);
    for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(8) != std::string(kCheckpointMagic, 8)) throw FormatError("checkpoint: bad magic");
  const auto version = r.u(4);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  const auto meta_len = r.u(8);
  try {
    c.metadata = json::parse(r.bytes(static_cast<std::size_t>(meta_len)));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  const auto count = r.u(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.bytes(static_cast<std::size_t>(r.u(4)));
    const auto rank = r.u(4);
    if (rank > 8) throw FormatError("checkpoint: implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint64_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.u(8)));
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = std::bit_cast<double>(r.u(8));
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return c;
}

/// Atomic text/binary write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, p);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void Checkpoint::save(const std::string& path) const { write_file_atomic(path, to_bytes()); }

inline Checkpoint Checkpoint::load(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw FormatError(e.what());
  }
  return from_bytes(bytes);
}

/// Stores an Mlp's parameters under `prefix` and its architecture in `meta[prefix]`.
inline void put_mlp(Checkpoint& c, const std::string& prefix, const Mlp& mlp) {
  const auto names = mlp.parameter_names(prefix);
  const auto params = mlp.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) c.add(names[i], *params[i]);
  json arch;
  arch["dims"] = mlp.dims();
  json acts = json::array();
  for (auto a : mlp.activations()) acts.push_back(to_string(a));
  arch["activations"] = acts;
  c.metadata["networks"][prefix] = arch;
}

inline Mlp get_mlp(const Checkpoint& c, const std::string& prefix) {
  if (!c.metadata.contains("networks") || !c.metadata["networks"].contains(prefix))
    throw FormatError("checkpoint: no network '" + prefix + "'");
  const auto& arch = c.metadata["networks"][prefix];
  const auto acts = arch["activations"].get<std::vector<std::string>>();
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i < acts.size(); ++i) {
    DenseLayer l;
    l.weight = c.get(prefix + "w" + std::to_string(i));
    l.bias = c.get(prefix + "b" + std::to_string(i));
    l.activation = activation_from_string(acts[i]);
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers));
}

}  // namespace cotd
