#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "data.hpp"
#include "optim.hpp"
#include "tensor.hpp"

namespace gcaseg {

// Little-endian binary layout:
//   "GCASEGCK"  u32 version  u64 config_hash
//   i64 epoch  i64 step  f64 best_metric  i64 best_epoch
//   u32 len + config text
//   u32 entry count, per entry: u16 name len, name, u8 dtype (0 f32, 1 f64),
//     u8 ndim, i64 dims[ndim], raw values
//   u64 FNV-1a of every preceding byte
// Model entries use parameter names; AdamW moments are "opt.m.<name>" and
// "opt.v.<name>".

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint8_t dtype = 0;
  std::vector<std::uint8_t> raw;

  template <class T>
  std::vector<T> values() const {
    if (dtype != (std::is_same_v<T, double> ? 1 : 0)) throw CheckpointError("entry " + name + " has a different dtype");
    std::vector<T> v(raw.size() / sizeof(T));
    std::memcpy(v.data(), raw.data(), raw.size());
    return v;
  }
  template <class T>
  static CheckpointEntry from(const std::string& name, const Shape& shape, const std::vector<T>& v) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    CheckpointEntry e{name, shape, std::uint8_t(std::is_same_v<T, double> ? 1 : 0), {}};
    e.raw.resize(v.size() * sizeof(T));
    std::memcpy(e.raw.data(), v.data(), e.raw.size());
    return e;
  }
};

struct Checkpoint {
  static constexpr char kMagic[8] = {'G', 'C', 'A', 'S', 'E', 'G', 'C', 'K'};
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t config_hash = 0;
  std::int64_t epoch = 0;  // completed epochs
  std::int64_t step = 0;   // completed optimizer steps
  double best_metric = -1;
  std::int64_t best_epoch = 0;
  std::string config_text;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

namespace ckpt_io {

template <class V>
void put(std::vector<std::uint8_t>& out, V v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(V));
}

struct Reader {
  const std::vector<std::uint8_t>& b;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > b.size()) throw CheckpointError("checkpoint truncated");
  }
  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, b.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace ckpt_io

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  using ckpt_io::put;
  std::vector<std::uint8_t> out(Checkpoint::kMagic, Checkpoint::kMagic + 8);
  put(out, Checkpoint::kVersion);
  put(out, c.config_hash);
  put(out, c.epoch);
  put(out, c.step);
  put(out, c.best_metric);
  put(out, c.best_epoch);
  put(out, static_cast<std::uint32_t>(c.config_text.size()));
  out.insert(out.end(), c.config_text.begin(), c.config_text.end());
  put(out, static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    put(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put(out, e.dtype);
    put(out, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put(out, static_cast<std::int64_t>(d));
    out.insert(out.end(), e.raw.begin(), e.raw.end());
  }
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto byte : out) h = (h ^ byte) * 0x100000001b3ull;
  put(out, h);
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& b) {
  if (b.size() < 16 || std::memcmp(b.data(), Checkpoint::kMagic, 8) != 0) throw CheckpointError("not a gcaseg checkpoint");
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < b.size() - 8; ++i) h = (h ^ b[i]) * 0x100000001b3ull;
  std::uint64_t stored;
  std::memcpy(&stored, b.data() + b.size() - 8, 8);
  if (stored != h) throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)");
  ckpt_io::Reader r{b, 8};
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_hash = r.get<std::uint64_t>();
  c.epoch = r.get<std::int64_t>();
  c.step = r.get<std::int64_t>();
  c.best_metric = r.get<double>();
  c.best_epoch = r.get<std::int64_t>();
  c.config_text = r.str(r.get<std::uint32_t>());
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < n; ++k) {
    CheckpointEntry e;
    e.name = r.str(r.get<std::uint16_t>());
    e.dtype = r.get<std::uint8_t>();
    if (e.dtype > 1) throw CheckpointError("entry " + e.name + ": unknown dtype");
    const auto nd = r.get<std::uint8_t>();
    std::int64_t count = 1;
    for (int d = 0; d < nd; ++d) {
      e.shape.push_back(r.get<std::int64_t>());
      if (e.shape.back() < 0) throw CheckpointError("entry " + e.name + ": negative extent");
      count *= e.shape.back();
    }
    const auto bytes = static_cast<std::size_t>(count) * (e.dtype ? 8 : 4);
    r.need(bytes);
    e.raw.assign(b.begin() + static_cast<std::ptrdiff_t>(r.pos), b.begin() + static_cast<std::ptrdiff_t>(r.pos + bytes));
    r.pos += bytes;
    c.entries.push_back(std::move(e));
  }
  if (r.pos != b.size() - 8) throw CheckpointError("trailing bytes in checkpoint");
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(tmp + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(tmp + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open checkpoint");
  std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(b);
}

template <class T>
void add_parameters(Checkpoint& c, const ParameterList<T>& params) {
  for (const auto& p : params) c.entries.push_back(CheckpointEntry::from(p.name, p.value.shape(), p.value.values()));
}

template <class T>
void add_optimizer(Checkpoint& c, const ParameterList<T>& params, const AdamWState<T>& st) {
  if (st.m.size() != params.size()) return;  // no step taken yet
  for (std::size_t k = 0; k < params.size(); ++k) {
    c.entries.push_back(CheckpointEntry::from("opt.m." + params[k].name, params[k].value.shape(), st.m[k]));
    c.entries.push_back(CheckpointEntry::from("opt.v." + params[k].name, params[k].value.shape(), st.v[k]));
  }
}

// Copies every named parameter out of the checkpoint; names and shapes must match exactly.
template <class T>
void load_parameters(const Checkpoint& c, ParameterList<T>& params) {
  std::size_t model_entries = 0;
  for (const auto& e : c.entries) model_entries += e.name.rfind("opt.", 0) != 0;
  if (model_entries != params.size())
    throw CheckpointError("checkpoint holds " + std::to_string(model_entries) + " parameters, model has " + std::to_string(params.size()));
  for (auto& p : params) {
    const auto* e = c.find(p.name);
    if (!e) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (e->shape != p.value.shape())
      throw CheckpointError("parameter " + p.name + ": checkpoint shape " + to_string(e->shape) + " vs model " + to_string(p.value.shape()));
    p.value.values() = e->template values<T>();
  }
}

template <class T>
void load_optimizer(const Checkpoint& c, const ParameterList<T>& params, AdamWState<T>& st) {
  st.m.clear(), st.v.clear();
  st.t = c.step;
  if (!c.find("opt.m." + params.front().name)) {
    st.reset(params);
    st.t = c.step;
    return;
  }
  for (const auto& p : params) {
    const auto* m = c.find("opt.m." + p.name);
    const auto* v = c.find("opt.v." + p.name);
    if (!m || !v) throw CheckpointError("checkpoint lacks optimizer state for " + p.name);
    st.m.push_back(m->template values<T>());
    st.v.push_back(v->template values<T>());
  }
}

}  // namespace gcaseg
