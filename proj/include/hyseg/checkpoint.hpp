#pragma once

// Binary checkpoints, little-endian:
//   "SMFC" | u32 version | u32 len + UTF-8 JSON {"model": {...}, "step": N}
//   | u32 count | count x (u32 len + name, u32 ndim, ndim x u32 extent, f32 payload)
// Optimizer moments go to a sibling "<path>.opt" file in the same layout with
// entries "<param>.exp_avg" and "<param>.exp_avg_sq".

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hyseg/config.hpp"
#include "hyseg/losses.hpp"
#include "hyseg/network.hpp"

namespace hyseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("truncated file while reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, const std::string& what) {
  const std::uint32_t n = get_u32(in, what);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw CheckpointError("truncated file while reading " + what);
  return s;
}

struct Entry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Archive {
  Json header;
  std::vector<Entry> entries;
};

inline void write_archive(const std::string& path, const Archive& a) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write("SMFC", 4);
  put_u32(out, kCheckpointVersion);
  put_string(out, a.header.dump());
  put_u32(out, static_cast<std::uint32_t>(a.entries.size()));
  for (const auto& e : a.entries) {
    put_string(out, e.name);
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : e.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  if (!out) throw IoError("write failed for " + path);
}

inline Archive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SMFC", 4) != 0) throw CheckpointError(path + ": bad magic");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported version " + std::to_string(version));
  }
  Archive a;
  const std::string text = get_string(in, "header");
  a.header = Json::parse(text, nullptr, false);
  if (a.header.is_discarded()) throw CheckpointError(path + ": header is not valid JSON");
  const std::uint32_t count = get_u32(in, "entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = get_string(in, "entry name");
    const std::uint32_t nd = get_u32(in, e.name + " rank");
    for (std::uint32_t d = 0; d < nd; ++d) e.shape.push_back(get_u32(in, e.name + " shape"));
    e.data.resize(numel(e.shape));
    for (auto& f : e.data) f = std::bit_cast<float>(get_u32(in, e.name + " data"));
    a.entries.push_back(std::move(e));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path + ": trailing bytes");
  return a;
}

template <typename T>
std::vector<float> to_f32(std::span<const T> v) {
  return std::vector<float>(v.begin(), v.end());
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, std::size_t step) {
  detail::Archive a;
  a.header = {{"model", to_json(model.config())}, {"step", step}};
  for (const auto& [name, p] : model.parameters()) a.entries.push_back({name, p.shape(), detail::to_f32(p.data())});
  detail::write_archive(path, a);
}

// Copies stored parameters into `model`. Names and shapes must match the
// model's declaration order; the first mismatch is reported by name.
template <typename T>
std::size_t load_parameters(const std::string& path, Model<T>& model) {
  const auto a = detail::read_archive(path);
  const auto params = model.parameters();
  const std::size_t n = std::min(params.size(), a.entries.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = a.entries[i];
    const auto& [name, p] = params[i];
    if (e.name != name || e.shape != p.shape()) {
      throw CheckpointError("parameter mismatch at " + name + " " + to_string(p.shape()) + ": checkpoint has " +
                            e.name + " " + to_string(e.shape));
    }
  }
  if (params.size() != a.entries.size()) {
    const std::string first = params.size() > n ? params[n].first : a.entries[n].name;
    throw CheckpointError("parameter mismatch at " + first + ": model has " + std::to_string(params.size()) +
                          " tensors, checkpoint " + std::to_string(a.entries.size()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> p = params[i].second;
    auto dst = p.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(a.entries[i].data[j]);
  }
  return a.header.value("step", std::size_t{0});
}

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  std::size_t step = 0;
};

// Rebuilds the model from the config stored in the checkpoint.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  const auto a = detail::read_archive(path);
  if (!a.header.contains("model")) throw CheckpointError(path + ": header has no model config");
  ModelConfig cfg;
  try {
    cfg = model_from_json(a.header.at("model"));
  } catch (const ConfigError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
  LoadedCheckpoint<T> out{Model<T>(cfg, 0), 0};
  out.step = load_parameters(path, out.model);
  return out;
}

inline std::string optimizer_path(const std::string& checkpoint) { return checkpoint + ".opt"; }

template <typename T>
void save_optimizer(const std::string& path, AdamW<T>& opt, const ParamList<T>& params) {
  detail::Archive a;
  const auto& c = opt.config();
  a.header = {{"optimizer", "adamw"},
              {"steps", opt.steps()},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"weight_decay", c.weight_decay}};
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  for (std::size_t i = 0; i < params.size() && i < m.size(); ++i) {
    a.entries.push_back({params[i].first + ".exp_avg", params[i].second.shape(), detail::to_f32<T>(m[i])});
    a.entries.push_back({params[i].first + ".exp_avg_sq", params[i].second.shape(), detail::to_f32<T>(v[i])});
  }
  detail::write_archive(path, a);
}

template <typename T>
void load_optimizer(const std::string& path, AdamW<T>& opt, const ParamList<T>& params) {
  const auto a = detail::read_archive(path);
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  m.clear();
  v.clear();
  opt.set_steps(a.header.value("steps", std::size_t{0}));
  if (a.entries.empty()) return;
  if (a.entries.size() != 2 * params.size()) {
    throw CheckpointError(path + ": optimizer state holds " + std::to_string(a.entries.size() / 2) +
                          " tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& em = a.entries[2 * i];
    const auto& ev = a.entries[2 * i + 1];
    if (em.name != params[i].first + ".exp_avg" || em.shape != params[i].second.shape()) {
      throw CheckpointError("optimizer state mismatch at " + params[i].first);
    }
    m.emplace_back(em.data.begin(), em.data.end());
    v.emplace_back(ev.data.begin(), ev.data.end());
  }
}

}  // namespace hyseg
