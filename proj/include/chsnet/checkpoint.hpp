#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "chsnet/config.hpp"
#include "chsnet/network.hpp"

namespace chs {

inline constexpr char kCheckpointMagic[5] = {'C', 'H', 'S', 'N', '\x01'};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw DataError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  if (n > (1u << 24)) throw DataError("corrupt checkpoint string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataError("truncated checkpoint");
  return s;
}

}  // namespace detail

/// Layout (all integers u64 little-endian):
///   magic "CHSN\x01"
///   config text (sorted `key = value` lines)
///   tensor count, then per tensor: name, rank, dims, float64 values
/// Every store entry is written, running statistics included.
template <typename T>
void save_checkpoint(std::ostream& out, const ModelGraph<T>& model) {
  KeyValues kv;
  write_network(kv, model.config(), model.kind());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_string(out, kv.str());
  const auto& entries = model.store().entries();
  detail::put_u64(out, entries.size());
  for (const auto& e : entries) {
    detail::put_string(out, e.name);
    detail::put_u64(out, e.tensor->rank());
    for (auto d : e.tensor->shape()) detail::put_u64(out, d);
    for (std::size_t i = 0; i < e.tensor->size(); ++i) {
      detail::put_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>((*e.tensor)[i])));
    }
  }
  if (!out) throw DataError("checkpoint write failed");
}

template <typename T>
void save_checkpoint(const fs::path& path, const ModelGraph<T>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  save_checkpoint(out, model);
}

/// Rebuilds the model from the stored config and loads every tensor,
/// checking names and shapes against the freshly built graph.
template <typename T = double>
std::unique_ptr<ModelGraph<T>> load_checkpoint(std::istream& in, const std::string& origin = "checkpoint") {
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw DataError(origin + ": not a checkpoint (bad magic or version)");
  }
  const KeyValues kv = KeyValues::parse(detail::get_string(in), origin);
  NetworkConfig cfg;
  ModelKind kind = ModelKind::chs;
  read_network(kv, cfg, kind);
  kv.check_all_used();
  auto model = std::make_unique<ModelGraph<T>>(cfg, kind);
  const auto& entries = model->store().entries();
  const std::uint64_t count = detail::get_u64(in);
  if (count != entries.size()) {
    throw DataError(origin + ": holds " + std::to_string(count) + " tensors, model has " +
                    std::to_string(entries.size()));
  }
  for (const auto& e : entries) {
    const std::string name = detail::get_string(in);
    if (name != e.name) throw DataError(origin + ": expected tensor " + e.name + ", found " + name);
    Shape shape(detail::get_u64(in));
    for (auto& d : shape) d = detail::get_u64(in);
    if (shape != e.tensor->shape()) {
      throw DataError(origin + ": " + name + " has shape " + shape_str(shape) + ", model expects " +
                      shape_str(e.tensor->shape()));
    }
    for (std::size_t i = 0; i < e.tensor->size(); ++i) {
      (*e.tensor)[i] = static_cast<T>(std::bit_cast<double>(detail::get_u64(in)));
    }
  }
  return model;
}

template <typename T = double>
std::unique_ptr<ModelGraph<T>> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return load_checkpoint<T>(in, path.string());
}

}  // namespace chs
