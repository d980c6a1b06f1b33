#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ripcn/errors.hpp"
#include "ripcn/rng.hpp"
#include "ripcn/tensor.hpp"

namespace ripcn {

// Named trainable parameters. Iteration is sorted by name, so checkpoint
// bytes and optimizer sweeps are reproducible.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (params_.count(name)) throw parameter_error("duplicate parameter name: " + name);
    auto [it, ok] = params_.emplace(name, std::move(t));
    (void)ok;
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw parameter_error("unknown parameter: " + name);
    return it->second;
  }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw parameter_error("unknown parameter: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // Flat binary checkpoint: magic "RIPCN\0", version u32, then per
  // parameter (name length u32, UTF-8 name, rank u32, dims u64 each,
  // payload little-endian f64).
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 6);
    write_u32(os, kFormatVersion);
    for (const auto& [name, t] : params_) {
      write_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) write_u64(os, static_cast<std::uint64_t>(d));
      for (double v : t.data()) write_f64(os, v);
    }
    if (!os) throw data_error("checkpoint write failed: " + path);
  }

  static ParamStore load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open checkpoint: " + path);
    char magic[6];
    is.read(magic, 6);
    if (!is || std::memcmp(magic, kMagic, 6) != 0) {
      throw data_error("not a checkpoint file (bad magic): " + path);
    }
    const std::uint32_t version = read_u32(is);
    if (version != kFormatVersion) {
      throw data_error("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    }
    ParamStore store;
    while (true) {
      std::uint32_t name_len;
      if (!try_read_u32(is, name_len)) break;
      std::string name(name_len, '\0');
      is.read(name.data(), name_len);
      const std::uint32_t rank = read_u32(is);
      Shape shape(rank);
      for (auto& d : shape) d = static_cast<std::size_t>(read_u64(is));
      std::vector<double> data(detail::numel(shape));
      for (auto& v : data) v = read_f64(is);
      if (!is) throw data_error("truncated checkpoint: " + path);
      store.add(name, Tensor::param(std::move(shape), std::move(data)));
    }
    return store;
  }

  // Human-readable mirror of the checkpoint, for debugging only.
  void save_json(const std::string& path) const {
    nlohmann::json j;
    for (const auto& [name, t] : params_) {
      j[name] = {{"shape", t.shape()}, {"data", t.data()}};
    }
    std::ofstream os(path);
    if (!os) throw data_error("cannot open json mirror for writing: " + path);
    os << j.dump(2) << "\n";
  }

 private:
  static constexpr const char* kMagic = "RIPCN";  // includes the trailing NUL
  static constexpr std::uint32_t kFormatVersion = 1;

  static void write_u32(std::ofstream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
  }
  static void write_u64(std::ofstream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
  }
  static void write_f64(std::ofstream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
  }
  static bool try_read_u32(std::ifstream& is, std::uint32_t& v) {
    char b[4];
    is.read(b, 4);
    if (is.gcount() != 4) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return true;
  }
  static std::uint32_t read_u32(std::ifstream& is) {
    std::uint32_t v;
    if (!try_read_u32(is, v)) throw data_error("truncated checkpoint header");
    return v;
  }
  static std::uint64_t read_u64(std::ifstream& is) {
    char b[8];
    is.read(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  static double read_f64(std::ifstream& is) {
    const std::uint64_t bits = read_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::map<std::string, Tensor> params_;
};

// Glorot-uniform initialized parameter, registered under `name`.
inline Tensor& init_param(ParamStore& store, const std::string& name, Shape shape, Rng& rng,
                          double fan_in, double fan_out) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<double> data(detail::numel(shape));
  for (auto& v : data) v = rng.uniform(-a, a);
  return store.add(name, Tensor::param(std::move(shape), std::move(data)));
}

inline Tensor& init_zeros(ParamStore& store, const std::string& name, Shape shape) {
  return store.add(name, Tensor::param(std::move(shape),
                                       std::vector<double>(detail::numel(shape), 0.0)));
}

}  // namespace ripcn
