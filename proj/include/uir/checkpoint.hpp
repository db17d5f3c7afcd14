#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "uir/errors.hpp"
#include "uir/tensor.hpp"

namespace uir {

// Versioned container for named double arrays plus string metadata. Used for
// model checkpoints, optimizer state and pretrained feature-extractor weights.
// Layout is fully deterministic (sorted keys, fixed-width little-endian
// fields), so identical state serializes to identical bytes.
struct Checkpoint {
  static constexpr uint32_t kFormatVersion = 1;
  static constexpr char kMagic[4] = {'U', 'I', 'R', 'C'};

  uint64_t config_digest = 0;
  std::map<std::string, std::string> metadata;
  std::map<std::string, Tensor> arrays;

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::IOFailure, "cannot write " + path.string());
    out.write(kMagic, 4);
    write_u32(out, kFormatVersion);
    write_u64(out, config_digest);
    write_u32(out, static_cast<uint32_t>(metadata.size()));
    for (const auto& [k, v] : metadata) {
      write_str(out, k);
      write_str(out, v);
    }
    write_u32(out, static_cast<uint32_t>(arrays.size()));
    for (const auto& [name, t] : arrays) {
      write_str(out, name);
      write_u32(out, static_cast<uint32_t>(t.dims.size()));
      for (int d : t.dims) write_u32(out, static_cast<uint32_t>(d));
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    require(out.good(), ErrorKind::IOFailure, "write failed: " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::MissingFile, path.string());
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::memcmp(magic, kMagic, 4) == 0, ErrorKind::IOFailure,
            "not a checkpoint file: " + path.string());
    uint32_t version = read_u32(in);
    require(version == kFormatVersion, ErrorKind::IOFailure,
            "unsupported checkpoint version in " + path.string());
    Checkpoint ck;
    ck.config_digest = read_u64(in);
    uint32_t nmeta = read_u32(in);
    for (uint32_t i = 0; i < nmeta; ++i) {
      std::string k = read_str(in);
      std::string v = read_str(in);
      ck.metadata[k] = v;
    }
    uint32_t narr = read_u32(in);
    for (uint32_t i = 0; i < narr; ++i) {
      std::string name = read_str(in);
      uint32_t ndim = read_u32(in);
      std::vector<int> dims(ndim);
      for (uint32_t d = 0; d < ndim; ++d) dims[d] = static_cast<int>(read_u32(in));
      Tensor t(dims);
      in.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
      require(in.good(), ErrorKind::IOFailure, "truncated checkpoint: " + path.string());
      ck.arrays.emplace(std::move(name), std::move(t));
    }
    return ck;
  }

 private:
  static void write_u32(std::ofstream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  static void write_u64(std::ofstream& out, uint64_t v) {
    write_u32(out, static_cast<uint32_t>(v));
    write_u32(out, static_cast<uint32_t>(v >> 32));
  }
  static void write_str(std::ofstream& out, const std::string& s) {
    write_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  static uint32_t read_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }
  static uint64_t read_u64(std::ifstream& in) {
    uint64_t lo = read_u32(in);
    uint64_t hi = read_u32(in);
    return lo | (hi << 32);
  }
  static std::string read_str(std::ifstream& in) {
    uint32_t n = read_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    return s;
  }
};

}  // namespace uir
