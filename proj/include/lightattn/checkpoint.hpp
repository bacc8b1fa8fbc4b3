#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lightattn/tensor.hpp"

namespace lightattn {

// Flat little-endian container: magic, version, config JSON, then named
// row-major float64 payloads. Loading and re-saving reproduces the bytes.
namespace checkpoint {

constexpr char kMagic[4] = {'L', 'A', 'T', 'N'};
constexpr std::uint32_t kVersion = 1;

struct Entry {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

struct File {
  std::string config_json;
  std::vector<Entry> entries;
};

namespace detail {
template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("checkpoint: truncated file");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  auto n = read_pod<std::uint64_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw FormatError("checkpoint: truncated string");
  return s;
}
}  // namespace detail

inline void save(const std::string& path, const std::string& config_json,
                 const std::vector<std::pair<std::string, Tensor>>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  detail::write_pod<std::uint32_t>(os, kVersion);
  detail::write_string(os, config_json);
  detail::write_pod<std::uint64_t>(os, params.size());
  for (const auto& [name, tensor] : params) {
    detail::write_string(os, name);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.shape().size()));
    for (int d : tensor.shape()) detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(tensor.data().data()),
             static_cast<std::streamsize>(tensor.data().size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write failure on " + path);
}

inline File load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic in " + path);
  }
  auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  File f;
  f.config_json = detail::read_string(is);
  auto n = detail::read_pod<std::uint64_t>(is);
  f.entries.resize(n);
  for (auto& e : f.entries) {
    e.name = detail::read_string(is);
    auto ndim = detail::read_pod<std::uint32_t>(is);
    e.shape.resize(ndim);
    std::int64_t numel = 1;
    for (auto& d : e.shape) {
      d = static_cast<int>(detail::read_pod<std::uint32_t>(is));
      numel *= d;
    }
    e.data.resize(static_cast<std::size_t>(numel));
    is.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    if (!is) throw FormatError("checkpoint: truncated payload for " + e.name);
  }
  char extra;
  if (is.read(&extra, 1)) throw FormatError("checkpoint: trailing bytes in " + path);
  return f;
}

inline void save(const std::string& path, const File& f) {
  std::vector<std::pair<std::string, Tensor>> params;
  params.reserve(f.entries.size());
  for (const auto& e : f.entries) {
    params.emplace_back(e.name, Tensor::from(e.shape, e.data));
  }
  save(path, f.config_json, params);
}

// Copies payloads into an existing parameter set, matching by name.
inline void restore(const File& f,
                    std::vector<std::pair<std::string, Tensor>>& params) {
  if (f.entries.size() != params.size()) {
    throw FormatError("checkpoint: parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = f.entries[i];
    auto& [name, tensor] = params[i];
    if (e.name != name) {
      throw FormatError("checkpoint: parameter order mismatch at " + e.name +
                        " vs " + name);
    }
    if (e.shape != tensor.shape()) {
      throw FormatError("checkpoint: shape mismatch for " + name);
    }
    tensor.data() = e.data;
  }
}

}  // namespace checkpoint
}  // namespace lightattn
