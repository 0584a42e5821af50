#pragma once

// MetaVolume: a dense [C, Z, Y, X] array with physical spacing, stored on disk
// as a plain-text header plus a raw little-endian payload in C order.
//
//   # instxai metavolume v1
//   dims = 2 64 64 64
//   spacing = 1 1 1
//   dtype = f32
//   byte_order = little
//   data_file = flair.raw
//   meta.<key> = <value>
//
// The payload file lives next to the header; `data_file` is relative to it.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "instxai/tensor.hpp"

namespace instxai {

class io_error : public error {
 public:
  using error::error;
};

enum class DType { f32, f64 };

inline const char* to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

using Spacing = std::array<double, 3>;  // mm along z, y, x

using Mask = Tensor<std::uint8_t>;

struct MetaVolume {
  Tensor<double> data;
  Spacing spacing{1.0, 1.0, 1.0};
  DType dtype = DType::f32;
  std::map<std::string, std::string> meta;

  const Shape& shape() const { return data.shape(); }
  double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

  template <class T>
  Tensor<T> tensor() const {
    return data.cast<T>();
  }

  template <class T>
  static MetaVolume from(const Tensor<T>& t, Spacing sp = {1.0, 1.0, 1.0},
                         DType dt = DType::f32) {
    MetaVolume v;
    v.data = t.template cast<double>();
    v.spacing = sp;
    v.dtype = dt;
    return v;
  }

  bool operator==(const MetaVolume&) const = default;
};

inline Mask to_mask(const MetaVolume& v, int channel = 0) {
  const Shape& s = v.shape();
  Mask m(Shape{1, s.z, s.y, s.x});
  const double* src = v.data.channel(channel);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = src[i] != 0.0 ? 1 : 0;
  return m;
}

inline MetaVolume from_mask(const Mask& m, Spacing sp = {1.0, 1.0, 1.0}) {
  return MetaVolume::from(m, sp, DType::f32);
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(buf[i], buf[sizeof(U) - 1 - i]);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U read_le(const unsigned char* p) {
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(buf[i], buf[sizeof(U) - 1 - i]);
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline std::filesystem::path payload_path_for(const std::filesystem::path& header) {
  auto p = header;
  p.replace_extension(".raw");
  return p;
}

inline void write_metavolume(const MetaVolume& v, const std::filesystem::path& header) {
  const Shape& s = v.shape();
  for (double sp : v.spacing)
    if (!(sp > 0.0)) throw io_error("write_metavolume: spacing must be positive");
  const auto payload = payload_path_for(header);
  {
    std::ofstream h(header, std::ios::binary);
    if (!h) throw io_error("cannot open " + header.string() + " for writing");
    h << "# instxai metavolume v1\n";
    h << "dims = " << s.c << ' ' << s.z << ' ' << s.y << ' ' << s.x << '\n';
    h << "spacing = " << detail::format_double(v.spacing[0]) << ' '
      << detail::format_double(v.spacing[1]) << ' ' << detail::format_double(v.spacing[2])
      << '\n';
    h << "dtype = " << to_string(v.dtype) << '\n';
    h << "byte_order = little\n";
    h << "data_file = " << payload.filename().string() << '\n';
    for (const auto& [k, val] : v.meta) {
      if (k.find_first_of("=\n") != std::string::npos ||
          val.find('\n') != std::string::npos)
        throw io_error("metadata key/value may not contain '=' or newlines: " + k);
      h << "meta." << k << " = " << val << '\n';
    }
  }
  std::ofstream d(payload, std::ios::binary);
  if (!d) throw io_error("cannot open " + payload.string() + " for writing");
  for (double x : v.data.values()) {
    if (v.dtype == DType::f32)
      detail::write_le(d, float(x));
    else
      detail::write_le(d, x);
  }
  if (!d) throw io_error("short write to " + payload.string());
}

inline MetaVolume read_metavolume(const std::filesystem::path& header) {
  std::ifstream h(header);
  if (!h) throw io_error("cannot open " + header.string());
  MetaVolume v;
  Shape dims{};
  bool have_dims = false, have_dtype = false, have_file = false;
  std::string data_file;
  std::string line;
  int lineno = 0;
  while (std::getline(h, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw io_error(header.string() + ":" + std::to_string(lineno) + ": malformed header line");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    std::istringstream is(val);
    if (key == "dims") {
      if (!(is >> dims.c >> dims.z >> dims.y >> dims.x) || dims.c <= 0 || dims.z <= 0 ||
          dims.y <= 0 || dims.x <= 0)
        throw io_error(header.string() + ": malformed dims");
      have_dims = true;
    } else if (key == "spacing") {
      if (!(is >> v.spacing[0] >> v.spacing[1] >> v.spacing[2]))
        throw io_error(header.string() + ": malformed spacing");
      for (double sp : v.spacing)
        if (!(sp > 0.0)) throw io_error(header.string() + ": spacing must be positive");
    } else if (key == "dtype") {
      if (val == "f32")
        v.dtype = DType::f32;
      else if (val == "f64")
        v.dtype = DType::f64;
      else
        throw io_error(header.string() + ": unknown dtype '" + val + "'");
      have_dtype = true;
    } else if (key == "byte_order") {
      if (val != "little") throw io_error(header.string() + ": unsupported byte order " + val);
    } else if (key == "data_file") {
      data_file = val;
      have_file = true;
    } else if (key.rfind("meta.", 0) == 0) {
      v.meta[key.substr(5)] = val;
    } else {
      throw io_error(header.string() + ": unknown header key '" + key + "'");
    }
  }
  if (!have_dims || !have_dtype || !have_file)
    throw io_error(header.string() + ": header lacks dims, dtype or data_file");

  const auto payload = header.parent_path() / data_file;
  std::ifstream d(payload, std::ios::binary);
  if (!d) throw io_error("cannot open payload " + payload.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(d)),
                                   std::istreambuf_iterator<char>());
  const std::size_t expect = dims.size() * dtype_size(v.dtype);
  if (bytes.size() != expect)
    throw io_error("payload length mismatch for " + payload.string() + ": expected " +
                   std::to_string(expect) + " bytes, found " + std::to_string(bytes.size()));
  v.data = Tensor<double>(dims);
  const std::size_t w = dtype_size(v.dtype);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const unsigned char* p = bytes.data() + i * w;
    v.data.data()[i] = v.dtype == DType::f32 ? double(detail::read_le<float>(p))
                                             : detail::read_le<double>(p);
  }
  return v;
}

}  // namespace instxai
