#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msf/labels.hpp"
#include "msf/tensor.hpp"

namespace msf {

static_assert(std::endian::native == std::endian::little,
              "T4 files are little-endian; big-endian hosts need byte swapping");

enum class T4Dtype : std::uint8_t { F32 = 0, I32 = 1, U8 = 2 };

// In-memory form of a T4 file: magic "T4\n", dtype byte, rank byte, rank
// u64 dims, then the row-major payload.
struct T4Data {
  T4Dtype dtype = T4Dtype::F32;
  std::vector<std::uint64_t> dims;
  std::vector<float> f32;
  std::vector<std::int32_t> i32;
  std::vector<std::uint8_t> u8;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline std::size_t t4_element_size(T4Dtype d) {
  switch (d) {
    case T4Dtype::F32: return 4;
    case T4Dtype::I32: return 4;
    case T4Dtype::U8: return 1;
  }
  throw io_error("T4: unknown dtype code " + std::to_string(static_cast<int>(d)));
}

}  // namespace detail

inline void write_t4(const std::filesystem::path& path, const T4Data& data) {
  if (data.dims.size() > 4) throw io_error("T4: rank must be <= 4");
  const std::uint64_t n = data.numel();
  const void* payload = nullptr;
  std::size_t payload_bytes = 0;
  switch (data.dtype) {
    case T4Dtype::F32:
      if (data.f32.size() != n) throw io_error("T4: f32 payload size mismatch");
      payload = data.f32.data();
      payload_bytes = n * 4;
      break;
    case T4Dtype::I32:
      if (data.i32.size() != n) throw io_error("T4: i32 payload size mismatch");
      payload = data.i32.data();
      payload_bytes = n * 4;
      break;
    case T4Dtype::U8:
      if (data.u8.size() != n) throw io_error("T4: u8 payload size mismatch");
      payload = data.u8.data();
      payload_bytes = n;
      break;
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("T4: cannot open '" + path.string() + "' for writing");
  os.write("T4\n", 3);
  const auto dtype = static_cast<char>(data.dtype);
  const auto rank = static_cast<char>(data.dims.size());
  os.write(&dtype, 1);
  os.write(&rank, 1);
  for (std::uint64_t d : data.dims) {
    os.write(reinterpret_cast<const char*>(&d), 8);
  }
  if (payload_bytes > 0) os.write(static_cast<const char*>(payload), payload_bytes);
  if (!os) throw io_error("T4: write failed for '" + path.string() + "'");
}

inline T4Data read_t4(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("T4: cannot open '" + path.string() + "'");
  char magic[3];
  if (!is.read(magic, 3) || std::memcmp(magic, "T4\n", 3) != 0) {
    throw io_error("T4: bad magic in '" + path.string() + "'");
  }
  char dtype_c = 0, rank_c = 0;
  if (!is.read(&dtype_c, 1) || !is.read(&rank_c, 1)) {
    throw io_error("T4: truncated header in '" + path.string() + "'");
  }
  const auto dtype_v = static_cast<std::uint8_t>(dtype_c);
  if (dtype_v > 2) {
    throw io_error("T4: unknown dtype code " + std::to_string(dtype_v) + " in '" + path.string() +
                   "'");
  }
  const auto rank = static_cast<std::uint8_t>(rank_c);
  if (rank > 4) throw io_error("T4: rank " + std::to_string(rank) + " exceeds 4");

  T4Data data;
  data.dtype = static_cast<T4Dtype>(dtype_v);
  data.dims.resize(rank);
  for (std::uint8_t i = 0; i < rank; ++i) {
    if (!is.read(reinterpret_cast<char*>(&data.dims[i]), 8)) {
      throw io_error("T4: truncated header in '" + path.string() + "'");
    }
  }
  const std::uint64_t n = data.numel();
  const std::size_t bytes = n * detail::t4_element_size(data.dtype);
  char* dst = nullptr;
  switch (data.dtype) {
    case T4Dtype::F32:
      data.f32.resize(n);
      dst = reinterpret_cast<char*>(data.f32.data());
      break;
    case T4Dtype::I32:
      data.i32.resize(n);
      dst = reinterpret_cast<char*>(data.i32.data());
      break;
    case T4Dtype::U8:
      data.u8.resize(n);
      dst = reinterpret_cast<char*>(data.u8.data());
      break;
  }
  if (bytes > 0 && !is.read(dst, bytes)) {
    throw io_error("T4: truncated payload in '" + path.string() + "'");
  }
  // trailing bytes mean the header lied about the size
  is.peek();
  if (!is.eof()) throw io_error("T4: trailing bytes after payload in '" + path.string() + "'");
  return data;
}

// dims read back as a tensor shape (rank >= 1)
inline Shape t4_shape(const T4Data& d) {
  if (d.dims.empty()) throw io_error("T4: rank-0 files are not tensors");
  Shape s;
  s.rank = static_cast<int>(d.dims.size());
  for (std::size_t i = 0; i < d.dims.size(); ++i) s.d[i] = static_cast<std::int64_t>(d.dims[i]);
  return s;
}

inline void write_t4_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  T4Data d;
  d.dtype = T4Dtype::F32;
  for (int i = 0; i < t.shape().rank; ++i) d.dims.push_back(static_cast<std::uint64_t>(t.shape()[i]));
  d.f32.assign(t.data().begin(), t.data().end());
  write_t4(path, d);
}

inline Tensor<float> read_t4_tensor(const std::filesystem::path& path) {
  const T4Data d = read_t4(path);
  if (d.dtype != T4Dtype::F32) throw io_error("T4: '" + path.string() + "' is not an f32 tensor");
  return Tensor<float>::from_data(t4_shape(d), d.f32);
}

inline void write_t4_labels(const std::filesystem::path& path, const LabelMap& labels) {
  T4Data d;
  d.dtype = T4Dtype::U8;
  d.dims = {static_cast<std::uint64_t>(labels.height), static_cast<std::uint64_t>(labels.width)};
  d.u8 = labels.ids;
  write_t4(path, d);
}

inline LabelMap read_t4_labels(const std::filesystem::path& path) {
  const T4Data d = read_t4(path);
  if (d.dtype != T4Dtype::U8 || d.dims.size() != 2) {
    throw io_error("T4: '" + path.string() + "' is not a rank-2 u8 label map");
  }
  LabelMap out;
  out.height = static_cast<std::int64_t>(d.dims[0]);
  out.width = static_cast<std::int64_t>(d.dims[1]);
  out.ids = d.u8;
  return out;
}

}  // namespace msf
