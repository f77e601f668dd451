#include "edlseg/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace edlseg {

namespace {

constexpr char kMagic[4] = {'E', 'D', 'T', 'N'};
constexpr std::uint32_t kF64 = 1;
constexpr std::uint32_t kI32 = 2;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error("tensor file " + path + ": " + what);
}

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(path, "truncated");
  return v;
}

void write_header(std::ofstream& out, std::uint32_t dtype,
                  const std::vector<std::size_t>& dims) {
  out.write(kMagic, 4);
  put(out, dtype);
  put(out, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) put(out, static_cast<std::uint64_t>(d));
}

std::vector<std::size_t> read_header(std::ifstream& in,
                                     const std::string& path,
                                     std::uint32_t want_dtype) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) fail(path, "bad magic");
  const auto dtype = get<std::uint32_t>(in, path);
  if (dtype != want_dtype) {
    fail(path, "dtype " + std::to_string(dtype) + ", expected " +
                   std::to_string(want_dtype));
  }
  const auto ndim = get<std::uint32_t>(in, path);
  if (ndim > 8) fail(path, "implausible rank");
  std::vector<std::size_t> dims(ndim);
  for (auto& d : dims) {
    d = static_cast<std::size_t>(get<std::uint64_t>(in, path));
  }
  return dims;
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  write_header(out, kF64, t.shape());
  out.write(reinterpret_cast<const char*>(t.values().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!out) fail(path, "write failed");
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  const auto dims = read_header(in, path, kF64);
  std::vector<double> data(shape_numel(dims));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) fail(path, "truncated payload");
  return Tensor::from_data(dims, std::move(data));
}

void save_i32(const std::string& path, const std::vector<std::int32_t>& data,
              const std::vector<std::size_t>& dims) {
  if (shape_numel(dims) != data.size()) fail(path, "dims/data mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  write_header(out, kI32, dims);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(std::int32_t)));
  if (!out) fail(path, "write failed");
}

std::pair<std::vector<std::int32_t>, std::vector<std::size_t>> load_i32(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  auto dims = read_header(in, path, kI32);
  std::vector<std::int32_t> data(shape_numel(dims));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(std::int32_t)));
  if (!in) fail(path, "truncated payload");
  return {std::move(data), std::move(dims)};
}

}  // namespace edlseg
