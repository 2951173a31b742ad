#include "quadbev/arrayio.hpp"

#include <cstring>
#include <fstream>

#include "quadbev/error.hpp"
#include "quadbev/rng.hpp"

namespace qbev::io {

namespace {

size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
    case DType::u8: return 1;
  }
  return 1;
}

template <typename T>
void append_pod(std::vector<uint8_t>& buf, T v) {
  const size_t off = buf.size();
  buf.resize(off + sizeof(T));
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <typename T>
T read_pod(const std::vector<uint8_t>& buf, size_t& off, const std::string& path) {
  check(off + sizeof(T) <= buf.size(), ErrCode::corrupt, "truncated record: " + path);
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

NamedArray NamedArray::from_tensor_f32(const std::string& name, const Tensor& t) {
  NamedArray a;
  a.name = name;
  a.dtype = DType::f32;
  a.dims = t.shape();
  a.raw.resize(static_cast<size_t>(t.numel()) * 4);
  for (long i = 0; i < t.numel(); ++i) {
    const float f = static_cast<float>(t[i]);
    std::memcpy(a.raw.data() + static_cast<size_t>(i) * 4, &f, 4);
  }
  return a;
}

NamedArray NamedArray::from_tensor_f64(const std::string& name, const Tensor& t) {
  NamedArray a;
  a.name = name;
  a.dtype = DType::f64;
  a.dims = t.shape();
  a.raw.resize(static_cast<size_t>(t.numel()) * 8);
  std::memcpy(a.raw.data(), t.data(), a.raw.size());
  return a;
}

NamedArray NamedArray::from_ints(const std::string& name, const std::vector<int32_t>& v,
                                 std::vector<int> dims) {
  NamedArray a;
  a.name = name;
  a.dtype = DType::i32;
  a.dims = dims.empty() ? std::vector<int>{static_cast<int>(v.size())} : std::move(dims);
  check_contract(a.count() == static_cast<long>(v.size()), "from_ints: dims mismatch");
  a.raw.resize(v.size() * 4);
  std::memcpy(a.raw.data(), v.data(), a.raw.size());
  return a;
}

NamedArray NamedArray::from_bytes(const std::string& name, const std::vector<uint8_t>& v) {
  NamedArray a;
  a.name = name;
  a.dtype = DType::u8;
  a.dims = {static_cast<int>(v.size())};
  a.raw = v;
  return a;
}

Tensor NamedArray::to_tensor() const {
  Tensor t(dims);
  if (dtype == DType::f32) {
    for (long i = 0; i < t.numel(); ++i) {
      float f;
      std::memcpy(&f, raw.data() + static_cast<size_t>(i) * 4, 4);
      t[i] = static_cast<double>(f);
    }
  } else if (dtype == DType::f64) {
    std::memcpy(t.data(), raw.data(), static_cast<size_t>(t.numel()) * 8);
  } else if (dtype == DType::i32) {
    for (long i = 0; i < t.numel(); ++i) {
      int32_t v;
      std::memcpy(&v, raw.data() + static_cast<size_t>(i) * 4, 4);
      t[i] = static_cast<double>(v);
    }
  } else {
    throw QbError(ErrCode::contract, "to_tensor: unsupported dtype for " + name);
  }
  return t;
}

std::vector<int32_t> NamedArray::to_ints() const {
  check_contract(dtype == DType::i32, "to_ints: not an i32 array: " + name);
  std::vector<int32_t> v(static_cast<size_t>(count()));
  std::memcpy(v.data(), raw.data(), raw.size());
  return v;
}

const NamedArray* Record::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

const NamedArray& Record::get(const std::string& name) const {
  const NamedArray* a = find(name);
  check(a != nullptr, ErrCode::corrupt, "record missing array: " + name);
  return *a;
}

void write_record(const std::string& path, const char magic[4], uint32_t version,
                  const std::vector<NamedArray>& arrays) {
  std::vector<uint8_t> buf;
  buf.insert(buf.end(), magic, magic + 4);
  append_pod(buf, version);
  append_pod(buf, static_cast<uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    append_pod(buf, static_cast<uint32_t>(a.name.size()));
    buf.insert(buf.end(), a.name.begin(), a.name.end());
    append_pod(buf, static_cast<uint8_t>(a.dtype));
    append_pod(buf, static_cast<uint8_t>(a.dims.size()));
    for (int d : a.dims) append_pod(buf, static_cast<uint32_t>(d));
    append_pod(buf, static_cast<uint64_t>(a.raw.size()));
    check_contract(a.raw.size() == static_cast<size_t>(a.count()) * dtype_size(a.dtype),
                   "write_record: payload size mismatch for " + a.name);
    buf.insert(buf.end(), a.raw.begin(), a.raw.end());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), ErrCode::io, "cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  check(f.good(), ErrCode::io, "write failed: " + path);
}

Record read_record(const std::string& path, const char magic[4], uint32_t expected_version) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrCode::io, "cannot open: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  size_t off = 0;
  check(buf.size() >= 4 && std::memcmp(buf.data(), magic, 4) == 0, ErrCode::corrupt,
        "bad magic in record: " + path);
  off = 4;
  Record rec;
  rec.version = read_pod<uint32_t>(buf, off, path);
  check(rec.version == expected_version, ErrCode::version,
        "record version " + std::to_string(rec.version) + " != expected " +
            std::to_string(expected_version) + " in " + path);
  const uint32_t n = read_pod<uint32_t>(buf, off, path);
  for (uint32_t i = 0; i < n; ++i) {
    NamedArray a;
    const uint32_t name_len = read_pod<uint32_t>(buf, off, path);
    check(off + name_len <= buf.size(), ErrCode::corrupt, "truncated record: " + path);
    a.name.assign(reinterpret_cast<const char*>(buf.data() + off), name_len);
    off += name_len;
    a.dtype = static_cast<DType>(read_pod<uint8_t>(buf, off, path));
    const uint8_t rank = read_pod<uint8_t>(buf, off, path);
    for (uint8_t r = 0; r < rank; ++r)
      a.dims.push_back(static_cast<int>(read_pod<uint32_t>(buf, off, path)));
    const uint64_t bytes = read_pod<uint64_t>(buf, off, path);
    check(bytes == static_cast<uint64_t>(a.count()) * dtype_size(a.dtype), ErrCode::corrupt,
          "array payload length mismatch for " + a.name + " in " + path);
    check(off + bytes <= buf.size(), ErrCode::corrupt, "truncated record: " + path);
    a.raw.assign(buf.begin() + static_cast<long>(off), buf.begin() + static_cast<long>(off + bytes));
    off += bytes;
    rec.arrays.push_back(std::move(a));
  }
  return rec;
}

uint64_t file_fnv1a(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrCode::io, "cannot open: " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return fnv1a64(buf.data(), buf.size());
}

}  // namespace qbev::io
