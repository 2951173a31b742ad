#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quadbev/tensor.hpp"

namespace qbev::io {

enum class DType : uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3 };

// One named array inside a record: name, dtype tag, rank, dims, then a
// length-prefixed little-endian payload.
struct NamedArray {
  std::string name;
  DType dtype = DType::f32;
  std::vector<int> dims;
  std::vector<uint8_t> raw;

  long count() const {
    long n = 1;
    for (int d : dims) n *= d;
    return n;
  }

  static NamedArray from_tensor_f32(const std::string& name, const Tensor& t);
  static NamedArray from_tensor_f64(const std::string& name, const Tensor& t);
  static NamedArray from_ints(const std::string& name, const std::vector<int32_t>& v,
                              std::vector<int> dims = {});
  static NamedArray from_bytes(const std::string& name, const std::vector<uint8_t>& v);

  Tensor to_tensor() const;  // f32/f64/i32 -> double tensor
  std::vector<int32_t> to_ints() const;
};

struct Record {
  uint32_t version = 0;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  const NamedArray& get(const std::string& name) const;  // throws E_CORRUPT when absent
  bool has(const std::string& name) const { return find(name) != nullptr; }
};

// magic is exactly 4 bytes ("QBEV" records, "QBCK" checkpoints).
void write_record(const std::string& path, const char magic[4], uint32_t version,
                  const std::vector<NamedArray>& arrays);
Record read_record(const std::string& path, const char magic[4], uint32_t expected_version);

uint64_t file_fnv1a(const std::string& path);  // content digest; throws E_IO

}  // namespace qbev::io
