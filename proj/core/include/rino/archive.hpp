#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <array>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace rino {

using Digest = std::array<std::uint8_t, 32>;

/// SHA-256 of a byte string.
Digest sha256(std::string_view bytes);
std::string to_hex(const Digest& d);

/// Incremental content hash over typed values; used as the cache key.
class ContentHasher {
 public:
  void add_bytes(const void* data, std::size_t n);
  void add_u64(std::uint64_t v) { add_bytes(&v, sizeof v); }
  void add_doubles(const double* data, std::size_t n) { add_bytes(data, n * sizeof(double)); }
  void add_string(std::string_view s) {
    add_u64(s.size());
    add_bytes(s.data(), s.size());
  }
  Digest finish() const { return sha256(buffer_); }

 private:
  std::string buffer_;
};

std::uint32_t crc32_of(std::string_view bytes);

struct NamedArray {
  std::vector<std::uint64_t> shape;
  std::vector<double> data;
};

/// Named arrays of 64-bit floats, serialized as
///
///   "RINO" | u32 version | 32-byte content hash | u32 count |
///   count x { u32 name length | name | u32 rank | u64 dims[rank] | f64 data }
///   | u32 CRC32 of all preceding bytes
///
/// All integers and floats little-endian. Matrices are stored row-major;
/// complex arrays carry a trailing dimension of size 2.
class ArrayArchive {
 public:
  static constexpr std::string_view kMagic = "RINO";

  std::uint32_t version = 1;
  Digest hash{};

  void put(const std::string& name, std::vector<std::uint64_t> shape, std::vector<double> data);
  void put_matrix(const std::string& name, const Eigen::MatrixXd& m);
  void put_complex_matrix(const std::string& name, const Eigen::MatrixXcd& m);
  void put_vector(const std::string& name, const Eigen::VectorXd& v);
  void put_scalar(const std::string& name, double v) { put(name, {}, {v}); }
  /// Triplets (row, col, value) plus a "<name>.dims" record.
  void put_sparse(const std::string& name, const Eigen::SparseMatrix<double>& m);
  void put_complex_sparse(const std::string& name, const Eigen::SparseMatrix<std::complex<double>>& m);

  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  const NamedArray& get(const std::string& name) const;
  Eigen::MatrixXd get_matrix(const std::string& name) const;
  Eigen::MatrixXcd get_complex_matrix(const std::string& name) const;
  Eigen::VectorXd get_vector(const std::string& name) const;
  double get_scalar(const std::string& name) const;
  Eigen::SparseMatrix<double> get_sparse(const std::string& name) const;
  Eigen::SparseMatrix<std::complex<double>> get_complex_sparse(const std::string& name) const;

  const std::map<std::string, NamedArray>& arrays() const { return arrays_; }

  std::string encode() const;
  /// Throws ChecksumError on truncation, bad magic or CRC mismatch.
  static ArrayArchive decode(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static ArrayArchive load(const std::filesystem::path& path);

 private:
  std::map<std::string, NamedArray> arrays_;
};

}  // namespace rino
