#include "rino/archive.hpp"

#include "rino/error.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

namespace rino {

Digest sha256(std::string_view bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size()) {
    throw Error("SHA-256 computation failed");
  }
  return out;
}

std::string to_hex(const Digest& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (auto b : d) {
    s += kHex[b >> 4];
    s += kHex[b & 15];
  }
  return s;
}

void ContentHasher::add_bytes(const void* data, std::size_t n) {
  buffer_.append(static_cast<const char*>(data), n);
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large buffers.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

template <typename T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}
  template <typename T>
  T read() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw ChecksumError("archive truncated at byte " + std::to_string(pos_));
    }
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void ArrayArchive::put(const std::string& name, std::vector<std::uint64_t> shape, std::vector<double> data) {
  std::uint64_t count = 1;
  for (auto d : shape) count *= d;
  if (count != data.size()) throw Error("array '" + name + "' size does not match its shape");
  arrays_[name] = NamedArray{std::move(shape), std::move(data)};
}

void ArrayArchive::put_matrix(const std::string& name, const Eigen::MatrixXd& m) {
  std::vector<double> d(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(d.data(), m.rows(), m.cols()) = m;
  put(name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, std::move(d));
}

void ArrayArchive::put_complex_matrix(const std::string& name, const Eigen::MatrixXcd& m) {
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(m.size()) * 2);
  for (long i = 0; i < m.rows(); ++i) {
    for (long j = 0; j < m.cols(); ++j) {
      d.push_back(m(i, j).real());
      d.push_back(m(i, j).imag());
    }
  }
  put(name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols()), 2}, std::move(d));
}

void ArrayArchive::put_vector(const std::string& name, const Eigen::VectorXd& v) {
  put(name, {static_cast<std::uint64_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

void ArrayArchive::put_sparse(const std::string& name, const Eigen::SparseMatrix<double>& m) {
  std::vector<double> d;
  for (int k = 0; k < m.outerSize(); ++k) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it) {
      d.push_back(static_cast<double>(it.row()));
      d.push_back(static_cast<double>(it.col()));
      d.push_back(it.value());
    }
  }
  const auto nnz = d.size() / 3;
  put(name, {nnz, 3}, std::move(d));
  put(name + ".dims", {2}, {static_cast<double>(m.rows()), static_cast<double>(m.cols())});
}

void ArrayArchive::put_complex_sparse(const std::string& name, const Eigen::SparseMatrix<std::complex<double>>& m) {
  std::vector<double> d;
  for (int k = 0; k < m.outerSize(); ++k) {
    for (Eigen::SparseMatrix<std::complex<double>>::InnerIterator it(m, k); it; ++it) {
      d.push_back(static_cast<double>(it.row()));
      d.push_back(static_cast<double>(it.col()));
      d.push_back(it.value().real());
      d.push_back(it.value().imag());
    }
  }
  const auto nnz = d.size() / 4;
  put(name, {nnz, 4}, std::move(d));
  put(name + ".dims", {2}, {static_cast<double>(m.rows()), static_cast<double>(m.cols())});
}

const NamedArray& ArrayArchive::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw DataError("archive has no array named '" + name + "'");
  return it->second;
}

Eigen::MatrixXd ArrayArchive::get_matrix(const std::string& name) const {
  const auto& a = get(name);
  if (a.shape.size() != 2) throw DataError("array '" + name + "' is not a matrix");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      a.data.data(), static_cast<long>(a.shape[0]), static_cast<long>(a.shape[1]));
}

Eigen::MatrixXcd ArrayArchive::get_complex_matrix(const std::string& name) const {
  const auto& a = get(name);
  if (a.shape.size() != 3 || a.shape[2] != 2) throw DataError("array '" + name + "' is not a complex matrix");
  Eigen::MatrixXcd m(static_cast<long>(a.shape[0]), static_cast<long>(a.shape[1]));
  std::size_t k = 0;
  for (long i = 0; i < m.rows(); ++i) {
    for (long j = 0; j < m.cols(); ++j, k += 2) m(i, j) = {a.data[k], a.data[k + 1]};
  }
  return m;
}

Eigen::VectorXd ArrayArchive::get_vector(const std::string& name) const {
  const auto& a = get(name);
  if (a.shape.size() != 1) throw DataError("array '" + name + "' is not a vector");
  return Eigen::Map<const Eigen::VectorXd>(a.data.data(), static_cast<long>(a.data.size()));
}

double ArrayArchive::get_scalar(const std::string& name) const {
  const auto& a = get(name);
  if (a.data.size() != 1) throw DataError("array '" + name + "' is not a scalar");
  return a.data[0];
}

Eigen::SparseMatrix<double> ArrayArchive::get_sparse(const std::string& name) const {
  const auto& a = get(name);
  const auto& dims = get(name + ".dims");
  if (a.shape.size() != 2 || a.shape[1] != 3 || dims.data.size() != 2) {
    throw DataError("array '" + name + "' is not a sparse matrix");
  }
  std::vector<Eigen::Triplet<double>> trips;
  for (std::size_t k = 0; k < a.data.size(); k += 3) {
    trips.emplace_back(static_cast<int>(a.data[k]), static_cast<int>(a.data[k + 1]), a.data[k + 2]);
  }
  Eigen::SparseMatrix<double> m(static_cast<long>(dims.data[0]), static_cast<long>(dims.data[1]));
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

Eigen::SparseMatrix<std::complex<double>> ArrayArchive::get_complex_sparse(const std::string& name) const {
  const auto& a = get(name);
  const auto& dims = get(name + ".dims");
  if (a.shape.size() != 2 || a.shape[1] != 4 || dims.data.size() != 2) {
    throw DataError("array '" + name + "' is not a complex sparse matrix");
  }
  std::vector<Eigen::Triplet<std::complex<double>>> trips;
  for (std::size_t k = 0; k < a.data.size(); k += 4) {
    trips.emplace_back(static_cast<int>(a.data[k]), static_cast<int>(a.data[k + 1]),
                       std::complex<double>(a.data[k + 2], a.data[k + 3]));
  }
  Eigen::SparseMatrix<std::complex<double>> m(static_cast<long>(dims.data[0]), static_cast<long>(dims.data[1]));
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

std::string ArrayArchive::encode() const {
  std::string out(kMagic);
  put_raw<std::uint32_t>(out, version);
  out.append(reinterpret_cast<const char*>(hash.data()), hash.size());
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(arrays_.size()));
  for (const auto& [name, arr] : arrays_) {
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(arr.shape.size()));
    for (auto d : arr.shape) put_raw<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(arr.data.data()), arr.data.size() * sizeof(double));
  }
  put_raw<std::uint32_t>(out, crc32_of(out));
  return out;
}

ArrayArchive ArrayArchive::decode(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 4 + 32 + 4 + 4) throw ChecksumError("archive truncated (too short)");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body.size(), 4);
  if (bytes.substr(0, 4) != kMagic) throw ChecksumError("bad archive magic");
  if (crc32_of(body) != stored_crc) throw ChecksumError("archive CRC32 mismatch (file corrupted or truncated)");

  Reader r(body);
  r.take(4);
  ArrayArchive a;
  a.version = r.read<std::uint32_t>();
  const auto h = r.take(32);
  std::memcpy(a.hash.data(), h.data(), 32);
  const auto count = r.read<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.read<std::uint32_t>();
    std::string name(r.take(name_len));
    const auto rank = r.read<std::uint32_t>();
    if (rank > 8) throw ChecksumError("archive record '" + name + "' has implausible rank");
    std::vector<std::uint64_t> shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = r.read<std::uint64_t>();
      n *= d;
    }
    if (n > body.size()) throw ChecksumError("archive record '" + name + "' exceeds file size");
    const auto raw = r.take(n * sizeof(double));
    std::vector<double> data(n);
    std::memcpy(data.data(), raw.data(), raw.size());
    a.arrays_[name] = NamedArray{std::move(shape), std::move(data)};
  }
  if (r.pos() != body.size()) throw ChecksumError("archive has trailing bytes");
  return a;
}

void ArrayArchive::save(const std::filesystem::path& path) const {
  const std::string bytes = encode();
  // Write-then-rename so readers never observe a partial file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

ArrayArchive ArrayArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode(ss.str());
}

}  // namespace rino
