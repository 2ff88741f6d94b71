#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <random>
#include <string>

namespace rino::test {

inline Eigen::MatrixXd gaussian(long rows, long cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (long i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

inline Eigen::MatrixXcd complex_gaussian(long rows, long cols, std::mt19937_64& rng) {
  Eigen::MatrixXcd m(rows, cols);
  m.real() = gaussian(rows, cols, rng);
  m.imag() = gaussian(rows, cols, rng);
  return m;
}

template <typename A, typename B>
double rel_diff(const A& a, const B& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("rino_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace rino::test
