#ifndef STRUCEMB_TESTS_HELPERS_HPP
#define STRUCEMB_TESTS_HELPERS_HPP

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "strucemb/model.hpp"

namespace testing_helpers {

inline strucemb::ModelConfig small_config(std::uint64_t seed = 0, std::size_t max_pos = 512) {
  strucemb::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 64;
  c.max_pos = max_pos;
  c.seed = seed;
  return c;
}

inline double max_abs_diff(const strucemb::Matrix& a, const strucemb::Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
  return worst;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("strucemb_" + tag + "_" + std::to_string(rd()));
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

}  // namespace testing_helpers

#endif
