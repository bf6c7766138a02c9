#pragma once

#include <zlib.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "atlasbench/common.hpp"

namespace atlasbench::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("atlasbench-" + tag + "-" + hex64(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes, bool gzip = false) {
  if (gzip) {
    gzFile f = gzopen(p.c_str(), "wb");
    gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
  } else {
    std::ofstream os(p, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

inline void push_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

inline std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                             std::uint64_t seed) {
  std::vector<unsigned char> b;
  push_be32(b, 0x00000803);
  push_be32(b, n);
  push_be32(b, rows);
  push_be32(b, cols);
  Rng rng(seed);
  for (std::size_t i = 0; i < std::size_t{n} * rows * cols; ++i) b.push_back(static_cast<unsigned char>(rng.below(256)));
  return b;
}

inline std::vector<unsigned char> idx_labels(std::uint32_t n, std::uint64_t seed) {
  std::vector<unsigned char> b;
  push_be32(b, 0x00000801);
  push_be32(b, n);
  Rng rng(seed);
  for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<unsigned char>(rng.below(10)));
  return b;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Root of real datasets (ATLASBENCH_DATA), or empty.
inline std::filesystem::path data_root() {
  const char* env = std::getenv("ATLASBENCH_DATA");
  return env ? std::filesystem::path(env) : std::filesystem::path();
}

inline bool have_mnist() {
  const auto r = data_root();
  return !r.empty() && (std::filesystem::exists(r / "mnist" / "train-images-idx3-ubyte") ||
                        std::filesystem::exists(r / "mnist" / "train-images-idx3-ubyte.gz"));
}

}  // namespace atlasbench::testing
