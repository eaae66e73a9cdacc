#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qclust/error.hpp"
#include "qclust/features.hpp"
#include "qclust/parallel.hpp"

namespace qclust {

static_assert(std::endian::native == std::endian::little, "matrix files are little-endian");

inline double euclidean(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw std::invalid_argument("euclidean: length mismatch (" + std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()) + ")");
  double s = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    const double d = u[k] - v[k];
    s += d * d;
  }
  return std::sqrt(s);
}

// Position of pair (i, j), i < j, in row-major upper-triangle order.
constexpr std::size_t condensed_index(std::size_t n, std::size_t i, std::size_t j) {
  return n * i - i * (i + 1) / 2 + (j - i - 1);
}

constexpr std::size_t condensed_size(std::size_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

namespace detail {

// Read-write shared mapping of a whole file.
class MappedFile {
 public:
  MappedFile() = default;
  MappedFile(const std::filesystem::path& path, std::size_t bytes, bool create) {
    fd_ = ::open(path.c_str(), create ? (O_RDWR | O_CREAT | O_TRUNC) : O_RDWR, 0644);
    if (fd_ < 0) throw std::system_error(errno, std::generic_category(), "open " + path.string());
    if (create && ::ftruncate(fd_, static_cast<off_t>(bytes)) != 0) {
      const int err = errno;
      ::close(fd_);
      throw std::system_error(err, std::generic_category(), "resize " + path.string());
    }
    if (!create) {
      struct stat st {};
      ::fstat(fd_, &st);
      bytes = static_cast<std::size_t>(st.st_size);
    }
    size_ = bytes;
    void* p = ::mmap(nullptr, size_, PROT_READ | PROT_WRITE, MAP_SHARED, fd_, 0);
    if (p == MAP_FAILED) {
      const int err = errno;
      ::close(fd_);
      throw std::system_error(err, std::generic_category(), "mmap " + path.string());
    }
    data_ = static_cast<std::byte*>(p);
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  MappedFile(MappedFile&& other) noexcept { *this = std::move(other); }
  MappedFile& operator=(MappedFile&& other) noexcept {
    if (this != &other) {
      release();
      data_ = std::exchange(other.data_, nullptr);
      size_ = std::exchange(other.size_, 0);
      fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
  }
  ~MappedFile() { release(); }

  std::byte* data() const { return data_; }
  std::size_t size() const { return size_; }

 private:
  void release() {
    if (data_) ::munmap(data_, size_);
    if (fd_ >= 0) ::close(fd_);
    data_ = nullptr;
    fd_ = -1;
  }
  std::byte* data_ = nullptr;
  std::size_t size_ = 0;
  int fd_ = -1;
};

}  // namespace detail

// Binary layout: "QCDM", version byte, kind byte, u64 n, then n(n-1)/2 f64,
// all little-endian.
inline constexpr char kMatrixMagic[4] = {'Q', 'C', 'D', 'M'};
inline constexpr std::uint8_t kMatrixVersion = 1;
inline constexpr std::size_t kMatrixHeaderBytes = 4 + 1 + 1 + 8;

// Upper triangle of a symmetric dissimilarity matrix with zero diagonal.
// Held in memory, or in a memory-mapped file that uses the on-disk layout.
class CondensedMatrix {
 public:
  CondensedMatrix() = default;
  CondensedMatrix(std::size_t n, FeatureKind kind, std::vector<std::string> meter_ids = {})
      : n_(n), kind_(kind), meter_ids_(std::move(meter_ids)), memory_(condensed_size(n), 0.0) {
    check_ids();
  }
  CondensedMatrix(std::size_t n, FeatureKind kind, std::vector<std::string> meter_ids, std::vector<double> data)
      : n_(n), kind_(kind), meter_ids_(std::move(meter_ids)), memory_(std::move(data)) {
    if (memory_.size() != condensed_size(n)) throw std::invalid_argument("condensed data has the wrong length");
    check_ids();
  }

  // File-backed matrix: creates `path` with the binary header and maps it.
  static CondensedMatrix create_mapped(const std::filesystem::path& path, std::size_t n, FeatureKind kind,
                                       std::vector<std::string> meter_ids = {}) {
    CondensedMatrix m;
    m.n_ = n;
    m.kind_ = kind;
    m.meter_ids_ = std::move(meter_ids);
    m.check_ids();
    m.file_ = detail::MappedFile(path, kMatrixHeaderBytes + condensed_size(n) * sizeof(double), true);
    std::byte* base = m.file_.data();
    std::memcpy(base, kMatrixMagic, 4);
    base[4] = std::byte{kMatrixVersion};
    base[5] = std::byte{static_cast<std::uint8_t>(kind)};
    const std::uint64_t n64 = n;
    std::memcpy(base + 6, &n64, 8);
    m.mapped_ = base + kMatrixHeaderBytes;
    return m;
  }

  std::size_t n() const { return n_; }
  std::size_t size() const { return condensed_size(n_); }
  FeatureKind kind() const { return kind_; }
  bool is_mapped() const { return mapped_ != nullptr; }
  const std::vector<std::string>& meter_ids() const { return meter_ids_; }

  double at(std::size_t k) const {
    if (mapped_) {
      double v;
      std::memcpy(&v, mapped_ + k * sizeof(double), sizeof v);
      return v;
    }
    return memory_[k];
  }
  void set(std::size_t k, double v) {
    if (mapped_)
      std::memcpy(mapped_ + k * sizeof(double), &v, sizeof v);
    else
      memory_[k] = v;
  }

  double operator()(std::size_t i, std::size_t j) const {
    if (i == j) return 0.0;
    if (i > j) std::swap(i, j);
    return at(condensed_index(n_, i, j));
  }

  std::optional<std::size_t> index_of(std::string_view meter_id) const {
    const auto it = std::find(meter_ids_.begin(), meter_ids_.end(), meter_id);
    if (it == meter_ids_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - meter_ids_.begin());
  }

  double distance(std::string_view a, std::string_view b) const {
    const auto i = index_of(a), j = index_of(b);
    if (!i || !j) throw std::out_of_range("unknown meter id");
    return (*this)(*i, *j);
  }

  // Contiguous copy of the condensed entries.
  std::vector<double> to_vector() const {
    if (!mapped_) return memory_;
    std::vector<double> out(size());
    std::memcpy(out.data(), mapped_, out.size() * sizeof(double));
    return out;
  }

  // Moves the entries out of an in-memory matrix; copies a mapped one.
  std::vector<double> take_data() && {
    if (mapped_) return to_vector();
    return std::move(memory_);
  }

 private:
  void check_ids() const {
    if (!meter_ids_.empty() && meter_ids_.size() != n_)
      throw std::invalid_argument("meter id count does not match matrix size");
  }

  std::size_t n_ = 0;
  FeatureKind kind_ = FeatureKind::AC;
  std::vector<std::string> meter_ids_;
  std::vector<double> memory_;
  detail::MappedFile file_;
  std::byte* mapped_ = nullptr;
};

struct MatrixOptions {
  std::size_t threads = 1;
  bool standardize = false;
  // Matrices with more series than this are written straight into
  // `mapped_path` instead of memory (when a path is given).
  std::size_t mmap_threshold = 20000;
  std::optional<std::filesystem::path> mapped_path;
};

namespace detail {

inline std::vector<std::vector<double>> standardized_columns(std::span<const FeatureVector> features) {
  const std::size_t n = features.size();
  const std::size_t dim = features.front().size();
  std::vector<std::vector<double>> out(n);
  std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
  for (const auto& f : features)
    for (std::size_t k = 0; k < dim; ++k) mean[k] += f.values[k];
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& f : features)
    for (std::size_t k = 0; k < dim; ++k) sd[k] += (f.values[k] - mean[k]) * (f.values[k] - mean[k]);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(n > 1 ? n - 1 : 1));
  for (std::size_t i = 0; i < n; ++i) {
    out[i].resize(dim);
    for (std::size_t k = 0; k < dim; ++k)
      out[i][k] = sd[k] > 0.0 ? (features[i].values[k] - mean[k]) / sd[k] : 0.0;
  }
  return out;
}

}  // namespace detail

inline CondensedMatrix build_matrix(std::span<const FeatureVector> features, const MatrixOptions& options = {}) {
  const std::size_t n = features.size();
  if (n < 2) throw DataError("dissimilarity matrix needs at least two series");
  const auto kind = features.front().kind;
  const auto dim = features.front().size();
  std::vector<std::string> ids;
  ids.reserve(n);
  for (const auto& f : features) {
    if (f.kind != kind) throw DataError("cannot mix feature kinds in one matrix");
    if (f.size() != dim) throw DataError("feature vectors differ in length");
    for (const double v : f.values)
      if (!std::isfinite(v)) throw DataError("meter " + f.meter_id + ": non-finite feature value");
    ids.push_back(f.meter_id);
  }

  std::vector<std::vector<double>> scaled;
  if (options.standardize) scaled = detail::standardized_columns(features);
  auto row = [&](std::size_t i) -> std::span<const double> {
    return options.standardize ? std::span<const double>(scaled[i]) : std::span<const double>(features[i].values);
  };

  CondensedMatrix m = (options.mapped_path && n > options.mmap_threshold)
                          ? CondensedMatrix::create_mapped(*options.mapped_path, n, kind, std::move(ids))
                          : CondensedMatrix(n, kind, std::move(ids));
  parallel_for(n - 1, options.threads, [&](std::size_t i) {
    const auto fi = row(i);
    std::size_t k = condensed_index(n, i, i + 1);
    for (std::size_t j = i + 1; j < n; ++j, ++k) m.set(k, euclidean(fi, row(j)));
  });
  return m;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json matrix_sidecar(const CondensedMatrix& m) {
  return {{"format", "QCDM"},
          {"version", kMatrixVersion},
          {"kind", std::string(to_string(m.kind()))},
          {"n", m.n()},
          {"meter_ids", m.meter_ids()}};
}

// Writes the binary file. Must not target the file backing a mapped matrix.
inline void write_matrix(const std::filesystem::path& path, const CondensedMatrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMatrixMagic, 4);
  const char version = static_cast<char>(kMatrixVersion);
  const char kind = static_cast<char>(m.kind());
  out.write(&version, 1);
  out.write(&kind, 1);
  const std::uint64_t n64 = m.n();
  out.write(reinterpret_cast<const char*>(&n64), 8);
  constexpr std::size_t kChunk = 1 << 16;
  std::vector<double> buf;
  for (std::size_t k = 0; k < m.size(); k += kChunk) {
    const std::size_t len = std::min(kChunk, m.size() - k);
    buf.resize(len);
    for (std::size_t i = 0; i < len; ++i) buf[i] = m.at(k + i);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(len * sizeof(double)));
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline CondensedMatrix read_matrix(const std::filesystem::path& path, std::vector<std::string> meter_ids = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open matrix file " + path.string());
  char header[kMatrixHeaderBytes];
  in.read(header, kMatrixHeaderBytes);
  if (!in || std::memcmp(header, kMatrixMagic, 4) != 0) throw DataError(path.string() + ": not a QCDM file");
  if (static_cast<std::uint8_t>(header[4]) != kMatrixVersion)
    throw DataError(path.string() + ": unsupported QCDM version");
  const auto kind_byte = static_cast<std::uint8_t>(header[5]);
  if (kind_byte > 2) throw DataError(path.string() + ": unknown feature kind");
  std::uint64_t n = 0;
  std::memcpy(&n, header + 6, 8);
  std::vector<double> data(condensed_size(n));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw DataError(path.string() + ": truncated matrix data");
  return CondensedMatrix(n, static_cast<FeatureKind>(kind_byte), std::move(meter_ids), std::move(data));
}

// Square CSV with meter ids as row and column headers; meant for small n.
inline void write_matrix_csv(std::ostream& out, const CondensedMatrix& m) {
  const auto& ids = m.meter_ids();
  auto name = [&](std::size_t i) { return ids.empty() ? std::to_string(i) : ids[i]; };
  out << "meter_id";
  for (std::size_t j = 0; j < m.n(); ++j) out << ',' << name(j);
  out << '\n';
  for (std::size_t i = 0; i < m.n(); ++i) {
    out << name(i);
    for (std::size_t j = 0; j < m.n(); ++j) out << ',' << format_double(m(i, j));
    out << '\n';
  }
}

}  // namespace qclust
