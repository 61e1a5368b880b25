#pragma once

// Core data types and the CFF1 / CFL1 binary formats.
//
// CFF1 (features), all integers little-endian:
//   [0,4)   magic "CFF1"
//   [4,8)   u32 version = 1
//   [8,16)  u64 n
//   [16,20) u32 d
//   [20]    u8 l2 flag (0 or 1)
//   [21,24) reserved, zero
//   [24,..) n*d float32, row-major
//
// CFL1 (labels):
//   [0,4)   magic "CFL1"
//   [4,8)   u32 version = 1
//   [8,16)  u64 n
//   [16,20) u32 num_classes
//   [20,..) n u32 labels

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clusterfit/errors.hpp"

namespace clusterfit {

inline constexpr double kUnitNormTolerance = 1e-4;

class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  FeatureMatrix(std::size_t n, std::size_t d, std::vector<float> data, bool l2_normalized = false)
      : n_(n), d_(d), data_(std::move(data)), l2_normalized_(l2_normalized) {
    require(d_ > 0 || n_ == 0, ErrorKind::validation, "feature dimension must be positive");
    require(data_.size() == n_ * d_, ErrorKind::validation,
            "payload has " + std::to_string(data_.size()) + " values, expected n*d = " +
                std::to_string(n_ * d_));
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        fail(ErrorKind::validation, "non-finite value at row " + std::to_string(i / d_) + ", column " +
                                        std::to_string(i % d_));
      }
    }
    if (l2_normalized_) {
      for (std::size_t r = 0; r < n_; ++r) {
        double sq = 0.0;
        for (float v : row(r)) sq += double(v) * double(v);
        require(std::abs(std::sqrt(sq) - 1.0) <= kUnitNormTolerance, ErrorKind::validation,
                "row " + std::to_string(r) + " is flagged l2-normalized but has norm " +
                    std::to_string(std::sqrt(sq)));
      }
    }
  }

  std::size_t rows() const noexcept { return n_; }
  std::size_t cols() const noexcept { return d_; }
  bool l2_normalized() const noexcept { return l2_normalized_; }
  std::span<const float> data() const noexcept { return data_; }
  std::span<const float> row(std::size_t i) const noexcept { return {data_.data() + i * d_, d_}; }
  float operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * d_ + j]; }

  /// Copy of the selected rows, in the given order.
  FeatureMatrix select_rows(std::span<const std::size_t> indices) const {
    std::vector<float> out;
    out.reserve(indices.size() * d_);
    for (std::size_t i : indices) {
      require(i < n_, ErrorKind::shape, "row index " + std::to_string(i) + " out of range");
      auto r = row(i);
      out.insert(out.end(), r.begin(), r.end());
    }
    return FeatureMatrix(indices.size(), d_, std::move(out), l2_normalized_);
  }

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::size_t d_ = 0;
  std::vector<float> data_;
  bool l2_normalized_ = false;
};

class LabelVector {
 public:
  LabelVector() = default;

  LabelVector(std::size_t num_classes, std::vector<std::uint32_t> labels)
      : num_classes_(num_classes), labels_(std::move(labels)) {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      require(labels_[i] < num_classes_, ErrorKind::validation,
              "label " + std::to_string(labels_[i]) + " at index " + std::to_string(i) +
                  " is outside [0, " + std::to_string(num_classes_) + ")");
    }
  }

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::span<const std::uint32_t> labels() const noexcept { return labels_; }
  std::uint32_t operator[](std::size_t i) const noexcept { return labels_[i]; }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes_, 0);
    for (auto l : labels_) ++counts[l];
    return counts;
  }

  LabelVector select(std::span<const std::size_t> indices) const {
    std::vector<std::uint32_t> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels_.at(i));
    return LabelVector(num_classes_, std::move(out));
  }

  friend bool operator==(const LabelVector&, const LabelVector&) = default;

 private:
  std::size_t num_classes_ = 0;
  std::vector<std::uint32_t> labels_;
};

struct Centroids {
  std::size_t k = 0;
  std::size_t d = 0;
  std::vector<double> centers;  // k x d, row-major
  double inertia = 0.0;
  std::size_t iterations_run = 0;

  std::span<const double> center(std::size_t j) const noexcept { return {centers.data() + j * d, d}; }

  void validate() const {
    require(k >= 1, ErrorKind::validation, "centroids need k >= 1");
    require(centers.size() == k * d, ErrorKind::validation, "centroid payload size mismatch");
    require(std::all_of(centers.begin(), centers.end(), [](double v) { return std::isfinite(v); }),
            ErrorKind::validation, "non-finite centroid");
    require(inertia >= 0.0, ErrorKind::validation, "negative inertia");
  }
};

enum class DatasetRole { pretrain, clusterfit, target };

struct Dataset {
  FeatureMatrix features;
  std::optional<LabelVector> labels;
  DatasetRole role = DatasetRole::pretrain;

  Dataset() = default;
  Dataset(FeatureMatrix f, std::optional<LabelVector> l, DatasetRole r)
      : features(std::move(f)), labels(std::move(l)), role(r) {
    if (labels) {
      require(labels->size() == features.rows(), ErrorKind::shape,
              "dataset has " + std::to_string(features.rows()) + " rows but " +
                  std::to_string(labels->size()) + " labels");
    }
  }
};

/// Returns a copy with every row scaled to unit Euclidean norm.
inline FeatureMatrix l2_normalize(const FeatureMatrix& m) {
  std::vector<float> out(m.data().begin(), m.data().end());
  const std::size_t d = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += double(out[r * d + j]) * double(out[r * d + j]);
    if (sq == 0.0) fail(ErrorKind::degenerate, "cannot l2-normalize zero row " + std::to_string(r));
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<float>(double(out[r * d + j]) * inv);
  }
  return FeatureMatrix(m.rows(), d, std::move(out), true);
}

namespace detail {

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u64(std::vector<unsigned char>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::vector<unsigned char>& buf, float f) { put_u32(buf, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "short write to " + path.string());
}

inline constexpr std::size_t kFeatureHeaderSize = 24;
inline constexpr std::size_t kLabelHeaderSize = 20;
inline constexpr std::uint32_t kFormatVersion = 1;

}  // namespace detail

inline std::vector<unsigned char> encode_features(const FeatureMatrix& m) {
  std::vector<unsigned char> buf;
  buf.reserve(detail::kFeatureHeaderSize + m.data().size() * 4);
  buf.insert(buf.end(), {'C', 'F', 'F', '1'});
  detail::put_u32(buf, detail::kFormatVersion);
  detail::put_u64(buf, m.rows());
  detail::put_u32(buf, static_cast<std::uint32_t>(m.cols()));
  buf.push_back(m.l2_normalized() ? 1 : 0);
  buf.insert(buf.end(), {0, 0, 0});
  for (float v : m.data()) detail::put_f32(buf, v);
  return buf;
}

inline FeatureMatrix decode_features(std::span<const unsigned char> bytes) {
  require(bytes.size() >= detail::kFeatureHeaderSize, ErrorKind::truncation, "file shorter than CFF1 header");
  require(std::memcmp(bytes.data(), "CFF1", 4) == 0, ErrorKind::format, "bad magic, expected CFF1");
  const auto version = detail::get_u32(bytes.data() + 4);
  require(version == detail::kFormatVersion, ErrorKind::format, "unsupported CFF1 version " + std::to_string(version));
  const auto n = detail::get_u64(bytes.data() + 8);
  const auto d = detail::get_u32(bytes.data() + 16);
  const auto flag = bytes[20];
  require(flag <= 1, ErrorKind::format, "l2 flag must be 0 or 1");
  require(bytes[21] == 0 && bytes[22] == 0 && bytes[23] == 0, ErrorKind::format, "reserved bytes must be zero");
  const std::size_t payload = bytes.size() - detail::kFeatureHeaderSize;
  require(d == 0 || n <= payload / 4 / d, ErrorKind::truncation, "header declares more values than the payload holds");
  require(payload == n * d * 4, ErrorKind::truncation,
          "header declares " + std::to_string(n) + "x" + std::to_string(d) + " but payload has " +
              std::to_string(payload) + " bytes");
  std::vector<float> data(n * d);
  const unsigned char* p = bytes.data() + detail::kFeatureHeaderSize;
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = detail::get_f32(p + 4 * i);
  return FeatureMatrix(n, d, std::move(data), flag == 1);
}

inline std::vector<unsigned char> encode_labels(const LabelVector& l) {
  std::vector<unsigned char> buf;
  buf.reserve(detail::kLabelHeaderSize + l.size() * 4);
  buf.insert(buf.end(), {'C', 'F', 'L', '1'});
  detail::put_u32(buf, detail::kFormatVersion);
  detail::put_u64(buf, l.size());
  detail::put_u32(buf, static_cast<std::uint32_t>(l.num_classes()));
  for (auto v : l.labels()) detail::put_u32(buf, v);
  return buf;
}

inline LabelVector decode_labels(std::span<const unsigned char> bytes) {
  require(bytes.size() >= detail::kLabelHeaderSize, ErrorKind::truncation, "file shorter than CFL1 header");
  require(std::memcmp(bytes.data(), "CFL1", 4) == 0, ErrorKind::format, "bad magic, expected CFL1");
  const auto version = detail::get_u32(bytes.data() + 4);
  require(version == detail::kFormatVersion, ErrorKind::format, "unsupported CFL1 version " + std::to_string(version));
  const auto n = detail::get_u64(bytes.data() + 8);
  const auto num_classes = detail::get_u32(bytes.data() + 16);
  const std::size_t payload = bytes.size() - detail::kLabelHeaderSize;
  require(n <= payload / 4 && payload == n * 4, ErrorKind::truncation,
          "header declares " + std::to_string(n) + " labels but payload has " + std::to_string(payload) + " bytes");
  std::vector<std::uint32_t> labels(n);
  const unsigned char* p = bytes.data() + detail::kLabelHeaderSize;
  for (std::size_t i = 0; i < n; ++i) labels[i] = detail::get_u32(p + 4 * i);
  return LabelVector(num_classes, std::move(labels));
}

inline FeatureMatrix read_features(const std::filesystem::path& path) {
  return decode_features(detail::read_file(path));
}

inline void write_features(const std::filesystem::path& path, const FeatureMatrix& m) {
  detail::write_file(path, encode_features(m));
}

inline LabelVector read_labels(const std::filesystem::path& path) { return decode_labels(detail::read_file(path)); }

inline void write_labels(const std::filesystem::path& path, const LabelVector& l) {
  detail::write_file(path, encode_labels(l));
}

}  // namespace clusterfit
