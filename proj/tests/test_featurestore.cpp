#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "clusterfit/featurestore.hpp"
#include "oracles.hpp"

using namespace clusterfit;

namespace {

template <typename Fn>
ErrorKind kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::io;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cf_test_" + std::to_string(::getpid()) + "_" + name);
}

std::vector<unsigned char> header(const char* magic, std::uint32_t version, std::uint64_t n, std::uint32_t d,
                                  unsigned char flag) {
  std::vector<unsigned char> buf(magic, magic + 4);
  detail::put_u32(buf, version);
  detail::put_u64(buf, n);
  detail::put_u32(buf, d);
  buf.insert(buf.end(), {flag, 0, 0, 0});
  return buf;
}

}  // namespace

TEST(FeatureFile, HandWrittenHeaderDecodes) {
  auto buf = header("CFF1", 1, 2, 3, 0);
  const float values[] = {1.f, 2.f, 3.f, -4.f, 0.5f, 6.f};
  for (float v : values) detail::put_f32(buf, v);
  const auto m = decode_features(buf);
  ASSERT_EQ(m.rows(), 2u);
  ASSERT_EQ(m.cols(), 3u);
  EXPECT_FALSE(m.l2_normalized());
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(m.data()[i], values[i]);
  EXPECT_EQ(m(1, 0), -4.f);
}

TEST(FeatureFile, HeaderLayout) {
  const FeatureMatrix m(1, 2, {0.6f, 0.8f}, true);
  const auto buf = encode_features(m);
  ASSERT_EQ(buf.size(), 24u + 8u);
  EXPECT_EQ(std::string(buf.begin(), buf.begin() + 4), "CFF1");
  EXPECT_EQ(detail::get_u32(buf.data() + 4), 1u);
  EXPECT_EQ(detail::get_u64(buf.data() + 8), 1u);
  EXPECT_EQ(detail::get_u32(buf.data() + 16), 2u);
  EXPECT_EQ(buf[20], 1);
  EXPECT_EQ(buf[21] | buf[22] | buf[23], 0);
  // 0.6f little-endian
  EXPECT_EQ(buf[24], 0x9a);
  EXPECT_EQ(buf[27], 0x3f);
}

TEST(FeatureFile, RoundTripIsByteIdentical) {
  const auto p = temp_path("rt.cff");
  const auto m = oracle::gaussian_matrix(37, 5, 11);
  write_features(p, m);
  const auto first = detail::read_file(p);
  const auto back = read_features(p);
  EXPECT_EQ(back, m);
  write_features(p, back);
  EXPECT_EQ(detail::read_file(p), first);
  std::filesystem::remove(p);
}

TEST(FeatureFile, RejectsBadMagicVersionAndReserved) {
  auto buf = header("CFF2", 1, 0, 3, 0);
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::format);
  buf = header("CFF1", 2, 0, 3, 0);
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::format);
  buf = header("CFF1", 1, 0, 3, 2);
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::format);
  buf = header("CFF1", 1, 0, 3, 0);
  buf[22] = 1;
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::format);
}

TEST(FeatureFile, RejectsPayloadLengthMismatch) {
  auto buf = header("CFF1", 1, 2, 3, 0);
  for (int i = 0; i < 5; ++i) detail::put_f32(buf, 1.f);
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::truncation);
  detail::put_f32(buf, 1.f);
  detail::put_f32(buf, 1.f);
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::truncation);
  buf = header("CFF1", 1, std::uint64_t(1) << 62, 3, 0);
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::truncation);
  std::vector<unsigned char> shorter(buf.begin(), buf.begin() + 10);
  EXPECT_EQ(kind_of([&] { decode_features(shorter); }), ErrorKind::truncation);
}

TEST(FeatureFile, RejectsNonFinitePayload) {
  auto buf = header("CFF1", 1, 1, 2, 0);
  detail::put_f32(buf, 1.f);
  detail::put_f32(buf, std::numeric_limits<float>::quiet_NaN());
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::validation);
}

TEST(FeatureFile, RejectsL2FlagOnNonUnitRows) {
  auto buf = header("CFF1", 1, 1, 2, 1);
  detail::put_f32(buf, 3.f);
  detail::put_f32(buf, 4.f);
  EXPECT_EQ(kind_of([&] { decode_features(buf); }), ErrorKind::validation);
}

TEST(LabelFile, RoundTripAndLayout) {
  const LabelVector l(7, {0, 6, 3, 3});
  const auto buf = encode_labels(l);
  ASSERT_EQ(buf.size(), 20u + 16u);
  EXPECT_EQ(detail::get_u64(buf.data() + 8), 4u);
  EXPECT_EQ(detail::get_u32(buf.data() + 16), 7u);
  EXPECT_EQ(decode_labels(buf), l);
  const auto p = temp_path("rt.cfl");
  write_labels(p, l);
  EXPECT_EQ(read_labels(p), l);
  std::filesystem::remove(p);
}

TEST(LabelFile, RejectsBadInput) {
  auto buf = encode_labels(LabelVector(3, {0, 1, 2}));
  auto truncated = buf;
  truncated.pop_back();
  EXPECT_EQ(kind_of([&] { decode_labels(truncated); }), ErrorKind::truncation);
  auto magic = buf;
  magic[3] = '2';
  EXPECT_EQ(kind_of([&] { decode_labels(magic); }), ErrorKind::format);
  auto out_of_range = buf;
  out_of_range[20 + 8] = 3;
  EXPECT_EQ(kind_of([&] { decode_labels(out_of_range); }), ErrorKind::validation);
}

TEST(L2Normalize, ThreeFourFive) {
  const auto m = l2_normalize(FeatureMatrix(1, 2, {3.f, 4.f}));
  EXPECT_TRUE(m.l2_normalized());
  EXPECT_NEAR(m(0, 0), 0.6, 1e-7);
  EXPECT_NEAR(m(0, 1), 0.8, 1e-7);
}

TEST(L2Normalize, RandomRowsHaveUnitNorm) {
  const auto m = l2_normalize(oracle::gaussian_matrix(100, 16, 3));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sq = 0.0;
    for (float v : m.row(i)) sq += double(v) * v;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  }
}

TEST(L2Normalize, IdempotentAndDirectionPreserving) {
  const auto raw = oracle::gaussian_matrix(50, 8, 4);
  const auto once = l2_normalize(raw);
  const auto twice = l2_normalize(once);
  for (std::size_t i = 0; i < raw.rows(); ++i) {
    double dot = 0.0, nr = 0.0, nn = 0.0;
    for (std::size_t j = 0; j < raw.cols(); ++j) {
      EXPECT_NEAR(once(i, j), twice(i, j), 1e-7);
      dot += double(raw(i, j)) * once(i, j);
      nr += double(raw(i, j)) * raw(i, j);
      nn += double(once(i, j)) * once(i, j);
    }
    EXPECT_NEAR(dot / std::sqrt(nr * nn), 1.0, 1e-7);
  }
}

TEST(L2Normalize, ZeroRowNamesTheRow) {
  try {
    l2_normalize(FeatureMatrix(3, 2, {1.f, 0.f, 0.f, 1.f, 0.f, 0.f}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate);
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
  }
}
