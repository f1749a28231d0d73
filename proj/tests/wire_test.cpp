// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#include "fp8fed/wire.hpp"

#include <gtest/gtest.h>

#include <random>

namespace fp8fed::wire {
namespace {

TEST(Fp8Blob, ByteLayout) {
  QuantizedTensor qt;
  qt.format = Fp8Format::e4m3();
  qt.alpha = 480.0f;
  qt.shape = {2, 3};
  qt.codes = {0x00, 0x7F, 0x81, 0x38, 0xFF, 0x01};
  const auto blob = serialize(qt);
  // 480.0f = 0x43F00000
  const std::vector<std::uint8_t> expected{
      'F', 'P', '8', 'T', 1, 4, 3, 2,     // magic, version, e, m, ndim
      2, 0, 0, 0, 3, 0, 0, 0,             // dims
      0x00, 0x00, 0xF0, 0x43,             // alpha
      0x00, 0x7F, 0x81, 0x38, 0xFF, 0x01  // payload
  };
  EXPECT_EQ(blob, expected);
  EXPECT_EQ(blob.size(), fp8_blob_bytes(6, 2));
  EXPECT_EQ(blob.size(), 6u + 12u + 4u * 2u);
}

TEST(Fp8Blob, RoundTripPreservesDecodedValues) {
  std::mt19937_64 gen(4);
  std::normal_distribution<double> normal(0.0, 1.0);
  RandomStream rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(37);
    for (auto& v : x) v = normal(gen);
    const ClipParam clip = wire_clip(ClipParam(2.5 + trial * 0.1));
    const auto q = q_rand(x, clip, Fp8Format::e4m3(), rng);
    const auto qt = encode(q, {37}, clip, Fp8Format::e4m3());
    const auto back = deserialize(serialize(qt));
    EXPECT_EQ(back.codes, qt.codes);
    EXPECT_EQ(back.shape, qt.shape);
    EXPECT_EQ(back.alpha, qt.alpha);
    EXPECT_EQ(decode(back), q);
  }
}

TEST(Fp8Blob, MalformedInputs) {
  QuantizedTensor qt;
  qt.alpha = 1.0f;
  qt.shape = {3};
  qt.codes = {1, 2, 3};
  auto blob = serialize(qt);

  auto bad_magic = blob;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), Error);

  auto truncated = blob;
  truncated.pop_back();
  EXPECT_THROW(deserialize(truncated), Error);

  auto trailing = blob;
  trailing.push_back(0);
  EXPECT_THROW(deserialize(trailing), Error);

  auto bad_version = blob;
  bad_version[4] = 2;
  EXPECT_THROW(deserialize(bad_version), Error);

  auto wide_format = blob;
  wide_format[6] = 4;  // E4M4 does not fit in a byte
  EXPECT_THROW(deserialize(wide_format), Error);

  qt.codes.pop_back();
  EXPECT_THROW(serialize(qt), Error);
}

TEST(F32Blob, LayoutAndRoundTrip) {
  Fp32Tensor t{{2}, {1.0f, -2.5f}};
  const auto blob = serialize(t);
  const std::vector<std::uint8_t> expected{'F', '3', '2', 'T', 1, 1, 0, 0,  //
                                           2, 0, 0, 0,                      //
                                           0x00, 0x00, 0x80, 0x3F,          //
                                           0x00, 0x00, 0x20, 0xC0};
  EXPECT_EQ(blob, expected);
  EXPECT_EQ(blob.size(), f32_blob_bytes(2, 1));
  const auto back = deserialize_f32(blob);
  EXPECT_EQ(back.shape, t.shape);
  EXPECT_EQ(back.values, t.values);
  EXPECT_THROW(deserialize(blob), Error);
}

}  // namespace
}  // namespace fp8fed::wire
