#include <gtest/gtest.h>

#include "accentctc/tensor.hpp"

using accentctc::Shape;
using accentctc::ShapeError;
using accentctc::Tensor;

TEST(Tensor, ShapeAndSize) {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_FLOAT_EQ(t.at(1, 2), 1.5f);
}

TEST(Tensor, ScalarHasOneElement) {
  auto s = Tensor<double>::scalar(4.0);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s.item(), 4.0);
}

TEST(Tensor, RejectsZeroDimension) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
}

TEST(Tensor, RejectsDataLengthMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, RowViewsAreRowMajor) {
  auto m = Tensor<int>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  auto r = m.row(1);
  EXPECT_EQ(r[0], 4);
  EXPECT_EQ(r[2], 6);
}

TEST(Tensor, ItemRequiresSingleElement) {
  EXPECT_THROW(Tensor<float>(Shape{2}).item(), ShapeError);
}

TEST(Tensor, CastPreservesShape) {
  auto m = Tensor<double>::matrix(1, 2, {0.5, -1.25});
  Tensor<float> f = m.cast<float>();
  EXPECT_EQ(f.shape(), m.shape());
  EXPECT_FLOAT_EQ(f[1], -1.25f);
}

TEST(Tensor, FiniteChecks) {
  auto v = Tensor<double>::vector({1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_TRUE(v.has_nan());
  EXPECT_FALSE(v.all_finite());
}
