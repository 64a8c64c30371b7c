#include <gtest/gtest.h>

#include "cruseg/ops.hpp"
#include "cruseg/tape.hpp"
#include "cruseg/tensor.hpp"

using namespace cruseg;

TEST(Tensor, CopiesShareStorage) {
  Tensor<double> a(Shape{1, 2, 2, 2});
  Tensor<double> b = a;
  b.at(0, 1, 1, 0) = 4.0;
  EXPECT_EQ(a.at(0, 1, 1, 0), 4.0);
  EXPECT_TRUE(a.same_storage(b));
  auto c = a.clone();
  c.at(0, 1, 1, 0) = 1.0;
  EXPECT_EQ(a.at(0, 1, 1, 0), 4.0);
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>(3)), std::invalid_argument);
}

TEST(Tensor, ItemNeedsScalar) {
  EXPECT_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor<double>(Shape{1, 1, 1, 2}).item(), std::logic_error);
}

TEST(Tensor, IndexingIsRowMajorNchw) {
  Tensor<float> t(Shape{2, 3, 4, 5});
  t.at(1, 2, 3, 4) = 7.f;
  EXPECT_EQ(t.data()[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.f);
}

TEST(Tape, BackwardNeedsScalar) {
  Tape<double> tape;
  Tensor<double> x(Shape{1, 1, 2, 2}, true);
  EXPECT_THROW(tape.backward(x), std::invalid_argument);
}

TEST(Tape, SkipsRecordingWithoutGradInputs) {
  Tape<double> tape;
  Tensor<double> x(Shape{1, 1, 2, 2});
  auto y = relu(tape, x);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());

  Tape<double> off(false);
  Tensor<double> z(Shape{1, 1, 2, 2}, true);
  relu(off, z);
  EXPECT_EQ(off.size(), 0u);
}

TEST(Tape, AccumulatesOverFanOut) {
  // L = sum(x + x) -> dL/dx = 2 everywhere.
  Tape<double> tape;
  auto x = Tensor<double>::filled(Shape{1, 1, 2, 2}, 0.5, true);
  auto loss = sum(tape, add(tape, x, x));
  tape.backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Tape, CorruptHookScalesOneRule) {
  Tape<double> tape;
  tape.corrupt_backward_of("sum");
  auto x = Tensor<double>::filled(Shape{1, 1, 1, 3}, 1.0, true);
  tape.backward(sum(tape, x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.05);
}

TEST(Tape, UnusedParameterKeepsNoGradient) {
  Tape<double> tape;
  auto x = Tensor<double>::filled(Shape{1, 1, 1, 2}, 1.0, true);
  auto unused = Tensor<double>::filled(Shape{1, 1, 1, 2}, 1.0, true);
  tape.backward(sum(tape, x));
  EXPECT_FALSE(unused.has_grad());
}
