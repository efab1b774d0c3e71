#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace poselift;
using namespace poselift::numerics;
using testutil::op_grad_error;
using testutil::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c.at(i, j) += a.at(i, p) * b.at(p, j);
  return c;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor<double> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  t.at(1, 2, 3) = 5.0;
  EXPECT_EQ(t[23], 5.0);
  EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_EQ(Tensor<double>::identity(3).at(1, 1), 1.0);
}

TEST(Rng, DerivedStreamsAreStableAndIndependent) {
  EXPECT_EQ(derive_seed(42, "train", 3), derive_seed(42, "train", 3));
  EXPECT_NE(derive_seed(42, "train", 3), derive_seed(42, "train", 4));
  EXPECT_NE(derive_seed(42, "train", 3), derive_seed(42, "test", 3));
  EXPECT_NE(derive_seed(42, "train", 3), derive_seed(43, "train", 3));
}

TEST(Autodiff, MatmulMatchesNaiveProduct) {
  const auto a = random_tensor({4, 5}, 1), b = random_tensor({5, 3}, 2);
  EXPECT_LT(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
}

TEST(Autodiff, ElementwiseGradients) {
  const Shape s{3, 4};
  EXPECT_LT(op_grad_error({s, s}, [](auto& v) { return add(v[0], v[1]); }), kGradTol);
  EXPECT_LT(op_grad_error({s, s}, [](auto& v) { return sub(v[0], v[1]); }), kGradTol);
  EXPECT_LT(op_grad_error({s, s}, [](auto& v) { return mul(v[0], v[1]); }), kGradTol);
  EXPECT_LT(op_grad_error({s}, [](auto& v) { return scale(v[0], 0.3); }), kGradTol);
  EXPECT_LT(op_grad_error({s, s}, [](auto& v) { return lerp(v[0], v[1], 0.25); }), kGradTol);
  EXPECT_LT(op_grad_error({s}, [](auto& v) { return square(v[0]); }), kGradTol);
  EXPECT_LT(op_grad_error({s}, [](auto& v) { return numerics::tanh(v[0]); }), kGradTol);
  EXPECT_LT(op_grad_error({s}, [](auto& v) { return gelu(v[0]); }), kGradTol);
}

TEST(Autodiff, GeluAndTanhValues) {
  Tape<double> tape;
  Tensor<double> x({5}, std::vector<double>{-3.0, -0.5, 0.0, 0.7, 2.5});
  Var<double> in = tape.constant(x);
  const auto g = gelu(in).value();
  const auto t = numerics::tanh(in).value();
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  for (std::size_t i = 0; i < 5; ++i) {
    const double v = x[i];
    EXPECT_NEAR(g[i], 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))), 1e-12);
    EXPECT_NEAR(t[i], std::tanh(v), 1e-12);
  }
}

TEST(Autodiff, LinearAlgebraGradients) {
  EXPECT_LT(op_grad_error({{2, 3, 4}, {4, 5}}, [](auto& v) { return linear(v[0], v[1]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({{2, 3, 4}, {4, 5}, {5}},
                          [](auto& v) { return linear(v[0], v[1], v[2]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({{3, 4}, {4, 2}}, [](auto& v) { return matmul(v[0], v[1]); }), kGradTol);
  EXPECT_LT(op_grad_error({{2, 3, 4}, {2, 4, 5}}, [](auto& v) { return bmm(v[0], v[1]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({{2, 3, 4}, {2, 5, 4}},
                          [](auto& v) { return bmm(v[0], v[1], true, 0.7); }),
            kGradTol);
}

TEST(Autodiff, BmmTransposeAndScaleMatchOracle) {
  Tape<double> tape;
  const auto a = random_tensor({2, 3, 4}, 3), b = random_tensor({2, 5, 4}, 4);
  const auto out = bmm(tape.constant(a), tape.constant(b), true, 0.5).value();
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at(g, i, k) * b.at(g, j, k);
        EXPECT_NEAR(out.at(g, i, j), 0.5 * s, 1e-12);
      }
}

TEST(Autodiff, BroadcastTablesGradients) {
  EXPECT_LT(op_grad_error({{2, 3, 4}, {4}}, [](auto& v) { return add_bias(v[0], v[1]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({{2, 3, 5, 4}, {3, 4}},
                          [](auto& v) { return add_table(v[0], v[1], 1); }),
            kGradTol);
  EXPECT_LT(op_grad_error({{2, 3, 5, 4}, {5, 4}},
                          [](auto& v) { return add_table(v[0], v[1], 2); }),
            kGradTol);
}

TEST(Autodiff, AddTableBroadcastsAlongAxis) {
  Tape<double> tape;
  const auto x = random_tensor({2, 3, 4}, 5), table = random_tensor({3, 4}, 6);
  const auto out = add_table(tape.constant(x), tape.constant(table), 1).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 4; ++c)
        EXPECT_DOUBLE_EQ(out.at(b, i, c), x.at(b, i, c) + table.at(i, c));
}

TEST(Autodiff, AggregateMatchesPerGroupProduct) {
  Tape<double> tape;
  const auto adj = random_tensor({3, 4, 4}, 7), x = random_tensor({3, 4, 2}, 8);
  const auto out = aggregate(adj, tape.constant(x)).value();
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 2; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < 4; ++j) s += adj.at(g, i, j) * x.at(g, j, c);
        EXPECT_NEAR(out.at(g, i, c), s, 1e-12);
      }
  const auto shared = random_tensor({1, 4, 4}, 9);
  EXPECT_LT(op_grad_error({{2, 3, 4, 2}}, [&](auto& v) { return aggregate(shared, v[0]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({{3, 4, 2}}, [&](auto& v) { return aggregate(adj, v[0]); }), kGradTol);
}

TEST(Autodiff, SplitAndMergeHeadsAreInverse) {
  Tape<double> tape;
  const auto qkv = random_tensor({2, 3, 5, 12}, 10);  // heads 2, dh 2
  Var<double> in = tape.constant(qkv);
  for (std::size_t part = 0; part < 3; ++part) {
    const auto h = split_heads(in, part, 2);
    ASSERT_EQ(h.shape(), (Shape{12, 5, 2}));
    for (std::size_t g = 0; g < 6; ++g)
      for (std::size_t head = 0; head < 2; ++head)
        for (std::size_t l = 0; l < 5; ++l)
          for (std::size_t i = 0; i < 2; ++i)
            EXPECT_EQ(h.value().at(g * 2 + head, l, i),
                      qkv[(g * 5 + l) * 12 + part * 4 + head * 2 + i]);
    const auto merged = merge_heads(h, 2, {2, 3, 5, 4}).value();
    for (std::size_t r = 0; r < 30; ++r)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(merged[r * 4 + c], qkv[r * 12 + part * 4 + c]);
  }
  EXPECT_LT(op_grad_error({{3, 5, 12}}, [](auto& v) { return split_heads(v[0], 1, 2); }), kGradTol);
  EXPECT_LT(op_grad_error({{6, 5, 2}}, [](auto& v) { return merge_heads(v[0], 2, {3, 5, 4}); }),
            kGradTol);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  Tape<double> tape;
  const auto x = random_tensor({3, 4, 5}, 11, 10.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const auto y = softmax(tape.constant(x), axis).value();
    const Shape s = y.shape();
    for (std::size_t i = 0; i < s[0]; ++i)
      for (std::size_t j = 0; j < s[1]; ++j)
        for (std::size_t k = 0; k < s[2]; ++k) {
          if ((axis == 0 && i) || (axis == 1 && j) || (axis == 2 && k)) continue;
          double sum = 0.0;
          for (std::size_t r = 0; r < s[axis]; ++r)
            sum += axis == 0 ? y.at(r, j, k) : axis == 1 ? y.at(i, r, k) : y.at(i, j, r);
          EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    EXPECT_LT(op_grad_error({{3, 4, 5}}, [axis](auto& v) { return softmax(v[0], axis); }),
              kGradTol);
  }
}

TEST(Autodiff, SoftmaxIsShiftInvariantAndStable) {
  Tensor<double> x({1, 3}, std::vector<double>{1000.0, 1001.0, 1002.0});
  Tensor<double> y({1, 3}, std::vector<double>{0.0, 1.0, 2.0});
  EXPECT_LT(max_abs_diff(softmax(x, 1), softmax(y, 1)), 1e-15);
  EXPECT_TRUE(softmax(x, 1).all_finite());
}

TEST(Autodiff, LayerNormNormalizesAndDifferentiates) {
  Tape<double> tape;
  const auto x = random_tensor({4, 6}, 12, 3.0);
  const auto y = layer_norm(tape.constant(x), tape.constant(Tensor<double>({6}, 1.0)),
                            tape.constant(Tensor<double>({6})))
                     .value();
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mean += y.at(r, c);
    mean /= 6.0;
    for (std::size_t c = 0; c < 6; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var / 6.0, 1.0, 1e-4);
  }
  EXPECT_LT(op_grad_error({{2, 3, 6}, {6}, {6}},
                          [](auto& v) { return layer_norm(v[0], v[1], v[2]); }),
            kGradTol);
}

TEST(Autodiff, PermuteMatchesIndexOracle) {
  Tape<double> tape;
  const auto x = random_tensor({2, 3, 4, 5}, 13);
  const auto y = permute(tape.constant(x), {0, 2, 1, 3}).value();
  ASSERT_EQ(y.shape(), (Shape{2, 4, 3, 5}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t d = 0; d < 5; ++d) EXPECT_EQ(y.at(a, c, b, d), x.at(a, b, c, d));
  const auto z = permute(x, {3, 1, 0, 2});
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t d = 0; d < 5; ++d) EXPECT_EQ(z.at(d, b, a, c), x.at(a, b, c, d));
  EXPECT_LT(op_grad_error({{2, 3, 4, 5}}, [](auto& v) { return permute(v[0], {0, 2, 1, 3}); }),
            kGradTol);
  EXPECT_LT(op_grad_error({{2, 3, 4}}, [](auto& v) { return permute(v[0], {2, 0, 1}); }), kGradTol);
}

TEST(Autodiff, ShapeOpsGradients) {
  EXPECT_LT(op_grad_error({{2, 6}}, [](auto& v) { return reshape(v[0], {3, 4}); }), kGradTol);
  EXPECT_LT(op_grad_error({{2, 3}, {2, 4}}, [](auto& v) { return concat_last(v[0], v[1]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({{2, 7}}, [](auto& v) { return slice_last(v[0], 2, 3); }), kGradTol);
  EXPECT_LT(op_grad_error({{4, 3}}, [](auto& v) { return row_norm(v[0]); }), kGradTol);
  EXPECT_LT(op_grad_error({{4, 3}}, [](auto& v) { return mean(v[0]); }), kGradTol);
}

TEST(Autodiff, GradientsAccumulateOverReuse) {
  ParamStore<double> store;
  store.add("x", random_tensor({3}, 14));
  LossFn<double> loss = [](Binding<double>& bind) {
    Var<double> x = bind("x");
    return sum(add(mul(x, x), scale(x, 3.0)));
  };
  EXPECT_LT(grad_check(loss, store), kGradTol);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_NEAR(store.get("x").grad[i], 2.0 * store.get("x").value[i] + 3.0, 1e-12);
}

TEST(Autodiff, DropoutMaskIsInvertedAndSeeded) {
  Tape<double> tape;
  Var<double> x = tape.constant(Tensor<double>({4000}, 1.0));
  EXPECT_EQ(dropout(x, 0.3, nullptr).id(), x.id());
  Rng r1(5), r2(5);
  const auto a = dropout(x, 0.25, &r1).value();
  const auto b = dropout(x, 0.25, &r2).value();
  EXPECT_EQ(a, b);
  std::size_t dropped = 0;
  for (double v : a.data()) {
    if (v == 0.0) ++dropped;
    else EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
  }
  EXPECT_NEAR(static_cast<double>(dropped) / 4000.0, 0.25, 0.03);
  EXPECT_THROW(dropout(x, 1.0, &r1), ConfigError);
  EXPECT_LT(op_grad_error({{3, 8}},
                          [](auto& v) {
                            Rng rng(9);
                            return dropout(v[0], 0.5, &rng);
                          }),
            kGradTol);
}

TEST(Autodiff, BackwardRejectsNonScalarRoot) {
  Tape<double> tape;
  Var<double> x = tape.variable(Tensor<double>({2}, 1.0));
  EXPECT_THROW(tape.backward(x), DimensionError);
}

TEST(Autodiff, ShapeMismatchThrows) {
  Tape<double> tape;
  Var<double> a = tape.constant(Tensor<double>({2, 3}));
  Var<double> b = tape.constant(Tensor<double>({3, 2}));
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(matmul(a, a), DimensionError);
}

TEST(GradCheck, DetectsAWrongGradient) {
  ParamStore<double> store;
  store.add("x", random_tensor({4}, 15));
  LossFn<double> wrong = [](Binding<double>& bind) {
    Var<double> x = bind("x");
    Tape<double>& tape = bind.tape();
    // Forward x^2, backward claims 3x.
    Tensor<double> y = x.value();
    for (auto& v : y.storage()) v *= v;
    Var<double> sq = tape.record(std::move(y), true, [x](Tape<double>& t, const Tensor<double>& g) {
      auto& dst = t.grad_ref(x.id());
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += 3.0 * x.value()[i] * g[i];
    });
    return sum(sq);
  };
  EXPECT_GT(grad_check(wrong, store), 0.1);
}

TEST(Svd3, ReconstructsAndOrders) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto m = random_tensor({3, 3}, 100 + seed);
    const auto svd = svd3(to_mat3(m));
    EXPECT_GE(svd.s[0], svd.s[1]);
    EXPECT_GE(svd.s[1], svd.s[2]);
    EXPECT_GE(svd.s[2], 0.0);
    Mat3 us = svd.u;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) us[r][c] *= svd.s[c];
    const Mat3 back = mat3_mul(us, mat3_transpose(svd.v));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(back[r][c], m.at(r, c), 1e-10);
    const Mat3 utu = mat3_mul(mat3_transpose(svd.u), svd.u);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(utu[r][c], r == c ? 1.0 : 0.0, 1e-10);
  }
}

TEST(Svd3, RankDeficientInput) {
  Tensor<double> m = Tensor<double>::from_rows({{1, 2, 3}, {2, 4, 6}, {0, 0, 0}});
  const auto svd = svd3(to_mat3(m));
  EXPECT_NEAR(svd.s[1], 0.0, 1e-10);
  EXPECT_NEAR(mat3_det(svd.u) * mat3_det(svd.u), 1.0, 1e-10);
}
