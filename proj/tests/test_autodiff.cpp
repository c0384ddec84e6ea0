#include <gtest/gtest.h>

#include <memory>

#include "test_util.hpp"

using namespace endiff;
using namespace endiff::testing;
namespace ad = endiff::ad;

namespace {

using Op = std::function<ad::Var(const std::vector<ad::Var>&)>;

/// Checks reverse-mode gradients of sum(W .* op(inputs)) against central
/// differences for every input entry.
void check_op(const std::string& name, const Op& op, const std::vector<Matrix>& inputs, double tol = 1e-6) {
  RandomSource r(std::hash<std::string>{}(name));
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
  const ad::Var out = op(leaves);
  const Matrix w = random_matrix(r, out.rows(), out.cols());
  tape.backward(ad::sum(ad::mul(out, ad::Var(w))));

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Matrix& x) {
      std::vector<ad::Var> plain;
      for (std::size_t j = 0; j < inputs.size(); ++j) plain.emplace_back(j == k ? x : inputs[j]);
      return op(plain).value().cwiseProduct(w).sum();
    };
    const Matrix want = fd_gradient(f, inputs[k]);
    const Matrix got = leaves[k].grad();
    EXPECT_LT(max_abs(got - want), tol * std::max(1.0, max_abs(want))) << name << " input " << k;
  }
}

Matrix positive(RandomSource& r, Eigen::Index a, Eigen::Index b) {
  return random_matrix(r, a, b).cwiseAbs().array() + 0.5;
}

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  RandomSource r(1);
  const Matrix a = random_matrix(r, 3, 4), b = random_matrix(r, 3, 4), p = positive(r, 3, 4);
  check_op("add", [](auto& v) { return ad::add(v[0], v[1]); }, {a, b});
  check_op("sub", [](auto& v) { return ad::sub(v[0], v[1]); }, {a, b});
  check_op("mul", [](auto& v) { return ad::mul(v[0], v[1]); }, {a, b});
  check_op("div", [](auto& v) { return ad::div(v[0], v[1]); }, {a, p});
  check_op("scale", [](auto& v) { return ad::scale(v[0], -2.5); }, {a});
  check_op("neg", [](auto& v) { return ad::neg(v[0]); }, {a});
  check_op("add_scalar", [](auto& v) { return ad::add_scalar(v[0], 3.0); }, {a});
  check_op("exp", [](auto& v) { return ad::exp(v[0]); }, {a});
  check_op("log", [](auto& v) { return ad::log(v[0]); }, {p});
  check_op("sqrt", [](auto& v) { return ad::sqrt(v[0]); }, {p});
  check_op("square", [](auto& v) { return ad::square(v[0]); }, {a});
  check_op("tanh", [](auto& v) { return ad::tanh(v[0]); }, {a});
  check_op("sigmoid", [](auto& v) { return ad::sigmoid(v[0]); }, {a});
  check_op("softplus", [](auto& v) { return ad::softplus(v[0]); }, {a});
  check_op("silu", [](auto& v) { return ad::silu(v[0]); }, {a});
}

TEST(Autodiff, BroadcastAndMatmul) {
  RandomSource r(2);
  const Matrix a = random_matrix(r, 3, 4), b = random_matrix(r, 4, 2);
  const Matrix row = random_matrix(r, 1, 4), col = random_matrix(r, 3, 1), s = random_matrix(r, 1, 1);
  check_op("matmul", [](auto& v) { return ad::matmul(v[0], v[1]); }, {a, b});
  check_op("add_row", [](auto& v) { return ad::add_row(v[0], v[1]); }, {a, row});
  check_op("mul_row", [](auto& v) { return ad::mul_row(v[0], v[1]); }, {a, row});
  check_op("mul_col", [](auto& v) { return ad::mul_col(v[0], v[1]); }, {a, col});
  check_op("mul_scalar", [](auto& v) { return ad::mul_scalar(v[0], v[1]); }, {a, s});
  check_op("broadcast_rows", [](auto& v) { return ad::broadcast_rows(v[0], 5); }, {row});
}

TEST(Autodiff, Reductions) {
  RandomSource r(3);
  const Matrix a = random_matrix(r, 4, 3), b = random_matrix(r, 4, 2);
  check_op("sum", [](auto& v) { return ad::sum(v[0]); }, {a});
  check_op("col_mean", [](auto& v) { return ad::col_mean(v[0]); }, {a});
  check_op("row_sum", [](auto& v) { return ad::row_sum(v[0]); }, {a});
  check_op("project_com", [](auto& v) { return ad::project_com(v[0]); }, {a});
  check_op("slice_cols", [](auto& v) { return ad::slice_cols(v[0], 1, 2); }, {a});
  check_op("concat_cols", [](auto& v) { return ad::concat_cols({v[0], v[1], v[0]}); }, {a, b});
  check_op("reshape", [](auto& v) { return ad::reshape(v[0], 2, 6); }, {a});
  check_op("sum_squares", [](auto& v) { return ad::sum_squares(v[0]); }, {a});
}

TEST(Autodiff, Indexing) {
  RandomSource r(4);
  const Matrix a = random_matrix(r, 4, 3);
  auto idx = std::make_shared<const std::vector<Eigen::Index>>(std::vector<Eigen::Index>{3, 0, 0, 2, 1, 3});
  auto to = std::make_shared<const std::vector<Eigen::Index>>(std::vector<Eigen::Index>{1, 1, 0, 2});
  check_op("gather_rows", [idx](auto& v) { return ad::gather_rows(v[0], idx); }, {a});
  check_op("scatter_add_rows", [to](auto& v) { return ad::scatter_add_rows(v[0], to, 3); }, {a});
  check_op("repeat_rows", [](auto& v) { return ad::repeat_rows(v[0], 3); }, {a});
  check_op("group_sum_rows", [](auto& v) { return ad::group_sum_rows(v[0], 2); }, {a});
}

TEST(Autodiff, IndexingValues) {
  Matrix a(3, 1);
  a << 1, 2, 3;
  auto idx = std::make_shared<const std::vector<Eigen::Index>>(std::vector<Eigen::Index>{2, 2, 0});
  const Matrix g = ad::gather_rows(ad::Var(a), idx).value();
  EXPECT_EQ(g(0, 0), 3);
  EXPECT_EQ(g(2, 0), 1);
  const Matrix s = ad::scatter_add_rows(ad::Var(a), idx, 3).value();
  EXPECT_EQ(s(2, 0), 3);
  EXPECT_EQ(s(0, 0), 3);
  EXPECT_EQ(s(1, 0), 0);
  const Matrix rep = ad::repeat_rows(ad::Var(a), 2).value();
  EXPECT_EQ(rep(3, 0), 2);
  Matrix m(1, 6);
  m << 1, 2, 3, 4, 5, 6;
  const Matrix rs = ad::reshape(ad::Var(m), 2, 3).value();
  EXPECT_EQ(rs(1, 0), 4);  // row-major
}

TEST(Autodiff, BlockOps) {
  RandomSource r(5);
  Matrix b(3, 9);
  for (int m = 0; m < 3; ++m) ad::set_block(b, m, random_block(r));
  const Matrix e = random_matrix(r, 3, 3);
  check_op("block_apply", [](auto& v) { return ad::block_apply(v[0], v[1]); }, {b, e});
  check_op("block_transpose", [](auto& v) { return ad::block_transpose(v[0]); }, {b});
  check_op("block_inverse", [](auto& v) { return ad::block_inverse(v[0]); }, {b}, 1e-5);
  check_op("block_logabsdet", [](auto& v) { return ad::block_logabsdet(v[0]); }, {b}, 1e-5);
  const Matrix va = random_matrix(r, 9, 2), vc = random_matrix(r, 9, 2);
  check_op("block_outer", [](auto& v) { return ad::block_outer(v[0], v[1]); }, {va, vc});
}

TEST(Autodiff, BlockLayoutAndValues) {
  RandomSource r(6);
  const Matrix3 blk = random_block(r);
  Matrix b(1, 9);
  ad::set_block(b, 0, blk);
  EXPECT_EQ(b(0, 3 * 1 + 2), blk(1, 2));
  EXPECT_EQ(ad::block_at(b, 0), blk);
  const Matrix e = random_matrix(r, 1, 3);
  EXPECT_LT(max_abs(ad::block_apply(ad::Var(b), ad::Var(e)).value() - (blk * e.transpose()).transpose()), 1e-14);
  EXPECT_LT(max_abs(ad::block_at(ad::block_inverse(ad::Var(b)).value(), 0) - blk.inverse()), 1e-12);
  EXPECT_NEAR(ad::block_logabsdet(ad::Var(b)).item(), std::log(std::abs(blk.determinant())), 1e-12);

  // block_outer: sum_c a_c c_c^T per node.
  const Matrix va = random_matrix(r, 3, 2), vc = random_matrix(r, 3, 2);
  const Matrix3 want = va.col(0) * vc.col(0).transpose() + va.col(1) * vc.col(1).transpose();
  EXPECT_LT(max_abs(ad::block_at(ad::block_outer(ad::Var(va), ad::Var(vc)).value(), 0) - want), 1e-14);
}

TEST(Autodiff, BackwardRequiresScalarOnSameTape) {
  ad::Tape t1, t2;
  const ad::Var a = t1.leaf(Matrix::Ones(2, 2));
  EXPECT_THROW(t1.backward(a), InvalidInput);
  const ad::Var b = t2.leaf(Matrix::Ones(2, 2));
  EXPECT_THROW(ad::add(a, b), InvalidInput);
  EXPECT_THROW(t2.backward(ad::sum(a)), InvalidInput);
}

TEST(Autodiff, UntrackedOpsStayOffTape) {
  ad::Tape tape;
  const ad::Var a(Matrix::Ones(2, 2));
  const ad::Var b = ad::exp(a);
  EXPECT_FALSE(b.tracked());
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_EQ(b.grad(), Matrix::Zero(2, 2));
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  ad::Tape tape;
  const ad::Var x = tape.leaf(Matrix::Constant(1, 1, 3.0));
  const ad::Var y = ad::mul(x, x);  // x^2
  tape.backward(ad::add(y, x));     // d/dx (x^2 + x) = 2x + 1
  EXPECT_NEAR(x.grad()(0, 0), 7.0, 1e-14);
}

TEST(Autodiff, ShapeErrors) {
  const ad::Var a(Matrix::Ones(2, 3)), b(Matrix::Ones(3, 2));
  EXPECT_THROW(ad::add(a, b), InvalidInput);
  EXPECT_THROW(ad::reshape(a, 4, 2), InvalidInput);
  EXPECT_THROW(ad::group_sum_rows(ad::Var(Matrix::Ones(3, 1)), 2), InvalidInput);
}

TEST(Autodiff, SoftplusIsStableForLargeInputs) {
  EXPECT_NEAR(ad::detail::softplus(1000.0), 1000.0, 1e-12);
  EXPECT_NEAR(ad::detail::softplus(0.0), std::log(2.0), 1e-15);
  const ad::Var s = ad::softplus(ad::Var(Matrix::Constant(1, 1, -800.0)));
  EXPECT_TRUE(std::isfinite(s.item()));
}
