#include <functional>

#include "doctest.h"
#include "support/numeric.hpp"

using namespace percept;

namespace {

// Checks d(sum(w * f(x)))/dx for a fixed random probe w.
double check_op(Rng& rng, const Mat& x0, const std::function<ag::Var(const ag::Var&)>& f) {
  const Mat probe = testing::random_mat(rng, f(ag::constant(x0)).rows(), f(ag::constant(x0)).cols());
  auto scalar = [&](const Mat& x) { return f(ag::constant(x)).value().cwiseProduct(probe).sum(); };
  ag::Var x = ag::parameter(x0);
  ag::backward(ag::sum(ag::mul(f(x), ag::constant(probe))));
  return testing::gradient_error(scalar, x0, x.grad());
}

}  // namespace

TEST_CASE("elementwise and matrix ops") {
  Rng rng(1);
  constexpr double kTol = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const Mat a = testing::random_mat(rng, 3, 5), b = testing::random_mat(rng, 5, 4), row = testing::random_mat(rng, 1, 5);
    CHECK(check_op(rng, a, [&](const ag::Var& x) { return ag::matmul(x, ag::constant(b)); }) < kTol);
    CHECK(check_op(rng, b, [&](const ag::Var& x) { return ag::matmul(ag::constant(a), x); }) < kTol);
    CHECK(check_op(rng, a, [&](const ag::Var& x) { return ag::transpose(x); }) < kTol);
    CHECK(check_op(rng, a, [&](const ag::Var& x) { return ag::add(x, ag::scale(x, 2.5)); }) < kTol);
    CHECK(check_op(rng, row, [&](const ag::Var& r) { return ag::add_row(ag::constant(a), r); }) < kTol);
    CHECK(check_op(rng, a, [&](const ag::Var& x) { return ag::mul(x, x); }) < kTol);
    CHECK(check_op(rng, a, [&](const ag::Var& x) { return ag::gelu(x); }) < kTol);
    CHECK(check_op(rng, a, [&](const ag::Var& x) { return ag::softmax_rows(x); }) < kTol);
    CHECK(check_op(rng, a, [&](const ag::Var& x) { return ag::rms_norm(x, ag::constant(row)); }) < kTol);
    CHECK(check_op(rng, row, [&](const ag::Var& g) { return ag::rms_norm(ag::constant(a), g); }) < kTol);
    const std::vector<int> idx = {2, 0, 2, 1};
    CHECK(check_op(rng, a, [&](const ag::Var& t) { return ag::gather_rows(t, idx); }) < kTol);
    const Mat middle = testing::random_mat(rng, 2, 5);
    CHECK(check_op(rng, a, [&](const ag::Var& x) {
            std::vector<ag::Var> parts = {x, ag::constant(middle), x};
            return ag::concat_rows(parts);
          }) < kTol);
  }
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(2);
  const Mat a = testing::random_mat(rng, 4, 6, 30.0);
  const Mat s = ag::softmax_rows(ag::constant(a)).value();
  for (int r = 0; r < 4; ++r) CHECK(s.row(r).sum() == doctest::Approx(1.0));
  const Mat shifted = ag::softmax_rows(ag::constant((a.array() + 100.0).matrix())).value();
  CHECK((s - shifted).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention gradient and mask") {
  Rng rng(3);
  for (int prefix : {0, 2, 5}) {
    const Mat qkv = testing::random_mat(rng, 6, 3 * 8);
    CHECK(check_op(rng, qkv, [&](const ag::Var& x) { return ag::attention(x, 2, prefix); }) < 1e-6);
  }
  SUBCASE("prefix rows ignore text rows and text rows ignore the future") {
    const Mat qkv = testing::random_mat(rng, 6, 12);
    const Mat out = ag::attention(ag::constant(qkv), 2, 3).value();
    Mat changed = qkv;
    changed.row(5) = testing::random_mat(rng, 1, 12);
    const Mat out2 = ag::attention(ag::constant(changed), 2, 3).value();
    for (int r = 0; r < 5; ++r) CHECK((out.row(r) - out2.row(r)).cwiseAbs().maxCoeff() < 1e-15);
    Mat changed_text = qkv;
    changed_text.row(3) = testing::random_mat(rng, 1, 12);
    const Mat out3 = ag::attention(ag::constant(changed_text), 2, 3).value();
    for (int r = 0; r < 3; ++r) CHECK((out.row(r) - out3.row(r)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((out.row(4) - out3.row(4)).cwiseAbs().maxCoeff() > 1e-9);
  }
}

TEST_CASE("cross entropy with masked rows") {
  Rng rng(4);
  const Mat logits = testing::random_mat(rng, 5, 7);
  const std::vector<int> targets = {1, 3, 0, 6, 2};
  const std::vector<double> weights = {1, 0, 1, 1, 0};
  double ref = 0;
  for (int r : {0, 2, 3}) {
    const double lse = std::log(logits.row(r).array().exp().sum());
    ref += lse - logits(r, targets[static_cast<std::size_t>(r)]);
  }
  CHECK(ag::cross_entropy(ag::constant(logits), targets, weights).item() == doctest::Approx(ref / 3));
  ag::Var x = ag::parameter(logits);
  ag::backward(ag::cross_entropy(x, targets, weights));
  auto f = [&](const Mat& m) { return ag::cross_entropy(ag::constant(m), targets, weights).item(); };
  CHECK(testing::gradient_error(f, logits, x.grad()) < 1e-6);
  CHECK(x.grad().row(1).isZero());
}

TEST_CASE("external loss routes the supplied gradient") {
  ag::Var x = ag::parameter(Mat::Ones(2, 2));
  const Mat g = Mat::Constant(2, 2, 0.25);
  ag::Var l = ag::external_loss(ag::scale(x, 3.0), 1.5, g);
  CHECK(l.item() == 1.5);
  ag::backward(l);
  CHECK((x.grad() - Mat::Constant(2, 2, 0.75)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("gradients accumulate over shared subgraphs") {
  ag::Var x = ag::parameter(Mat::Constant(1, 1, 2.0));
  ag::Var y = ag::mul(x, x);
  ag::backward(ag::sum(ag::add(y, y)));
  CHECK(x.grad()(0, 0) == doctest::Approx(8.0));
}
