#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mammoclu/tape.hpp>

#include "testutil.hpp"

#include <cmath>

using Tape = mammoclu::ad::Tape<double>;
using Eigen::MatrixXd;
using testutil::ParamMap;

namespace {

using Fwd = std::function<std::pair<double, ParamMap>(const ParamMap&)>;

double check(ParamMap params, const Fwd& fwd, double tol = 1e-6) {
  auto res = testutil::grad_check(std::move(params), fwd);
  INFO("worst entry: ", res.worst);
  CHECK(res.max_rel_err < tol);
  return res.max_rel_err;
}

}  // namespace

TEST_CASE("arithmetic ops match finite differences") {
  std::mt19937_64 rng(1);
  ParamMap p;
  p["A"] = testutil::random_mat(rng, 3, 4);
  p["B"] = testutil::random_mat(rng, 3, 4);
  check(p, [](const ParamMap& p) {
    Tape t;
    int A = t.leaf(p.at("A"));
    int B = t.leaf(p.at("B"));
    int u = t.mul(t.add(A, B), t.sub(t.scale(A, 2.0), t.add_const(B, 0.3)));
    int loss = t.sum_all(t.abs(u));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"A", t.grad_of(A)}, {"B", t.grad_of(B)}});
  });
}

TEST_CASE("matmul, linear and transpose match finite differences") {
  std::mt19937_64 rng(2);
  ParamMap p;
  p["X"] = testutil::random_mat(rng, 5, 3);
  p["W"] = testutil::random_mat(rng, 3, 4);
  p["b"] = testutil::random_mat(rng, 1, 4);
  check(p, [](const ParamMap& p) {
    Tape t;
    int X = t.leaf(p.at("X"));
    int W = t.leaf(p.at("W"));
    int b = t.leaf(p.at("b"));
    int h = t.gelu(t.linear(X, W, b));
    int sq = t.matmul(t.transpose(h), h);
    int loss = t.mean_all(sq);
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"X", t.grad_of(X)},
                                                      {"W", t.grad_of(W)},
                                                      {"b", t.grad_of(b)}});
  });
}

TEST_CASE("column-vector broadcast ops match finite differences") {
  std::mt19937_64 rng(3);
  ParamMap p;
  p["X"] = testutil::random_mat(rng, 4, 3);
  p["s"] = (testutil::random_mat(rng, 4, 1).array().abs() + 0.5).matrix();
  p["d"] = (testutil::random_mat(rng, 4, 1).array().abs() + 0.5).matrix();
  check(p, [](const ParamMap& p) {
    Tape t;
    int X = t.leaf(p.at("X"));
    int s = t.leaf(p.at("s"));
    int d = t.leaf(p.at("d"));
    int y = t.div_colvec(t.mul_colvec(X, s), d);
    int loss = t.sum_all(t.sigmoid(y));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"X", t.grad_of(X)},
                                                      {"s", t.grad_of(s)},
                                                      {"d", t.grad_of(d)}});
  });
}

TEST_CASE("scalar-variable broadcast ops match finite differences") {
  std::mt19937_64 rng(4);
  ParamMap p;
  p["X"] = testutil::random_mat(rng, 3, 3);
  p["c1"] = testutil::random_mat(rng, 1, 1);
  p["c2"] = testutil::random_mat(rng, 1, 1);
  check(p, [](const ParamMap& p) {
    Tape t;
    int X = t.leaf(p.at("X"));
    int c1 = t.leaf(p.at("c1"));
    int c2 = t.leaf(p.at("c2"));
    int loss = t.mean_all(t.gelu(t.add_scalarvar(t.mul_scalarvar(X, c1), c2)));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"X", t.grad_of(X)},
                                                      {"c1", t.grad_of(c1)},
                                                      {"c2", t.grad_of(c2)}});
  });
}

TEST_CASE("reductions match finite differences") {
  std::mt19937_64 rng(5);
  ParamMap p;
  p["X"] = testutil::random_mat(rng, 6, 4);
  check(p, [](const ParamMap& p) {
    Tape t;
    int X = t.leaf(p.at("X"));
    int parts = t.concat_cols({t.colmean(X), t.colmax(X)});
    int loss = t.add(t.sum_all(parts), t.mean_all(t.rownorm(X)));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"X", t.grad_of(X)}});
  });
}

TEST_CASE("colmax picks the lowest row index on ties") {
  Tape t;
  MatrixXd v(3, 2);
  v << 2.0, -1.0, 2.0, 5.0, 1.0, 5.0;
  int x = t.leaf(v);
  int m = t.colmax(x);
  CHECK(t.val(m)(0, 0) == 2.0);
  CHECK(t.val(m)(0, 1) == 5.0);
  int loss = t.sum_all(m);
  t.backward(loss);
  MatrixXd g = t.grad_of(x);
  CHECK(g(0, 0) == 1.0);
  CHECK(g(1, 0) == 0.0);
  CHECK(g(1, 1) == 1.0);
  CHECK(g(2, 1) == 0.0);
}

TEST_CASE("gather, select and segment ops accumulate correctly") {
  std::mt19937_64 rng(6);
  ParamMap p;
  p["X"] = testutil::random_mat(rng, 5, 3);
  check(p, [](const ParamMap& p) {
    Tape t;
    int X = t.leaf(p.at("X"));
    int gath = t.gather_rows(X, {0, 2, 2, 4, 1});
    int seg = t.segment_sum(gath, {0, 1, 0, 1, 1}, 2);
    int sel = t.select_per_row(seg, {2, 0});
    int loss = t.sum_all(t.mul(sel, sel));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"X", t.grad_of(X)}});
  });
}

TEST_CASE("concatenation routes gradients to each part") {
  std::mt19937_64 rng(7);
  ParamMap p;
  p["A"] = testutil::random_mat(rng, 2, 3);
  p["B"] = testutil::random_mat(rng, 4, 3);
  p["C"] = testutil::random_mat(rng, 6, 2);
  check(p, [](const ParamMap& p) {
    Tape t;
    int A = t.leaf(p.at("A"));
    int B = t.leaf(p.at("B"));
    int C = t.leaf(p.at("C"));
    int all = t.concat_cols({t.concat_rows({A, B}), C});
    int loss = t.sum_all(t.sigmoid(all));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"A", t.grad_of(A)},
                                                      {"B", t.grad_of(B)},
                                                      {"C", t.grad_of(C)}});
  });
}

TEST_CASE("softmax_col sums to one and matches finite differences") {
  std::mt19937_64 rng(8);
  MatrixXd z = testutil::random_mat(rng, 5, 1, 2.0);
  {
    Tape t;
    int y = t.softmax_col(t.leaf(z));
    CHECK(t.val(y).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.val(y).minCoeff() > 0.0);
  }
  ParamMap p;
  p["z"] = z;
  p["w"] = testutil::random_mat(rng, 5, 1);
  check(p, [](const ParamMap& p) {
    Tape t;
    int zi = t.leaf(p.at("z"));
    int w = t.leaf(p.at("w"));
    int loss = t.sum_all(t.mul(t.softmax_col(zi), w));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"z", t.grad_of(zi)}, {"w", t.grad_of(w)}});
  });
}

TEST_CASE("layer_norm normalizes rows and matches finite differences") {
  std::mt19937_64 rng(9);
  MatrixXd x = testutil::random_mat(rng, 4, 6, 3.0);
  {
    Tape t;
    int y = t.layer_norm(t.leaf(x), t.constant(MatrixXd::Ones(1, 6)),
                         t.constant(MatrixXd::Zero(1, 6)));
    for (int r = 0; r < 4; ++r) {
      CHECK(t.val(y).row(r).mean() == doctest::Approx(0.0).epsilon(1e-9));
      double var = t.val(y).row(r).array().square().mean();
      CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  ParamMap p;
  p["x"] = x;
  p["g"] = testutil::random_mat(rng, 1, 6);
  p["b"] = testutil::random_mat(rng, 1, 6);
  check(p, [](const ParamMap& p) {
    Tape t;
    int xi = t.leaf(p.at("x"));
    int g = t.leaf(p.at("g"));
    int b = t.leaf(p.at("b"));
    int loss = t.mean_all(t.gelu(t.layer_norm(xi, g, b)));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"x", t.grad_of(xi)},
                                                      {"g", t.grad_of(g)},
                                                      {"b", t.grad_of(b)}});
  });
}

TEST_CASE("minmax_norm01 maps extremes to 0 and 1, constants to zero") {
  Tape t;
  MatrixXd v(2, 3);
  v << 3.0, -1.0, 0.5, 2.0, 7.0, 1.0;
  int y = t.minmax_norm01(t.leaf(v));
  CHECK(t.val(y).minCoeff() == 0.0);
  CHECK(t.val(y).maxCoeff() == 1.0);
  CHECK(t.val(y)(0, 1) == 0.0);
  CHECK(t.val(y)(1, 1) == 1.0);

  int flat = t.minmax_norm01(t.leaf(MatrixXd::Constant(3, 3, 4.2)));
  CHECK(t.val(flat).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("minmax_norm01 gradient matches finite differences") {
  std::mt19937_64 rng(10);
  ParamMap p;
  MatrixXd x(3, 3);
  x << 0.1, 0.9, 0.4, -0.7, 0.25, 0.55, 1.3, -0.2, 0.7;
  p["x"] = x;
  p["w"] = testutil::random_mat(rng, 3, 3);
  check(p, [](const ParamMap& p) {
    Tape t;
    int xi = t.leaf(p.at("x"));
    int w = t.leaf(p.at("w"));
    int loss = t.sum_all(t.mul(t.minmax_norm01(xi), w));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), ParamMap{{"x", t.grad_of(xi)}, {"w", t.grad_of(w)}});
  });
}

TEST_CASE("bce_prob value, clamp and gradient") {
  auto bce = [](double p, double y) { return -(y * std::log(p) + (1 - y) * std::log(1 - p)); };
  {
    Tape t;
    int p = t.leaf(MatrixXd::Constant(1, 1, 0.3));
    int l = t.bce_prob(p, 1.0);
    CHECK(t.val(l)(0, 0) == doctest::Approx(bce(0.3, 1.0)).epsilon(1e-12));
    t.backward(l);
    CHECK(t.grad_of(p)(0, 0) == doctest::Approx((0.3 - 1.0) / (0.3 * 0.7)).epsilon(1e-10));
  }
  {
    Tape t;
    int p = t.leaf(MatrixXd::Zero(1, 1));
    int l = t.bce_prob(p, 1.0);
    CHECK(t.val(l)(0, 0) == doctest::Approx(-std::log(1e-7)).epsilon(1e-9));
    t.backward(l);
    CHECK(t.grad_of(p)(0, 0) == 0.0);
  }
  ParamMap pm;
  pm["p"] = MatrixXd::Constant(1, 1, 0.42);
  check(pm, [](const ParamMap& pm) {
    Tape t;
    int p = t.leaf(pm.at("p"));
    int l = t.bce_prob(p, 0.0);
    t.backward(l);
    return std::make_pair(t.val(l)(0, 0), ParamMap{{"p", t.grad_of(p)}});
  });
}

TEST_CASE("bce_logit is stable and consistent with bce_prob on sigmoid") {
  for (double z : {-30.0, -2.0, 0.0, 1.7, 40.0}) {
    Tape t;
    int zi = t.leaf(MatrixXd::Constant(1, 1, z));
    int l1 = t.bce_logit(zi, 1.0);
    double sz = 1.0 / (1.0 + std::exp(-z));
    CHECK(std::isfinite(t.val(l1)(0, 0)));
    if (z > -20.0 && z < 20.0) {
      int l0 = t.bce_prob(t.sigmoid(zi), 1.0);
      CHECK(t.val(l1)(0, 0) == doctest::Approx(t.val(l0)(0, 0)).epsilon(1e-9));
      CHECK(t.val(l1)(0, 0) == doctest::Approx(-std::log(sz)).epsilon(1e-9));
    }
  }
  ParamMap pm;
  pm["z"] = MatrixXd::Constant(1, 1, 0.8);
  for (double y : {0.0, 1.0}) {
    check(pm, [y](const ParamMap& pm) {
      Tape t;
      int z = t.leaf(pm.at("z"));
      int l = t.bce_logit(z, y, 2.5);
      t.backward(l);
      return std::make_pair(t.val(l)(0, 0), ParamMap{{"z", t.grad_of(z)}});
    });
  }
}

TEST_CASE("gradients accumulate when a node is reused") {
  ParamMap p;
  p["x"] = MatrixXd::Constant(1, 1, 1.5);
  check(p, [](const ParamMap& p) {
    Tape t;
    int x = t.leaf(p.at("x"));
    int l = t.sum_all(t.add(t.mul(x, x), t.scale(x, 3.0)));
    t.backward(l);
    return std::make_pair(t.val(l)(0, 0), ParamMap{{"x", t.grad_of(x)}});
  });
  Tape t;
  int x = t.leaf(MatrixXd::Constant(1, 1, 1.5));
  int l = t.sum_all(t.add(t.mul(x, x), t.scale(x, 3.0)));
  t.backward(l);
  CHECK(t.grad_of(x)(0, 0) == doctest::Approx(2.0 * 1.5 + 3.0).epsilon(1e-12));
}

TEST_CASE("constants receive no gradient and shape errors throw") {
  Tape t;
  int c = t.constant(MatrixXd::Ones(2, 2));
  int x = t.leaf(MatrixXd::Ones(2, 2));
  int l = t.sum_all(t.mul(c, x));
  t.backward(l);
  CHECK(t.grad_of(c).cwiseAbs().maxCoeff() == 0.0);
  CHECK(t.grad_of(x).cwiseAbs().maxCoeff() == 1.0);

  CHECK_THROWS_AS((void)t.add(x, t.leaf(MatrixXd::Ones(3, 2))), std::invalid_argument);
  CHECK_THROWS_AS((void)t.matmul(x, t.leaf(MatrixXd::Ones(3, 3))), std::invalid_argument);
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
  CHECK_THROWS_AS((void)t.softmax_col(t.leaf(MatrixXd::Ones(2, 2))), std::invalid_argument);
  CHECK_THROWS_AS((void)t.gather_rows(x, {0, 5}), std::invalid_argument);
}

TEST_CASE("float tape runs the same graph within float tolerance") {
  using TapeF = mammoclu::ad::Tape<float>;
  Eigen::MatrixXf xf(2, 3);
  xf << 0.2f, -1.1f, 0.7f, 1.4f, 0.05f, -0.6f;
  TapeF t;
  int x = t.leaf(xf);
  int w = t.leaf(Eigen::MatrixXf::Constant(3, 1, 0.5f));
  int l = t.bce_logit(t.sum_all(t.matmul(t.sigmoid(x), w)), 1.0f);
  t.backward(l);

  Tape td;
  int xd = td.leaf(xf.cast<double>());
  int wd = td.leaf(MatrixXd::Constant(3, 1, 0.5));
  int ld = td.bce_logit(td.sum_all(td.matmul(td.sigmoid(xd), wd)), 1.0);
  td.backward(ld);

  CHECK(double(t.val(l)(0, 0)) == doctest::Approx(td.val(ld)(0, 0)).epsilon(1e-5));
  CHECK(double(t.grad_of(x)(0, 0)) == doctest::Approx(td.grad_of(xd)(0, 0)).epsilon(1e-4));
}
