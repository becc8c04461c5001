#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mammoclu/backbone.hpp>

#include "testutil.hpp"

#include <cmath>

using namespace mammoclu;
using Eigen::MatrixXd;
using Tape = ad::Tape<double>;
using testutil::ParamMap;

namespace {

// Independent re-derivation: normalize rows in long double, then argmax dots.
std::vector<int> oracle_assign(const MatrixXd& pts, const MatrixXd& anc) {
  auto normalize = [](const MatrixXd& m) {
    std::vector<std::vector<long double>> out(size_t(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      long double ss = 0;
      for (Eigen::Index c = 0; c < m.cols(); ++c) ss += (long double)(m(r, c)) * m(r, c);
      long double n = sqrtl(ss) + 1e-12L;
      out[size_t(r)].resize(size_t(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) out[size_t(r)][size_t(c)] = m(r, c) / n;
    }
    return out;
  };
  auto P = normalize(pts), A = normalize(anc);
  std::vector<int> assign(P.size(), 0);
  for (size_t j = 0; j < P.size(); ++j) {
    long double best = -2;
    for (size_t i = 0; i < A.size(); ++i) {
      long double dot = 0;
      for (size_t c = 0; c < P[j].size(); ++c) dot += P[j][c] * A[i][c];
      if (dot > best) {
        best = dot;
        assign[j] = int(i);
      }
    }
  }
  return assign;
}

ParamStore make_store(const std::string& prefix, const ClusterConfig& cfg, int in_dim,
                      std::uint64_t seed) {
  ParamStore ps;
  Rng rng(seed);
  init_backbone(ps, rng, prefix, cfg, in_dim);
  return ps;
}

}  // namespace

TEST_CASE("select_anchors places the uniform lattice") {
  CHECK(select_anchors(4, 4, 2, 2) == std::vector<int>{5, 7, 13, 15});
  CHECK(select_anchors(5, 7, 1, 1) == std::vector<int>{2 * 7 + 3});
  CHECK(select_anchors(4, 4, 1, 1) == std::vector<int>{2 * 4 + 2});
  CHECK(select_anchors(3, 3, 3, 3) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8});
  CHECK_THROWS_AS(select_anchors(2, 2, 3, 1), std::invalid_argument);
}

TEST_CASE("anchor_feature averages anchor and neighbors") {
  using Row = Eigen::Matrix<double, 1, Eigen::Dynamic>;
  Row a(5);
  a << 1, 1, 1, 0, 0;
  MatrixXd zeros = MatrixXd::Zero(4, 5);
  Row r = anchor_feature<double>(a, zeros);
  CHECK(r(0) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(r(3) == 0.0);

  MatrixXd same = a.replicate(4, 1);
  CHECK(anchor_feature<double>(a, same) == a);

  Row zero = Row::Zero(3);
  MatrixXd nines = MatrixXd::Constant(8, 3, 0.9);
  Row r8 = anchor_feature<double>(zero, nines);
  CHECK(r8(1) == doctest::Approx(0.8).epsilon(1e-12));

  MatrixXd bad = MatrixXd::Zero(4, 4);
  CHECK_THROWS_AS(anchor_feature<double>(a, bad), std::invalid_argument);
}

TEST_CASE("assign_clusters matches a brute-force oracle on 100 instances") {
  std::mt19937_64 rng(21);
  for (int inst = 0; inst < 100; ++inst) {
    int n = 1 + int(rng() % 64);
    int d = 2 + int(rng() % 6);
    MatrixXd pts = testutil::random_mat(rng, n, d);
    MatrixXd anc = testutil::random_mat(rng, 4, d);
    CHECK(assign_clusters<double>(pts, anc) == oracle_assign(pts, anc));
  }
}

TEST_CASE("assign_clusters edge rules") {
  MatrixXd pts(2, 5);
  pts << 1, 0, 0, 0, 0, 0.3, 0.3, 0, 0, 0;
  MatrixXd one = MatrixXd::Random(1, 5);
  CHECK(assign_clusters<double>(pts, one) == std::vector<int>{0, 0});

  MatrixXd anc(2, 5);
  anc << 1, 0, 0, 0, 0, 0, 1, 0, 0, 0;
  MatrixXd p1(1, 5);
  p1 << 1, 0, 0, 0, 0;
  CHECK(assign_clusters<double>(p1, anc)[0] == 0);

  MatrixXd dup(3, 5);
  dup.row(0) = p1.row(0);
  dup.row(1) = p1.row(0);
  dup.row(2) = p1.row(0);
  CHECK(assign_clusters<double>(p1, dup)[0] == 0);

  MatrixXd none(0, 5);
  CHECK_THROWS_AS(assign_clusters<double>(p1, none), std::invalid_argument);
}

TEST_CASE("assignment is invariant to positive rescaling") {
  std::mt19937_64 rng(22);
  for (double lam : {0.5, 2.0, 1024.0, 1e-3, 3.7}) {
    MatrixXd pts = testutil::random_mat(rng, 40, 5);
    MatrixXd anc = testutil::random_mat(rng, 4, 5);
    auto base = assign_clusters<double>(pts, anc);
    MatrixXd ps = pts * lam, as = anc * lam;
    CHECK(assign_clusters<double>(ps, as) == base);
  }
}

TEST_CASE("aggregation matches the weighted-mean formula recomputed by hand") {
  std::mt19937_64 rng(23);
  ClusterConfig cfg;
  cfg.stages = {{3, 1, 1}};
  ParamStore ps = make_store("t", cfg, 3, 5);

  Tape t;
  ParamBind<double> P(t, ps);
  MatrixXd x = testutil::random_mat(rng, 8, 3);
  int xi = t.constant(x);
  auto tr = cluster_op_traced(P, "t.s0.b0", xi, 2, 4, 1, 2, 4);

  REQUIRE(tr.assignment.size() == 8);
  int disp = t.mul_colvec(t.gather_rows(tr.agg, tr.assignment), tr.gate);
  MatrixXd v = t.val(tr.values);
  MatrixXd va = t.val(tr.anchor_values);
  MatrixXd s = t.val(tr.gate);
  for (int c = 0; c < 2; ++c) {
    Eigen::RowVectorXd num = va.row(c);
    double den = 1.0;
    for (int j = 0; j < 8; ++j) {
      if (tr.assignment[size_t(j)] != c) continue;
      num += s(j, 0) * v.row(j);
      den += s(j, 0);
    }
    Eigen::RowVectorXd g = num / den;
    for (int k = 0; k < 3; ++k)
      CHECK(t.val(tr.agg)(c, k) == doctest::Approx(g(k)).epsilon(1e-10));
  }
  for (int j = 0; j < 8; ++j)
    for (int k = 0; k < 3; ++k)
      CHECK(t.val(disp)(j, k) ==
            doctest::Approx(s(j, 0) * t.val(tr.agg)(tr.assignment[size_t(j)], k))
                .epsilon(1e-12));
}

TEST_CASE("identical members aggregate to their own value") {
  ClusterConfig cfg;
  cfg.stages = {{3, 1, 1}};
  ParamStore ps = make_store("t", cfg, 3, 6);
  Tape t;
  ParamBind<double> P(t, ps);
  MatrixXd x = MatrixXd::Constant(4, 3, 0.37);
  x.col(1).setConstant(-0.8);
  int xi = t.constant(x);
  auto tr = cluster_op_traced(P, "t.s0.b0", xi, 2, 2, 1, 1, 4);
  const MatrixXd& v = t.val(tr.values);
  for (int k = 0; k < 3; ++k)
    CHECK(t.val(tr.agg)(0, k) == doctest::Approx(v(0, k)).epsilon(1e-12));
}

TEST_CASE("an empty cluster is harmless") {
  ClusterConfig cfg;
  cfg.stages = {{2, 1, 1}};
  ParamStore ps = make_store("t", cfg, 2, 7);
  Tape t;
  ParamBind<double> P(t, ps);
  MatrixXd x = MatrixXd::Zero(4, 2);
  x.col(0).setConstant(0.5);
  x.col(1).setConstant(0.2);
  int xi = t.constant(x);
  auto tr = cluster_op_traced(P, "t.s0.b0", xi, 2, 2, 1, 2, 4);

  for (int a : tr.assignment) CHECK(a == 0);
  int empty = 1;
  for (int k = 0; k < 2; ++k)
    CHECK(t.val(tr.agg)(empty, k) ==
          doctest::Approx(t.val(tr.anchor_values)(empty, k)).epsilon(1e-12));
  CHECK(t.val(tr.out).allFinite());
}

TEST_CASE("zero-initialized residual projections make the block an identity") {
  std::mt19937_64 rng(24);
  ClusterConfig cfg;
  cfg.stages = {{5, 1, 1}};
  ParamStore ps = make_store("t", cfg, 5, 8);
  ps.at("t.s0.b0.out.W").setZero();
  ps.at("t.s0.b0.out.b").setZero();
  ps.at("t.s0.b0.ffn2.W").setZero();
  ps.at("t.s0.b0.ffn2.b").setZero();

  Tape t;
  ParamBind<double> P(t, ps);
  MatrixXd x = testutil::random_mat(rng, 16, 5);
  int y = context_cluster_block(P, "t.s0.b0", t.constant(x), 4, 4, 2, 2, 4);
  CHECK(t.val(y) == x);
}

TEST_CASE("block keeps the grid shape for both neighborhood sizes") {
  std::mt19937_64 rng(25);
  for (int k : {4, 8}) {
    ClusterConfig cfg;
    cfg.stages = {{4, 1, 1}};
    cfg.k_neighbors = k;
    ParamStore ps = make_store("t", cfg, 4, 9);
    Tape t;
    ParamBind<double> P(t, ps);
    MatrixXd x = testutil::random_mat(rng, 24, 4);
    int y = context_cluster_block(P, "t.s0.b0", t.constant(x), 4, 6, 2, 2, k);
    CHECK(t.val(y).rows() == 24);
    CHECK(t.val(y).cols() == 4);
    CHECK(t.val(y).allFinite());
  }
}

TEST_CASE("block parameter gradients match finite differences") {
  std::mt19937_64 rng(26);
  ClusterConfig cfg;
  cfg.stages = {{6, 1, 1}};
  ParamStore ps = make_store("t", cfg, 6, 10);
  MatrixXd x = testutil::random_mat(rng, 16, 6);
  MatrixXd wsum = testutil::random_mat(rng, 16, 6);

  ParamMap pm = ps.p;
  pm["__input"] = x;
  auto res = testutil::grad_check(pm, [&wsum](const ParamMap& pm) {
    ParamStore st;
    st.p = pm;
    MatrixXd xin = st.p.at("__input");
    st.p.erase("__input");
    Tape t;
    ParamBind<double> P(t, st);
    int xi = t.leaf(xin);
    int y = context_cluster_block(P, "t.s0.b0", xi, 4, 4, 2, 2, 4);
    int loss = t.sum_all(t.mul(y, t.constant(wsum)));
    t.backward(loss);
    auto g = P.grads();
    g["__input"] = t.grad_of(xi);
    return std::make_pair(t.val(loss)(0, 0), g);
  });
  INFO("worst: ", res.worst);
  CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("point_reducer shape, identity and constant preservation") {
  std::mt19937_64 rng(27);
  ParamStore ps;
  Rng prng(3);
  init_linear(ps, prng, "red1", 3, 3);
  ps.at("red1.W").setIdentity();
  ps.at("red1.b").setZero();
  Tape t;
  ParamBind<double> P(t, ps);
  MatrixXd x = testutil::random_mat(rng, 12, 3);
  int y = point_reducer(P, "red1", t.constant(x), 3, 4, 1);
  CHECK(t.val(y) == x);

  ParamStore ps2;
  init_linear(ps2, prng, "red2", 4, 2);
  ps2.at("red2.W").setConstant(0.25);
  ps2.at("red2.b").setZero();
  Tape t2;
  ParamBind<double> P2(t2, ps2);
  int y2 = point_reducer(P2, "red2", t2.constant(MatrixXd::Constant(4, 1, 0.7)), 2, 2, 2);
  CHECK(t2.val(y2).rows() == 1);
  CHECK(t2.val(y2).cols() == 2);
  CHECK(t2.val(y2)(0, 0) == doctest::Approx(0.7).epsilon(1e-12));

  ParamStore ps3;
  init_linear(ps3, prng, "red3", 4 * 3, 5);
  Tape t3;
  ParamBind<double> P3(t3, ps3);
  int y3 = point_reducer(P3, "red3", t3.constant(testutil::random_mat(rng, 16, 3)), 4, 4, 2);
  CHECK(t3.val(y3).rows() == 4);
  CHECK(t3.val(y3).cols() == 5);

  CHECK_THROWS_WITH_AS(
      (void)point_reducer(P3, "red3", t3.constant(MatrixXd::Zero(6, 3)), 3, 2, 2),
      doctest::Contains("3"), std::invalid_argument);
}

TEST_CASE("backbone stage shapes follow the reduce factors") {
  ClusterConfig tiny = preset_config("tiny");
  ParamStore ps = make_store("g", tiny, 5, 11);
  Tape t;
  ParamBind<double> P(t, ps);
  std::mt19937_64 rng(28);
  MatrixXd x = testutil::random_mat(rng, 32 * 32, 5);
  auto out = backbone_forward(P, "g", t.constant(x), 32, 32, tiny);
  REQUIRE(out.stage_shapes.size() == 2);
  CHECK(out.stage_shapes[0] == std::pair<int, int>(8, 8));
  CHECK(out.stage_shapes[1] == std::pair<int, int>(4, 4));
  CHECK(out.h == 4);
  CHECK(t.val(out.final_points).rows() == 16);
  CHECK(t.val(out.final_points).cols() == 32);
  CHECK(t.val(out.pooled).rows() == 1);
  CHECK(t.val(out.pooled).cols() == 32);
  CHECK(t.val(out.pooled)(0, 3) ==
        doctest::Approx(t.val(out.final_points).col(3).mean()).epsilon(1e-12));
}

TEST_CASE("zero-init residuals reduce the backbone to the stem") {
  std::mt19937_64 rng(29);
  ClusterConfig cfg;
  cfg.stages = {{4, 1, 2}};
  ParamStore ps = make_store("g", cfg, 5, 12);
  ps.at("g.s0.b0.out.W").setZero();
  ps.at("g.s0.b0.out.b").setZero();
  ps.at("g.s0.b0.ffn2.W").setZero();
  ps.at("g.s0.b0.ffn2.b").setZero();

  Tape t;
  ParamBind<double> P(t, ps);
  MatrixXd x = testutil::random_mat(rng, 16, 5);
  auto out = backbone_forward(P, "g", t.constant(x), 4, 4, cfg);

  Tape t2;
  ParamBind<double> P2(t2, ps);
  int stem = point_reducer(P2, "g.s0.red", t2.constant(x), 4, 4, 2);
  CHECK(t.val(out.pooled) == t2.val(t2.colmean(stem)));
}

TEST_CASE("backbone gradients match finite differences end to end") {
  std::mt19937_64 rng(30);
  ClusterConfig cfg;
  cfg.stages = {{5, 1, 2}, {7, 1, 2}};
  ParamStore ps = make_store("g", cfg, 5, 13);
  MatrixXd x = testutil::random_mat(rng, 64, 5);
  MatrixXd wsum = testutil::random_mat(rng, 1, 7);

  auto res = testutil::grad_check(ps.p, [&x, &wsum, &cfg](const ParamMap& pm) {
    ParamStore st;
    st.p = pm;
    Tape t;
    ParamBind<double> P(t, st);
    auto out = backbone_forward(P, "g", t.constant(x), 8, 8, cfg);
    int loss = t.sum_all(t.mul(out.pooled, t.constant(wsum)));
    t.backward(loss);
    return std::make_pair(t.val(loss)(0, 0), P.grads());
  });
  INFO("worst: ", res.worst);
  CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("presets and config validation") {
  for (const char* name : {"tiny", "small", "local", "paper-scale"})
    CHECK_NOTHROW(validate(preset_config(name)));
  CHECK_THROWS_AS(preset_config("huge"), std::invalid_argument);

  ClusterConfig bad;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad.stages = {{8, 1, 3}};
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad.stages = {{8, 1, 2}};
  bad.k_neighbors = 5;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
}

TEST_CASE("neighbor geometry clamps at the borders") {
  auto nb = neighbor_indices(4, 4, 0, 0, 4);
  CHECK(nb == std::vector<int>{0, 4, 0, 1});
  auto nb8 = neighbor_indices(4, 4, 3, 3, 8);
  CHECK(nb8.size() == 8);
  for (int q : nb8) {
    CHECK(q >= 0);
    CHECK(q < 16);
  }
  CHECK(neighbor_indices(4, 4, 1, 1, 4) == std::vector<int>{1, 9, 4, 6});
}
