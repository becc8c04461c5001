#pragma once

#include <mammoclu/params.hpp>

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mammoclu {

struct StageSpec {
  int width = 0;
  int blocks = 1;
  int reduce = 1;
  int n_h = 0, n_w = 0;  // 0 means use the config-level anchor lattice
};

struct ClusterConfig {
  std::vector<StageSpec> stages;
  int anchor_h = 2, anchor_w = 2;
  int k_neighbors = 4;
  int ffn_ratio = 2;
};

inline void validate(const ClusterConfig& cfg) {
  if (cfg.stages.empty()) throw std::invalid_argument("backbone needs at least one stage");
  if (cfg.k_neighbors != 4 && cfg.k_neighbors != 8)
    throw std::invalid_argument("k_neighbors must be 4 or 8");
  if (cfg.anchor_h < 1 || cfg.anchor_w < 1)
    throw std::invalid_argument("anchor grid must be at least 1x1");
  if (cfg.ffn_ratio < 1) throw std::invalid_argument("ffn_ratio must be >= 1");
  for (const auto& st : cfg.stages) {
    if (st.width < 1) throw std::invalid_argument("stage width must be >= 1");
    if (st.blocks < 1) throw std::invalid_argument("stage blocks must be >= 1");
    if (st.reduce != 1 && st.reduce != 2 && st.reduce != 4)
      throw std::invalid_argument("stage reduce must be 1, 2 or 4");
    if (st.n_h < 0 || st.n_w < 0) throw std::invalid_argument("anchor override must be >= 0");
  }
}

// The first stage's reducer acts as the stem that lifts 5-dim points to the
// stage-0 width.
inline ClusterConfig preset_config(const std::string& name) {
  ClusterConfig c;
  if (name == "tiny") {
    c.stages = {{16, 1, 4}, {32, 1, 2}};
  } else if (name == "small") {
    c.stages = {{32, 1, 4}, {64, 1, 2}, {128, 2, 2}, {256, 1, 2}};
  } else if (name == "local") {
    c.stages = {{32, 1, 4}, {64, 1, 2}, {128, 1, 2}};
  } else if (name == "paper-scale") {
    c.stages = {{64, 2, 4}, {128, 2, 2}, {256, 6, 2}, {512, 2, 2}};
  } else {
    throw std::invalid_argument("unknown backbone preset: " + name);
  }
  return c;
}

// Uniform lattice over the grid, rounded to pixel centers; row-major indices.
inline std::vector<int> select_anchors(int h, int w, int n_h, int n_w) {
  if (n_h < 1 || n_w < 1) throw std::invalid_argument("anchor grid must be at least 1x1");
  if (n_h > h || n_w > w)
    throw std::invalid_argument("anchor grid exceeds point grid");
  std::vector<int> idx;
  idx.reserve(size_t(n_h) * size_t(n_w));
  for (int i = 0; i < n_h; ++i) {
    int r = (2 * i + 1) * h / (2 * n_h);
    for (int j = 0; j < n_w; ++j) {
      int c = (2 * j + 1) * w / (2 * n_w);
      idx.push_back(r * w + c);
    }
  }
  return idx;
}

// Grid neighbors of (r, c): up, down, left, right, then the four diagonals
// for k=8; out-of-range coordinates are clamped to the edge.
inline std::vector<int> neighbor_indices(int h, int w, int r, int c, int k) {
  if (k != 4 && k != 8) throw std::invalid_argument("k must be 4 or 8");
  static constexpr int dr[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
  static constexpr int dc[8] = {0, 0, -1, 1, -1, 1, -1, 1};
  std::vector<int> out;
  out.reserve(size_t(k));
  for (int q = 0; q < k; ++q) {
    int rr = std::min(h - 1, std::max(0, r + dr[q]));
    int cc = std::min(w - 1, std::max(0, c + dc[q]));
    out.push_back(rr * w + cc);
  }
  return out;
}

template <typename T>
Eigen::Matrix<T, 1, Eigen::Dynamic> anchor_feature(
    const Eigen::Matrix<T, 1, Eigen::Dynamic>& anchor,
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& neighbors) {
  if (neighbors.cols() != anchor.cols())
    throw std::invalid_argument("anchor_feature: dimension mismatch");
  Eigen::Matrix<T, 1, Eigen::Dynamic> s = anchor;
  for (Eigen::Index r = 0; r < neighbors.rows(); ++r) s += neighbors.row(r);
  return s / T(neighbors.rows() + 1);
}

// Cosine-similarity argmax over anchors; ties go to the lowest anchor index.
template <typename T>
std::vector<int> assign_clusters(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& points,
                                 const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& anchors) {
  if (anchors.rows() == 0) throw std::invalid_argument("assign_clusters: no anchors");
  if (points.cols() != anchors.cols())
    throw std::invalid_argument("assign_clusters: dimension mismatch");
  const T eps = T(1e-12);
  Eigen::Matrix<T, Eigen::Dynamic, 1> pn =
      points.rowwise().norm().array() + eps;
  Eigen::Matrix<T, Eigen::Dynamic, 1> an =
      anchors.rowwise().norm().array() + eps;
  std::vector<int> assign(size_t(points.rows()), 0);
  for (Eigen::Index j = 0; j < points.rows(); ++j) {
    int best = 0;
    T best_sim = T(0);
    for (Eigen::Index i = 0; i < anchors.rows(); ++i) {
      T sim = points.row(j).dot(anchors.row(i)) / (pn(j) * an(i));
      if (i == 0 || sim > best_sim) {
        best = int(i);
        best_sim = sim;
      }
    }
    assign[size_t(j)] = best;
  }
  return assign;
}

// Every tape id below refers to an N x d matrix of row-major grid points.
template <typename S>
struct ClusterTrace {
  int anchors = -1;        // M x d anchor features
  int sim = -1;            // N x 1 cosine to the assigned anchor
  int gate = -1;           // N x 1 sigmoid-gated similarity
  int values = -1;         // N x d value projection
  int anchor_values = -1;  // M x d
  int agg = -1;            // M x d aggregated cluster features
  int out = -1;            // N x d dispatched and projected back
  std::vector<int> assignment;
};

template <typename S>
ClusterTrace<S> cluster_op_traced(ParamBind<S>& P, const std::string& prefix, int x, int h,
                                  int w, int n_h, int n_w, int k) {
  using Mat = typename ad::Tape<S>::Mat;
  auto& t = P.tape();
  int d = int(t.val(x).cols());
  auto aidx = select_anchors(h, w, n_h, n_w);
  int M = int(aidx.size());

  std::vector<int> gather_idx, seg;
  gather_idx.reserve(size_t(M) * size_t(k + 1));
  seg.reserve(gather_idx.capacity());
  for (int m = 0; m < M; ++m) {
    int r = aidx[size_t(m)] / w, c = aidx[size_t(m)] % w;
    gather_idx.push_back(aidx[size_t(m)]);
    seg.push_back(m);
    for (int nb : neighbor_indices(h, w, r, c, k)) {
      gather_idx.push_back(nb);
      seg.push_back(m);
    }
  }

  ClusterTrace<S> tr;
  tr.anchors = t.scale(t.segment_sum(t.gather_rows(x, gather_idx), seg, M), S(1) / S(k + 1));
  tr.assignment = assign_clusters<S>(t.val(x), t.val(tr.anchors));

  int Aj = t.gather_rows(tr.anchors, tr.assignment);
  int ones = t.constant(Mat::Ones(d, 1));
  int dots = t.matmul(t.mul(x, Aj), ones);
  int nx = t.add_const(t.rownorm(x), S(1e-12));
  int na = t.add_const(t.rownorm(Aj), S(1e-12));
  tr.sim = t.div_colvec(t.div_colvec(dots, nx), na);
  tr.gate = t.sigmoid(
      t.add_scalarvar(t.mul_scalarvar(tr.sim, P(prefix + ".gate.a")), P(prefix + ".gate.b")));

  tr.values = linear(P, prefix + ".val", x);
  tr.anchor_values = linear(P, prefix + ".val", tr.anchors);
  int numer = t.add(tr.anchor_values, t.segment_sum(t.mul_colvec(tr.values, tr.gate),
                                                    tr.assignment, M));
  int denom = t.add_const(t.segment_sum(tr.gate, tr.assignment, M), S(1));
  tr.agg = t.div_colvec(numer, denom);
  int disp = t.mul_colvec(t.gather_rows(tr.agg, tr.assignment), tr.gate);
  tr.out = linear(P, prefix + ".out", disp);
  return tr;
}

template <typename S>
int context_cluster_block(ParamBind<S>& P, const std::string& prefix, int x, int h, int w,
                          int n_h, int n_w, int k) {
  auto& t = P.tape();
  int y1 = t.layer_norm(x, P(prefix + ".ln1.g"), P(prefix + ".ln1.b"));
  int y2 = t.add(x, cluster_op_traced(P, prefix, y1, h, w, n_h, n_w, k).out);
  int y3 = t.layer_norm(y2, P(prefix + ".ln2.g"), P(prefix + ".ln2.b"));
  int ffn = linear(P, prefix + ".ffn2", t.gelu(linear(P, prefix + ".ffn1", y3)));
  return t.add(y2, ffn);
}

template <typename S>
int point_reducer(ParamBind<S>& P, const std::string& prefix, int x, int h, int w, int r) {
  if (r != 1 && r != 2 && r != 4) throw std::invalid_argument("reduce must be 1, 2 or 4");
  if (h % r != 0 || w % r != 0)
    throw std::invalid_argument("grid " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by reduce " + std::to_string(r));
  auto& t = P.tape();
  int ho = h / r, wo = w / r;
  std::vector<int> parts;
  for (int di = 0; di < r; ++di)
    for (int dj = 0; dj < r; ++dj) {
      std::vector<int> idx;
      idx.reserve(size_t(ho) * size_t(wo));
      for (int I = 0; I < ho; ++I)
        for (int J = 0; J < wo; ++J) idx.push_back((I * r + di) * w + (J * r + dj));
      parts.push_back(t.gather_rows(x, idx));
    }
  int cat = parts.size() == 1 ? parts[0] : t.concat_cols(parts);
  return linear(P, prefix, cat);
}

template <typename S>
struct BackboneOut {
  int final_points = -1;  // N x d at the last stage
  int pooled = -1;        // 1 x d channel means
  int h = 0, w = 0;
  std::vector<int> stage_points;
  std::vector<std::pair<int, int>> stage_shapes;
};

template <typename S>
BackboneOut<S> backbone_forward(ParamBind<S>& P, const std::string& prefix, int points, int h,
                                int w, const ClusterConfig& cfg) {
  validate(cfg);
  auto& t = P.tape();
  BackboneOut<S> out;
  int x = points;
  for (size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageSpec& st = cfg.stages[s];
    std::string sp = prefix + ".s" + std::to_string(s);
    x = point_reducer(P, sp + ".red", x, h, w, st.reduce);
    h /= st.reduce;
    w /= st.reduce;
    int n_h = st.n_h > 0 ? st.n_h : cfg.anchor_h;
    int n_w = st.n_w > 0 ? st.n_w : cfg.anchor_w;
    for (int b = 0; b < st.blocks; ++b)
      x = context_cluster_block(P, sp + ".b" + std::to_string(b), x, h, w, n_h, n_w,
                                cfg.k_neighbors);
    out.stage_points.push_back(x);
    out.stage_shapes.emplace_back(h, w);
  }
  out.final_points = x;
  out.h = h;
  out.w = w;
  out.pooled = t.colmean(x);
  return out;
}

inline void init_backbone(ParamStore& ps, Rng& rng, const std::string& prefix,
                          const ClusterConfig& cfg, int in_dim = 5) {
  validate(cfg);
  int d = in_dim;
  for (size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageSpec& st = cfg.stages[s];
    std::string sp = prefix + ".s" + std::to_string(s);
    init_linear(ps, rng, sp + ".red", st.reduce * st.reduce * d, st.width);
    d = st.width;
    for (int b = 0; b < st.blocks; ++b) {
      std::string bp = sp + ".b" + std::to_string(b);
      init_layernorm(ps, bp + ".ln1", d);
      ps.add(bp + ".gate.a", 1, 1).setOnes();
      ps.add(bp + ".gate.b", 1, 1);
      init_linear(ps, rng, bp + ".val", d, d);
      init_linear(ps, rng, bp + ".out", d, d);
      init_layernorm(ps, bp + ".ln2", d);
      init_linear(ps, rng, bp + ".ffn1", d, d * cfg.ffn_ratio);
      init_linear(ps, rng, bp + ".ffn2", d * cfg.ffn_ratio, d);
    }
  }
}

}  // namespace mammoclu
