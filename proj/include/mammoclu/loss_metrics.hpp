#pragma once

#include <mammoclu/fusion.hpp>

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mammoclu {

struct LossWeights {
  double alpha = 1.0, beta = 1.0, gamma = 1.0, delta = 0.1;
  double pos_weight = 1.0;  // positive-class weight for the logit losses
};

inline void validate(const LossWeights& w) {
  if (w.alpha < 0 || w.beta < 0 || w.gamma < 0 || w.delta < 0)
    throw std::invalid_argument("loss weights must be non-negative");
  if (w.alpha == 0 && w.beta == 0 && w.gamma == 0 && w.delta == 0)
    throw std::invalid_argument("loss weights must not all be zero");
  if (w.pos_weight <= 0) throw std::invalid_argument("pos_weight must be positive");
}

template <typename S>
struct LossBreakdown {
  int total = -1;
  int l_global = -1, l_local = -1, l_fusion = -1, l_map = -1;
};

// L_total = alpha * L_global + beta * L_local + gamma * L_fusion +
// delta * L_map, with L_map the mean absolute saliency intensity over the
// four views. Each term is returned unweighted.
template <typename S>
LossBreakdown<S> composite_loss(ad::Tape<S>& t, const StudyOut<S>& out, int label,
                                const LossWeights& w) {
  validate(w);
  if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1");
  LossBreakdown<S> b;
  b.l_global = t.bce_prob(out.global_prob, S(label));
  b.l_local = t.bce_logit(out.local_logit, S(label), S(w.pos_weight));
  b.l_fusion = t.bce_logit(out.fusion_logit, S(label), S(w.pos_weight));
  int m = t.mean_all(t.abs(out.maps[0]));
  for (int v = 1; v < 4; ++v) m = t.add(m, t.mean_all(t.abs(out.maps[size_t(v)])));
  b.l_map = t.scale(m, S(0.25));
  b.total = t.add(t.add(t.scale(b.l_global, S(w.alpha)), t.scale(b.l_local, S(w.beta))),
                  t.add(t.scale(b.l_fusion, S(w.gamma)), t.scale(b.l_map, S(w.delta))));
  return b;
}

struct RocPoint {
  double fpr = 0, tpr = 0, threshold = 0;
};

// Tie-averaged Mann-Whitney AUC; optionally emits the ROC vertex list
// (thresholds descending, starting at (0,0)).
double auc(const std::vector<double>& scores, const std::vector<int>& labels,
           std::vector<RocPoint>* roc = nullptr);

struct Confusion {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  double acc() const { return double(tp + tn) / double(tp + tn + fp + fn); }
};

// Prediction is positive iff score >= threshold.
Confusion confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                    double threshold);

double f1(std::int64_t tp, std::int64_t fp, std::int64_t fn);

// Selected patch in source-image pixels: rows [row0, row0+h), cols
// [col0, col0+w).
struct PatchRect {
  int row0 = 0, col0 = 0, h = 0, w = 0;
};

struct MdrResult {
  std::int64_t n_gt = 0, n_miss = 0;
  double value() const { return double(n_miss) / double(n_gt); }
};

// One entry per evaluated view: its selected patches and its ground-truth
// boxes. A lesion counts as detected when some patch covers at least tau of
// its area.
MdrResult mdr(const std::vector<std::pair<std::vector<PatchRect>, std::vector<LesionBox>>>& items,
              double tau = 0.25);

}  // namespace mammoclu
