#include <mammoclu/loss_metrics.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mammoclu {

namespace {

void check_scored(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty()) throw std::invalid_argument("no scores given");
  if (scores.size() != labels.size())
    throw std::invalid_argument("scores and labels differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("non-finite score");
  for (int l : labels)
    if (l != 0 && l != 1) throw std::invalid_argument("labels must be 0 or 1");
}

}  // namespace

double auc(const std::vector<double>& scores, const std::vector<int>& labels,
           std::vector<RocPoint>* roc) {
  check_scored(scores, labels);
  std::int64_t n_pos = std::count(labels.begin(), labels.end(), 1);
  std::int64_t n_neg = std::int64_t(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auc needs at least one positive and one negative label");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * (double(i + 1) + double(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  double u = rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1);
  double out = u / (double(n_pos) * double(n_neg));

  if (roc) {
    roc->clear();
    roc->push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::int64_t tp = 0, fp = 0;
    for (std::size_t i = order.size(); i > 0;) {
      double thr = scores[order[i - 1]];
      while (i > 0 && scores[order[i - 1]] == thr) {
        if (labels[order[i - 1]] == 1)
          ++tp;
        else
          ++fp;
        --i;
      }
      roc->push_back({double(fp) / double(n_neg), double(tp) / double(n_pos), thr});
    }
  }
  return out;
}

Confusion confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                    double threshold) {
  check_scored(scores, labels);
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred = scores[i] >= threshold;
    if (pred && labels[i] == 1)
      ++c.tp;
    else if (pred)
      ++c.fp;
    else if (labels[i] == 1)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double f1(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw std::invalid_argument("negative count");
  if (tp + fp + fn == 0) throw std::invalid_argument("f1 undefined with no predictions or truths");
  if (tp == 0) return 0.0;
  double precision = double(tp) / double(tp + fp);
  double recall = double(tp) / double(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

MdrResult mdr(const std::vector<std::pair<std::vector<PatchRect>, std::vector<LesionBox>>>& items,
              double tau) {
  if (tau <= 0 || tau > 1) throw std::invalid_argument("tau must lie in (0, 1]");
  MdrResult r;
  for (const auto& [patches, boxes] : items) {
    for (const auto& b : boxes) {
      double area = double(b.x_max - b.x_min) * double(b.y_max - b.y_min);
      if (area <= 0) throw std::invalid_argument("degenerate ground-truth box");
      ++r.n_gt;
      bool hit = false;
      for (const auto& p : patches) {
        double ix = std::min<double>(b.x_max, p.col0 + p.w) - std::max<double>(b.x_min, p.col0);
        double iy = std::min<double>(b.y_max, p.row0 + p.h) - std::max<double>(b.y_min, p.row0);
        if (ix <= 0 || iy <= 0) continue;
        if (ix * iy / area >= tau) {
          hit = true;
          break;
        }
      }
      if (!hit) ++r.n_miss;
    }
  }
  if (r.n_gt == 0) throw std::invalid_argument("mdr undefined without ground-truth boxes");
  return r;
}

}  // namespace mammoclu
