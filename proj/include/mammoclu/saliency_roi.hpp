#pragma once

#include <mammoclu/data_io.hpp>
#include <mammoclu/params.hpp>

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mammoclu {

// Top-left corner of a selected window, in saliency-map units.
struct RoiCoord {
  int row = 0, col = 0;
  bool operator==(const RoiCoord&) const = default;
};

// Per-location linear projection to one channel, logistic squashing, then
// min-max normalization to [0,1]. Input and output are N x d / N x 1 points
// in row-major grid order.
template <typename S>
int saliency_head(ParamBind<S>& P, const std::string& prefix, int grid_points) {
  auto& t = P.tape();
  return t.minmax_norm01(t.sigmoid(linear(P, prefix, grid_points)));
}

inline void init_saliency(ParamStore& ps, Rng& rng, const std::string& prefix, int d) {
  init_linear(ps, rng, prefix, d, 1);
}

std::pair<int, int> compute_crop_dims(int h_patch, int w_patch, int h_map, int w_map, int h_I,
                                      int w_I);

// Scales a map coordinate to a source-image start pixel, clamped so the
// window stays in bounds.
int map_to_image_start(int coord, int n_map, int n_image, int n_patch);

// Stride-1 greedy window selection: per iteration score every window that
// touches no masked cell by its mean value, take the max (ties toward the
// smallest (row, col)), then mask it.
template <typename T>
std::vector<RoiCoord> greedy_roi_select(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& map,
                                        int n, int h_crop, int w_crop) {
  if (n < 1) throw std::invalid_argument("greedy_roi_select: n must be >= 1");
  int h = int(map.rows()), w = int(map.cols());
  if (h_crop < 1 || w_crop < 1 || h_crop > h || w_crop > w)
    throw std::invalid_argument("greedy_roi_select: crop does not fit the map");

  Eigen::ArrayXXi masked = Eigen::ArrayXXi::Zero(h, w);
  std::vector<RoiCoord> out;
  for (int pick = 0; pick < n; ++pick) {
    bool found = false;
    int br = 0, bc = 0;
    double best = 0;
    for (int r = 0; r + h_crop <= h; ++r)
      for (int c = 0; c + w_crop <= w; ++c) {
        bool ok = true;
        double s = 0;
        for (int i = r; i < r + h_crop && ok; ++i)
          for (int j = c; j < c + w_crop; ++j) {
            if (masked(i, j)) {
              ok = false;
              break;
            }
            s += double(map(i, j));
          }
        if (!ok) continue;
        s /= double(h_crop) * double(w_crop);
        if (!found || s > best) {
          found = true;
          best = s;
          br = r;
          bc = c;
        }
      }
    if (!found)
      throw std::invalid_argument("greedy_roi_select: only " + std::to_string(pick) + " of " +
                                  std::to_string(n) + " disjoint windows fit");
    out.push_back({br, bc});
    for (int i = br; i < br + h_crop; ++i)
      for (int j = bc; j < bc + w_crop; ++j) masked(i, j) = 1;
  }
  return out;
}

std::vector<Image3> crop_patches(const Image3& src, const std::vector<RoiCoord>& coords,
                                 int h_map, int w_map, int h_patch, int w_patch);

// Window mean of the feature grid per coordinate; 1x1 windows reduce to a
// single-cell read. Returns one 1 x d node per coordinate.
template <typename S>
std::vector<int> extract_feature_local(ad::Tape<S>& t, int grid_points, int h, int w,
                                       const std::vector<RoiCoord>& coords, int h_crop,
                                       int w_crop) {
  if (t.val(grid_points).rows() != Eigen::Index(h) * w)
    throw std::invalid_argument("extract_feature_local: grid shape mismatch");
  std::vector<int> out;
  out.reserve(coords.size());
  for (const auto& rc : coords) {
    if (rc.row < 0 || rc.col < 0 || rc.row + h_crop > h || rc.col + w_crop > w)
      throw std::invalid_argument("extract_feature_local: coordinate out of range");
    std::vector<int> idx;
    idx.reserve(size_t(h_crop) * size_t(w_crop));
    for (int i = rc.row; i < rc.row + h_crop; ++i)
      for (int j = rc.col; j < rc.col + w_crop; ++j) idx.push_back(i * w + j);
    out.push_back(t.colmean(t.gather_rows(grid_points, idx)));
  }
  return out;
}

}  // namespace mammoclu
