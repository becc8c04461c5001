#pragma once

#include <mammoclu/data_io.hpp>

#include <Eigen/Dense>

#include <stdexcept>
#include <vector>

namespace mammoclu {

// Row-major point cloud over an h x w grid; columns are (r, g, b, x, y) with
// pixel-center positions x = (j+0.5)/w - 0.5 and y = (i+0.5)/h - 0.5.
struct PointSet {
  Eigen::MatrixXd pts;  // N x 5
  int h = 0, w = 0;
};

PointSet image_to_points(const Image3& img);

// Inverse of the row-major flattening for arbitrary feature width; returns
// one h x w plane per feature column.
template <typename T>
std::vector<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>> points_to_grid(
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& feats, int h, int w) {
  if (h < 1 || w < 1 || feats.rows() != Eigen::Index(h) * w)
    throw std::invalid_argument("points_to_grid: N != h*w");
  std::vector<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>> planes(size_t(feats.cols()));
  for (Eigen::Index c = 0; c < feats.cols(); ++c) {
    planes[size_t(c)].resize(h, w);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        planes[size_t(c)](i, j) = feats(Eigen::Index(i) * w + j, c);
  }
  return planes;
}

}  // namespace mammoclu
