#include <mammoclu/saliency_roi.hpp>

#include <cmath>
#include <stdexcept>

namespace mammoclu {

std::pair<int, int> compute_crop_dims(int h_patch, int w_patch, int h_map, int w_map, int h_I,
                                      int w_I) {
  if (h_patch < 1 || w_patch < 1 || h_map < 1 || w_map < 1 || h_I < 1 || w_I < 1)
    throw std::invalid_argument("compute_crop_dims: all inputs must be positive");
  if (h_patch > h_I || w_patch > w_I)
    throw std::invalid_argument("compute_crop_dims: patch larger than image");
  int hc = std::max(1, int(std::lround(double(h_patch) * h_map / h_I)));
  int wc = std::max(1, int(std::lround(double(w_patch) * w_map / w_I)));
  return {hc, wc};
}

int map_to_image_start(int coord, int n_map, int n_image, int n_patch) {
  int start = int(std::floor(double(coord) * n_image / n_map));
  start = std::min(start, n_image - n_patch);
  return std::max(0, start);
}

std::vector<Image3> crop_patches(const Image3& src, const std::vector<RoiCoord>& coords,
                                 int h_map, int w_map, int h_patch, int w_patch) {
  if (h_patch > src.h || w_patch > src.w)
    throw std::invalid_argument("crop_patches: patch larger than image");
  std::vector<Image3> out;
  out.reserve(coords.size());
  for (const auto& rc : coords) {
    int r0 = map_to_image_start(rc.row, h_map, src.h, h_patch);
    int c0 = map_to_image_start(rc.col, w_map, src.w, w_patch);
    Image3 p;
    p.h = h_patch;
    p.w = w_patch;
    for (int c = 0; c < 3; ++c)
      p.ch[size_t(c)] = src.ch[size_t(c)].block(r0, c0, h_patch, w_patch);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace mammoclu
