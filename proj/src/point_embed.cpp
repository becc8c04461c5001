#include <mammoclu/point_embed.hpp>

#include <cmath>
#include <stdexcept>

namespace mammoclu {

PointSet image_to_points(const Image3& img) {
  if (img.h < 1 || img.w < 1) throw std::invalid_argument("image_to_points: empty image");
  PointSet ps;
  ps.h = img.h;
  ps.w = img.w;
  ps.pts.resize(Eigen::Index(img.h) * img.w, 5);
  for (int i = 0; i < img.h; ++i) {
    double y = double(2 * i + 1 - img.h) / double(2 * img.h);
    for (int j = 0; j < img.w; ++j) {
      Eigen::Index p = Eigen::Index(i) * img.w + j;
      for (int c = 0; c < 3; ++c) {
        float v = img.ch[size_t(c)](i, j);
        if (!std::isfinite(v))
          throw std::invalid_argument("image_to_points: non-finite pixel value");
        ps.pts(p, c) = double(v);
      }
      ps.pts(p, 3) = double(2 * j + 1 - img.w) / double(2 * img.w);
      ps.pts(p, 4) = y;
    }
  }
  return ps;
}

}  // namespace mammoclu
