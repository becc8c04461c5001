#pragma once

#include <mammoclu/backbone.hpp>
#include <mammoclu/point_embed.hpp>
#include <mammoclu/saliency_roi.hpp>

#include <array>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mammoclu {

struct ModelConfig {
  ClusterConfig global_cfg = preset_config("small");
  ClusterConfig local_cfg = preset_config("local");
  int image_h = 128, image_w = 128;
  int num_patches = 4;
  int patch_h = 32, patch_w = 32;
  int fusion_dim = 128;
  std::string overlay_mode = "sum";          // sum | concat
  std::string view_attention = "attention";  // attention | mean
};

inline void validate(const ModelConfig& cfg) {
  validate(cfg.global_cfg);
  validate(cfg.local_cfg);
  if (cfg.image_h < 8 || cfg.image_w < 8) throw std::invalid_argument("image size too small");
  if (cfg.num_patches < 1) throw std::invalid_argument("num_patches must be >= 1");
  if (cfg.patch_h < 1 || cfg.patch_w < 1 || cfg.patch_h > cfg.image_h ||
      cfg.patch_w > cfg.image_w)
    throw std::invalid_argument("patch size must fit inside the image");
  if (cfg.fusion_dim < 1) throw std::invalid_argument("fusion_dim must be >= 1");
  if (cfg.overlay_mode != "sum" && cfg.overlay_mode != "concat")
    throw std::invalid_argument("overlay must be 'sum' or 'concat'");
  if (cfg.view_attention != "attention" && cfg.view_attention != "mean")
    throw std::invalid_argument("view_attention must be 'attention' or 'mean'");
}

// Width of one instance row F_l^n under the configured overlay.
inline int instance_dim(const ModelConfig& cfg) {
  int dl = cfg.local_cfg.stages.back().width;
  return cfg.overlay_mode == "concat" ? 2 * dl : dl;
}

// Two-layer learned mapping from the global width to the local width. The
// layers compose linearly so an identity-initialized square mapping is exact.
template <typename S>
int align_embed(ParamBind<S>& P, const std::string& prefix, int x) {
  auto& t = P.tape();
  if (t.val(x).cols() != t.val(P(prefix + ".l1.W")).rows())
    throw std::invalid_argument("align_embed: input width mismatch");
  return linear(P, prefix + ".l2", linear(P, prefix + ".l1", x));
}

inline void init_align(ParamStore& ps, Rng& rng, const std::string& prefix, int din, int dout) {
  init_linear(ps, rng, prefix + ".l1", din, dout);
  init_linear(ps, rng, prefix + ".l2", dout, dout);
}

template <typename S>
int overlay(ad::Tape<S>& t, int a, int b, const std::string& mode) {
  if (t.val(a).cols() != t.val(b).cols() || t.val(a).rows() != t.val(b).rows())
    throw std::invalid_argument("overlay: shape mismatch");
  return mode == "concat" ? t.concat_cols({a, b}) : t.add(a, b);
}

// Softmax-attention pooling over instance rows; returns (pooled 1 x dim,
// weights k x 1).
template <typename S>
std::pair<int, int> instance_attention(ParamBind<S>& P, const std::string& prefix, int F_l) {
  auto& t = P.tape();
  if (!t.val(F_l).allFinite())
    throw std::invalid_argument("instance_attention: non-finite rows");
  int w = t.softmax_col(linear(P, prefix, F_l));
  int fa = t.matmul(t.transpose(w), F_l);
  return {fa, w};
}

// Per-channel spatial max then a learned linear alignment.
template <typename S>
int fold_global(ParamBind<S>& P, const std::string& prefix, int final_points) {
  auto& t = P.tape();
  return linear(P, prefix, t.colmax(final_points));
}

template <typename S>
int fuse_view(ParamBind<S>& P, const std::string& prefix, int f_g_pooled, int f_a) {
  auto& t = P.tape();
  if (t.val(f_g_pooled).cols() != t.val(f_a).cols())
    throw std::invalid_argument("fuse_view: width mismatch");
  return linear(P, prefix, t.concat_cols({f_g_pooled, f_a}));
}

// Softmax attention over the four view vectors (or their plain mean);
// returns (fused 1 x W, weights 4 x 1 or -1 in mean mode).
template <typename S>
std::pair<int, int> fuse_views(ParamBind<S>& P, const std::string& prefix,
                               const std::vector<int>& views, const std::string& mode) {
  if (views.size() != 4) throw std::invalid_argument("fuse_views: exactly four views required");
  auto& t = P.tape();
  int stack = t.concat_rows(views);
  if (mode == "mean") return {t.colmean(stack), -1};
  int w = t.softmax_col(linear(P, prefix, stack));
  return {t.matmul(t.transpose(w), stack), w};
}

struct ViewBundle {
  std::array<Image3, 4> views;  // lcc, lmlo, rcc, rmlo
  int label = 0;
};

template <typename S>
struct StudyOut {
  int global_prob = -1;   // 1x1 in (0,1)
  int local_logit = -1;   // 1x1
  int fusion_logit = -1;  // 1x1
  int f_fusion = -1, f_global = -1, f_local = -1;
  std::array<int, 4> maps{-1, -1, -1, -1};  // N x 1 row-major saliency maps
  std::array<int, 4> global_points{-1, -1, -1, -1};
  std::array<std::pair<int, int>, 4> map_shape{};
  std::array<std::vector<RoiCoord>, 4> coords{};
  std::array<std::vector<Image3>, 4> patches{};
  std::array<int, 4> watt{-1, -1, -1, -1};
  std::pair<int, int> crop_dims{0, 0};
};

inline void init_model(ParamStore& ps, Rng& rng, const ModelConfig& cfg) {
  validate(cfg);
  init_backbone(ps, rng, "global", cfg.global_cfg);
  init_backbone(ps, rng, "local", cfg.local_cfg);
  int Dg = cfg.global_cfg.stages.back().width;
  int Dl = cfg.local_cfg.stages.back().width;
  int dim = instance_dim(cfg);
  init_saliency(ps, rng, "sal", Dg);
  init_align(ps, rng, "align", Dg, Dl);
  init_linear(ps, rng, "att", dim, 1);
  init_linear(ps, rng, "fold", Dg, dim);
  init_linear(ps, rng, "fusev", 2 * dim, cfg.fusion_dim);
  if (cfg.view_attention == "attention") {
    init_linear(ps, rng, "fuse.fusion", cfg.fusion_dim, 1);
    init_linear(ps, rng, "fuse.global", dim, 1);
    init_linear(ps, rng, "fuse.local", dim, 1);
  }
  init_linear(ps, rng, "head.global", dim, 1);
  init_linear(ps, rng, "head.local", dim, 1);
  init_linear(ps, rng, "head.fusion", cfg.fusion_dim, 1);
}

// Full weakly supervised pass over one four-view study. When frozen_rois is
// given the greedy selection is skipped and those coordinates are used, which
// keeps the routing fixed for finite-difference checks.
template <typename S>
StudyOut<S> study_forward(ParamBind<S>& P, const ModelConfig& cfg, const ViewBundle& vb,
                          const std::array<std::vector<RoiCoord>, 4>* frozen_rois = nullptr) {
  validate(cfg);
  auto& t = P.tape();
  StudyOut<S> out;
  std::vector<int> ffs, fgs, fls;
  for (int v = 0; v < 4; ++v) {
    try {
      const Image3& img = vb.views[size_t(v)];
      if (img.h != cfg.image_h || img.w != cfg.image_w)
        throw std::invalid_argument("view size differs from the configured image size");
      PointSet ps = image_to_points(img);
      int pts = t.constant(ps.pts.cast<S>());
      auto g = backbone_forward(P, "global", pts, img.h, img.w, cfg.global_cfg);
      int map = saliency_head(P, "sal", g.final_points);
      auto [hc, wc] = compute_crop_dims(cfg.patch_h, cfg.patch_w, g.h, g.w, img.h, img.w);

      std::vector<RoiCoord> coords;
      if (frozen_rois) {
        coords = (*frozen_rois)[size_t(v)];
      } else {
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> grid(g.h, g.w);
        const auto& mv = t.val(map);
        for (int i = 0; i < g.h; ++i)
          for (int j = 0; j < g.w; ++j) grid(i, j) = mv(Eigen::Index(i) * g.w + j, 0);
        coords = greedy_roi_select(grid, cfg.num_patches, hc, wc);
      }
      auto patches = crop_patches(img, coords, g.h, g.w, cfg.patch_h, cfg.patch_w);
      auto ffl = extract_feature_local(t, g.final_points, g.h, g.w, coords, hc, wc);

      std::vector<int> rows;
      for (size_t n = 0; n < patches.size(); ++n) {
        PointSet pp = image_to_points(patches[n]);
        int ppts = t.constant(pp.pts.cast<S>());
        auto l =
            backbone_forward(P, "local", ppts, patches[n].h, patches[n].w, cfg.local_cfg);
        int aligned = align_embed(P, "align", ffl[n]);
        rows.push_back(overlay(t, aligned, l.pooled, cfg.overlay_mode));
      }
      int F_l = rows.size() == 1 ? rows[0] : t.concat_rows(rows);
      auto [fa, watt] = instance_attention(P, "att", F_l);
      int fg = fold_global(P, "fold", g.final_points);
      ffs.push_back(fuse_view(P, "fusev", fg, fa));
      fgs.push_back(fg);
      fls.push_back(t.colmean(F_l));

      out.maps[size_t(v)] = map;
      out.global_points[size_t(v)] = g.final_points;
      out.map_shape[size_t(v)] = {g.h, g.w};
      out.coords[size_t(v)] = std::move(coords);
      out.patches[size_t(v)] = std::move(patches);
      out.watt[size_t(v)] = watt;
      out.crop_dims = {hc, wc};
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string("view ") + kViewNames[size_t(v)] + ": " +
                                  e.what());
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(std::string("view ") + kViewNames[size_t(v)] + ": " + e.what());
    }
  }
  out.f_fusion = fuse_views(P, "fuse.fusion", ffs, cfg.view_attention).first;
  out.f_global = fuse_views(P, "fuse.global", fgs, cfg.view_attention).first;
  out.f_local = fuse_views(P, "fuse.local", fls, cfg.view_attention).first;
  out.global_prob = t.sigmoid(linear(P, "head.global", out.f_global));
  out.local_logit = linear(P, "head.local", out.f_local);
  out.fusion_logit = linear(P, "head.fusion", out.f_fusion);
  return out;
}

}  // namespace mammoclu
