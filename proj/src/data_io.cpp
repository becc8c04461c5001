#include <mammoclu/data_io.hpp>
#include <mammoclu/rng.hpp>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mammoclu {

namespace {

constexpr const char* kManifestHeader =
    "study_id,lcc_path,lmlo_path,rcc_path,rmlo_path,label,boxes_path";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string resolve(const fs::path& base_dir, const std::string& p) {
  fs::path q(p);
  if (q.is_absolute()) return q.string();
  return (base_dir / q).string();
}

void render_background(Rng& rng, Eigen::MatrixXf& img) {
  int h = int(img.rows()), w = int(img.cols());
  img.setConstant(0.18f);
  float scale = float(std::min(h, w));
  for (int k = 0; k < 3; ++k) {
    float amp = float(rng.uniform(0.05, 0.12));
    float sx = float(rng.uniform(0.25, 0.45)) * scale;
    float sy = float(rng.uniform(0.25, 0.45)) * scale;
    float cx = float(rng.uniform(0.0, double(w)));
    float cy = float(rng.uniform(0.0, double(h)));
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        float dx = (float(j) - cx) / sx, dy = (float(i) - cy) / sy;
        img(i, j) += amp * std::exp(-0.5f * (dx * dx + dy * dy));
      }
  }
  float fx = float(rng.uniform(0.5, 1.5)), fy = float(rng.uniform(0.5, 1.5));
  float ph = float(rng.uniform(0.0, 6.283185307179586));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      img(i, j) += 0.03f * std::cos(6.2831853f * (fx * float(j) / float(w) +
                                                  fy * float(i) / float(h)) +
                                    ph);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) img(i, j) += 0.01f * float(rng.normal());
}

struct Lesion {
  int cx = 0, cy = 0, radius = 0;
  std::vector<std::array<float, 3>> spots;  // x, y, sigma
};

Lesion sample_lesion(Rng& rng, const PhantomConfig& cfg) {
  Lesion L;
  L.radius = rng.uniform_int(cfg.lesion_radius_min, cfg.lesion_radius_max);
  int mx = L.radius + 2, my = L.radius + 2;
  L.cx = rng.uniform_int(mx, cfg.image_w - mx);
  L.cy = rng.uniform_int(my, cfg.image_h - my);
  int n_spots = rng.uniform_int(3, 7);
  for (int s = 0; s < n_spots; ++s) {
    double ang = rng.uniform(0.0, 6.283185307179586);
    double rad = std::sqrt(rng.uniform()) * 0.7 * L.radius;
    float sx = float(L.cx + rad * std::cos(ang));
    float sy = float(L.cy + rad * std::sin(ang));
    float sigma = float(rng.uniform(L.radius / 4.0, L.radius / 2.5));
    L.spots.push_back({sx, sy, sigma});
  }
  return L;
}

void render_lesion(const Lesion& L, float intensity, Eigen::MatrixXf& img) {
  int h = int(img.rows()), w = int(img.cols());
  for (const auto& s : L.spots) {
    int r0 = std::max(0, int(s[1] - 4 * s[2])), r1 = std::min(h - 1, int(s[1] + 4 * s[2]));
    int c0 = std::max(0, int(s[0] - 4 * s[2])), c1 = std::min(w - 1, int(s[0] + 4 * s[2]));
    for (int i = r0; i <= r1; ++i)
      for (int j = c0; j <= c1; ++j) {
        float dx = (float(j) - s[0]) / s[2], dy = (float(i) - s[1]) / s[2];
        img(i, j) += intensity * std::exp(-0.5f * (dx * dx + dy * dy));
      }
  }
}

void write_png(const std::string& path, const Eigen::MatrixXf& img) {
  cv::Mat m(int(img.rows()), int(img.cols()), CV_8UC1);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) {
      float v = std::min(1.0f, std::max(0.0f, img(i, j)));
      m.at<std::uint8_t>(i, j) = std::uint8_t(std::lround(v * 255.0f));
    }
  if (!cv::imwrite(path, m)) throw std::runtime_error("cannot write image: " + path);
}

}  // namespace

std::map<std::string, std::vector<LesionBox>> load_boxes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open boxes file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("invalid boxes JSON in " + path + ": " + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("boxes file must be a JSON object: " + path);
  std::map<std::string, std::vector<LesionBox>> out;
  for (auto& [view, arr] : j.items()) {
    bool known = false;
    for (const char* v : kViewNames) known = known || view == v;
    if (!known) throw std::invalid_argument("unknown view '" + view + "' in " + path);
    if (!arr.is_array()) throw std::invalid_argument("boxes for '" + view + "' must be a list");
    std::vector<LesionBox> boxes;
    for (auto& b : arr) {
      if (!b.is_array() || b.size() != 4)
        throw std::invalid_argument("each box must be [x_min,y_min,x_max,y_max] in " + path);
      LesionBox box{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
      if (box.x_min < 0 || box.y_min < 0 || box.x_min >= box.x_max || box.y_min >= box.y_max)
        throw std::invalid_argument("degenerate box in " + path);
      boxes.push_back(box);
    }
    out[view] = std::move(boxes);
  }
  return out;
}

std::vector<StudyRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  fs::path base = fs::path(path).parent_path();

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty manifest: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw std::invalid_argument("bad manifest header, expected: " + std::string(kManifestHeader));

  std::vector<StudyRecord> records;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != 7)
      throw std::invalid_argument("manifest row needs 7 fields, got " +
                                  std::to_string(f.size()) + ": " + line);
    StudyRecord r;
    r.study_id = f[0];
    if (r.study_id.empty()) throw std::invalid_argument("empty study_id in manifest row: " + line);
    if (!seen.insert(r.study_id).second)
      throw std::invalid_argument("duplicate study_id '" + r.study_id + "' in " + path);
    for (int v = 0; v < 4; ++v) {
      if (f[1 + v].empty())
        throw std::invalid_argument("study '" + r.study_id + "' missing " +
                                    std::string(kViewNames[v]) + " path");
      r.view_paths[v] = resolve(base, f[1 + v]);
    }
    if (f[5] != "0" && f[5] != "1")
      throw std::invalid_argument("study '" + r.study_id + "' label must be 0 or 1, got '" +
                                  f[5] + "'");
    r.label = f[5] == "1" ? 1 : 0;
    if (!f[6].empty()) {
      r.boxes_path = resolve(base, f[6]);
      r.boxes = load_boxes(r.boxes_path);
    }
    records.push_back(std::move(r));
  }
  return records;
}

std::string generate_phantoms(const PhantomConfig& cfg, const std::string& out_dir) {
  if (cfg.study_count < 1) throw std::invalid_argument("study_count must be >= 1");
  if (cfg.image_h < 8 || cfg.image_w < 8) throw std::invalid_argument("image_size too small");
  if (cfg.malignant_fraction < 0.0 || cfg.malignant_fraction > 1.0)
    throw std::invalid_argument("malignant_fraction must lie in [0,1]");
  if (cfg.lesion_radius_min > cfg.lesion_radius_max ||
      cfg.lesion_radius_max >= std::min(cfg.image_h, cfg.image_w) / 2)
    throw std::invalid_argument("lesion radius range invalid for image size");
  if (cfg.lesion_intensity <= 0.0 || cfg.lesion_intensity > 1.0)
    throw std::invalid_argument("lesion_intensity must lie in (0,1]");

  fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "boxes", ec);
  if (!fs::is_directory(root / "images") || !fs::is_directory(root / "boxes"))
    throw std::runtime_error("cannot create output directories under " + out_dir);

  Rng rng(cfg.seed);
  int n = cfg.study_count;
  int n_mal = int(std::lround(cfg.malignant_fraction * n));
  std::vector<int> order(size_t(n), 0);
  for (int i = 0; i < n; ++i) order[size_t(i)] = i;
  rng.shuffle(order);
  std::vector<int> labels(size_t(n), 0);
  for (int i = 0; i < n_mal; ++i) labels[size_t(order[size_t(i)])] = 1;

  std::ostringstream manifest;
  manifest << kManifestHeader << "\n";

  char buf[32];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "S%04d", i);
    std::string sid(buf);

    std::array<Eigen::MatrixXf, 4> views;
    for (auto& v : views) {
      v.resize(cfg.image_h, cfg.image_w);
      render_background(rng, v);
    }

    std::string boxes_rel;
    if (labels[size_t(i)] == 1) {
      Lesion L = sample_lesion(rng, cfg);
      bool left = rng.uniform() < 0.5;
      int v0 = left ? 0 : 2;  // lcc/lmlo or rcc/rmlo
      render_lesion(L, float(cfg.lesion_intensity), views[size_t(v0)]);
      render_lesion(L, float(cfg.lesion_intensity), views[size_t(v0 + 1)]);

      json jb;
      json box = json::array({L.cx - L.radius, L.cy - L.radius, L.cx + L.radius,
                              L.cy + L.radius});
      jb[kViewNames[size_t(v0)]] = json::array({box});
      jb[kViewNames[size_t(v0 + 1)]] = json::array({box});
      boxes_rel = "boxes/" + sid + ".json";
      std::ofstream bo(root / boxes_rel);
      bo << jb.dump(2) << "\n";
      if (!bo) throw std::runtime_error("cannot write boxes file for " + sid);
    }

    manifest << sid;
    for (int v = 0; v < 4; ++v) {
      std::string rel = "images/" + sid + "_" + kViewNames[size_t(v)] + ".png";
      write_png((root / rel).string(), views[size_t(v)]);
      manifest << "," << rel;
    }
    manifest << "," << labels[size_t(i)] << "," << boxes_rel << "\n";
  }

  fs::path mpath = root / "manifest.csv";
  std::ofstream mo(mpath);
  mo << manifest.str();
  if (!mo) throw std::runtime_error("cannot write manifest: " + mpath.string());
  return mpath.string();
}

Image3 load_image(const std::string& path, int target_h, int target_w, int* src_h, int* src_w) {
  if (target_h < 1 || target_w < 1) throw std::invalid_argument("target size must be positive");
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("cannot read image: " + path);
  if (src_h) *src_h = m.rows;
  if (src_w) *src_w = m.cols;

  cv::Mat f;
  double scale = 1.0;
  switch (m.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F: scale = 1.0; break;
    default: throw std::runtime_error("unsupported image depth: " + path);
  }
  m.convertTo(f, CV_32F, scale);

  if (f.channels() == 4) cv::cvtColor(f, f, cv::COLOR_BGRA2BGR);
  if (f.channels() != 1 && f.channels() != 3)
    throw std::runtime_error("unsupported channel count: " + path);

  if (f.rows != target_h || f.cols != target_w)
    cv::resize(f, f, cv::Size(target_w, target_h), 0, 0, cv::INTER_LINEAR);

  Image3 out;
  out.h = target_h;
  out.w = target_w;
  for (auto& c : out.ch) c.resize(target_h, target_w);
  if (f.channels() == 1) {
    for (int i = 0; i < target_h; ++i)
      for (int j = 0; j < target_w; ++j) {
        float v = std::min(1.0f, std::max(0.0f, f.at<float>(i, j)));
        out.ch[0](i, j) = out.ch[1](i, j) = out.ch[2](i, j) = v;
      }
  } else {
    for (int i = 0; i < target_h; ++i)
      for (int j = 0; j < target_w; ++j) {
        cv::Vec3f p = f.at<cv::Vec3f>(i, j);  // BGR
        out.ch[0](i, j) = std::min(1.0f, std::max(0.0f, p[2]));
        out.ch[1](i, j) = std::min(1.0f, std::max(0.0f, p[1]));
        out.ch[2](i, j) = std::min(1.0f, std::max(0.0f, p[0]));
      }
  }
  return out;
}

}  // namespace mammoclu
