#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mammoclu {

inline constexpr std::array<const char*, 4> kViewNames = {"lcc", "lmlo", "rcc", "rmlo"};

struct LesionBox {
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

struct StudyRecord {
  std::string study_id;
  std::array<std::string, 4> view_paths;  // lcc, lmlo, rcc, rmlo
  int label = 0;
  std::string boxes_path;
  std::map<std::string, std::vector<LesionBox>> boxes;
};

struct PhantomConfig {
  int study_count = 8;
  int image_h = 64;
  int image_w = 64;
  double malignant_fraction = 0.5;
  std::uint64_t seed = 0;
  double lesion_intensity = 0.7;
  int lesion_radius_min = 6;
  int lesion_radius_max = 12;
};

// Grayscale-or-color image as three h x w planes (r, g, b), values in [0,1].
struct Image3 {
  int h = 0, w = 0;
  std::array<Eigen::MatrixXf, 3> ch;
};

// Parses the manifest CSV (header: study_id,lcc_path,lmlo_path,rcc_path,
// rmlo_path,label,boxes_path) and loads any referenced boxes files. Relative
// paths are resolved against the manifest's directory.
std::vector<StudyRecord> load_manifest(const std::string& path);

std::map<std::string, std::vector<LesionBox>> load_boxes(const std::string& path);

// Writes phantom studies (images, boxes files, manifest.csv) under out_dir
// and returns the manifest path. Deterministic given cfg.
std::string generate_phantoms(const PhantomConfig& cfg, const std::string& out_dir);

Image3 load_image(const std::string& path, int target_h, int target_w, int* src_h = nullptr,
                  int* src_w = nullptr);

}  // namespace mammoclu
