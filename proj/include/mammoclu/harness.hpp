#pragma once

#include <mammoclu/loss_metrics.hpp>

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mammoclu {

struct OptimConfig {
  double learning_rate = 1e-3;
  int epochs = 10;
  int batch_size = 4;
};

struct RunConfig {
  std::string train_manifest, test_manifest;
  std::string output_dir = "mammoclu_out";
  std::string precision = "f32";  // f32 | f64
  std::uint64_t seed = 0;
  PhantomConfig synth;
  ModelConfig model;
  LossWeights loss;
  OptimConfig optim;
};

void validate(const RunConfig& cfg);

// Strict parse: unknown keys anywhere are errors, `seed` is mandatory, and a
// config file additionally requires learning_rate > 0.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_json(const RunConfig& cfg);

// Adaptive moment optimizer over the double-precision masters. lr = 0 is a
// valid null update.
struct Adam {
  double lr;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t steps = 0;
  std::map<std::string, Eigen::MatrixXd> m, v;

  explicit Adam(double learning_rate) : lr(learning_rate) {}
  void step(ParamStore& ps, const std::map<std::string, Eigen::MatrixXd>& grads);
};

std::int64_t param_count(const ParamStore& ps);
std::map<std::string, std::int64_t> param_count_by_module(const ParamStore& ps);

// Binary parameter container plus a JSON sidecar at path + ".json"; both
// written atomically.
void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const nlohmann::json& sidecar);
ParamStore load_checkpoint(const std::string& path, nlohmann::json* sidecar = nullptr);

void write_text_atomic(const std::string& path, const std::string& content);

// One evaluated study. Patches and boxes are both in model-input pixels.
struct StudyEval {
  std::string study_id;
  int label = 0;
  double score = 0;  // sigmoid of the fusion logit
  std::array<std::vector<PatchRect>, 4> patches;
  std::array<std::vector<LesionBox>, 4> boxes;
};

struct EvalReport {
  nlohmann::json metrics;
  std::vector<RocPoint> roc;
  std::vector<StudyEval> studies;
};

// Deterministic forward over every loadable study in the manifest; studies
// with unreadable views are skipped with a warning on stderr. When out_dir is
// non-empty, writes metrics.json and roc.csv there.
EvalReport evaluate_manifest(const ParamStore& ps, const RunConfig& cfg,
                             const std::string& manifest_path, const std::string& out_dir);

struct TrainResult {
  std::vector<nlohmann::json> history;  // one object per epoch
  std::string best_checkpoint, last_checkpoint;
};

TrainResult train(const RunConfig& cfg);

// Per view: source with ground-truth boxes (green) and selected patches
// (blue), a flat-color cluster-assignment map of the final global stage, and
// a saliency heatmap.
void visualize(const ParamStore& ps, const RunConfig& cfg, const std::string& manifest_path,
               const std::string& study_id, const std::string& out_dir);

}  // namespace mammoclu
