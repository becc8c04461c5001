#include <mammoclu/harness.hpp>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace mammoclu {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kEvalThreshold = 0.5;

[[noreturn]] void bad(const std::string& msg) { throw std::invalid_argument("config: " + msg); }

std::string dot(const std::string& ctx, const std::string& key) {
  return ctx.empty() ? key : ctx + "." + key;
}

void check_keys(const json& o, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
  if (!o.is_object()) bad("'" + (ctx.empty() ? std::string("<top level>") : ctx) + "' must be an object");
  for (const auto& el : o.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (el.key() == a) {
        ok = true;
        break;
      }
    if (!ok) bad("unknown key '" + dot(ctx, el.key()) + "'");
  }
}

double get_num(const json& o, const std::string& ctx, const char* key, double dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_number()) bad("'" + dot(ctx, key) + "' must be a number");
  return v.get<double>();
}

int get_int(const json& o, const std::string& ctx, const char* key, int dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_number_integer()) bad("'" + dot(ctx, key) + "' must be an integer");
  return v.get<int>();
}

std::string get_str(const json& o, const std::string& ctx, const char* key,
                    const std::string& dflt) {
  if (!o.contains(key)) return dflt;
  const json& v = o.at(key);
  if (!v.is_string()) bad("'" + dot(ctx, key) + "' must be a string");
  return v.get<std::string>();
}

// Accepts a single integer (square) or a [h, w] pair.
std::pair<int, int> get_size(const json& v, const std::string& path) {
  if (v.is_number_integer()) {
    int s = v.get<int>();
    return {s, s};
  }
  if (v.is_array() && v.size() == 2 && v[0].is_number_integer() && v[1].is_number_integer())
    return {v[0].get<int>(), v[1].get<int>()};
  bad("'" + path + "' must be an integer or a [h, w] pair");
}

void parse_backbone_side(const json& o, const std::string& ctx, ClusterConfig& cc) {
  check_keys(o, ctx, {"preset", "stages"});
  if (o.contains("preset")) cc.stages = preset_config(get_str(o, ctx, "preset", "")).stages;
  if (o.contains("stages")) {
    const json& sv = o.at("stages");
    const std::string what =
        "'" + ctx + ".stages' entries must be [width, blocks, reduce] or "
        "[width, blocks, reduce, n_h, n_w] integer lists";
    if (!sv.is_array() || sv.empty()) bad("'" + ctx + ".stages' must be a non-empty array");
    cc.stages.clear();
    for (const json& s : sv) {
      if (!s.is_array() || (s.size() != 3 && s.size() != 5)) bad(what);
      for (const json& x : s)
        if (!x.is_number_integer()) bad(what);
      StageSpec sp;
      sp.width = s[0].get<int>();
      sp.blocks = s[1].get<int>();
      sp.reduce = s[2].get<int>();
      if (s.size() == 5) {
        sp.n_h = s[3].get<int>();
        sp.n_w = s[4].get<int>();
      }
      cc.stages.push_back(sp);
    }
  }
}

json stages_json(const ClusterConfig& cc) {
  json a = json::array();
  for (const StageSpec& s : cc.stages) a.push_back({s.width, s.blocks, s.reduce, s.n_h, s.n_w});
  return a;
}

json size_json(int h, int w) { return h == w ? json(h) : json{h, w}; }

}  // namespace

void validate(const RunConfig& cfg) {
  validate(cfg.model);
  validate(cfg.loss);
  if (cfg.precision != "f32" && cfg.precision != "f64")
    throw std::invalid_argument("precision must be 'f32' or 'f64'");
  if (cfg.optim.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (cfg.optim.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(cfg.optim.learning_rate >= 0) || !std::isfinite(cfg.optim.learning_rate))
    throw std::invalid_argument("learning_rate must be finite and >= 0");
  if (cfg.output_dir.empty()) throw std::invalid_argument("output_dir must be set");
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  check_keys(j, "", {"train_manifest", "test_manifest", "output_dir", "precision", "seed",
                     "image_size", "synth", "backbone", "roi", "fusion", "loss", "optimizer"});
  if (!j.contains("seed")) bad("'seed' is required; every run must be explicitly seeded");
  {
    const json& v = j.at("seed");
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                   v.get<std::int64_t>() < 0))
      bad("'seed' must be a non-negative integer");
    c.seed = v.get<std::uint64_t>();
  }
  c.synth.seed = c.seed;
  c.train_manifest = get_str(j, "", "train_manifest", "");
  c.test_manifest = get_str(j, "", "test_manifest", "");
  c.output_dir = get_str(j, "", "output_dir", c.output_dir);
  c.precision = get_str(j, "", "precision", c.precision);
  if (j.contains("image_size"))
    std::tie(c.model.image_h, c.model.image_w) = get_size(j.at("image_size"), "image_size");

  if (j.contains("synth")) {
    const json& s = j.at("synth");
    check_keys(s, "synth", {"study_count", "image_size", "malignant_fraction", "seed",
                            "lesion_intensity", "radius_min", "radius_max"});
    c.synth.study_count = get_int(s, "synth", "study_count", c.synth.study_count);
    if (s.contains("image_size"))
      std::tie(c.synth.image_h, c.synth.image_w) = get_size(s.at("image_size"), "synth.image_size");
    c.synth.malignant_fraction =
        get_num(s, "synth", "malignant_fraction", c.synth.malignant_fraction);
    if (s.contains("seed")) {
      const json& v = s.at("seed");
      if (!v.is_number_integer()) bad("'synth.seed' must be an integer");
      c.synth.seed = v.get<std::uint64_t>();
    }
    c.synth.lesion_intensity = get_num(s, "synth", "lesion_intensity", c.synth.lesion_intensity);
    c.synth.lesion_radius_min = get_int(s, "synth", "radius_min", c.synth.lesion_radius_min);
    c.synth.lesion_radius_max = get_int(s, "synth", "radius_max", c.synth.lesion_radius_max);
  }

  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    check_keys(b, "backbone", {"global", "local", "k_neighbors", "anchor_grid", "ffn_ratio"});
    if (b.contains("global")) parse_backbone_side(b.at("global"), "backbone.global", c.model.global_cfg);
    if (b.contains("local")) parse_backbone_side(b.at("local"), "backbone.local", c.model.local_cfg);
    if (b.contains("k_neighbors")) {
      int k = get_int(b, "backbone", "k_neighbors", 4);
      c.model.global_cfg.k_neighbors = k;
      c.model.local_cfg.k_neighbors = k;
    }
    if (b.contains("anchor_grid")) {
      auto [ah, aw] = get_size(b.at("anchor_grid"), "backbone.anchor_grid");
      c.model.global_cfg.anchor_h = ah;
      c.model.global_cfg.anchor_w = aw;
      c.model.local_cfg.anchor_h = ah;
      c.model.local_cfg.anchor_w = aw;
    }
    if (b.contains("ffn_ratio")) {
      int r = get_int(b, "backbone", "ffn_ratio", 2);
      c.model.global_cfg.ffn_ratio = r;
      c.model.local_cfg.ffn_ratio = r;
    }
  }

  if (j.contains("roi")) {
    const json& r = j.at("roi");
    check_keys(r, "roi", {"num_patches", "patch_size"});
    c.model.num_patches = get_int(r, "roi", "num_patches", c.model.num_patches);
    if (r.contains("patch_size"))
      std::tie(c.model.patch_h, c.model.patch_w) = get_size(r.at("patch_size"), "roi.patch_size");
  }

  if (j.contains("fusion")) {
    const json& f = j.at("fusion");
    check_keys(f, "fusion", {"dim", "overlay", "view_attention"});
    c.model.fusion_dim = get_int(f, "fusion", "dim", c.model.fusion_dim);
    c.model.overlay_mode = get_str(f, "fusion", "overlay", c.model.overlay_mode);
    c.model.view_attention = get_str(f, "fusion", "view_attention", c.model.view_attention);
  }

  if (j.contains("loss")) {
    const json& l = j.at("loss");
    check_keys(l, "loss", {"alpha", "beta", "gamma", "delta", "pos_weight"});
    c.loss.alpha = get_num(l, "loss", "alpha", c.loss.alpha);
    c.loss.beta = get_num(l, "loss", "beta", c.loss.beta);
    c.loss.gamma = get_num(l, "loss", "gamma", c.loss.gamma);
    c.loss.delta = get_num(l, "loss", "delta", c.loss.delta);
    c.loss.pos_weight = get_num(l, "loss", "pos_weight", c.loss.pos_weight);
  }

  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    check_keys(o, "optimizer", {"learning_rate", "epochs", "batch_size"});
    c.optim.learning_rate = get_num(o, "optimizer", "learning_rate", c.optim.learning_rate);
    c.optim.epochs = get_int(o, "optimizer", "epochs", c.optim.epochs);
    c.optim.batch_size = get_int(o, "optimizer", "batch_size", c.optim.batch_size);
  }

  validate(c);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: " + path + ": " + e.what());
  }
  RunConfig c = parse_run_config(j);
  if (!(c.optim.learning_rate > 0)) bad("'optimizer.learning_rate' must be > 0");
  return c;
}

json run_config_json(const RunConfig& c) {
  json j;
  j["train_manifest"] = c.train_manifest;
  j["test_manifest"] = c.test_manifest;
  j["output_dir"] = c.output_dir;
  j["precision"] = c.precision;
  j["seed"] = c.seed;
  j["image_size"] = size_json(c.model.image_h, c.model.image_w);
  j["synth"] = {{"study_count", c.synth.study_count},
                {"image_size", size_json(c.synth.image_h, c.synth.image_w)},
                {"malignant_fraction", c.synth.malignant_fraction},
                {"seed", c.synth.seed},
                {"lesion_intensity", c.synth.lesion_intensity},
                {"radius_min", c.synth.lesion_radius_min},
                {"radius_max", c.synth.lesion_radius_max}};
  j["backbone"] = {{"global", {{"stages", stages_json(c.model.global_cfg)}}},
                   {"local", {{"stages", stages_json(c.model.local_cfg)}}},
                   {"k_neighbors", c.model.global_cfg.k_neighbors},
                   {"anchor_grid", json{c.model.global_cfg.anchor_h, c.model.global_cfg.anchor_w}},
                   {"ffn_ratio", c.model.global_cfg.ffn_ratio}};
  j["roi"] = {{"num_patches", c.model.num_patches},
              {"patch_size", size_json(c.model.patch_h, c.model.patch_w)}};
  j["fusion"] = {{"dim", c.model.fusion_dim},
                 {"overlay", c.model.overlay_mode},
                 {"view_attention", c.model.view_attention}};
  j["loss"] = {{"alpha", c.loss.alpha},
               {"beta", c.loss.beta},
               {"gamma", c.loss.gamma},
               {"delta", c.loss.delta},
               {"pos_weight", c.loss.pos_weight}};
  j["optimizer"] = {{"learning_rate", c.optim.learning_rate},
                    {"epochs", c.optim.epochs},
                    {"batch_size", c.optim.batch_size}};
  return j;
}

void Adam::step(ParamStore& ps, const std::map<std::string, Eigen::MatrixXd>& grads) {
  for (const auto& [name, g] : grads)
    if (!ps.p.count(name)) throw std::invalid_argument("gradient for unknown parameter: " + name);
  ++steps;
  double c1 = 1.0 - std::pow(beta1, double(steps));
  double c2 = 1.0 - std::pow(beta2, double(steps));
  for (auto& [name, theta] : ps.p) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(theta.rows(), theta.cols());
    auto it = grads.find(name);
    if (it != grads.end()) {
      if (it->second.rows() != theta.rows() || it->second.cols() != theta.cols())
        throw std::invalid_argument("gradient shape mismatch: " + name);
      g = it->second;
    }
    Eigen::MatrixXd& mm = m[name];
    Eigen::MatrixXd& vv = v[name];
    if (mm.size() == 0) {
      mm = Eigen::MatrixXd::Zero(theta.rows(), theta.cols());
      vv = Eigen::MatrixXd::Zero(theta.rows(), theta.cols());
    }
    mm = beta1 * mm + (1.0 - beta1) * g;
    vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
    theta.array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
  }
}

std::int64_t param_count(const ParamStore& ps) { return ps.count(); }

std::map<std::string, std::int64_t> param_count_by_module(const ParamStore& ps) {
  std::map<std::string, std::int64_t> out;
  for (const auto& [name, mat] : ps.p) out[name.substr(0, name.find('.'))] += mat.size();
  return out;
}

namespace {

constexpr char kCkptMagic[8] = {'M', 'M', 'C', 'L', 'U', 'C', 'K', '1'};
constexpr std::uint32_t kCkptVersion = 1;

void write_file_atomic(const std::string& path, const std::string& bytes) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, p);
}

}  // namespace

void write_text_atomic(const std::string& path, const std::string& content) {
  write_file_atomic(path, content);
}

void save_checkpoint(const std::string& path, const ParamStore& ps, const json& sidecar) {
  std::ostringstream buf(std::ios::binary);
  auto w32 = [&](std::uint32_t x) { buf.write(reinterpret_cast<const char*>(&x), 4); };
  auto w64 = [&](std::uint64_t x) { buf.write(reinterpret_cast<const char*>(&x), 8); };
  buf.write(kCkptMagic, 8);
  w32(kCkptVersion);
  w64(std::uint64_t(ps.p.size()));
  for (const auto& [name, mat] : ps.p) {
    w32(std::uint32_t(name.size()));
    buf.write(name.data(), std::streamsize(name.size()));
    w64(std::uint64_t(mat.rows()));
    w64(std::uint64_t(mat.cols()));
    if (mat.size() > 0)
      buf.write(reinterpret_cast<const char*>(mat.data()),
                std::streamsize(sizeof(double) * std::size_t(mat.size())));
  }
  write_file_atomic(path, buf.str());
  write_text_atomic(path + ".json", sidecar.dump(2) + "\n");
}

ParamStore load_checkpoint(const std::string& path, json* sidecar) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  auto fail = [&] { return std::runtime_error("corrupt checkpoint: " + path); };
  char magic[8] = {};
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) throw fail();
  auto r32 = [&] {
    std::uint32_t x = 0;
    in.read(reinterpret_cast<char*>(&x), 4);
    return x;
  };
  auto r64 = [&] {
    std::uint64_t x = 0;
    in.read(reinterpret_cast<char*>(&x), 8);
    return x;
  };
  if (r32() != kCkptVersion) throw fail();
  std::uint64_t n = r64();
  if (!in || n > (1ull << 24)) throw fail();
  ParamStore ps;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t len = r32();
    if (!in || len == 0 || len > 4096) throw fail();
    std::string name(len, '\0');
    in.read(name.data(), std::streamsize(len));
    std::int64_t rows = std::int64_t(r64());
    std::int64_t cols = std::int64_t(r64());
    if (!in || rows < 0 || cols < 0 || rows * cols > (1ll << 32)) throw fail();
    Eigen::MatrixXd& mat = ps.add(name, int(rows), int(cols));
    if (mat.size() > 0)
      in.read(reinterpret_cast<char*>(mat.data()),
              std::streamsize(sizeof(double) * std::size_t(mat.size())));
    if (!in) throw fail();
  }
  if (sidecar) {
    std::ifstream js(path + ".json");
    if (!js) throw std::runtime_error("missing checkpoint sidecar: " + path + ".json");
    try {
      js >> *sidecar;
    } catch (const json::parse_error& e) {
      throw std::runtime_error("corrupt checkpoint sidecar: " + path + ".json: " + e.what());
    }
  }
  return ps;
}

namespace {

struct LoadedStudy {
  std::string id;
  int label = 0;
  ViewBundle vb;
  std::array<std::pair<int, int>, 4> src{};  // per-view source (h, w)
  std::map<std::string, std::vector<LesionBox>> boxes;
};

LoadedStudy load_study(const StudyRecord& rec, const ModelConfig& mc) {
  LoadedStudy s;
  s.id = rec.study_id;
  s.label = rec.label;
  s.vb.label = rec.label;
  for (int v = 0; v < 4; ++v) {
    int sh = 0, sw = 0;
    s.vb.views[std::size_t(v)] = load_image(rec.view_paths[std::size_t(v)], mc.image_h,
                                            mc.image_w, &sh, &sw);
    s.src[std::size_t(v)] = {sh, sw};
  }
  s.boxes = rec.boxes;
  return s;
}

// Source-pixel box mapped into model-input pixels; rounding keeps a
// non-degenerate box non-degenerate.
LesionBox scale_box(const LesionBox& b, std::pair<int, int> src, int mh, int mw) {
  double sy = double(mh) / double(src.first);
  double sx = double(mw) / double(src.second);
  LesionBox o;
  o.x_min = std::clamp(int(std::floor(b.x_min * sx)), 0, mw);
  o.x_max = std::clamp(int(std::ceil(b.x_max * sx)), 0, mw);
  o.y_min = std::clamp(int(std::floor(b.y_min * sy)), 0, mh);
  o.y_max = std::clamp(int(std::ceil(b.y_max * sy)), 0, mh);
  return o;
}

template <typename S>
StudyEval eval_study(const ParamStore& ps, const ModelConfig& mc, const LoadedStudy& st) {
  ad::Tape<S> t;
  ParamBind<S> P(t, ps);
  auto out = study_forward(P, mc, st.vb);
  StudyEval e;
  e.study_id = st.id;
  e.label = st.label;
  e.score = double(ad::Tape<S>::sigmoid_scalar(t.val(out.fusion_logit)(0, 0)));
  for (int v = 0; v < 4; ++v) {
    auto [mh, mw] = out.map_shape[std::size_t(v)];
    for (const RoiCoord& c : out.coords[std::size_t(v)]) {
      PatchRect r;
      r.row0 = map_to_image_start(c.row, mh, mc.image_h, mc.patch_h);
      r.col0 = map_to_image_start(c.col, mw, mc.image_w, mc.patch_w);
      r.h = mc.patch_h;
      r.w = mc.patch_w;
      e.patches[std::size_t(v)].push_back(r);
    }
    auto it = st.boxes.find(kViewNames[std::size_t(v)]);
    if (it != st.boxes.end())
      for (const LesionBox& b : it->second)
        e.boxes[std::size_t(v)].push_back(
            scale_box(b, st.src[std::size_t(v)], mc.image_h, mc.image_w));
  }
  return e;
}

}  // namespace

EvalReport evaluate_manifest(const ParamStore& ps, const RunConfig& cfg,
                             const std::string& manifest_path, const std::string& out_dir) {
  validate(cfg);
  auto records = load_manifest(manifest_path);
  EvalReport rep;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::pair<std::vector<PatchRect>, std::vector<LesionBox>>> mdr_items;
  for (const StudyRecord& rec : records) {
    LoadedStudy st;
    try {
      st = load_study(rec, cfg.model);
    } catch (const std::runtime_error& e) {
      std::cerr << "warning: skipping study " << rec.study_id << ": " << e.what() << "\n";
      continue;
    }
    StudyEval e = cfg.precision == "f64" ? eval_study<double>(ps, cfg.model, st)
                                         : eval_study<float>(ps, cfg.model, st);
    scores.push_back(e.score);
    labels.push_back(e.label);
    for (int v = 0; v < 4; ++v)
      if (!e.boxes[std::size_t(v)].empty())
        mdr_items.emplace_back(e.patches[std::size_t(v)], e.boxes[std::size_t(v)]);
    rep.studies.push_back(std::move(e));
  }
  if (rep.studies.empty()) throw std::runtime_error("no evaluable studies in " + manifest_path);

  Confusion c = confusion(scores, labels, kEvalThreshold);
  json m;
  m["auc"] = auc(scores, labels, &rep.roc);
  m["acc"] = c.acc();
  m["f1"] = f1(c.tp, c.fp, c.fn);
  m["tp"] = c.tp;
  m["tn"] = c.tn;
  m["fp"] = c.fp;
  m["fn"] = c.fn;
  m["threshold"] = kEvalThreshold;
  std::int64_t n_gt = 0, n_miss = 0;
  if (!mdr_items.empty()) {
    MdrResult r = mdr(mdr_items);
    n_gt = r.n_gt;
    n_miss = r.n_miss;
    m["mdr"] = r.value();
  }
  m["n_gt"] = n_gt;
  m["n_miss"] = n_miss;
  rep.metrics = m;

  if (!out_dir.empty()) {
    write_text_atomic(out_dir + "/metrics.json", rep.metrics.dump(2) + "\n");
    std::ostringstream csv;
    csv.precision(17);
    csv << "fpr,tpr,threshold\n";
    for (const RocPoint& p : rep.roc) csv << p.fpr << "," << p.tpr << "," << p.threshold << "\n";
    write_text_atomic(out_dir + "/roc.csv", csv.str());
  }
  return rep;
}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? ", " : "") + ids[i];
  return s;
}

template <typename S>
TrainResult train_impl(const RunConfig& cfg) {
  auto records = load_manifest(cfg.train_manifest);
  if (records.empty())
    throw std::invalid_argument("training manifest is empty: " + cfg.train_manifest);
  std::vector<LoadedStudy> items;
  items.reserve(records.size());
  for (const StudyRecord& rec : records) items.push_back(load_study(rec, cfg.model));

  ParamStore ps;
  Rng init_rng(cfg.seed);
  init_model(ps, init_rng, cfg.model);
  Adam opt(cfg.optim.learning_rate);
  Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  fs::create_directories(cfg.output_dir);
  std::ofstream log(cfg.output_dir + "/train_log.jsonl", std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + cfg.output_dir + "/train_log.jsonl");

  TrainResult res;
  res.last_checkpoint = cfg.output_dir + "/last.ckpt";
  double best_auc = -1.0;
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  json hist = json::array();

  // Per-term sums are taken in manifest order, not visit order, so the logged
  // epoch loss is independent of the shuffle whenever the parameters are.
  Eigen::MatrixXd terms(items.size(), 5);

  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(idx);
    terms.setZero();
    for (std::size_t b0 = 0; b0 < idx.size(); b0 += std::size_t(cfg.optim.batch_size)) {
      std::size_t b1 = std::min(idx.size(), b0 + std::size_t(cfg.optim.batch_size));
      std::map<std::string, Eigen::MatrixXd> acc;
      std::vector<std::string> batch_ids;
      for (std::size_t k = b0; k < b1; ++k) {
        const LoadedStudy& st = items[idx[k]];
        batch_ids.push_back(st.id);
        ad::Tape<S> t;
        ParamBind<S> P(t, ps);
        auto out = study_forward(P, cfg.model, st.vb);
        auto lb = composite_loss(t, out, st.label, cfg.loss);
        double L = double(t.val(lb.total)(0, 0));
        if (!std::isfinite(L))
          throw std::runtime_error("non-finite loss; aborting on batch [" + join_ids(batch_ids) +
                                   "]");
        Eigen::Index row = Eigen::Index(idx[k]);
        terms(row, 0) = L;
        terms(row, 1) = double(t.val(lb.l_global)(0, 0));
        terms(row, 2) = double(t.val(lb.l_local)(0, 0));
        terms(row, 3) = double(t.val(lb.l_fusion)(0, 0));
        terms(row, 4) = double(t.val(lb.l_map)(0, 0));
        t.backward(lb.total);
        for (auto& [name, g] : P.grads()) {
          auto it = acc.find(name);
          if (it == acc.end())
            acc.emplace(name, std::move(g));
          else
            it->second += g;
        }
      }
      double inv = 1.0 / double(b1 - b0);
      for (auto& [name, g] : acc) g *= inv;
      opt.step(ps, acc);
    }

    double n = double(items.size());
    double s_total = 0, s_global = 0, s_local = 0, s_fusion = 0, s_map = 0;
    for (Eigen::Index r = 0; r < terms.rows(); ++r) {
      s_total += terms(r, 0);
      s_global += terms(r, 1);
      s_local += terms(r, 2);
      s_fusion += terms(r, 3);
      s_map += terms(r, 4);
    }
    json line;
    line["epoch"] = epoch;
    line["loss"] = s_total / n;
    line["l_global"] = s_global / n;
    line["l_local"] = s_local / n;
    line["l_fusion"] = s_fusion / n;
    line["l_map"] = s_map / n;
    bool improved = false;
    if (!cfg.test_manifest.empty()) {
      EvalReport er = evaluate_manifest(ps, cfg, cfg.test_manifest, "");
      line["val_auc"] = er.metrics["auc"];
      line["val_acc"] = er.metrics["acc"];
      double a = er.metrics["auc"].get<double>();
      if (a > best_auc) {
        best_auc = a;
        improved = true;
      }
    }
    line["time_sec"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.push_back(line);
    res.history.push_back(line);
    log << line.dump() << "\n" << std::flush;
    std::cout << line.dump() << "\n" << std::flush;
    if (improved) {
      res.best_checkpoint = cfg.output_dir + "/best.ckpt";
      save_checkpoint(res.best_checkpoint, ps,
                      {{"config", run_config_json(cfg)}, {"epoch", epoch}, {"history", hist}});
    }
  }
  save_checkpoint(res.last_checkpoint, ps,
                  {{"config", run_config_json(cfg)},
                   {"epoch", cfg.optim.epochs - 1},
                   {"history", hist}});
  if (res.best_checkpoint.empty()) res.best_checkpoint = res.last_checkpoint;
  return res;
}

}  // namespace

TrainResult train(const RunConfig& cfg) {
  validate(cfg);
  return cfg.precision == "f64" ? train_impl<double>(cfg) : train_impl<float>(cfg);
}

namespace {

cv::Mat to_bgr8(const Image3& img) {
  cv::Mat bgr(img.h, img.w, CV_8UC3);
  for (int i = 0; i < img.h; ++i)
    for (int j = 0; j < img.w; ++j) {
      auto px = [&](int c) {
        double v = std::clamp(double(img.ch[std::size_t(c)](i, j)), 0.0, 1.0);
        return uchar(std::lround(v * 255.0));
      };
      bgr.at<cv::Vec3b>(i, j) = cv::Vec3b(px(2), px(1), px(0));
    }
  return bgr;
}

void write_png_atomic(const std::string& path, const cv::Mat& m) {
  std::string tmp = path + ".tmp.png";
  if (!cv::imwrite(tmp, m)) throw std::runtime_error("cannot write " + tmp);
  fs::rename(tmp, path);
}

template <typename S>
void viz_impl(const ParamStore& ps, const RunConfig& cfg, const LoadedStudy& st,
              const std::string& out_dir) {
  const ModelConfig& mc = cfg.model;
  ad::Tape<S> t;
  ParamBind<S> P(t, ps);
  auto out = study_forward(P, mc, st.vb);
  for (int v = 0; v < 4; ++v) {
    const std::string base = out_dir + "/" + st.id + "_" + kViewNames[std::size_t(v)];
    auto [mh, mw] = out.map_shape[std::size_t(v)];

    cv::Mat over = to_bgr8(st.vb.views[std::size_t(v)]);
    for (const RoiCoord& c : out.coords[std::size_t(v)]) {
      int r0 = map_to_image_start(c.row, mh, mc.image_h, mc.patch_h);
      int c0 = map_to_image_start(c.col, mw, mc.image_w, mc.patch_w);
      cv::rectangle(over, cv::Point(c0, r0),
                    cv::Point(c0 + mc.patch_w - 1, r0 + mc.patch_h - 1), cv::Scalar(255, 0, 0),
                    1);
    }
    auto it = st.boxes.find(kViewNames[std::size_t(v)]);
    if (it != st.boxes.end())
      for (const LesionBox& b : it->second) {
        LesionBox s = scale_box(b, st.src[std::size_t(v)], mc.image_h, mc.image_w);
        cv::rectangle(over, cv::Point(s.x_min, s.y_min), cv::Point(s.x_max - 1, s.y_max - 1),
                      cv::Scalar(0, 255, 0), 1);
      }
    write_png_atomic(base + "_overlay.png", over);

    Eigen::MatrixXd pts = t.val(out.global_points[std::size_t(v)]).template cast<double>();
    const StageSpec& last = mc.global_cfg.stages.back();
    int n_h = last.n_h > 0 ? last.n_h : mc.global_cfg.anchor_h;
    int n_w = last.n_w > 0 ? last.n_w : mc.global_cfg.anchor_w;
    int k = mc.global_cfg.k_neighbors;
    auto aidx = select_anchors(mh, mw, n_h, n_w);
    Eigen::MatrixXd anchors(Eigen::Index(aidx.size()), pts.cols());
    for (std::size_t a = 0; a < aidx.size(); ++a) {
      int r = aidx[a] / mw, c = aidx[a] % mw;
      Eigen::RowVectorXd s = pts.row(aidx[a]);
      for (int nb : neighbor_indices(mh, mw, r, c, k)) s += pts.row(nb);
      anchors.row(Eigen::Index(a)) = s / double(k + 1);
    }
    std::vector<int> assign = assign_clusters<double>(pts, anchors);
    int n_c = int(aidx.size());
    std::vector<cv::Vec3b> palette(std::size_t(n_c), cv::Vec3b{0, 0, 0});
    for (int i = 0; i < n_c; ++i) {
      cv::Mat hsv(1, 1, CV_8UC3, cv::Vec3b(uchar(i * 180 / n_c), 200, 255));
      cv::Mat one;
      cv::cvtColor(hsv, one, cv::COLOR_HSV2BGR);
      palette[std::size_t(i)] = one.at<cv::Vec3b>(0, 0);
    }
    cv::Mat cmap(mh, mw, CV_8UC3);
    for (int i = 0; i < mh; ++i)
      for (int j = 0; j < mw; ++j)
        cmap.at<cv::Vec3b>(i, j) = palette[std::size_t(assign[std::size_t(i) * std::size_t(mw) + std::size_t(j)])];
    cv::Mat cbig;
    cv::resize(cmap, cbig, cv::Size(mc.image_w, mc.image_h), 0, 0, cv::INTER_NEAREST);
    write_png_atomic(base + "_clusters.png", cbig);

    const auto& mval = t.val(out.maps[std::size_t(v)]);
    cv::Mat smap(mh, mw, CV_8UC1);
    for (int i = 0; i < mh; ++i)
      for (int j = 0; j < mw; ++j) {
        double x = std::clamp(double(mval(Eigen::Index(i) * mw + j, 0)), 0.0, 1.0);
        smap.at<uchar>(i, j) = uchar(std::lround(x * 255.0));
      }
    cv::Mat heat;
    cv::applyColorMap(smap, heat, cv::COLORMAP_JET);
    cv::Mat hbig;
    cv::resize(heat, hbig, cv::Size(mc.image_w, mc.image_h), 0, 0, cv::INTER_NEAREST);
    write_png_atomic(base + "_saliency.png", hbig);
  }
}

}  // namespace

void visualize(const ParamStore& ps, const RunConfig& cfg, const std::string& manifest_path,
               const std::string& study_id, const std::string& out_dir) {
  validate(cfg);
  auto records = load_manifest(manifest_path);
  const StudyRecord* found = nullptr;
  std::string ids;
  for (const StudyRecord& r : records) {
    if (r.study_id == study_id) found = &r;
    ids += (ids.empty() ? "" : ", ") + r.study_id;
  }
  if (!found) throw std::invalid_argument("unknown study '" + study_id + "'; available: " + ids);
  LoadedStudy st = load_study(*found, cfg.model);
  fs::create_directories(out_dir);
  if (cfg.precision == "f64")
    viz_impl<double>(ps, cfg, st, out_dir);
  else
    viz_impl<float>(ps, cfg, st, out_dir);
}

}  // namespace mammoclu
