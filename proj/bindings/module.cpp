#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <mammoclu/harness.hpp>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace py = pybind11;
using namespace mammoclu;

namespace {

nlohmann::json to_json(py::handle h) {
  if (h.is_none()) return nullptr;
  if (py::isinstance<py::bool_>(h)) return h.cast<bool>();
  if (py::isinstance<py::int_>(h)) return h.cast<std::int64_t>();
  if (py::isinstance<py::float_>(h)) return h.cast<double>();
  if (py::isinstance<py::str>(h)) return h.cast<std::string>();
  if (py::isinstance<py::dict>(h)) {
    nlohmann::json j = nlohmann::json::object();
    for (auto item : h.cast<py::dict>())
      j[py::str(item.first).cast<std::string>()] = to_json(item.second);
    return j;
  }
  if (py::isinstance<py::list>(h) || py::isinstance<py::tuple>(h)) {
    nlohmann::json j = nlohmann::json::array();
    for (auto item : h.cast<py::sequence>()) j.push_back(to_json(item));
    return j;
  }
  throw py::type_error("unsupported value of type " +
                       py::str(py::type::of(h)).cast<std::string>());
}

py::object from_json(const nlohmann::json& j) {
  switch (j.type()) {
    case nlohmann::json::value_t::null:
      return py::none();
    case nlohmann::json::value_t::boolean:
      return py::bool_(j.get<bool>());
    case nlohmann::json::value_t::number_integer:
      return py::int_(j.get<std::int64_t>());
    case nlohmann::json::value_t::number_unsigned:
      return py::int_(j.get<std::uint64_t>());
    case nlohmann::json::value_t::number_float:
      return py::float_(j.get<double>());
    case nlohmann::json::value_t::string:
      return py::str(j.get<std::string>());
    case nlohmann::json::value_t::array: {
      py::list out;
      for (const auto& e : j) out.append(from_json(e));
      return out;
    }
    case nlohmann::json::value_t::object: {
      py::dict out;
      for (auto it = j.begin(); it != j.end(); ++it)
        out[py::str(it.key())] = from_json(it.value());
      return out;
    }
    default:
      throw py::value_error("unsupported json value");
  }
}

RunConfig config_for_checkpoint(const nlohmann::json& sidecar, py::object config) {
  if (!config.is_none()) return parse_run_config(to_json(config));
  if (!sidecar.contains("config"))
    throw std::invalid_argument("checkpoint sidecar has no config; pass config=");
  return parse_run_config(sidecar.at("config"));
}

std::vector<std::pair<std::vector<PatchRect>, std::vector<LesionBox>>> mdr_items(
    const std::vector<std::vector<std::array<int, 4>>>& patches,
    const std::vector<std::vector<std::array<int, 4>>>& boxes) {
  if (patches.size() != boxes.size())
    throw std::invalid_argument("patches and boxes need one entry per view");
  std::vector<std::pair<std::vector<PatchRect>, std::vector<LesionBox>>> items(patches.size());
  for (std::size_t v = 0; v < patches.size(); ++v) {
    for (const auto& p : patches[v]) items[v].first.push_back({p[0], p[1], p[2], p[3]});
    for (const auto& b : boxes[v]) items[v].second.push_back({b[0], b[1], b[2], b[3]});
  }
  return items;
}

}  // namespace

PYBIND11_MODULE(_mammoclu, m) {
  m.doc() = "Weakly supervised multi-view context-clustering pipeline core";

  m.def(
      "synth",
      [](const std::string& out_dir, int study_count, int image_size, double malignant_fraction,
         std::uint64_t seed, double lesion_intensity, int radius_min, int radius_max) {
        PhantomConfig pc;
        pc.study_count = study_count;
        pc.image_h = pc.image_w = image_size;
        pc.malignant_fraction = malignant_fraction;
        pc.seed = seed;
        pc.lesion_intensity = lesion_intensity;
        pc.lesion_radius_min = radius_min;
        pc.lesion_radius_max = radius_max;
        return generate_phantoms(pc, out_dir);
      },
      py::arg("out_dir"), py::arg("study_count") = 8, py::arg("image_size") = 64,
      py::arg("malignant_fraction") = 0.5, py::arg("seed") = 0,
      py::arg("lesion_intensity") = 0.7, py::arg("radius_min") = 6, py::arg("radius_max") = 12,
      "Render a synthetic four-view phantom dataset; returns the manifest path.");

  m.def(
      "assign_clusters",
      [](const Eigen::MatrixXd& points, const Eigen::MatrixXd& anchors) {
        return assign_clusters<double>(points, anchors);
      },
      py::arg("points"), py::arg("anchors"),
      "Cosine-argmax cluster index per point row; ties go to the lowest anchor index.");

  m.def(
      "greedy_roi_select",
      [](const Eigen::MatrixXd& saliency, int n, int h_crop, int w_crop) {
        std::vector<std::pair<int, int>> out;
        for (const auto& rc : greedy_roi_select<double>(saliency, n, h_crop, w_crop))
          out.emplace_back(rc.row, rc.col);
        return out;
      },
      py::arg("saliency"), py::arg("n"), py::arg("h_crop"), py::arg("w_crop"),
      "Greedy disjoint window selection; returns (row, col) top-left corners.");

  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        return auc(scores, labels);
      },
      py::arg("scores"), py::arg("labels"), "Tie-averaged Mann-Whitney AUC.");

  m.def("f1", &f1, py::arg("tp"), py::arg("fp"), py::arg("fn"));

  m.def(
      "mdr",
      [](const std::vector<std::vector<std::array<int, 4>>>& patches,
         const std::vector<std::vector<std::array<int, 4>>>& boxes, double tau) {
        MdrResult r = mdr(mdr_items(patches, boxes), tau);
        py::dict out;
        out["n_gt"] = r.n_gt;
        out["n_miss"] = r.n_miss;
        out["value"] = r.value();
        return out;
      },
      py::arg("patches"), py::arg("boxes"), py::arg("tau") = 0.25,
      "Missed detection rate. Patches are (row0, col0, h, w) per view; boxes are "
      "(x_min, y_min, x_max, y_max).");

  m.def(
      "params",
      [](py::dict config) {
        RunConfig cfg = parse_run_config(to_json(config));
        ParamStore ps;
        Rng rng(cfg.seed);
        init_model(ps, rng, cfg.model);
        py::dict out;
        out["total"] = param_count(ps);
        out["modules"] = py::cast(param_count_by_module(ps));
        return out;
      },
      py::arg("config"), "Parameter counts for the model a config describes.");

  m.def(
      "train",
      [](py::dict config) {
        RunConfig cfg = parse_run_config(to_json(config));
        TrainResult res = train(cfg);
        py::dict out;
        out["best_checkpoint"] = res.best_checkpoint;
        out["last_checkpoint"] = res.last_checkpoint;
        py::list hist;
        for (const auto& h : res.history) hist.append(from_json(h));
        out["history"] = hist;
        return out;
      },
      py::arg("config"), "Train from a config dict; returns checkpoint paths and history.");

  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& manifest, const std::string& out_dir,
         py::object config) {
        nlohmann::json sidecar;
        ParamStore ps = load_checkpoint(checkpoint, &sidecar);
        RunConfig cfg = config_for_checkpoint(sidecar, config);
        EvalReport rep = evaluate_manifest(ps, cfg, manifest, out_dir);
        return from_json(rep.metrics);
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("out_dir") = std::string(),
      py::arg("config") = py::none(),
      "Evaluate a checkpoint on a manifest; returns the metrics dict.");

  m.def(
      "visualize",
      [](const std::string& checkpoint, const std::string& manifest, const std::string& study_id,
         const std::string& out_dir, py::object config) {
        nlohmann::json sidecar;
        ParamStore ps = load_checkpoint(checkpoint, &sidecar);
        RunConfig cfg = config_for_checkpoint(sidecar, config);
        visualize(ps, cfg, manifest, study_id, out_dir);
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("study_id"), py::arg("out_dir"),
      py::arg("config") = py::none(),
      "Write overlay, cluster and saliency images for one study.");
}
