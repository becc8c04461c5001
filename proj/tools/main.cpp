#include <mammoclu/harness.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <string>

namespace {

using namespace mammoclu;
using nlohmann::json;

// Eval and viz rebuild the model configuration from the checkpoint sidecar so
// the loaded parameters always match the architecture they were trained with.
RunConfig config_from_sidecar(const json& side, const std::string& ckpt) {
  if (!side.contains("config"))
    throw std::runtime_error("checkpoint sidecar lacks a config snapshot: " + ckpt + ".json");
  return parse_run_config(side.at("config"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised multi-view context-clustering pipeline"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, manifest_path, study_id, out_dir;

  CLI::App* synth = app.add_subcommand("synth", "Generate a phantom dataset and its manifest");
  synth->add_option("--config", config_path, "Run config JSON")->required();
  synth->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", config_path, "Run config JSON")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  eval_cmd->add_option("--manifest", manifest_path, "Manifest CSV")->required();
  eval_cmd->add_option("--out", out_dir, "Report directory")->required();

  CLI::App* viz = app.add_subcommand("viz", "Render overlay, cluster and saliency images");
  viz->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  viz->add_option("--manifest", manifest_path, "Manifest CSV")->required();
  viz->add_option("--study", study_id, "Study id to render")->required();
  viz->add_option("--out", out_dir, "Image directory")->required();

  CLI::App* params = app.add_subcommand("params", "Report trainable parameter counts");
  params->add_option("--config", config_path, "Run config JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      std::cout << generate_phantoms(cfg.synth, out_dir) << "\n";
    } else if (train_cmd->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      TrainResult res = train(cfg);
      json out = {{"best_checkpoint", res.best_checkpoint},
                  {"last_checkpoint", res.last_checkpoint}};
      std::cout << out.dump(2) << "\n";
    } else if (eval_cmd->parsed()) {
      json side;
      ParamStore ps = load_checkpoint(ckpt_path, &side);
      RunConfig cfg = config_from_sidecar(side, ckpt_path);
      EvalReport rep = evaluate_manifest(ps, cfg, manifest_path, out_dir);
      std::cout << rep.metrics.dump(2) << "\n";
    } else if (viz->parsed()) {
      json side;
      ParamStore ps = load_checkpoint(ckpt_path, &side);
      RunConfig cfg = config_from_sidecar(side, ckpt_path);
      visualize(ps, cfg, manifest_path, study_id, out_dir);
    } else if (params->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      ParamStore ps;
      Rng rng(cfg.seed);
      init_model(ps, rng, cfg.model);
      json out;
      out["total"] = param_count(ps);
      for (const auto& [mod, n] : param_count_by_module(ps)) out["modules"][mod] = n;
      std::cout << out.dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
