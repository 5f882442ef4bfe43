#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "poselift/config.hpp"
#include "poselift/data.hpp"
#include "poselift/train.hpp"

namespace {

using namespace poselift;

SkeletonTopology topology_from(const std::string& path) {
  return path.empty() ? default_topology() : SkeletonTopology::load(path);
}

int cmd_synth(int n, uint64_t seed, const std::string& out,
              const std::string& topology_path) {
  SkeletonTopology topo = topology_from(topology_path);
  RestPose rest = default_rest_pose();
  AngleLimits limits = default_angle_limits();
  CameraModel cam;
  SplitMix64 rng(seed);
  auto samples = synth_generate(n, rng, limits, rest, topo, cam);
  write_jsonl(out, samples);

  nlohmann::json gen_config{
      {"n", n},
      {"seed", seed},
      {"camera",
       {{"f", cam.f},
        {"c", {cam.c[0], cam.c[1]}},
        {"pelvis_distance_mm", cam.pelvis_distance_mm},
        {"image_width", cam.image_width},
        {"image_height", cam.image_height}}},
      {"topology", topo.to_json()},
      {"rest_pose", rest.to_json()}};
  nlohmann::json manifest{{"generator", gen_config},
                          {"config_hash", fnv1a64_hex(gen_config.dump())}};
  std::ofstream mf(out + ".manifest.json");
  if (!mf) throw data_error("synth: cannot write manifest for " + out);
  mf << manifest.dump(2) << "\n";
  std::cerr << "wrote " << samples.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path) {
  std::ifstream in(config_path);
  if (!in) throw config_error("train: cannot open config " + config_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("train: bad config JSON: ") + e.what());
  }
  RunConfig rc = run_config_from_json(j);
  if (rc.train_path.empty())
    throw config_error("train: config needs train_path");
  if (rc.checkpoint_out.empty())
    throw config_error("train: config needs checkpoint_out");
  SkeletonTopology topo = topology_from(rc.topology_path);
  auto train = read_jsonl(rc.train_path, topo);
  std::vector<PoseSample> val;
  if (!rc.val_path.empty()) val = read_jsonl(rc.val_path, topo);
  run_training(rc, topo, train, val, &std::cout, &std::cerr);
  std::cerr << "checkpoint written to " << rc.checkpoint_out << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path,
             bool no_scale) {
  LoadedModel lm = load_model(checkpoint);
  auto samples = read_jsonl(data_path, lm.topology);
  EvalMetrics m = lm.trainer.evaluate(samples, lm.config.batch_size, !no_scale);
  std::cout << m.to_json().dump() << "\n";
  std::cerr << "evaluated " << samples.size() << " samples\n";
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& in_path,
                const std::string& out_path) {
  LoadedModel lm = load_model(checkpoint);
  auto samples = read_jsonl(in_path, lm.topology, false);
  std::vector<Joints3d> positions;
  std::vector<BoneRotations> rotations;
  lm.trainer.predict(samples, lm.config.batch_size, &positions, &rotations);
  std::vector<PoseSample> out = samples;
  for (size_t i = 0; i < out.size(); ++i) {
    out[i].joints3d = positions[i];
    out[i].rotations = rotations[i];
  }
  write_jsonl(out_path, out);
  std::cerr << "wrote " << out.size() << " predictions to " << out_path << "\n";
  return 0;
}

int cmd_gradcheck(uint64_t seed) {
  auto results = gradcheck_suite(seed);
  bool all_ok = true;
  double worst = 0.0;
  for (const auto& r : results) {
    nlohmann::json line{{"op", r.op},
                        {"max_rel_err", r.max_rel_err},
                        {"tolerance", r.tolerance},
                        {"ok", r.ok()}};
    std::cout << line.dump() << "\n";
    if (!r.ok()) {
      all_ok = false;
      std::cerr << "FAIL " << r.op << ": " << r.max_rel_err << " >= "
                << r.tolerance << "\n";
    }
    worst = std::max(worst, r.max_rel_err);
  }
  std::cerr << (all_ok ? "gradcheck passed" : "gradcheck FAILED")
            << ", worst relative error " << worst << "\n";
  if (!all_ok) throw numeric_error("gradcheck: tolerance breached");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"poselift: 2D-to-3D pose and orientation lifting kit"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic FK dataset");
  int synth_n = 256;
  uint64_t synth_seed = 1;
  std::string synth_out, synth_topo;
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output JSONL path")->required();
  synth->add_option("--topology", synth_topo, "topology JSON (default built-in)");

  auto* train = app.add_subcommand("train", "train a model from a config file");
  std::string train_config;
  train->add_option("--config", train_config, "run config JSON")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data;
  bool eval_no_scale = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--data", eval_data, "labeled JSONL")->required();
  eval->add_flag("--no-scale", eval_no_scale,
                 "rigid-only Procrustes for the P2 metric");

  auto* predict = app.add_subcommand("predict", "lift 2D inputs to 3D outputs");
  std::string pred_ckpt, pred_in, pred_out;
  predict->add_option("--checkpoint", pred_ckpt, "checkpoint path")->required();
  predict->add_option("--in", pred_in, "2D-only JSONL input")->required();
  predict->add_option("--out", pred_out, "prediction JSONL output")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  uint64_t gc_seed = 12345;
  gradcheck->add_option("--seed", gc_seed, "suite seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(synth))
      return cmd_synth(synth_n, synth_seed, synth_out, synth_topo);
    if (app.got_subcommand(train)) return cmd_train(train_config);
    if (app.got_subcommand(eval))
      return cmd_eval(eval_ckpt, eval_data, eval_no_scale);
    if (app.got_subcommand(predict))
      return cmd_predict(pred_ckpt, pred_in, pred_out);
    if (app.got_subcommand(gradcheck)) return cmd_gradcheck(gc_seed);
  } catch (const poselift::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const poselift::data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const poselift::numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
