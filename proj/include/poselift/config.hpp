#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>

#include "json.hpp"
#include "poselift/common.hpp"

namespace poselift {

enum class Adjacency { static_graph, adaptive };
enum class Kernels { basic, split };
enum class LossKind { idev, ploss, position_only, orientation_only };

struct ModelConfig {
  int64_t channels = 256;
  int blocks = 3;
  int ne_modules_per_block = 2;
  double dropout = 0.2;
  int64_t squeeze_ratio = 8;
  bool node_only = false;
  Adjacency adjacency_v = Adjacency::adaptive;
  Adjacency adjacency_e = Adjacency::adaptive;
  Kernels kernels = Kernels::split;
  LossKind loss = LossKind::idev;
  bool ploss_bone_vector = false;
  double lambda = 20.0;
  uint64_t seed = 1;

  void validate() const {
    if (channels <= 0)
      throw config_error("config: channels must be > 0, got " +
                         std::to_string(channels));
    if (squeeze_ratio <= 0 || channels % squeeze_ratio != 0)
      throw config_error("config: squeeze_ratio " + std::to_string(squeeze_ratio) +
                         " must divide channels " + std::to_string(channels));
    if (blocks < 0 || ne_modules_per_block <= 0)
      throw config_error("config: blocks/ne_modules_per_block out of range");
    if (dropout < 0.0 || dropout >= 1.0)
      throw config_error("config: dropout must be in [0,1), got " +
                         std::to_string(dropout));
    if (lambda < 0.0) throw config_error("config: lambda must be >= 0");
  }
};

struct RunConfig {
  ModelConfig model;
  int epochs = 20;
  int batch_size = 256;
  double lr = 1e-4;
  double lr_decay = 0.92;
  std::string train_path;
  std::string val_path;
  std::string checkpoint_out;
  std::string topology_path;  // empty = built-in default skeleton

  void validate() const {
    model.validate();
    if (epochs <= 0) throw config_error("config: epochs must be > 0");
    if (batch_size <= 0) throw config_error("config: batch_size must be > 0");
    if (lr <= 0.0) throw config_error("config: lr must be > 0");
    if (lr_decay <= 0.0 || lr_decay > 1.0)
      throw config_error("config: lr_decay must be in (0,1], got " +
                         std::to_string(lr_decay));
  }
};

// lr(epoch) = lr0 * decay^floor(epoch/5), epoch counted from 0: the decay
// applies after epochs 5, 10, 15, ...
inline double lr_at_epoch(double lr0, double decay, int epoch) {
  return lr0 * std::pow(decay, epoch / 5);
}

namespace detail_config {

inline std::string adjacency_str(Adjacency a) {
  return a == Adjacency::adaptive ? "adaptive" : "static";
}
inline Adjacency adjacency_from(const std::string& s, const std::string& key) {
  if (s == "adaptive") return Adjacency::adaptive;
  if (s == "static") return Adjacency::static_graph;
  throw config_error("config: " + key + " must be 'static' or 'adaptive', got '" +
                     s + "'");
}
inline std::string kernels_str(Kernels k) {
  return k == Kernels::split ? "split" : "basic";
}
inline Kernels kernels_from(const std::string& s) {
  if (s == "split") return Kernels::split;
  if (s == "basic") return Kernels::basic;
  throw config_error("config: kernels must be 'basic' or 'split', got '" + s + "'");
}
inline std::string loss_str(LossKind l) {
  switch (l) {
    case LossKind::idev: return "idev";
    case LossKind::ploss: return "ploss";
    case LossKind::position_only: return "position_only";
    case LossKind::orientation_only: return "orientation_only";
  }
  return "idev";
}
inline LossKind loss_from(const std::string& s) {
  if (s == "idev") return LossKind::idev;
  if (s == "ploss") return LossKind::ploss;
  if (s == "position_only") return LossKind::position_only;
  if (s == "orientation_only") return LossKind::orientation_only;
  throw config_error("config: unknown loss '" + s + "'");
}

}  // namespace detail_config

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  const ModelConfig& m = rc.model;
  return nlohmann::json{
      {"channels", m.channels},
      {"blocks", m.blocks},
      {"ne_modules_per_block", m.ne_modules_per_block},
      {"dropout", m.dropout},
      {"squeeze_ratio", m.squeeze_ratio},
      {"node_only", m.node_only},
      {"adjacency_v", detail_config::adjacency_str(m.adjacency_v)},
      {"adjacency_e", detail_config::adjacency_str(m.adjacency_e)},
      {"kernels", detail_config::kernels_str(m.kernels)},
      {"loss", detail_config::loss_str(m.loss)},
      {"ploss_bone_vector", m.ploss_bone_vector},
      {"lambda", m.lambda},
      {"seed", m.seed},
      {"epochs", rc.epochs},
      {"batch_size", rc.batch_size},
      {"lr", rc.lr},
      {"lr_decay", rc.lr_decay},
      {"train_path", rc.train_path},
      {"val_path", rc.val_path},
      {"checkpoint_out", rc.checkpoint_out},
      {"topology_path", rc.topology_path},
  };
}

// Missing keys fall back to defaults; unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "channels",     "blocks",           "ne_modules_per_block",
      "dropout",      "squeeze_ratio",    "node_only",
      "adjacency_v",  "adjacency_e",      "kernels",
      "loss",         "ploss_bone_vector", "lambda",
      "seed",         "epochs",           "batch_size",
      "lr",           "lr_decay",         "train_path",
      "val_path",     "checkpoint_out",   "topology_path"};
  if (!j.is_object()) throw config_error("config: expected a JSON object");
  std::string unknown;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) unknown += (unknown.empty() ? "" : ", ") + it.key();
  }
  if (!unknown.empty())
    throw config_error("config: unknown keys: " + unknown);

  RunConfig rc;
  ModelConfig& m = rc.model;
  try {
    if (j.contains("channels")) m.channels = j.at("channels").get<int64_t>();
    if (j.contains("blocks")) m.blocks = j.at("blocks").get<int>();
    if (j.contains("ne_modules_per_block"))
      m.ne_modules_per_block = j.at("ne_modules_per_block").get<int>();
    if (j.contains("dropout")) m.dropout = j.at("dropout").get<double>();
    if (j.contains("squeeze_ratio"))
      m.squeeze_ratio = j.at("squeeze_ratio").get<int64_t>();
    if (j.contains("node_only")) m.node_only = j.at("node_only").get<bool>();
    if (j.contains("adjacency_v"))
      m.adjacency_v = detail_config::adjacency_from(
          j.at("adjacency_v").get<std::string>(), "adjacency_v");
    if (j.contains("adjacency_e"))
      m.adjacency_e = detail_config::adjacency_from(
          j.at("adjacency_e").get<std::string>(), "adjacency_e");
    if (j.contains("kernels"))
      m.kernels = detail_config::kernels_from(j.at("kernels").get<std::string>());
    if (j.contains("loss"))
      m.loss = detail_config::loss_from(j.at("loss").get<std::string>());
    if (j.contains("ploss_bone_vector"))
      m.ploss_bone_vector = j.at("ploss_bone_vector").get<bool>();
    if (j.contains("lambda")) m.lambda = j.at("lambda").get<double>();
    if (j.contains("seed")) m.seed = j.at("seed").get<uint64_t>();
    if (j.contains("epochs")) rc.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) rc.batch_size = j.at("batch_size").get<int>();
    if (j.contains("lr")) rc.lr = j.at("lr").get<double>();
    if (j.contains("lr_decay")) rc.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("train_path"))
      rc.train_path = j.at("train_path").get<std::string>();
    if (j.contains("val_path")) rc.val_path = j.at("val_path").get<std::string>();
    if (j.contains("checkpoint_out"))
      rc.checkpoint_out = j.at("checkpoint_out").get<std::string>();
    if (j.contains("topology_path"))
      rc.topology_path = j.at("topology_path").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config: bad field type: ") + e.what());
  }
  rc.validate();
  return rc;
}

}  // namespace poselift
