#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ldet/data.hpp"
#include "ldet/detector.hpp"

namespace ldet {

// Experiment configuration, loaded from a flat line-oriented key=value file.
// '#' starts a comment; unknown keys are rejected. See README for the key list.
struct ExperimentConfig {
  DetectorConfig detector;
  OptimizerConfig optimizer;
  std::size_t epochs = 15;
  std::string policy = "LoraDetHybrid";
  std::uint64_t seed = 42;
  std::size_t pretrain_count = 128;
  std::size_t finetune_count = 128;
  std::size_t eval_count = 64;

  SynthOptions synth_options() const {
    SynthOptions o;
    o.image_size = detector.backbone.image_size;
    o.num_classes = detector.classes;
    return o;
  }

  void validate() const {
    detector.validate();
    if (epochs == 0) throw ConfigError("config: epochs must be positive");
    if (pretrain_count == 0 || finetune_count == 0 || eval_count == 0)
      throw ConfigError("config: dataset sizes must be positive");
    policy_from_name(policy);  // throws on unknown names
  }
};

namespace detail {

inline std::vector<std::size_t> parse_size_list(const std::string& v,
                                                const std::string& key) {
  std::vector<std::size_t> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) {
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(item)));
    } catch (const std::exception&) {
      throw ConfigError("config: bad value '" + item + "' in " + key);
    }
  }
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::vector<std::size_t> dims, depths, heads, ranks;
  std::size_t window = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      if (key == "image_size") cfg.detector.backbone.image_size = std::stoull(value);
      else if (key == "patch") cfg.detector.backbone.patch = std::stoull(value);
      else if (key == "in_channels") cfg.detector.backbone.in_channels = std::stoull(value);
      else if (key == "stage_dims") dims = detail::parse_size_list(value, key);
      else if (key == "stage_depths") depths = detail::parse_size_list(value, key);
      else if (key == "stage_heads") heads = detail::parse_size_list(value, key);
      else if (key == "window") window = std::stoull(value);
      else if (key == "backbone_lora_ranks") ranks = detail::parse_size_list(value, key);
      else if (key == "lora_stddev") {
        cfg.detector.backbone.lora_stddev = std::stod(value);
        cfg.detector.lora_stddev = std::stod(value);
      }
      else if (key == "neck_channels") cfg.detector.neck_channels = std::stoull(value);
      else if (key == "head_hidden") cfg.detector.head_hidden = std::stoull(value);
      else if (key == "classes") cfg.detector.classes = std::stoull(value);
      else if (key == "roi") cfg.detector.roi = std::stoull(value);
      else if (key == "head_rank_fc1") cfg.detector.head_rank_fc1 = std::stoull(value);
      else if (key == "head_rank_fc2") cfg.detector.head_rank_fc2 = std::stoull(value);
      else if (key == "max_detections") cfg.detector.max_detections = std::stoull(value);
      else if (key == "policy") cfg.policy = value;
      else if (key == "lr") cfg.optimizer.lr = std::stod(value);
      else if (key == "weight_decay") cfg.optimizer.weight_decay = std::stod(value);
      else if (key == "beta1") cfg.optimizer.beta1 = std::stod(value);
      else if (key == "beta2") cfg.optimizer.beta2 = std::stod(value);
      else if (key == "adam_eps") cfg.optimizer.eps = std::stod(value);
      else if (key == "batch_size") cfg.optimizer.batch_size = std::stoull(value);
      else if (key == "epochs") cfg.epochs = std::stoull(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "pretrain_count") cfg.pretrain_count = std::stoull(value);
      else if (key == "finetune_count") cfg.finetune_count = std::stoull(value);
      else if (key == "eval_count") cfg.eval_count = std::stoull(value);
      else throw ConfigError("config line " + std::to_string(line_no) +
                             ": unknown key '" + key + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config line " + std::to_string(line_no) + ": bad value '" +
                        value + "' for " + key);
    }
  }
  if (!dims.empty() || !depths.empty() || !heads.empty() || window != 0 ||
      !ranks.empty()) {
    auto& stages = cfg.detector.backbone.stages;
    if (dims.empty())
      throw ConfigError("config: stage_dims required when customizing stages");
    stages.clear();
    for (std::size_t i = 0; i < dims.size(); ++i) {
      StageConfig sc;
      sc.dim = dims[i];
      sc.depth = depths.empty() ? 2 : depths[std::min(i, depths.size() - 1)];
      sc.heads = heads.empty() ? 2 : heads[std::min(i, heads.size() - 1)];
      sc.window = window == 0 ? 4 : window;
      stages.push_back(sc);
    }
    if (!ranks.empty()) {
      if (ranks.size() == 1) ranks.assign(dims.size(), ranks[0]);
      cfg.detector.backbone.lora_rank = ranks;
    } else if (cfg.detector.backbone.lora_rank.size() != stages.size()) {
      cfg.detector.backbone.lora_rank.assign(stages.size(), 4);
    }
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  return parse_config(f);
}

}  // namespace ldet
