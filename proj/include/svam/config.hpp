#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace svam::config {

struct WorldSection {
  std::vector<int> tasks{1};
  int h_ep = 64;
  int frame = 32;
  int episodes = 500;
};

struct VdmSection {
  int t = 4;
  int c = 8;
  int h = 8;
  int w = 8;
  std::vector<int> taps{16, 16, 8};
  int s = 20;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int beta_base_steps = 1000;  // S samples this reference grid
  int width_top = 64;
  int width_mid = 224;
  int mid_blocks = 2;
  int heads = 4;
  int clip_stride = 4;
};

struct DecouplerSection {
  int k = 2;
  int c_hidden = 32;
  int c_geo = 4;
  int c_sem = 8;
  int heads = 4;
  std::string mode = "self";  // "self" | "gt"
};

struct PolicySection {
  int n = 16;
  int c_agg = 64;
  int j = 16;
  int chunk = 8;
  int width = 64;
  int blocks = 2;
  int heads = 4;
};

struct TrainingSection {
  std::vector<int> steps{5000, 2000, 5000};  // per stage
  double lr = 1e-3;
  int batch = 4;
  uint64_t seed = 1;
  int samples_per_episode = 4;  // stage-3 clip anchors per episode
  int log_every = 100;
};

struct PathsSection {
  std::string data = "out/dataset.svamds";
  std::string out = "out";
};

struct RunConfig {
  WorldSection world;
  VdmSection vdm;
  DecouplerSection decouplers;
  PolicySection policy;
  TrainingSection training;
  PathsSection paths;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);
  nlohmann::json to_json() const;

  void validate() const;

  // Canonical-serialization FNV-1a hashes over the architecture-defining
  // sections. Each stage checkpoint stores the hash of everything it is
  // frozen against; loads compare against the live config.
  uint64_t hash_vdm() const;         // world + vdm
  uint64_t hash_decouplers() const;  // world + vdm + decouplers
  uint64_t hash_policy() const;      // world + vdm + decouplers + policy
  uint64_t hash_full() const;
};

// Sorted keys, fixed float formatting; the stable input of every config hash.
std::string canonical_json(const nlohmann::json& j);
uint64_t hash_json(const nlohmann::json& j);

}  // namespace svam::config
