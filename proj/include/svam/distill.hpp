#pragma once

#include <optional>
#include <string>
#include <vector>

#include "svam/config.hpp"
#include "svam/nn.hpp"
#include "svam/vdm.hpp"
#include "svam/world.hpp"

namespace svam::distill {

struct DecouplerSettings {
  std::string branch;  // "geo" | "sem"
  int c_in = 40;       // aggregated one-step feature channels
  int c_out = 4;       // target encoder channels
  int c_hidden = 32;
  int k = 2;
  int heads = 4;
  int t = 4, h = 8, w = 8;

  static DecouplerSettings from(const config::RunConfig& rc, const std::string& branch);
};

// Encoder view of the current observation, the conditioning anchor.
Tensor reference_anchor(const world::Frame& obs, const std::string& branch, int h, int w);

// Temporally replicates the anchor and concatenates it onto the one-step
// features along channels: T×C_in×h×w + 1×C_i×h×w -> T×(C_in+C_i)×h×w.
Tensor fuse_input(const Tensor& features, const Tensor& anchor);

// Factorized spatio-temporal transformer mapping fused one-step features
// into a target encoder's representation space.
class Decoupler {
 public:
  Decoupler(const DecouplerSettings& cfg, uint64_t init_seed);

  Tensor forward(const Tensor& fused) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const DecouplerSettings& settings() const { return cfg_; }
  void zero_positional_encodings();

 private:
  DecouplerSettings cfg_;
  ParamStore params_;
  nn::Linear proj_in_, proj_out_;
  std::vector<nn::Block> spatial_, temporal_;
  Tensor pos_;
};

// Per-branch distillation objective, mean squared error.
Tensor distill_loss(const Tensor& prediction, const Tensor& target);

enum class TargetMode { self_distill, ground_truth };

// Teacher targets. Self mode encodes the model's own multi-step generation,
// sharing the z_S draw of the paired one_step_features call through `seed`;
// gt mode encodes the episode's stored future frames.
Tensor distill_targets_self(const vdm::Denoiser& model, const vdm::NoiseSchedule& sched,
                            const world::Frame& obs, int task_id, const std::string& branch,
                            uint64_t seed, int h, int w);
Tensor distill_targets_gt(const world::Episode& ep, int t0, int t, int stride,
                          const std::string& branch, int h, int w);

// Teacher cache files, one generated video per episode.
void save_teacher_video(const std::string& path, uint64_t seed, uint64_t model_key,
                        const std::vector<world::Frame>& video);
std::optional<std::vector<world::Frame>> load_teacher_video(const std::string& path,
                                                            uint64_t expect_seed,
                                                            uint64_t expect_model_key, int t,
                                                            int frame_size);
std::string teacher_cache_path(const std::string& dir, int episode, uint64_t seed,
                               uint64_t model_key);

struct Stage2Options {
  TargetMode mode = TargetMode::self_distill;
  bool train_geo = true;
  bool train_sem = true;
  double lr = 1e-3;
  int batch = 4;
  int clip_stride = 4;
  uint64_t seed = 1;
  std::string cache_dir;   // empty disables the disk cache
  uint64_t model_key = 0;  // vdm config hash mixed with parameter hash
};

// Stage-2 trainer: the video model stays frozen, each branch owns its
// optimizer, teacher videos are cached per (episode, seed, model key).
class Stage2Trainer {
 public:
  Stage2Trainer(const vdm::Denoiser& model, const vdm::NoiseSchedule& sched,
                const world::EpisodeSet& data, Decoupler* geo, Decoupler* sem,
                const Stage2Options& opt);

  struct StepLoss {
    double geo = 0.0, sem = 0.0;
  };
  StepLoss step();

  // Every teacher/features pair must share one diffusion trajectory start.
  bool shared_trajectory_ok() const { return shared_ok_; }
  void warm_cache(int workers = 1);
  Adam& geo_optimizer() { return opt_geo_; }
  Adam& sem_optimizer() { return opt_sem_; }

 private:
  struct Sample {
    bool ready = false;
    Tensor features, anchor_geo, anchor_sem, target_geo, target_sem;
  };
  Sample& ensure_sample(int episode);

  const vdm::Denoiser& model_;
  const vdm::NoiseSchedule& sched_;
  const world::EpisodeSet& data_;
  Decoupler* geo_;
  Decoupler* sem_;
  Stage2Options opt_;
  Adam opt_geo_, opt_sem_;
  rng::Stream draw_;
  std::vector<Sample> samples_;
  bool shared_ok_ = true;
};

}  // namespace svam::distill
