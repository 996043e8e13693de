#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "svam/config.hpp"
#include "svam/nn.hpp"
#include "svam/rng.hpp"
#include "svam/tensor.hpp"
#include "svam/world.hpp"

namespace svam::vdm {

// Per-step DDPM coefficients. The linear beta ramp lives on a reference grid
// of `base_steps`; the S sampler steps subsample its cumulative signal decay,
// so alpha_bar at the noisiest step stays near zero regardless of S.
// base_steps == S reproduces a plain per-step linear ramp.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta, alpha, alpha_bar, sigma;  // index 0 is step s=1

  static NoiseSchedule linear(int s, double beta_start = 1e-4, double beta_end = 0.02,
                              int base_steps = 1000);
};

// Frozen orthogonal 4x4 patchify codec. The basis holds the leading
// uncentered principal directions of a fixed procedural patch ensemble;
// decode is the transpose map, clipped to [0, 1].
class LatentCodec {
 public:
  LatentCodec(int frame_size, int channels);

  Tensor encode(const std::vector<world::Frame>& frames) const;  // T×C×h×w
  std::vector<world::Frame> decode(const Tensor& z) const;
  int latent_hw() const { return grid_; }
  int channels() const { return channels_; }

  static constexpr int kPatch = 4;

 private:
  int frame_size_, channels_, grid_;
  std::vector<double> basis_;  // channels_ rows × 48 columns, orthonormal
};

struct DenoiserConfig {
  int t = 4, c = 8, h = 8, w = 8;
  std::vector<int> taps{16, 16, 8};
  int steps = 20;
  int width_top = 64, width_mid = 224, mid_blocks = 2, heads = 4;
  int n_tasks = world::kNumTasks;
  int frame_size = 32;

  static DenoiserConfig from(const config::RunConfig& rc);
};

struct DenoiserTaps {
  std::vector<Tensor> volumes;  // F_l, channels taps[l], sizes (h/2,h/2),(h,w),(h,w)
};

// Attention-only latent video denoiser with tap-able up-path blocks.
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, uint64_t init_seed);

  // eps prediction conditioned on the observed frame and task id, plus the
  // up-path feature volumes.
  std::pair<Tensor, DenoiserTaps> forward(const Tensor& z_s, int s_index,
                                          const world::Frame& obs, int task_id) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const DenoiserConfig& config() const { return cfg_; }
  const LatentCodec& codec() const { return codec_; }
  int feature_channels() const;  // C_Sigma
  void freeze() { params_.freeze(); }

 private:
  DenoiserConfig cfg_;
  LatentCodec codec_;
  ParamStore params_;

  nn::Linear proj_in_, proj_merge_, proj_up0_, proj_unmerge_, proj_up2_, head_;
  std::vector<nn::Block> mid_spatial_, mid_temporal_;
  nn::Block up0_, up1_, up2_;
  Tensor task_emb_, pos_top_, pos_mid_, pos_time_, pos_up1_;
};

// Reverse denoising driver shared by the model sampler and the algebraic
// oracle tests. eps_fn(z_s, s) supplies the noise estimate; deterministic
// mode drops every noise injection (sigma_s = 0 for all s), the stochastic
// mode keeps sigma_s = sqrt(beta_s) with sigma_1 = 0.
Tensor reverse_process(const NoiseSchedule& sched, const Tensor& z_start,
                       const std::function<Tensor(const Tensor&, int)>& eps_fn,
                       rng::Stream noise_stream, bool deterministic, const char* what);

struct SampleResult {
  std::vector<world::Frame> video;
  Tensor z0;
};

SampleResult ddpm_sample(const Denoiser& model, const world::Frame& obs, int task_id,
                         const NoiseSchedule& sched, uint64_t seed, bool deterministic = false);

// Single denoiser pass at s = S on a fresh z_S; taps aligned to (h, w) and
// concatenated along channels.
Tensor one_step_features(const Denoiser& model, const world::Frame& obs, int task_id,
                         const NoiseSchedule& sched, uint64_t seed);

// Clip of T frames starting at t0 with the configured frame stride.
std::vector<world::Frame> clip_frames(const world::Episode& ep, int t0, int t, int stride);
int max_clip_start(int h_ep, int t, int stride);

class Stage1Trainer {
 public:
  Stage1Trainer(Denoiser& model, const world::EpisodeSet& data, const NoiseSchedule& sched,
                double lr, int batch, int clip_stride, uint64_t seed);

  double step();  // one optimizer update, returns the batch loss
  Adam& optimizer() { return opt_; }

 private:
  Denoiser& model_;
  const world::EpisodeSet& data_;
  const NoiseSchedule& sched_;
  int batch_, clip_stride_;
  Adam opt_;
  rng::Stream draw_;
};

}  // namespace svam::vdm
