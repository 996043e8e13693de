#pragma once

#include <array>
#include <string>
#include <vector>

#include "svam/config.hpp"
#include "svam/distill.hpp"
#include "svam/nn.hpp"
#include "svam/vdm.hpp"
#include "svam/world.hpp"

namespace svam::policy {

// Decoupled foresight plus the raw one-step features; the policy context.
struct ForesightBundle {
  Tensor geo;  // T×C_geo×h×w, undefined when a variant drops the branch
  Tensor sem;  // T×C_sem×h×w
  Tensor raw;  // T×C_Sigma×h×w
};

struct ContextFlags {
  bool use_geo = true;
  bool use_sem = true;
  bool use_raw = true;
};

// Channel concat in the fixed order (geo, sem, raw); disabled components are
// dropped, so the channel count is variant-dependent (52 for the full model).
Tensor build_context(const ForesightBundle& bundle, const ContextFlags& flags = {});
int context_channels(const config::RunConfig& rc, const ContextFlags& flags);

struct ActionStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> stddev{1, 1, 1};
};

ActionStats compute_action_stats(const world::EpisodeSet& data);
Tensor normalize_actions(const std::vector<world::Action>& chunk, const ActionStats& stats);
std::vector<world::Action> denormalize_actions(const Tensor& chunk, const ActionStats& stats);

struct ExpertConfig {
  int n = 16;       // latent queries
  int c_agg = 64;   // condensed token width
  int j = 16;       // action diffusion steps
  int chunk = 8;
  int width = 64;   // action token width
  int blocks = 2;
  int heads = 4;
  int c_hol = 52;   // context channels after build_context
  int t = 4, h = 8, w = 8;
  int n_tasks = world::kNumTasks;
  bool mean_pool_tokens = false;  // parameter-free pooling replaces Eq. 8

  static ExpertConfig from(const config::RunConfig& rc, const ContextFlags& flags,
                           bool mean_pool_tokens = false);
};

// Token condensation plus the action-noise prediction transformer; owns every
// stage-3 learnable (queries, condensation, policy, task embeddings) and the
// checkpointed action normalization statistics.
class ActionExpert {
 public:
  ActionExpert(const ExpertConfig& cfg, uint64_t init_seed);

  // Uni-Perceiver condensation of the holistic context into N tokens (or the
  // mean-pool replacement). `cross_weights` receives the cross-attention
  // weights for inspection.
  Tensor condense(const Tensor& context, Tensor* cross_weights = nullptr) const;

  // Noise prediction for a normalized action chunk at diffusion step j.
  Tensor denoise(const Tensor& noisy_chunk, int j, const Tensor& condensed, int task_id) const;

  std::vector<world::Action> sample_actions(const ForesightBundle& bundle,
                                            const ContextFlags& flags, int task_id,
                                            const vdm::NoiseSchedule& sched, uint64_t seed) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const ExpertConfig& config() const { return cfg_; }
  ActionStats& stats() { return stats_; }
  const ActionStats& stats() const { return stats_; }
  int condensed_width() const { return cfg_.mean_pool_tokens ? cfg_.c_hol : cfg_.c_agg; }
  void freeze() { params_.freeze(); }

 private:
  ExpertConfig cfg_;
  ParamStore params_;
  ActionStats stats_;

  Tensor queries_, context_pos_, action_pos_, task_emb_;
  nn::Mha cross_;
  nn::Mha self_;
  nn::Mlp ffn_;
  nn::LayerNorm ln_cross_, ln_self_, ln_ffn_;

  nn::Linear action_in_, action_head_;
  struct PolicyBlock {
    nn::LayerNorm ln1, ln2, ln3;
    nn::Mha self_attn, cross_attn;
    nn::Mlp mlp;
  };
  std::vector<PolicyBlock> policy_blocks_;
};

// Everything a closed-loop run needs; decouplers may be absent per variant.
struct PipelineModels {
  const vdm::Denoiser* denoiser = nullptr;
  const vdm::NoiseSchedule* vdm_sched = nullptr;
  const distill::Decoupler* geo = nullptr;
  const distill::Decoupler* sem = nullptr;
  const ActionExpert* expert = nullptr;
  const vdm::NoiseSchedule* policy_sched = nullptr;
  ContextFlags flags;
};

ForesightBundle make_bundle(const PipelineModels& m, const world::Frame& obs, int task_id,
                            uint64_t seed);

struct ChunkTrace {
  int chunk_index = 0;
  double wall_backbone_ms = 0, wall_decouplers_ms = 0, wall_expert_ms = 0;
  std::vector<world::Action> actions;
  bool success_so_far = false;
};

struct RolloutResult {
  bool success = false;
  int steps = 0;
  std::vector<ChunkTrace> trace;
};

// Render -> one-step features -> decouplers -> condense -> sample a chunk ->
// execute; exactly one denoiser pass per chunk.
RolloutResult closed_loop_rollout(const PipelineModels& m, uint64_t env_seed, int task_id,
                                  int max_steps = 64);

struct Stage3Options {
  double lr = 1e-3;
  int batch = 4;
  uint64_t seed = 1;
  int samples_per_episode = 4;
};

class Stage3Trainer {
 public:
  Stage3Trainer(const PipelineModels& models, ActionExpert& expert,
                const world::EpisodeSet& data, const Stage3Options& opt);

  double step();
  Adam& optimizer() { return adam_; }

 private:
  struct Sample {
    bool ready = false;
    Tensor context;  // frozen-module output, cached
    Tensor a0;       // normalized chunk
    int task_id = 0;
  };
  Sample& ensure_sample(int index);

  const PipelineModels& models_;
  ActionExpert& expert_;
  const world::EpisodeSet& data_;
  Stage3Options opt_;
  Adam adam_;
  rng::Stream draw_;
  std::vector<Sample> samples_;
};

}  // namespace svam::policy
