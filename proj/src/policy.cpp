#include "svam/policy.hpp"

#include <chrono>
#include <cmath>

#include "svam/error.hpp"
#include "svam/instrument.hpp"

namespace svam::policy {

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

Tensor build_context(const ForesightBundle& bundle, const ContextFlags& flags) {
  std::vector<Tensor> parts;
  if (flags.use_geo) {
    if (!bundle.geo.defined()) throw Error(Status::error, "build_context: geo foresight missing");
    parts.push_back(bundle.geo);
  }
  if (flags.use_sem) {
    if (!bundle.sem.defined()) throw Error(Status::error, "build_context: sem foresight missing");
    parts.push_back(bundle.sem);
  }
  if (flags.use_raw) {
    if (!bundle.raw.defined()) throw Error(Status::error, "build_context: raw features missing");
    parts.push_back(bundle.raw);
  }
  if (parts.empty()) throw Error(Status::error, "build_context: every component disabled");
  return concat(parts, 1);
}

int context_channels(const config::RunConfig& rc, const ContextFlags& flags) {
  int c = 0;
  if (flags.use_geo) c += rc.decouplers.c_geo;
  if (flags.use_sem) c += rc.decouplers.c_sem;
  if (flags.use_raw) {
    for (int tap : rc.vdm.taps) c += tap;
  }
  return c;
}

ActionStats compute_action_stats(const world::EpisodeSet& data) {
  ActionStats st;
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  int64_t n = 0;
  for (const auto& ep : data.episodes) {
    for (const auto& a : ep.actions) {
      std::array<double, 3> v{a.dx, a.dy, (double)a.dgrip};
      for (int i = 0; i < 3; ++i) {
        sum[i] += v[i];
        sq[i] += v[i] * v[i];
      }
      ++n;
    }
  }
  if (n == 0) throw Error(Status::error, "action stats: empty dataset");
  for (int i = 0; i < 3; ++i) {
    st.mean[i] = sum[i] / n;
    double var = sq[i] / n - st.mean[i] * st.mean[i];
    st.stddev[i] = std::sqrt(std::max(var, 1e-8));
  }
  return st;
}

Tensor normalize_actions(const std::vector<world::Action>& chunk, const ActionStats& stats) {
  std::vector<double> v(chunk.size() * 3);
  for (size_t i = 0; i < chunk.size(); ++i) {
    v[i * 3 + 0] = (chunk[i].dx - stats.mean[0]) / stats.stddev[0];
    v[i * 3 + 1] = (chunk[i].dy - stats.mean[1]) / stats.stddev[1];
    v[i * 3 + 2] = ((double)chunk[i].dgrip - stats.mean[2]) / stats.stddev[2];
  }
  return Tensor::from_data({(int)chunk.size(), 3}, v);
}

std::vector<world::Action> denormalize_actions(const Tensor& chunk, const ActionStats& stats) {
  if (chunk.rank() != 2 || chunk.dim(1) != 3) {
    throw ShapeError("denormalize_actions", "n×3", shape_str(chunk.shape()));
  }
  std::vector<world::Action> out((size_t)chunk.dim(0));
  for (int i = 0; i < chunk.dim(0); ++i) {
    double dx = chunk.at(i * 3 + 0) * stats.stddev[0] + stats.mean[0];
    double dy = chunk.at(i * 3 + 1) * stats.stddev[1] + stats.mean[1];
    double dg = chunk.at(i * 3 + 2) * stats.stddev[2] + stats.mean[2];
    out[i].dx = std::clamp(dx, -world::kActionBound, world::kActionBound);
    out[i].dy = std::clamp(dy, -world::kActionBound, world::kActionBound);
    out[i].dgrip = (int)std::lround(std::clamp(dg, -1.0, 1.0));
  }
  return out;
}

ExpertConfig ExpertConfig::from(const config::RunConfig& rc, const ContextFlags& flags,
                                bool mean_pool_tokens) {
  ExpertConfig e;
  e.n = rc.policy.n;
  e.c_agg = rc.policy.c_agg;
  e.j = rc.policy.j;
  e.chunk = rc.policy.chunk;
  e.width = rc.policy.width;
  e.blocks = rc.policy.blocks;
  e.heads = rc.policy.heads;
  e.c_hol = context_channels(rc, flags);
  e.t = rc.vdm.t;
  e.h = rc.vdm.h;
  e.w = rc.vdm.w;
  e.mean_pool_tokens = mean_pool_tokens;
  return e;
}

ActionExpert::ActionExpert(const ExpertConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  rng::Stream init(init_seed, "action_expert/init");
  int tokens = cfg.t * cfg.h * cfg.w;
  context_pos_ = params_.add("context_pos", Tensor::randn({tokens, cfg.c_hol}, init, 0.0, 0.02));
  if (!cfg.mean_pool_tokens) {
    queries_ = params_.add("queries", Tensor::randn({cfg.n, cfg.c_agg}, init, 0.0, 0.1));
    cross_ = nn::Mha(params_, "uniperceiver.cross", cfg.c_agg, cfg.c_hol, cfg.c_agg, cfg.heads,
                     init.child("cross"));
    self_ = nn::Mha(params_, "uniperceiver.self", cfg.c_agg, cfg.c_agg, cfg.c_agg, cfg.heads,
                    init.child("self"));
    ffn_ = nn::Mlp(params_, "uniperceiver.ffn", cfg.c_agg, 2 * cfg.c_agg, init.child("ffn"));
    ln_cross_ = nn::LayerNorm(params_, "uniperceiver.ln_cross", cfg.c_agg);
    ln_self_ = nn::LayerNorm(params_, "uniperceiver.ln_self", cfg.c_agg);
    ln_ffn_ = nn::LayerNorm(params_, "uniperceiver.ln_ffn", cfg.c_agg);
  }

  int kv_width = condensed_width();
  task_emb_ = params_.add("task_emb", Tensor::randn({cfg.n_tasks, kv_width}, init, 0.0, 0.1));
  action_in_ = nn::Linear(params_, "action_in", 3, cfg.width, init.child("action_in"));
  action_pos_ = params_.add("action_pos", Tensor::randn({cfg.chunk, cfg.width}, init, 0.0, 0.02));
  for (int b = 0; b < cfg.blocks; ++b) {
    std::string base = "policy" + std::to_string(b);
    PolicyBlock block;
    block.ln1 = nn::LayerNorm(params_, base + ".ln1", cfg.width);
    block.self_attn = nn::Mha(params_, base + ".self", cfg.width, cfg.width, cfg.width, cfg.heads,
                              init.child(base + "s"));
    block.ln2 = nn::LayerNorm(params_, base + ".ln2", cfg.width);
    block.cross_attn = nn::Mha(params_, base + ".cross", cfg.width, kv_width, cfg.width,
                               cfg.heads, init.child(base + "c"));
    block.ln3 = nn::LayerNorm(params_, base + ".ln3", cfg.width);
    block.mlp = nn::Mlp(params_, base + ".mlp", cfg.width, 2 * cfg.width, init.child(base + "m"));
    policy_blocks_.push_back(std::move(block));
  }
  // Near-zero head: the fresh policy predicts almost-zero noise.
  action_head_ = nn::Linear(params_, "action_head", cfg.width, 3, init.child("head"), 0.02);
}

Tensor ActionExpert::condense(const Tensor& context, Tensor* cross_weights) const {
  if (context.rank() != 4 || context.dim(1) != cfg_.c_hol) {
    throw ShapeError("uni_perceiver", "T×" + std::to_string(cfg_.c_hol) + "×h×w",
                     shape_str(context.shape()));
  }
  int t = context.dim(0), h = context.dim(2), w = context.dim(3);
  Tensor tokens = reshape(nn::vol_to_tokens(context), {t * h * w, cfg_.c_hol});
  if (t == cfg_.t && h == cfg_.h && w == cfg_.w) {
    tokens = add(tokens, context_pos_);
  }
  if (cfg_.mean_pool_tokens) {
    // Parameter-free replacement: mean over tokens, repeated N times.
    Tensor pooled = scale(matmul(Tensor::full({1, t * h * w}, 1.0 / (t * h * w)), tokens), 1.0);
    return repeat_dim(pooled, 0, cfg_.n);
  }
  Tensor x = ln_cross_(add(queries_, cross_(queries_, tokens, cross_weights)));
  x = ln_self_(add(x, self_(x)));
  return ln_ffn_(add(x, ffn_(x)));
}

Tensor ActionExpert::denoise(const Tensor& noisy_chunk, int j, const Tensor& condensed,
                             int task_id) const {
  if (j < 1 || j > cfg_.j) {
    throw Error(Status::error, "policy_denoise: step " + std::to_string(j) + " outside 1.." +
                               std::to_string(cfg_.j));
  }
  if (noisy_chunk.rank() != 2 || noisy_chunk.dim(0) != cfg_.chunk || noisy_chunk.dim(1) != 3) {
    throw ShapeError("policy_denoise", shape_str({cfg_.chunk, 3}), shape_str(noisy_chunk.shape()));
  }
  instr::g_policy_calls.fetch_add(1);

  Tensor kv = concat({condensed, slice(task_emb_, 0, task_id, 1)}, 0);  // E as token N+1
  Tensor x = action_in_(noisy_chunk);
  x = add(x, action_pos_);
  Tensor j_emb = nn::sinusoidal_embedding(j, cfg_.width);
  x = add(x, repeat_dim(reshape(j_emb, {1, cfg_.width}), 0, cfg_.chunk));
  for (const auto& block : policy_blocks_) {
    x = add(x, block.self_attn(block.ln1(x)));
    x = add(x, block.cross_attn(block.ln2(x), kv));
    x = add(x, block.mlp(block.ln3(x)));
  }
  return action_head_(x);
}

std::vector<world::Action> ActionExpert::sample_actions(const ForesightBundle& bundle,
                                                        const ContextFlags& flags, int task_id,
                                                        const vdm::NoiseSchedule& sched,
                                                        uint64_t seed) const {
  NoGradGuard ng;
  Tensor condensed = condense(build_context(bundle, flags));
  rng::Stream start(seed, "actions/a_J");
  Tensor a = Tensor::randn({cfg_.chunk, 3}, start);
  auto eps_fn = [&](const Tensor& a_j, int j) { return denoise(a_j, j, condensed, task_id); };
  Tensor a0 = vdm::reverse_process(sched, a, eps_fn, rng::Stream(seed, "actions/noise"),
                                   /*deterministic=*/false, "sample_actions");
  return denormalize_actions(a0, stats_);
}

ForesightBundle make_bundle(const PipelineModels& m, const world::Frame& obs, int task_id,
                            uint64_t seed) {
  NoGradGuard ng;
  ForesightBundle bundle;
  bundle.raw = vdm::one_step_features(*m.denoiser, obs, task_id, *m.vdm_sched, seed);
  const auto& cfg = m.denoiser->config();
  if (m.flags.use_geo && m.geo) {
    bundle.geo = m.geo->forward(
        distill::fuse_input(bundle.raw, distill::reference_anchor(obs, "geo", cfg.h, cfg.w)));
  }
  if (m.flags.use_sem && m.sem) {
    bundle.sem = m.sem->forward(
        distill::fuse_input(bundle.raw, distill::reference_anchor(obs, "sem", cfg.h, cfg.w)));
  }
  return bundle;
}

RolloutResult closed_loop_rollout(const PipelineModels& m, uint64_t env_seed, int task_id,
                                  int max_steps) {
  if (!m.denoiser || !m.expert || !m.vdm_sched || !m.policy_sched) {
    throw Error(Status::error, "closed_loop_rollout: missing models");
  }
  RolloutResult result;
  world::WorldState s = world::reset(env_seed, task_id);
  rng::Stream seeds(env_seed, "rollout");
  int chunk_index = 0;
  const auto& cfg = m.denoiser->config();
  while (result.steps < max_steps && !world::is_success(s)) {
    ChunkTrace trace;
    trace.chunk_index = chunk_index;
    world::Frame obs = world::render(s, cfg.frame_size);
    uint64_t chunk_seed = seeds.child("chunk", (uint64_t)chunk_index).u64();

    double t0 = now_ms();
    ForesightBundle bundle;
    {
      NoGradGuard ng;
      bundle.raw = vdm::one_step_features(*m.denoiser, obs, task_id, *m.vdm_sched, chunk_seed);
    }
    double t1 = now_ms();
    {
      NoGradGuard ng;
      if (m.flags.use_geo && m.geo) {
        bundle.geo = m.geo->forward(
            distill::fuse_input(bundle.raw, distill::reference_anchor(obs, "geo", cfg.h, cfg.w)));
      }
      if (m.flags.use_sem && m.sem) {
        bundle.sem = m.sem->forward(
            distill::fuse_input(bundle.raw, distill::reference_anchor(obs, "sem", cfg.h, cfg.w)));
      }
    }
    double t2 = now_ms();
    auto actions = m.expert->sample_actions(bundle, m.flags, task_id, *m.policy_sched, chunk_seed);
    double t3 = now_ms();
    trace.wall_backbone_ms = t1 - t0;
    trace.wall_decouplers_ms = t2 - t1;
    trace.wall_expert_ms = t3 - t2;

    for (const auto& a : actions) {
      s = world::step(s, a);
      ++result.steps;
      trace.actions.push_back(a);
      if (world::is_success(s) || result.steps >= max_steps) break;
    }
    trace.success_so_far = world::is_success(s);
    result.trace.push_back(std::move(trace));
    ++chunk_index;
  }
  result.success = world::is_success(s);
  return result;
}

// ---------------------------------------------------------------------------
// stage 3
// ---------------------------------------------------------------------------

Stage3Trainer::Stage3Trainer(const PipelineModels& models, ActionExpert& expert,
                             const world::EpisodeSet& data, const Stage3Options& opt)
    : models_(models), expert_(expert), data_(data), opt_(opt),
      adam_(AdamConfig{opt.lr, 0.9, 0.999, 1e-8}), draw_(opt.seed, "stage3") {
  if (data_.episodes.empty()) throw Error(Status::error, "stage 3: empty dataset");
  expert_.stats() = compute_action_stats(data);
  samples_.resize(data_.episodes.size() * opt_.samples_per_episode);
}

Stage3Trainer::Sample& Stage3Trainer::ensure_sample(int index) {
  Sample& s = samples_[index];
  if (s.ready) return s;
  int episode = index / opt_.samples_per_episode;
  int slot = index % opt_.samples_per_episode;
  const world::Episode& ep = data_.episodes[episode];
  rng::Stream per = rng::Stream(opt_.seed, "stage3/sample")
                        .child("episode", (uint64_t)episode)
                        .child("slot", (uint64_t)slot);
  uint64_t traj_seed = per.u64();
  int max_t0 = data_.h_ep - 1 - expert_.config().chunk;
  int t0 = per.uniform_int(0, max_t0);

  ForesightBundle bundle = make_bundle(models_, ep.frames.at(t0), ep.task_id, traj_seed);
  s.context = build_context(bundle, models_.flags).detach();
  std::vector<world::Action> chunk(ep.actions.begin() + t0,
                                   ep.actions.begin() + t0 + expert_.config().chunk);
  s.a0 = normalize_actions(chunk, expert_.stats());
  s.task_id = ep.task_id;
  s.ready = true;
  return s;
}

double Stage3Trainer::step() {
  expert_.params().zero_grads();
  const auto& sched = *models_.policy_sched;
  rng::Stream draw = draw_.child("step", (uint64_t)adam_.step_count());
  Tensor loss;
  for (int b = 0; b < opt_.batch; ++b) {
    Sample& s = ensure_sample(draw.uniform_int(0, (int)samples_.size() - 1));
    int j = draw.uniform_int(1, sched.steps);
    Tensor eps = Tensor::randn({expert_.config().chunk, 3}, draw);
    double ab = sched.alpha_bar[j - 1];
    Tensor a_j = add(scale(s.a0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
    Tensor condensed = expert_.condense(s.context);
    Tensor pred = expert_.denoise(a_j, j, condensed, s.task_id);
    Tensor item = mse(pred, eps);
    loss = loss.defined() ? add(loss, item) : item;
  }
  loss = scale(loss, 1.0 / opt_.batch);
  double value = loss.at(0);
  backward(loss);
  adam_.step(expert_.params());
  return value;
}

}  // namespace svam::policy
