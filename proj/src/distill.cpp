#include "svam/distill.hpp"

#include <atomic>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include "svam/error.hpp"
#include "svam/instrument.hpp"

namespace svam::distill {

DecouplerSettings DecouplerSettings::from(const config::RunConfig& rc, const std::string& branch) {
  DecouplerSettings s;
  s.branch = branch;
  int c_sigma = 0;
  for (int tap : rc.vdm.taps) c_sigma += tap;
  s.c_in = c_sigma;
  s.c_out = branch == "geo" ? rc.decouplers.c_geo : rc.decouplers.c_sem;
  s.c_hidden = rc.decouplers.c_hidden;
  s.k = rc.decouplers.k;
  s.heads = rc.decouplers.heads;
  s.t = rc.vdm.t;
  s.h = rc.vdm.h;
  s.w = rc.vdm.w;
  return s;
}

Tensor reference_anchor(const world::Frame& obs, const std::string& branch, int h, int w) {
  return world::target_encoder(branch)({obs}, h, w);
}

Tensor fuse_input(const Tensor& features, const Tensor& anchor) {
  if (features.rank() != 4 || anchor.rank() != 4 || anchor.dim(0) != 1 ||
      features.dim(2) != anchor.dim(2) || features.dim(3) != anchor.dim(3)) {
    throw ShapeError("fuse_input", "T×C×h×w features with 1×C_i×h×w anchor",
                     shape_str(features.shape()) + " with " + shape_str(anchor.shape()));
  }
  return concat({features, repeat_dim(anchor, 0, features.dim(0))}, 1);
}

Decoupler::Decoupler(const DecouplerSettings& cfg, uint64_t init_seed) : cfg_(cfg) {
  rng::Stream init(init_seed, "decoupler/" + cfg.branch);
  proj_in_ = nn::Linear(params_, "proj_in", cfg.c_in + cfg.c_out, cfg.c_hidden, init.child("in"));
  for (int k = 0; k < cfg.k; ++k) {
    std::string base = "block" + std::to_string(k);
    spatial_.emplace_back(params_, base + ".spatial", cfg.c_hidden, cfg.heads,
                          init.child(base + "s"));
    temporal_.emplace_back(params_, base + ".temporal", cfg.c_hidden, cfg.heads,
                           init.child(base + "t"));
  }
  proj_out_ = nn::Linear(params_, "proj_out", cfg.c_hidden, cfg.c_out, init.child("out"));
  pos_ = params_.add("pos",
                     Tensor::randn({cfg.t * cfg.h * cfg.w, cfg.c_hidden}, init, 0.0, 0.02));
}

void Decoupler::zero_positional_encodings() {
  for (int64_t i = 0; i < pos_.numel(); ++i) pos_.set_at(i, 0.0);
}

Tensor Decoupler::forward(const Tensor& fused) const {
  if (fused.rank() != 4 || fused.dim(0) != cfg_.t || fused.dim(1) != cfg_.c_in + cfg_.c_out ||
      fused.dim(2) != cfg_.h || fused.dim(3) != cfg_.w) {
    throw ShapeError("decoupler_forward",
                     shape_str({cfg_.t, cfg_.c_in + cfg_.c_out, cfg_.h, cfg_.w}),
                     shape_str(fused.shape()));
  }
  int hw = cfg_.h * cfg_.w;
  Tensor tok = proj_in_(nn::vol_to_tokens(fused));
  tok = add(tok, reshape(pos_, {cfg_.t, hw, cfg_.c_hidden}));
  for (int k = 0; k < cfg_.k; ++k) {
    tok = spatial_[k](tok);
    tok = nn::swap_batch_seq(temporal_[k](nn::swap_batch_seq(tok)));
  }
  return nn::tokens_to_vol(proj_out_(tok), cfg_.h, cfg_.w);
}

Tensor distill_loss(const Tensor& prediction, const Tensor& target) {
  return mse(prediction, target);
}

Tensor distill_targets_self(const vdm::Denoiser& model, const vdm::NoiseSchedule& sched,
                            const world::Frame& obs, int task_id, const std::string& branch,
                            uint64_t seed, int h, int w) {
  auto sample = vdm::ddpm_sample(model, obs, task_id, sched, seed);
  return world::target_encoder(branch)(sample.video, h, w);
}

Tensor distill_targets_gt(const world::Episode& ep, int t0, int t, int stride,
                          const std::string& branch, int h, int w) {
  if (t0 + (t - 1) * stride >= (int)ep.frames.size()) {
    throw Error(Status::error, "distill_targets: episode has no ground-truth frames at t0=" +
                               std::to_string(t0));
  }
  return world::target_encoder(branch)(vdm::clip_frames(ep, t0, t, stride), h, w);
}

// ---------------------------------------------------------------------------
// teacher cache
// ---------------------------------------------------------------------------

namespace {

constexpr char kTeacherMagic[8] = {'S', 'V', 'A', 'M', 'T', 'C', '1', '\0'};

}  // namespace

std::string teacher_cache_path(const std::string& dir, int episode, uint64_t seed,
                               uint64_t model_key) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "teacher_ep%05d_%016llx_%016llx.svamtc", episode,
                (unsigned long long)model_key, (unsigned long long)seed);
  return (std::filesystem::path(dir) / buf).string();
}

void save_teacher_video(const std::string& path, uint64_t seed, uint64_t model_key,
                        const std::vector<world::Frame>& video) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write teacher cache " + path);
  os.write(kTeacherMagic, 8);
  os.write(reinterpret_cast<const char*>(&seed), 8);
  os.write(reinterpret_cast<const char*>(&model_key), 8);
  for (const auto& f : video) {
    os.write(reinterpret_cast<const char*>(f.rgb.data()), (std::streamsize)f.rgb.size() * 4);
  }
  if (!os) throw IoError("failed while writing teacher cache " + path);
}

std::optional<std::vector<world::Frame>> load_teacher_video(const std::string& path,
                                                            uint64_t expect_seed,
                                                            uint64_t expect_model_key, int t,
                                                            int frame_size) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return std::nullopt;
  char magic[8];
  uint64_t seed = 0, key = 0;
  is.read(magic, 8);
  is.read(reinterpret_cast<char*>(&seed), 8);
  is.read(reinterpret_cast<char*>(&key), 8);
  if (!is || std::memcmp(magic, kTeacherMagic, 8) != 0 || seed != expect_seed ||
      key != expect_model_key) {
    return std::nullopt;
  }
  std::vector<world::Frame> video(t);
  for (auto& f : video) {
    f.h = f.w = frame_size;
    f.rgb.resize((size_t)frame_size * frame_size * 3);
    is.read(reinterpret_cast<char*>(f.rgb.data()), (std::streamsize)f.rgb.size() * 4);
  }
  if (!is) return std::nullopt;
  return video;
}

// ---------------------------------------------------------------------------
// stage 2
// ---------------------------------------------------------------------------

Stage2Trainer::Stage2Trainer(const vdm::Denoiser& model, const vdm::NoiseSchedule& sched,
                             const world::EpisodeSet& data, Decoupler* geo, Decoupler* sem,
                             const Stage2Options& opt)
    : model_(model), sched_(sched), data_(data), geo_(geo), sem_(sem), opt_(opt),
      opt_geo_(AdamConfig{opt.lr, 0.9, 0.999, 1e-8}),
      opt_sem_(AdamConfig{opt.lr, 0.9, 0.999, 1e-8}), draw_(opt.seed, "stage2") {
  if (data_.episodes.empty()) throw Error(Status::error, "stage 2: empty dataset");
  if (opt_.mode == TargetMode::self_distill && !opt_.cache_dir.empty()) {
    std::filesystem::create_directories(opt_.cache_dir);
  }
  samples_.resize(data_.episodes.size());
}

Stage2Trainer::Sample& Stage2Trainer::ensure_sample(int episode) {
  Sample& s = samples_[episode];
  if (s.ready) return s;
  const world::Episode& ep = data_.episodes[episode];
  const auto& mcfg = model_.config();
  rng::Stream per_ep = rng::Stream(opt_.seed, "stage2/sample").child("episode", (uint64_t)episode);
  uint64_t traj_seed = per_ep.u64();
  int max_t0 = vdm::max_clip_start(data_.h_ep, mcfg.t, opt_.clip_stride);
  int t0 = per_ep.uniform_int(0, max_t0);
  const world::Frame& obs = ep.frames.at(t0);

  s.features = vdm::one_step_features(model_, obs, ep.task_id, sched_, traj_seed);
  uint64_t feature_zs = instr::g_last_feature_zs_hash;
  s.anchor_geo = reference_anchor(obs, "geo", mcfg.h, mcfg.w);
  s.anchor_sem = reference_anchor(obs, "sem", mcfg.h, mcfg.w);

  if (opt_.mode == TargetMode::ground_truth) {
    s.target_geo = distill_targets_gt(ep, t0, mcfg.t, opt_.clip_stride, "geo", mcfg.h, mcfg.w);
    s.target_sem = distill_targets_gt(ep, t0, mcfg.t, opt_.clip_stride, "sem", mcfg.h, mcfg.w);
  } else {
    std::vector<world::Frame> video;
    bool from_cache = false;
    if (!opt_.cache_dir.empty()) {
      auto path = teacher_cache_path(opt_.cache_dir, episode, traj_seed, opt_.model_key);
      if (auto cached = load_teacher_video(path, traj_seed, opt_.model_key, mcfg.t,
                                           mcfg.frame_size)) {
        video = std::move(*cached);
        from_cache = true;
      }
    }
    if (!from_cache) {
      auto sample = vdm::ddpm_sample(model_, obs, ep.task_id, sched_, traj_seed);
      // Student features and teacher video must share one trajectory start.
      if (instr::g_last_sample_zs_hash != feature_zs) shared_ok_ = false;
      video = std::move(sample.video);
      if (!opt_.cache_dir.empty()) {
        save_teacher_video(teacher_cache_path(opt_.cache_dir, episode, traj_seed, opt_.model_key),
                           traj_seed, opt_.model_key, video);
      }
    } else {
      // Cache hit: re-derive the z_S the stored seed implies and compare.
      rng::Stream zs(traj_seed, "sample/z_S");
      NoGradGuard ng;
      Tensor z = Tensor::randn({mcfg.t, mcfg.c, mcfg.h, mcfg.w}, zs);
      if (z.data_hash() != feature_zs) shared_ok_ = false;
    }
    s.target_geo = world::phi_geo(video, mcfg.h, mcfg.w);
    s.target_sem = world::phi_sem(video, mcfg.h, mcfg.w);
  }
  s.ready = true;
  return s;
}

void Stage2Trainer::warm_cache(int workers) {
  int n = (int)data_.episodes.size();
  if (workers <= 1) {
    for (int e = 0; e < n; ++e) ensure_sample(e);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int wkr = 0; wkr < workers; ++wkr) {
    pool.emplace_back([&] {
      for (int e = next.fetch_add(1); e < n; e = next.fetch_add(1)) ensure_sample(e);
    });
  }
  for (auto& th : pool) th.join();
}

Stage2Trainer::StepLoss Stage2Trainer::step() {
  StepLoss out;
  uint64_t step_index = (uint64_t)std::max(opt_geo_.step_count(), opt_sem_.step_count());
  rng::Stream draw = draw_.child("step", step_index);
  std::vector<int> batch;
  for (int b = 0; b < opt_.batch; ++b) {
    batch.push_back(draw.uniform_int(0, (int)data_.episodes.size() - 1));
  }
  auto run_branch = [&](Decoupler* dec, Adam& opt, bool is_geo) {
    dec->params().zero_grads();
    Tensor loss;
    for (int e : batch) {
      Sample& s = ensure_sample(e);
      Tensor fused = fuse_input(s.features, is_geo ? s.anchor_geo : s.anchor_sem);
      Tensor item = distill_loss(dec->forward(fused), is_geo ? s.target_geo : s.target_sem);
      loss = loss.defined() ? add(loss, item) : item;
    }
    loss = scale(loss, 1.0 / opt_.batch);
    double value = loss.at(0);
    backward(loss);
    opt.step(dec->params());
    return value;
  };
  if (opt_.train_geo && geo_) out.geo = run_branch(geo_, opt_geo_, true);
  if (opt_.train_sem && sem_) out.sem = run_branch(sem_, opt_sem_, false);
  return out;
}

}  // namespace svam::distill
