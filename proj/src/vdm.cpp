#include "svam/vdm.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include "svam/error.hpp"
#include "svam/instrument.hpp"

namespace svam::vdm {

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int s, double beta_start, double beta_end, int base_steps) {
  if (s < 1) throw Error(Status::error, "NoiseSchedule: need at least one step");
  if (base_steps < s) throw Error(Status::error, "NoiseSchedule: base grid shorter than steps");
  NoiseSchedule out;
  out.steps = s;

  std::vector<double> base_ab(base_steps + 1, 1.0);
  for (int u = 1; u <= base_steps; ++u) {
    double frac = base_steps == 1 ? 0.0 : (double)(u - 1) / (double)(base_steps - 1);
    double beta_u = beta_start + (beta_end - beta_start) * frac;
    base_ab[u] = base_ab[u - 1] * (1.0 - beta_u);
  }

  double prev_ab = 1.0;
  for (int i = 1; i <= s; ++i) {
    int u = (int)std::llround((double)i * base_steps / (double)s);
    double ab = base_ab[u];
    double alpha = ab / prev_ab;
    out.alpha.push_back(alpha);
    out.alpha_bar.push_back(ab);
    out.beta.push_back(1.0 - alpha);
    out.sigma.push_back(std::sqrt(1.0 - alpha));
    prev_ab = ab;
  }

  for (int i = 0; i < s; ++i) {
    bool ok = out.alpha_bar[i] > 0.0 && out.alpha_bar[i] < 1.0 && out.beta[i] > 0.0 &&
              out.beta[i] < 1.0;
    if (i > 0) ok = ok && out.alpha_bar[i] < out.alpha_bar[i - 1];
    if (!ok) throw Error(Status::error, "NoiseSchedule: invalid coefficients");
  }
  if (std::abs(out.alpha_bar[0] - out.alpha[0]) > 1e-12) {
    throw Error(Status::error, "NoiseSchedule: alpha_bar[1] != alpha[1]");
  }
  return out;
}

// ---------------------------------------------------------------------------
// codec
// ---------------------------------------------------------------------------

namespace {

constexpr int kPatchDim = LatentCodec::kPatch * LatentCodec::kPatch * 3;

// Leading uncentered principal directions of patches drawn from a frozen
// procedural scene ensemble. Frozen at build time; independent of run seeds.
std::vector<double> build_codec_basis(int frame_size, int channels) {
  Eigen::MatrixXd second_moment = Eigen::MatrixXd::Zero(kPatchDim, kPatchDim);
  int grid = frame_size / LatentCodec::kPatch;
  Eigen::VectorXd p(kPatchDim);
  for (int k = 0; k < 24; ++k) {
    int task = k % world::kNumTasks;
    world::WorldState state = world::reset(9000 + (uint64_t)k, task);
    for (int phase = 0; phase < 3; ++phase) {
      for (int stepi = 0; stepi < 10 && phase > 0; ++stepi) {
        state = world::step(state, world::scripted_expert(state));
      }
      world::Frame f = world::render(state, frame_size);
      for (int gi = 0; gi < grid; ++gi) {
        for (int gj = 0; gj < grid; ++gj) {
          int d = 0;
          for (int py = 0; py < LatentCodec::kPatch; ++py) {
            for (int px = 0; px < LatentCodec::kPatch; ++px) {
              for (int c = 0; c < 3; ++c) {
                p(d++) = f.at(gi * LatentCodec::kPatch + py, gj * LatentCodec::kPatch + px, c);
              }
            }
          }
          second_moment.noalias() += p * p.transpose();
        }
      }
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(second_moment);
  std::vector<double> basis((size_t)channels * kPatchDim);
  for (int k = 0; k < channels; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(kPatchDim - 1 - k);  // descending
    int arg = 0;
    for (int i = 1; i < kPatchDim; ++i) {
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    }
    if (v(arg) < 0) v = -v;  // deterministic sign
    for (int i = 0; i < kPatchDim; ++i) basis[(size_t)k * kPatchDim + i] = v(i);
  }
  return basis;
}

const std::vector<double>& codec_basis(int frame_size, int channels) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, std::vector<double>> cache;
  std::scoped_lock lock(mu);
  auto key = std::make_pair(frame_size, channels);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, build_codec_basis(frame_size, channels)).first;
  return it->second;
}

}  // namespace

LatentCodec::LatentCodec(int frame_size, int channels)
    : frame_size_(frame_size), channels_(channels), grid_(frame_size / kPatch) {
  if (frame_size % kPatch != 0) throw Error(Status::error, "codec: frame size not patch aligned");
  if (channels < 1 || channels > kPatchDim) throw Error(Status::error, "codec: bad channel count");
  basis_ = codec_basis(frame_size, channels);
}

Tensor LatentCodec::encode(const std::vector<world::Frame>& frames) const {
  int t = (int)frames.size();
  std::vector<float> z((size_t)t * channels_ * grid_ * grid_);
  size_t plane = (size_t)grid_ * grid_;
  double patch[kPatchDim];
  for (int ti = 0; ti < t; ++ti) {
    const world::Frame& f = frames[ti];
    if (f.h != frame_size_ || f.w != frame_size_) {
      throw ShapeError("encode_latent", std::to_string(frame_size_) + "px frame",
                       std::to_string(f.h) + "x" + std::to_string(f.w));
    }
    for (int gi = 0; gi < grid_; ++gi) {
      for (int gj = 0; gj < grid_; ++gj) {
        int d = 0;
        for (int py = 0; py < kPatch; ++py) {
          for (int px = 0; px < kPatch; ++px) {
            for (int c = 0; c < 3; ++c) patch[d++] = f.at(gi * kPatch + py, gj * kPatch + px, c);
          }
        }
        for (int k = 0; k < channels_; ++k) {
          const double* row = &basis_[(size_t)k * kPatchDim];
          double acc = 0.0;
          for (int i = 0; i < kPatchDim; ++i) acc += row[i] * patch[i];
          z[(size_t)ti * channels_ * plane + k * plane + gi * grid_ + gj] = (float)acc;
        }
      }
    }
  }
  return Tensor::from_data({t, channels_, grid_, grid_}, z);
}

std::vector<world::Frame> LatentCodec::decode(const Tensor& z) const {
  if (z.rank() != 4 || z.dim(1) != channels_ || z.dim(2) != grid_ || z.dim(3) != grid_) {
    throw ShapeError("decode_latent", "T×" + std::to_string(channels_) + "×" +
                     std::to_string(grid_) + "×" + std::to_string(grid_), shape_str(z.shape()));
  }
  int t = z.dim(0);
  auto zv = z.to_vector();
  size_t plane = (size_t)grid_ * grid_;
  std::vector<world::Frame> frames(t);
  for (int ti = 0; ti < t; ++ti) {
    world::Frame& f = frames[ti];
    f.h = f.w = frame_size_;
    f.rgb.assign((size_t)frame_size_ * frame_size_ * 3, 0.f);
    for (int gi = 0; gi < grid_; ++gi) {
      for (int gj = 0; gj < grid_; ++gj) {
        double patch[kPatchDim] = {0.0};
        for (int k = 0; k < channels_; ++k) {
          double zv_k = zv[(size_t)ti * channels_ * plane + k * plane + gi * grid_ + gj];
          const double* row = &basis_[(size_t)k * kPatchDim];
          for (int i = 0; i < kPatchDim; ++i) patch[i] += zv_k * row[i];
        }
        int d = 0;
        for (int py = 0; py < kPatch; ++py) {
          for (int px = 0; px < kPatch; ++px) {
            for (int c = 0; c < 3; ++c) {
              f.rgb[((size_t)(gi * kPatch + py) * frame_size_ + gj * kPatch + px) * 3 + c] =
                  (float)std::clamp(patch[d++], 0.0, 1.0);
            }
          }
        }
      }
    }
  }
  return frames;
}

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

namespace {

int heads_for(int width, int desired) {
  for (int h = std::min(desired, width); h >= 1; --h) {
    if (width % h == 0 && width / h >= 4) return h;
  }
  return 1;
}

Tensor bias_all_tokens(const Tensor& vec, int b, int n) {
  return repeat_dim(repeat_dim(reshape(vec, {1, 1, vec.dim(0)}), 0, b), 1, n);
}

Tensor pos_spatial(const Tensor& table, int b) {
  return repeat_dim(reshape(table, {1, table.dim(0), table.dim(1)}), 0, b);
}

Tensor pos_temporal(const Tensor& table, int n) {
  return repeat_dim(reshape(table, {table.dim(0), 1, table.dim(1)}), 1, n);
}

Tensor merge_2x2(const Tensor& tokens, int h, int w) {
  int t = tokens.dim(0), c = tokens.dim(2);
  Tensor x = reshape(tokens, {t, h / 2, 2, w / 2, 2, c});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {t, (h / 2) * (w / 2), 4 * c});
}

Tensor unmerge_2x2(const Tensor& tokens, int h2, int w2) {
  int t = tokens.dim(0), c4 = tokens.dim(2);
  int c = c4 / 4;
  Tensor x = reshape(tokens, {t, h2, w2, 2, 2, c});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {t, 4 * h2 * w2, c});
}

}  // namespace

DenoiserConfig DenoiserConfig::from(const config::RunConfig& rc) {
  DenoiserConfig d;
  d.t = rc.vdm.t;
  d.c = rc.vdm.c;
  d.h = rc.vdm.h;
  d.w = rc.vdm.w;
  d.taps = rc.vdm.taps;
  d.steps = rc.vdm.s;
  d.width_top = rc.vdm.width_top;
  d.width_mid = rc.vdm.width_mid;
  d.mid_blocks = rc.vdm.mid_blocks;
  d.heads = rc.vdm.heads;
  d.frame_size = rc.world.frame;
  return d;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, uint64_t init_seed)
    : cfg_(cfg), codec_(cfg.frame_size, cfg.c) {
  rng::Stream init(init_seed, "denoiser/init");
  int hw = cfg.h * cfg.w;
  int hw4 = hw / 4;
  proj_in_ = nn::Linear(params_, "proj_in", 2 * cfg.c, cfg.width_top, init.child("proj_in"));
  proj_merge_ =
      nn::Linear(params_, "proj_merge", 4 * cfg.width_top, cfg.width_mid, init.child("proj_merge"));
  for (int b = 0; b < cfg.mid_blocks; ++b) {
    std::string base = "mid" + std::to_string(b);
    mid_spatial_.emplace_back(params_, base + ".spatial", cfg.width_mid,
                              heads_for(cfg.width_mid, cfg.heads), init.child(base + "s"));
    mid_temporal_.emplace_back(params_, base + ".temporal", cfg.width_mid,
                               heads_for(cfg.width_mid, cfg.heads), init.child(base + "t"));
  }
  proj_up0_ = nn::Linear(params_, "proj_up0", cfg.width_mid, cfg.taps[0], init.child("proj_up0"));
  up0_ = nn::Block(params_, "up0", cfg.taps[0], heads_for(cfg.taps[0], cfg.heads), init.child("up0"));
  proj_unmerge_ =
      nn::Linear(params_, "proj_unmerge", cfg.taps[0], 4 * cfg.taps[1], init.child("proj_unmerge"));
  up1_ = nn::Block(params_, "up1", cfg.taps[1], heads_for(cfg.taps[1], cfg.heads), init.child("up1"));
  proj_up2_ = nn::Linear(params_, "proj_up2", cfg.taps[1], cfg.taps[2], init.child("proj_up2"));
  up2_ = nn::Block(params_, "up2", cfg.taps[2], heads_for(cfg.taps[2], cfg.heads), init.child("up2"));
  // Near-zero head so the initial eps prediction is close to zero.
  head_ = nn::Linear(params_, "head", cfg.taps[2], cfg.c, init.child("head"), 0.02);

  auto emb = init.child("emb");
  task_emb_ = params_.add("task_emb", Tensor::randn({cfg.n_tasks, cfg.width_top}, emb, 0.0, 0.02));
  pos_top_ = params_.add("pos_top", Tensor::randn({hw, cfg.width_top}, emb, 0.0, 0.02));
  pos_mid_ = params_.add("pos_mid", Tensor::randn({hw4, cfg.width_mid}, emb, 0.0, 0.02));
  pos_time_ = params_.add("pos_time", Tensor::randn({cfg.t, cfg.width_mid}, emb, 0.0, 0.02));
  pos_up1_ = params_.add("pos_up1", Tensor::randn({hw, cfg.taps[1]}, emb, 0.0, 0.02));
}

int Denoiser::feature_channels() const {
  int c = 0;
  for (int tap : cfg_.taps) c += tap;
  return c;
}

std::pair<Tensor, DenoiserTaps> Denoiser::forward(const Tensor& z_s, int s_index,
                                                  const world::Frame& obs, int task_id) const {
  if (s_index < 1 || s_index > cfg_.steps) {
    throw Error(Status::error, "denoiser: step index " + std::to_string(s_index) +
                               " outside 1.." + std::to_string(cfg_.steps));
  }
  if (z_s.rank() != 4 || z_s.dim(0) != cfg_.t || z_s.dim(1) != cfg_.c || z_s.dim(2) != cfg_.h ||
      z_s.dim(3) != cfg_.w) {
    throw ShapeError("denoiser",
                     shape_str({cfg_.t, cfg_.c, cfg_.h, cfg_.w}), shape_str(z_s.shape()));
  }
  instr::g_denoiser_calls.fetch_add(1);

  int hw = cfg_.h * cfg_.w;
  int hw4 = hw / 4;

  // Observation conditioning appended channel-wise to every frame.
  Tensor cond = repeat_dim(codec_.encode({obs}), 0, cfg_.t);
  Tensor tok = nn::vol_to_tokens(concat({z_s, cond}, 1));
  tok = proj_in_(tok);

  Tensor bias = add(nn::sinusoidal_embedding(s_index, cfg_.width_top),
                    reshape(slice(task_emb_, 0, task_id, 1), {cfg_.width_top}));
  tok = add(tok, bias_all_tokens(bias, cfg_.t, hw));
  tok = add(tok, pos_spatial(pos_top_, cfg_.t));

  Tensor mid = proj_merge_(merge_2x2(tok, cfg_.h, cfg_.w));
  mid = add(mid, pos_spatial(pos_mid_, cfg_.t));
  mid = add(mid, pos_temporal(pos_time_, hw4));
  for (size_t b = 0; b < mid_spatial_.size(); ++b) {
    mid = mid_spatial_[b](mid);
    mid = nn::swap_batch_seq(mid_temporal_[b](nn::swap_batch_seq(mid)));
  }

  DenoiserTaps taps;
  Tensor u0 = up0_(proj_up0_(mid));
  taps.volumes.push_back(nn::tokens_to_vol(u0, cfg_.h / 2, cfg_.w / 2));

  Tensor u1 = unmerge_2x2(proj_unmerge_(u0), cfg_.h / 2, cfg_.w / 2);
  u1 = add(u1, pos_spatial(pos_up1_, cfg_.t));
  u1 = up1_(u1);
  taps.volumes.push_back(nn::tokens_to_vol(u1, cfg_.h, cfg_.w));

  Tensor u2 = up2_(proj_up2_(u1));
  taps.volumes.push_back(nn::tokens_to_vol(u2, cfg_.h, cfg_.w));

  Tensor eps = nn::tokens_to_vol(head_(u2), cfg_.h, cfg_.w);
  return {eps, taps};
}

// ---------------------------------------------------------------------------
// reverse process, sampling, one-step features
// ---------------------------------------------------------------------------

Tensor reverse_process(const NoiseSchedule& sched, const Tensor& z_start,
                       const std::function<Tensor(const Tensor&, int)>& eps_fn,
                       rng::Stream noise_stream, bool deterministic, const char* what) {
  Tensor z = z_start;
  for (int s = sched.steps; s >= 1; --s) {
    try {
      Tensor eps = eps_fn(z, s);
      double a = sched.alpha[s - 1];
      double ab = sched.alpha_bar[s - 1];
      z = scale(sub(z, scale(eps, (1.0 - a) / std::sqrt(1.0 - ab))), 1.0 / std::sqrt(a));
      if (!deterministic && s > 1 && sched.sigma[s - 1] > 0.0) {
        auto per_step = noise_stream.child("step", (uint64_t)s);
        z = add(z, scale(Tensor::randn(z.shape(), per_step), sched.sigma[s - 1]));
      }
    } catch (const NumericError& e) {
      throw NumericError(std::string(what) + ": non-finite value at step " + std::to_string(s) +
                         " (" + e.what() + ")");
    }
    if (!z.all_finite()) {
      throw NumericError(std::string(what) + ": non-finite value at step " + std::to_string(s));
    }
  }
  return z;
}

SampleResult ddpm_sample(const Denoiser& model, const world::Frame& obs, int task_id,
                         const NoiseSchedule& sched, uint64_t seed, bool deterministic) {
  NoGradGuard ng;
  const auto& cfg = model.config();
  rng::Stream zs(seed, "sample/z_S");
  Tensor z_start = Tensor::randn({cfg.t, cfg.c, cfg.h, cfg.w}, zs);
  instr::g_last_sample_zs_hash = z_start.data_hash();
  auto eps_fn = [&](const Tensor& z, int s) { return model.forward(z, s, obs, task_id).first; };
  Tensor z0 = reverse_process(sched, z_start, eps_fn, rng::Stream(seed, "sample/noise"),
                              deterministic, "ddpm_sample");
  return {model.codec().decode(z0), z0};
}

Tensor one_step_features(const Denoiser& model, const world::Frame& obs, int task_id,
                         const NoiseSchedule& sched, uint64_t seed) {
  NoGradGuard ng;
  const auto& cfg = model.config();
  rng::Stream zs(seed, "sample/z_S");  // shares the sampler's trajectory start
  Tensor z_start = Tensor::randn({cfg.t, cfg.c, cfg.h, cfg.w}, zs);
  instr::g_last_feature_zs_hash = z_start.data_hash();
  auto [eps, taps] = model.forward(z_start, sched.steps, obs, task_id);
  (void)eps;
  std::vector<Tensor> aligned;
  aligned.reserve(taps.volumes.size());
  for (const auto& tap : taps.volumes) aligned.push_back(interpolate_bilinear(tap, cfg.h, cfg.w));
  return concat(aligned, 1);
}

// ---------------------------------------------------------------------------
// stage 1 training
// ---------------------------------------------------------------------------

std::vector<world::Frame> clip_frames(const world::Episode& ep, int t0, int t, int stride) {
  std::vector<world::Frame> clip;
  clip.reserve(t);
  for (int k = 0; k < t; ++k) clip.push_back(ep.frames.at(t0 + k * stride));
  return clip;
}

int max_clip_start(int h_ep, int t, int stride) { return h_ep - 1 - (t - 1) * stride; }

Stage1Trainer::Stage1Trainer(Denoiser& model, const world::EpisodeSet& data,
                             const NoiseSchedule& sched, double lr, int batch, int clip_stride,
                             uint64_t seed)
    : model_(model), data_(data), sched_(sched), batch_(batch), clip_stride_(clip_stride),
      opt_(AdamConfig{lr, 0.9, 0.999, 1e-8}), draw_(seed, "stage1") {
  if (data_.episodes.empty()) throw Error(Status::error, "stage 1: empty dataset");
}

double Stage1Trainer::step() {
  const auto& cfg = model_.config();
  int max_t0 = max_clip_start(data_.h_ep, cfg.t, clip_stride_);
  model_.params().zero_grads();
  // Per-step child stream keyed by the optimizer count, so a resumed run
  // continues the exact draw sequence of an uninterrupted one.
  rng::Stream draw = draw_.child("step", (uint64_t)opt_.step_count());
  Tensor loss;
  for (int b = 0; b < batch_; ++b) {
    const auto& ep = data_.episodes[draw.uniform_int(0, (int)data_.episodes.size() - 1)];
    int t0 = draw.uniform_int(0, max_t0);
    int s = draw.uniform_int(1, sched_.steps);
    auto clip = clip_frames(ep, t0, cfg.t, clip_stride_);
    Tensor z0 = model_.codec().encode(clip);
    Tensor eps = Tensor::randn(z0.shape(), draw);
    double ab = sched_.alpha_bar[s - 1];
    Tensor z_s = add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
    Tensor pred = model_.forward(z_s, s, clip[0], ep.task_id).first;
    Tensor item = mse(pred, eps);
    loss = loss.defined() ? add(loss, item) : item;
  }
  loss = scale(loss, 1.0 / batch_);
  double value = loss.at(0);
  backward(loss);
  opt_.step(model_.params());
  return value;
}

}  // namespace svam::vdm
