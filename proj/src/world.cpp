#include "svam/world.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <numbers>

#include "svam/error.hpp"

static_assert(std::endian::native == std::endian::little, "file formats are little-endian");

namespace svam::world {

namespace {

constexpr double kGripperStartX = 0.5;
constexpr double kGripperStartY = 0.1;
constexpr double kPlacementMargin = 0.05;
constexpr double kRingHalfWidthPx = 1.2;
// Footprint used when the gripper cross enters the signed-distance field.
constexpr int kCrossArmPx = 1;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double dist2d(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

int target_object_count(int task_id) {
  switch (task_id) {
    case kTaskReach: return 1;
    case kTaskPlace: return 1;
    case kTaskPlaceTwoDistractors: return 3;
    default: throw Error(Status::error, "unknown task id " + std::to_string(task_id));
  }
}

}  // namespace

std::array<float, 3> class_color(int class_id) {
  switch (class_id) {
    case 1: return {1.f, 0.f, 0.f};
    case 2: return {0.f, 1.f, 0.f};
    case 3: return {1.f, 0.f, 1.f};
    default: throw Error(Status::error, "unknown object class " + std::to_string(class_id));
  }
}

std::array<float, 3> goal_color() { return {0.f, 0.f, 1.f}; }

std::array<float, 3> gripper_color(bool closed) {
  return closed ? std::array<float, 3>{1.f, 1.f, 1.f} : std::array<float, 3>{0.6f, 0.6f, 0.6f};
}

int num_pixel_classes() { return 3 + kNumObjectClasses; }

int classify_pixel(float r, float g, float b) {
  struct Entry {
    std::array<float, 3> color;
    int cls;
  };
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
    e.push_back({{0.f, 0.f, 0.f}, kPixelBackground});
    e.push_back({goal_color(), kPixelGoal});
    e.push_back({gripper_color(false), kPixelGripper});
    e.push_back({gripper_color(true), kPixelGripper});
    for (int k = 1; k <= kNumObjectClasses; ++k) e.push_back({class_color(k), kPixelGripper + k});
    return e;
  }();
  double best = 1e30;
  int best_cls = kPixelBackground;
  for (const auto& e : entries) {
    double d2 = (r - e.color[0]) * (r - e.color[0]) + (g - e.color[1]) * (g - e.color[1]) +
                (b - e.color[2]) * (b - e.color[2]);
    if (d2 < best) {
      best = d2;
      best_cls = e.cls;
    }
  }
  // Outside the decode tolerance everything is background.
  return std::sqrt(best) <= 0.1 ? best_cls : kPixelBackground;
}

WorldState reset(uint64_t seed, int task_id) {
  int n_objects = target_object_count(task_id);
  rng::Stream g(seed, "world/reset");
  g = g.child("task", (uint64_t)task_id);

  WorldState s;
  s.task_id = task_id;
  s.step_index = 0;
  s.gripper_x = kGripperStartX;
  s.gripper_y = kGripperStartY;
  s.grip_closed = false;

  auto overlaps = [&](double x, double y, double r) {
    if (dist2d(x, y, s.goal_x, s.goal_y) <= r + s.goal_radius + kPlacementMargin) return true;
    for (const auto& o : s.objects) {
      if (dist2d(x, y, o.x, o.y) <= r + o.radius + kPlacementMargin) return true;
    }
    return false;
  };

  s.goal_radius = g.uniform(0.10, 0.13);
  s.goal_x = g.uniform(0.18, 0.82);
  s.goal_y = g.uniform(0.30, 0.82);

  for (int i = 0; i < n_objects; ++i) {
    ObjectState o;
    o.class_id = (i == 0) ? 1 : g.uniform_int(2, kNumObjectClasses);
    o.radius = g.uniform(0.04, 0.06);
    bool placed = false;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      o.x = g.uniform(0.12, 0.88);
      o.y = g.uniform(0.12, 0.88);
      if (!overlaps(o.x, o.y, o.radius)) {
        placed = true;
        break;
      }
    }
    if (!placed) throw Error(Status::error, "reset: rejection sampling failed after 1000 tries");
    s.objects.push_back(o);
  }
  return s;
}

WorldState step(const WorldState& state, const Action& action) {
  WorldState s = state;
  double dx = std::clamp(action.dx, -kActionBound, kActionBound);
  double dy = std::clamp(action.dy, -kActionBound, kActionBound);
  s.gripper_x = clamp01(s.gripper_x + dx);
  s.gripper_y = clamp01(s.gripper_y + dy);

  for (auto& o : s.objects) {
    if (o.held) {
      o.x = s.gripper_x;
      o.y = s.gripper_y;
    }
  }

  if (action.dgrip > 0) {
    s.grip_closed = true;
    bool holding = std::any_of(s.objects.begin(), s.objects.end(),
                               [](const ObjectState& o) { return o.held; });
    if (!holding) {
      int best = -1;
      double best_d = kGraspRadius;
      for (size_t i = 0; i < s.objects.size(); ++i) {
        double d = dist2d(s.gripper_x, s.gripper_y, s.objects[i].x, s.objects[i].y);
        if (d <= best_d) {
          best_d = d;
          best = (int)i;
        }
      }
      if (best >= 0) {
        s.objects[best].held = true;
        s.objects[best].x = s.gripper_x;
        s.objects[best].y = s.gripper_y;
      }
    }
  } else if (action.dgrip < 0) {
    s.grip_closed = false;
    for (auto& o : s.objects) o.held = false;  // released object stays put
  }

  s.step_index = state.step_index + 1;
  return s;
}

Frame render(const WorldState& state, int frame_size) {
  Frame f;
  f.h = f.w = frame_size;
  f.rgb.assign((size_t)frame_size * frame_size * 3, 0.f);
  auto put = [&](int row, int col, const std::array<float, 3>& c) {
    if (row < 0 || row >= f.h || col < 0 || col >= f.w) return;
    float* px = &f.rgb[(size_t)(row * f.w + col) * 3];
    px[0] = c[0];
    px[1] = c[1];
    px[2] = c[2];
  };
  // Edges fade over one pixel (coverage approximation).
  auto blend = [&](int row, int col, const std::array<float, 3>& c, double alpha) {
    float* px = &f.rgb[(size_t)(row * f.w + col) * 3];
    for (int ch = 0; ch < 3; ++ch) px[ch] = (float)(alpha * c[ch] + (1.0 - alpha) * px[ch]);
  };

  // Goal ring, channel 2 only.
  double goal_r_px = state.goal_radius * frame_size;
  for (int i = 0; i < f.h; ++i) {
    for (int j = 0; j < f.w; ++j) {
      double px = (j + 0.5) / f.w;
      double py = (i + 0.5) / f.h;
      double d_px = dist2d(px, py, state.goal_x, state.goal_y) * frame_size;
      double alpha = std::clamp(0.5 + kRingHalfWidthPx - std::abs(d_px - goal_r_px), 0.0, 1.0);
      if (alpha > 0) {
        float* pix = &f.rgb[(size_t)(i * f.w + j) * 3];
        pix[2] = (float)(alpha + (1.0 - alpha) * pix[2]);
      }
    }
  }

  for (const auto& o : state.objects) {
    auto color = class_color(o.class_id);
    for (int i = 0; i < f.h; ++i) {
      for (int j = 0; j < f.w; ++j) {
        double px = (j + 0.5) / f.w;
        double py = (i + 0.5) / f.h;
        double alpha =
            std::clamp(0.5 + (o.radius - dist2d(px, py, o.x, o.y)) * frame_size, 0.0, 1.0);
        if (alpha > 0) blend(i, j, color, alpha);
      }
    }
  }

  // Gripper cross drawn last, 3 px across, brighter when closed.
  auto color = gripper_color(state.grip_closed);
  int gc = (int)std::floor(state.gripper_x * f.w);
  int gr = (int)std::floor(state.gripper_y * f.h);
  gc = std::clamp(gc, 0, f.w - 1);
  gr = std::clamp(gr, 0, f.h - 1);
  put(gr, gc, color);
  for (int a = 1; a <= kCrossArmPx; ++a) {
    put(gr + a, gc, color);
    put(gr - a, gc, color);
    put(gr, gc + a, color);
    put(gr, gc - a, color);
  }
  return f;
}

Action scripted_expert(const WorldState& state) {
  Action a;
  auto move_toward = [&](double tx, double ty) {
    a.dx = std::clamp(tx - state.gripper_x, -kActionBound, kActionBound);
    a.dy = std::clamp(ty - state.gripper_y, -kActionBound, kActionBound);
  };

  if (state.task_id == kTaskReach) {
    if (dist2d(state.gripper_x, state.gripper_y, state.goal_x, state.goal_y) >=
        state.goal_radius * 0.5) {
      move_toward(state.goal_x, state.goal_y);
    }
    return a;
  }

  const ObjectState& target = state.objects.at(0);
  if (!target.held) {
    double d = dist2d(state.gripper_x, state.gripper_y, target.x, target.y);
    if (d <= kGraspRadius * 0.75) {
      a.dgrip = 1;
    } else {
      move_toward(target.x, target.y);
    }
    return a;
  }
  double d_goal = dist2d(state.gripper_x, state.gripper_y, state.goal_x, state.goal_y);
  if (d_goal <= state.goal_radius - 0.02) {
    a.dgrip = -1;
  } else {
    move_toward(state.goal_x, state.goal_y);
  }
  return a;
}

bool is_success(const WorldState& state) {
  if (state.task_id == kTaskReach) {
    return dist2d(state.gripper_x, state.gripper_y, state.goal_x, state.goal_y) <
           state.goal_radius;
  }
  const ObjectState& target = state.objects.at(0);
  return !target.held &&
         dist2d(target.x, target.y, state.goal_x, state.goal_y) < state.goal_radius;
}

// ---------------------------------------------------------------------------
// procedural target encoders
// ---------------------------------------------------------------------------

namespace {

struct GeoField {
  std::vector<float> sdf, radius, dir_x, dir_y;
};

GeoField geo_field(const Frame& f) {
  int h = f.h, w = f.w;
  int n = h * w;
  double diag_px = std::hypot((double)h, (double)w);

  std::vector<uint8_t> mask(n, 0);
  std::vector<int> mask_px, free_px;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      int cls = classify_pixel(f.at(i, j, 0), f.at(i, j, 1), f.at(i, j, 2));
      int ix = i * w + j;
      if (cls >= kPixelGripper) {
        mask[ix] = 1;
        mask_px.push_back(ix);
      } else {
        free_px.push_back(ix);
      }
    }
  }

  // Connected components of the silhouette, radius from the component area.
  std::vector<int> comp(n, -1);
  std::vector<float> comp_radius;
  for (int start : mask_px) {
    if (comp[start] >= 0) continue;
    int id = (int)comp_radius.size();
    int area = 0;
    std::deque<int> q{start};
    comp[start] = id;
    while (!q.empty()) {
      int ix = q.front();
      q.pop_front();
      ++area;
      int r = ix / w, c = ix % w;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          int jx = rr * w + cc;
          if (mask[jx] && comp[jx] < 0) {
            comp[jx] = id;
            q.push_back(jx);
          }
        }
      }
    }
    comp_radius.push_back((float)(std::sqrt(area / std::numbers::pi) / w));
  }

  GeoField out;
  out.sdf.resize(n);
  out.radius.resize(n);
  out.dir_x.assign(n, 0.f);
  out.dir_y.assign(n, 0.f);

  auto nearest = [&](int ix, const std::vector<int>& pool) {
    int r = ix / w, c = ix % w;
    double best = 1e30;
    int best_ix = -1;
    for (int jx : pool) {
      double dr = (double)(jx / w) - r;
      double dc = (double)(jx % w) - c;
      double d2 = dr * dr + dc * dc;
      if (d2 < best) {
        best = d2;
        best_ix = jx;
      }
    }
    return std::pair<double, int>{std::sqrt(best), best_ix};
  };

  for (int ix = 0; ix < n; ++ix) {
    if (mask_px.empty()) {
      out.sdf[ix] = (float)((diag_px - 0.5) / diag_px);
      out.radius[ix] = 0.f;
      continue;
    }
    if (mask[ix]) {
      auto [d_in, jx] = free_px.empty() ? std::pair<double, int>{diag_px, -1} : nearest(ix, free_px);
      out.sdf[ix] = (float)(-(d_in - 0.5) / diag_px);
      out.radius[ix] = comp_radius[comp[ix]];
      if (jx >= 0 && d_in > 0) {
        out.dir_x[ix] = (float)(((jx % w) - (ix % w)) / d_in);
        out.dir_y[ix] = (float)(((jx / w) - (ix / w)) / d_in);
      }
    } else {
      auto [d_out, jx] = nearest(ix, mask_px);
      out.sdf[ix] = (float)((d_out - 0.5) / diag_px);
      out.radius[ix] = comp_radius[comp[jx]];
      if (d_out > 0) {
        out.dir_x[ix] = (float)(((jx % w) - (ix % w)) / d_out);
        out.dir_y[ix] = (float)(((jx / w) - (ix / w)) / d_out);
      }
    }
  }
  return out;
}

}  // namespace

Tensor phi_geo(const std::vector<Frame>& frames, int h, int w) {
  NoGradGuard ng;
  int t = (int)frames.size();
  int fh = frames.at(0).h, fw = frames.at(0).w;
  std::vector<float> vol((size_t)t * kGeoChannels * fh * fw);
  for (int ti = 0; ti < t; ++ti) {
    GeoField gf = geo_field(frames[ti]);
    size_t base = (size_t)ti * kGeoChannels * fh * fw;
    size_t plane = (size_t)fh * fw;
    std::copy(gf.sdf.begin(), gf.sdf.end(), vol.begin() + base);
    std::copy(gf.radius.begin(), gf.radius.end(), vol.begin() + base + plane);
    std::copy(gf.dir_x.begin(), gf.dir_x.end(), vol.begin() + base + 2 * plane);
    std::copy(gf.dir_y.begin(), gf.dir_y.end(), vol.begin() + base + 3 * plane);
  }
  Tensor full = Tensor::from_data({t, kGeoChannels, fh, fw}, vol);
  return interpolate_bilinear(full, h, w);
}

const std::vector<std::vector<double>>& sem_embeddings() {
  static const std::vector<std::vector<double>> table = [] {
    // Frozen at build time: unit-norm class embeddings with pairwise
    // |cosine| < 0.5 enforced by resampling.
    rng::Stream g(0x53454d4245443144ull, "phi_sem/embeddings");
    std::vector<std::vector<double>> e;
    int classes = num_pixel_classes();
    for (int k = 0; k < classes; ++k) {
      for (int attempt = 0; attempt < 10000; ++attempt) {
        std::vector<double> v(kSemChannels);
        double norm = 0.0;
        for (auto& x : v) {
          x = g.normal();
          norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
        bool ok = true;
        for (const auto& prev : e) {
          double dot = 0.0;
          for (int i = 0; i < kSemChannels; ++i) dot += v[i] * prev[i];
          if (std::abs(dot) >= 0.5) {
            ok = false;
            break;
          }
        }
        if (ok) {
          e.push_back(std::move(v));
          break;
        }
      }
      if ((int)e.size() != k + 1) {
        throw Error(Status::error, "phi_sem: embedding resampling failed");
      }
    }
    return e;
  }();
  return table;
}

Tensor phi_sem(const std::vector<Frame>& frames, int h, int w) {
  NoGradGuard ng;
  const auto& emb = sem_embeddings();
  int t = (int)frames.size();
  int fh = frames.at(0).h, fw = frames.at(0).w;
  std::vector<float> vol((size_t)t * kSemChannels * fh * fw);
  size_t plane = (size_t)fh * fw;
  for (int ti = 0; ti < t; ++ti) {
    const Frame& f = frames[ti];
    size_t base = (size_t)ti * kSemChannels * fh * fw;
    for (int i = 0; i < fh; ++i) {
      for (int j = 0; j < fw; ++j) {
        int cls = classify_pixel(f.at(i, j, 0), f.at(i, j, 1), f.at(i, j, 2));
        for (int c = 0; c < kSemChannels; ++c) {
          vol[base + c * plane + i * (size_t)fw + j] = (float)emb[cls][c];
        }
      }
    }
  }
  Tensor full = Tensor::from_data({t, kSemChannels, fh, fw}, vol);
  return interpolate_bilinear(full, h, w);
}

TargetEncoder target_encoder(const std::string& name) {
  if (name == "geo") return &phi_geo;
  if (name == "sem") return &phi_sem;
  throw Error(Status::error, "unknown target encoder " + name);
}

int target_channels(const std::string& name) {
  if (name == "geo") return kGeoChannels;
  if (name == "sem") return kSemChannels;
  throw Error(Status::error, "unknown target encoder " + name);
}

// ---------------------------------------------------------------------------
// episodes and dataset files
// ---------------------------------------------------------------------------

Episode run_expert_episode(uint64_t seed, int task_id, int h_ep, int frame_size,
                           bool with_frames) {
  Episode ep;
  ep.task_id = task_id;
  WorldState s = reset(seed, task_id);
  ep.states.push_back(s);
  if (with_frames) ep.frames.push_back(render(s, frame_size));
  for (int t = 0; t < h_ep - 1; ++t) {
    Action a = is_success(s) ? Action{} : scripted_expert(s);
    s = step(s, a);
    ep.actions.push_back(a);
    ep.states.push_back(s);
    if (with_frames) ep.frames.push_back(render(s, frame_size));
  }
  ep.success = is_success(s);
  return ep;
}

EpisodeSet generate_dataset(int n_episodes, const std::vector<int>& task_ids, uint64_t seed,
                            int h_ep, int frame_size) {
  if (n_episodes < 1) throw Error(Status::error, "generate_dataset: need at least one episode");
  if (task_ids.empty()) throw Error(Status::error, "generate_dataset: no tasks configured");
  EpisodeSet set;
  set.h_ep = h_ep;
  set.frame_size = frame_size;
  set.n_tasks = kNumTasks;
  rng::Stream g(seed, "dataset");
  // Failed expert runs are dropped; attempts continue until the requested
  // count of successful demonstrations is met.
  for (int i = 0; i < n_episodes; ++i) {
    int task = task_ids[i % task_ids.size()];
    for (uint64_t attempt = 0;; ++attempt) {
      if (attempt >= 1000) throw Error(Status::error, "generate_dataset: expert keeps failing");
      uint64_t ep_seed = g.child("episode", (uint64_t)i).child("attempt", attempt).u64();
      Episode ep = run_expert_episode(ep_seed, task, h_ep, frame_size);
      if (ep.success) {
        ep.states.clear();
        set.episodes.push_back(std::move(ep));
        break;
      }
    }
  }
  return set;
}

namespace {

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u8(std::ostream& os, uint8_t v) { os.write(reinterpret_cast<const char*>(&v), 1); }

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

uint8_t read_u8(std::istream& is) {
  uint8_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 1);
  return v;
}

constexpr char kDatasetMagic[8] = {'S', 'V', 'A', 'M', 'D', 'S', '1', '\0'};

}  // namespace

void save_dataset(const EpisodeSet& set, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write dataset file " + path);
  os.write(kDatasetMagic, 8);
  write_u32(os, (uint32_t)set.episodes.size());
  write_u32(os, (uint32_t)set.h_ep);
  write_u32(os, (uint32_t)set.frame_size);
  write_u32(os, (uint32_t)set.frame_size);
  write_u32(os, 3);  // action dim
  write_u32(os, (uint32_t)set.n_tasks);
  for (const auto& ep : set.episodes) {
    write_u32(os, (uint32_t)ep.task_id);
    write_u8(os, ep.success ? 1 : 0);
    for (const auto& f : ep.frames) {
      os.write(reinterpret_cast<const char*>(f.rgb.data()), (std::streamsize)f.rgb.size() * 4);
    }
    for (const auto& a : ep.actions) {
      float v[3] = {(float)a.dx, (float)a.dy, (float)a.dgrip};
      os.write(reinterpret_cast<const char*>(v), 12);
    }
  }
  if (!os) throw IoError("failed while writing dataset file " + path);
}

EpisodeSet load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset file " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kDatasetMagic, 8) != 0) {
    throw IoError("bad dataset magic in " + path);
  }
  EpisodeSet set;
  uint32_t n = read_u32(is);
  set.h_ep = (int)read_u32(is);
  int h = (int)read_u32(is);
  int w = (int)read_u32(is);
  uint32_t action_dim = read_u32(is);
  set.n_tasks = (int)read_u32(is);
  set.frame_size = h;
  if (action_dim != 3 || h != w) throw IoError("unsupported dataset layout in " + path);
  for (uint32_t e = 0; e < n; ++e) {
    Episode ep;
    ep.task_id = (int)read_u32(is);
    ep.success = read_u8(is) != 0;
    ep.frames.resize(set.h_ep);
    for (auto& f : ep.frames) {
      f.h = h;
      f.w = w;
      f.rgb.resize((size_t)h * w * 3);
      is.read(reinterpret_cast<char*>(f.rgb.data()), (std::streamsize)f.rgb.size() * 4);
    }
    ep.actions.resize(set.h_ep - 1);
    for (auto& a : ep.actions) {
      float v[3];
      is.read(reinterpret_cast<char*>(v), 12);
      a.dx = v[0];
      a.dy = v[1];
      a.dgrip = (int)std::lround(v[2]);
    }
    set.episodes.push_back(std::move(ep));
  }
  if (!is) throw IoError("truncated dataset file " + path);
  return set;
}

}  // namespace svam::world
