#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "svam/rng.hpp"
#include "svam/tensor.hpp"

namespace svam::world {

inline constexpr int kTaskReach = 0;
inline constexpr int kTaskPlace = 1;
inline constexpr int kTaskPlaceTwoDistractors = 2;
inline constexpr int kNumTasks = 3;
inline constexpr int kNumObjectClasses = 3;

inline constexpr double kGraspRadius = 0.06;
inline constexpr double kActionBound = 0.1;
inline constexpr int kDefaultFrameSize = 32;
inline constexpr int kDefaultEpisodeLen = 64;

inline constexpr int kGeoChannels = 4;
inline constexpr int kSemChannels = 8;

struct ObjectState {
  int class_id = 1;  // 1..kNumObjectClasses
  double x = 0, y = 0;
  double radius = 0.05;
  bool held = false;
};

struct WorldState {
  double gripper_x = 0.5, gripper_y = 0.1;
  bool grip_closed = false;
  std::vector<ObjectState> objects;
  double goal_x = 0.5, goal_y = 0.5, goal_radius = 0.11;
  int task_id = 0;
  int step_index = 0;
};

struct Action {
  double dx = 0, dy = 0;
  int dgrip = 0;  // -1 open, 0 keep, +1 close
};

// H×W×3 image, values in [0, 1], row-major.
struct Frame {
  int h = 0, w = 0;
  std::vector<float> rgb;

  float at(int row, int col, int ch) const { return rgb[(row * w + col) * 3 + ch]; }
};

struct Episode {
  int task_id = 0;
  bool success = false;
  std::vector<Frame> frames;                // length H_ep
  std::vector<Action> actions;              // length H_ep - 1
  std::vector<WorldState> states;           // in-memory only, omitted from files
};

struct EpisodeSet {
  int h_ep = kDefaultEpisodeLen;
  int frame_size = kDefaultFrameSize;
  int n_tasks = kNumTasks;
  std::vector<Episode> episodes;
};

// Palette shared by the renderer and the procedural encoders.
std::array<float, 3> class_color(int class_id);
std::array<float, 3> goal_color();
std::array<float, 3> gripper_color(bool closed);

// Pixel classes decoded from the palette: 0 background, 1 goal, 2 gripper,
// 2+k object class k.
inline constexpr int kPixelBackground = 0;
inline constexpr int kPixelGoal = 1;
inline constexpr int kPixelGripper = 2;
int classify_pixel(float r, float g, float b);
int num_pixel_classes();

WorldState reset(uint64_t seed, int task_id);
WorldState step(const WorldState& state, const Action& action);
Frame render(const WorldState& state, int frame_size = kDefaultFrameSize);
Action scripted_expert(const WorldState& state);
bool is_success(const WorldState& state);

// Geometry-oriented target encoder: per frame a signed-distance channel to
// the object/gripper silhouette (normalized by the image diagonal, negative
// inside), a nearest-silhouette radius channel, and a unit direction toward
// the nearest silhouette boundary; resized to (h, w).
Tensor phi_geo(const std::vector<Frame>& frames, int h, int w);

// Semantics-oriented target encoder: per pixel the frozen unit-norm class
// embedding of the decoded palette entry; resized to (h, w).
Tensor phi_sem(const std::vector<Frame>& frames, int h, int w);

const std::vector<std::vector<double>>& sem_embeddings();

// Pluggable encoder registry; only the two procedural branches ship.
using TargetEncoder = Tensor (*)(const std::vector<Frame>&, int, int);
TargetEncoder target_encoder(const std::string& name);  // "geo" | "sem"
int target_channels(const std::string& name);

Episode run_expert_episode(uint64_t seed, int task_id, int h_ep = kDefaultEpisodeLen,
                           int frame_size = kDefaultFrameSize, bool with_frames = true);

EpisodeSet generate_dataset(int n_episodes, const std::vector<int>& task_ids, uint64_t seed,
                            int h_ep = kDefaultEpisodeLen, int frame_size = kDefaultFrameSize);

void save_dataset(const EpisodeSet& set, const std::string& path);
EpisodeSet load_dataset(const std::string& path);

}  // namespace svam::world
