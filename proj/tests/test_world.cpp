#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "svam/world.hpp"

using namespace svam;
using namespace svam::world;

namespace {

Frame black_frame(int size = 32) {
  Frame f;
  f.h = f.w = size;
  f.rgb.assign((size_t)size * size * 3, 0.f);
  return f;
}

// Synthetic single-disk frame, no gripper and no goal ring.
Frame disk_frame(double cx, double cy, double radius, int class_id, int size = 32) {
  Frame f = black_frame(size);
  auto color = class_color(class_id);
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      double px = (j + 0.5) / size, py = (i + 0.5) / size;
      if (std::hypot(px - cx, py - cy) <= radius) {
        for (int c = 0; c < 3; ++c) f.rgb[(size_t)(i * size + j) * 3 + c] = color[c];
      }
    }
  }
  return f;
}

std::vector<char> file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("reset is deterministic in (seed, task)") {
  for (int task = 0; task < kNumTasks; ++task) {
    auto a = reset(123, task);
    auto b = reset(123, task);
    REQUIRE(a.objects.size() == b.objects.size());
    CHECK(a.goal_x == b.goal_x);
    CHECK(a.goal_y == b.goal_y);
    for (size_t i = 0; i < a.objects.size(); ++i) {
      CHECK(a.objects[i].x == b.objects[i].x);
      CHECK(a.objects[i].class_id == b.objects[i].class_id);
    }
    auto c = reset(124, task);
    CHECK(a.goal_x != c.goal_x);
  }
}

TEST_CASE("place with two distractors has exactly three objects") {
  auto s = reset(5, kTaskPlaceTwoDistractors);
  REQUIRE(s.objects.size() == 3);
  CHECK(s.objects[0].class_id == 1);
  for (int i = 1; i < 3; ++i) CHECK(s.objects[i].class_id >= 2);
}

TEST_CASE("reset keeps pairwise gaps above the margin") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    auto s = reset(seed, kTaskPlaceTwoDistractors);
    auto gap = [](double ax, double ay, double ar, double bx, double by, double br) {
      return std::hypot(ax - bx, ay - by) - ar - br;
    };
    for (size_t i = 0; i < s.objects.size(); ++i) {
      CHECK(gap(s.objects[i].x, s.objects[i].y, s.objects[i].radius, s.goal_x, s.goal_y,
                s.goal_radius) > 0.05);
      for (size_t j = i + 1; j < s.objects.size(); ++j) {
        CHECK(gap(s.objects[i].x, s.objects[i].y, s.objects[i].radius, s.objects[j].x,
                  s.objects[j].y, s.objects[j].radius) > 0.05);
      }
    }
  }
}

TEST_CASE("zero action only advances the step index") {
  auto s = reset(9, kTaskPlace);
  auto s2 = step(s, Action{});
  CHECK(s2.step_index == s.step_index + 1);
  CHECK(s2.gripper_x == s.gripper_x);
  CHECK(s2.gripper_y == s.gripper_y);
  CHECK(s2.grip_closed == s.grip_closed);
  CHECK(s2.objects[0].x == s.objects[0].x);
}

TEST_CASE("closing within the grasp radius picks the object up") {
  auto s = reset(9, kTaskPlace);
  s.gripper_x = s.objects[0].x + 0.05;
  s.gripper_y = s.objects[0].y;
  auto s2 = step(s, Action{0, 0, +1});
  CHECK(s2.objects[0].held);
  CHECK(s2.grip_closed);
  // Held objects track the gripper.
  auto s3 = step(s2, Action{0.07, -0.03, 0});
  CHECK(s3.objects[0].x == doctest::Approx(s3.gripper_x));
  CHECK(s3.objects[0].y == doctest::Approx(s3.gripper_y));
}

TEST_CASE("opening drops the object at the release point") {
  auto s = reset(9, kTaskPlace);
  s.gripper_x = s.objects[0].x;
  s.gripper_y = s.objects[0].y;
  auto held = step(s, Action{0, 0, +1});
  REQUIRE(held.objects[0].held);
  auto moved = step(held, Action{0.08, 0.0, 0});
  auto dropped = step(moved, Action{0, 0, -1});
  CHECK_FALSE(dropped.objects[0].held);
  CHECK_FALSE(dropped.grip_closed);
  CHECK(dropped.objects[0].x == doctest::Approx(moved.objects[0].x));
  auto after = step(dropped, Action{-0.05, 0.05, 0});
  CHECK(after.objects[0].x == doctest::Approx(dropped.objects[0].x));
}

TEST_CASE("gripper movement clips to the unit square and action bounds") {
  auto s = reset(3, kTaskReach);
  s.gripper_x = 0.98;
  s.gripper_y = 0.02;
  auto s2 = step(s, Action{0.5, -0.5, 0});
  CHECK(s2.gripper_x == doctest::Approx(1.0));  // clipped displacement 0.1, then clamp
  CHECK(s2.gripper_y == doctest::Approx(0.0));
}

TEST_CASE("renderer paints background, objects, goal ring and gripper") {
  auto s = reset(21, kTaskPlace);
  auto f = render(s);

  // A pixel far from everything stays black. Search one.
  bool found_black = false;
  for (int i = 0; i < f.h && !found_black; ++i) {
    for (int j = 0; j < f.w && !found_black; ++j) {
      double px = (j + 0.5) / f.w, py = (i + 0.5) / f.h;
      bool clear = std::hypot(px - s.goal_x, py - s.goal_y) > s.goal_radius + 0.1 &&
                   std::hypot(px - s.gripper_x, py - s.gripper_y) > 0.15;
      for (const auto& o : s.objects) clear = clear && std::hypot(px - o.x, py - o.y) > o.radius + 0.1;
      if (clear) {
        CHECK(f.at(i, j, 0) == 0.f);
        CHECK(f.at(i, j, 1) == 0.f);
        CHECK(f.at(i, j, 2) == 0.f);
        found_black = true;
      }
    }
  }
  CHECK(found_black);

  // Pixel at the target object's center carries its class color.
  const auto& o = s.objects[0];
  int oc = (int)std::floor(o.x * f.w), orow = (int)std::floor(o.y * f.h);
  auto color = class_color(o.class_id);
  CHECK(f.at(orow, oc, 0) == color[0]);
  CHECK(f.at(orow, oc, 1) == color[1]);
  CHECK(f.at(orow, oc, 2) == color[2]);

  // Goal ring lives in channel 2.
  int ring_col = (int)std::floor((s.goal_x + s.goal_radius) * f.w);
  int ring_row = (int)std::floor(s.goal_y * f.h);
  if (ring_col < f.w) CHECK(f.at(ring_row, ring_col, 2) == 1.f);
}

TEST_CASE("render of a fixed seed is deterministic") {
  auto fa = render(reset(77, kTaskPlaceTwoDistractors));
  auto fb = render(reset(77, kTaskPlaceTwoDistractors));
  CHECK(fa.rgb == fb.rgb);
}

TEST_CASE("geo encoder: single disk signed distance at the center") {
  double r = 0.09;
  Frame f = disk_frame(0.5, 0.5, r, 1);
  auto y = phi_geo({f}, 32, 32);  // full resolution, no resize
  double diag_px = std::hypot(32.0, 32.0);
  // Center pixel: analytic value -r/diag, rasterization adds at most ~2px.
  double got = y.at(16 * 32 + 16);
  double expect = -r / std::sqrt(2.0);
  CHECK(got < 0.0);
  CHECK(std::abs(got - expect) <= 2.0 / diag_px);

  // Far corner: positive, analytic (dist - r)/diag within raster slack.
  double corner_x = 0.5 / 32, corner_y = 0.5 / 32;
  double dist = std::hypot(corner_x - 0.5, corner_y - 0.5);
  double corner_expect = (dist - r) / std::sqrt(2.0);
  double corner_got = y.at(0);
  CHECK(corner_got > 0.0);
  CHECK(std::abs(corner_got - corner_expect) <= 2.0 / diag_px);

  // Radius channel near the disk reports the component radius estimate.
  CHECK(y.at(1 * 32 * 32 + 16 * 32 + 16) == doctest::Approx(r).epsilon(0.25));
}

TEST_CASE("geo encoder: empty scene is positive everywhere") {
  auto y = phi_geo({black_frame()}, 32, 32);
  for (int i = 0; i < 32 * 32; ++i) CHECK(y.at(i) > 0.0);
}

TEST_CASE("geo encoder: identical frames give identical targets") {
  auto s = reset(31, kTaskPlace);
  auto f = render(s);
  auto y = phi_geo({f, f}, 8, 8);
  for (int64_t i = 0; i < y.numel() / 2; ++i) CHECK(y.at(i) == y.at(y.numel() / 2 + i));
}

TEST_CASE("geo encoder signed distance is 1-Lipschitz in pixel distance") {
  rng::Stream g(11, "lipschitz");
  for (int trial = 0; trial < 5; ++trial) {
    auto s = reset(100 + trial, kTaskPlaceTwoDistractors);
    auto f = render(s);
    auto y = phi_geo({f}, 32, 32);
    double diag_px = std::hypot(32.0, 32.0);
    for (int pair = 0; pair < 400; ++pair) {
      int a = g.uniform_int(0, 32 * 32 - 1);
      int b = g.uniform_int(0, 32 * 32 - 1);
      double dist_px = std::hypot((double)(a / 32 - b / 32), (double)(a % 32 - b % 32));
      double diff_px = std::abs(y.at(a) - y.at(b)) * diag_px;
      // The bound is attained exactly on radial pixel pairs; leave room for
      // f32 rounding only.
      CHECK(diff_px <= dist_px * (1 + 1e-5) + 1e-4);
    }
  }
}

TEST_CASE("sem encoder: background maps to its frozen embedding exactly") {
  auto y = phi_sem({black_frame()}, 32, 32);
  const auto& emb = sem_embeddings();
  for (int c = 0; c < kSemChannels; ++c) {
    CHECK(y.at(c * 32 * 32 + 5 * 32 + 7) == doctest::Approx(emb[kPixelBackground][c]).epsilon(1e-6));
  }
}

TEST_CASE("sem encoder: pixels of one object share an embedding") {
  Frame f = disk_frame(0.4, 0.6, 0.1, 2);
  auto y = phi_sem({f}, 32, 32);
  int ca = (int)(0.4 * 32), ra = (int)(0.6 * 32);
  for (int c = 0; c < kSemChannels; ++c) {
    CHECK(y.at(c * 32 * 32 + ra * 32 + ca) == y.at(c * 32 * 32 + ra * 32 + ca + 1));
  }
}

TEST_CASE("sem embeddings are unit norm with pairwise |cos| below 0.5") {
  const auto& emb = sem_embeddings();
  REQUIRE((int)emb.size() == num_pixel_classes());
  for (size_t i = 0; i < emb.size(); ++i) {
    double norm = 0;
    for (double v : emb[i]) norm += v * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-12);
    for (size_t j = 0; j < i; ++j) {
      double dot = 0;
      for (int c = 0; c < kSemChannels; ++c) dot += emb[i][c] * emb[j][c];
      CHECK(std::abs(dot) < 0.5);
    }
  }
}

TEST_CASE("sem encoder at full resolution only emits frozen embeddings") {
  auto s = reset(55, kTaskPlaceTwoDistractors);
  auto f = render(s);
  auto y = phi_sem({f}, 32, 32);
  const auto& emb = sem_embeddings();
  for (int px = 0; px < 32 * 32; px += 13) {
    bool matched = false;
    for (const auto& e : emb) {
      bool eq = true;
      for (int c = 0; c < kSemChannels && eq; ++c) {
        eq = std::abs(y.at(c * 32 * 32 + px) - e[c]) < 1e-6;
      }
      matched = matched || eq;
    }
    CHECK(matched);
  }
}

TEST_CASE("expert opens the gripper over the goal while holding the target") {
  auto s = reset(13, kTaskPlace);
  s.objects[0].held = true;
  s.grip_closed = true;
  s.gripper_x = s.goal_x;
  s.gripper_y = s.goal_y;
  s.objects[0].x = s.gripper_x;
  s.objects[0].y = s.gripper_y;
  CHECK(scripted_expert(s).dgrip == -1);
}

TEST_CASE("expert moves toward the target when far away") {
  auto s = reset(13, kTaskPlace);
  auto a = scripted_expert(s);
  double tx = s.objects[0].x - s.gripper_x;
  double ty = s.objects[0].y - s.gripper_y;
  CHECK(a.dx * tx + a.dy * ty > 0.0);
}

TEST_CASE("expert succeeds on at least 99% of 1000 seeds per task within 60 steps") {
  for (int task = 0; task < kNumTasks; ++task) {
    int ok = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
      WorldState s = reset(seed, task);
      for (int t = 0; t < 60 && !is_success(s); ++t) s = step(s, scripted_expert(s));
      ok += is_success(s) ? 1 : 0;
    }
    INFO("task ", task, " successes ", ok);
    CHECK(ok >= 990);
  }
}

TEST_CASE("success predicate is target specific") {
  auto s = reset(40, kTaskPlaceTwoDistractors);
  CHECK_FALSE(is_success(s));
  // Distractor in the goal, target outside.
  s.objects[1].x = s.goal_x;
  s.objects[1].y = s.goal_y;
  s.objects[0].x = std::fmod(s.goal_x + 0.4, 1.0);
  s.objects[0].y = std::fmod(s.goal_y + 0.4, 1.0);
  CHECK_FALSE(is_success(s));
  // Target inside but held does not count.
  s.objects[0].x = s.goal_x;
  s.objects[0].y = s.goal_y;
  s.objects[0].held = true;
  CHECK_FALSE(is_success(s));
  s.objects[0].held = false;
  CHECK(is_success(s));
}

TEST_CASE("dataset generation is reproducible and success-filtered") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "svam_world_test";
  fs::create_directories(dir);
  auto set = generate_dataset(6, {kTaskPlace}, 99, 16, 16);
  REQUIRE((int)set.episodes.size() == 6);
  for (const auto& ep : set.episodes) {
    CHECK(ep.success);
    CHECK((int)ep.frames.size() == 16);
    CHECK((int)ep.actions.size() == 15);
  }
  auto p1 = (dir / "a.svamds").string();
  auto p2 = (dir / "b.svamds").string();
  save_dataset(set, p1);
  save_dataset(generate_dataset(6, {kTaskPlace}, 99, 16, 16), p2);
  CHECK(file_bytes(p1) == file_bytes(p2));

  auto loaded = load_dataset(p1);
  REQUIRE(loaded.episodes.size() == set.episodes.size());
  CHECK(loaded.h_ep == 16);
  CHECK(loaded.episodes[2].frames[3].rgb == set.episodes[2].frames[3].rgb);
  CHECK(loaded.episodes[2].actions[4].dx == doctest::Approx((float)set.episodes[2].actions[4].dx));
  fs::remove_all(dir);
}

TEST_CASE("dataset file carries the documented magic") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "svam_world_magic";
  fs::create_directories(dir);
  auto path = (dir / "m.svamds").string();
  save_dataset(generate_dataset(1, {kTaskReach}, 4, 8, 16), path);
  auto bytes = file_bytes(path);
  REQUIRE(bytes.size() > 8);
  CHECK(std::string(bytes.data(), 7) == "SVAMDS1");
  CHECK(bytes[7] == '\0');
  fs::remove_all(dir);
}
