#include <cmath>
#include <set>

#include "doctest.h"
#include "svam/instrument.hpp"
#include "svam/policy.hpp"

using namespace svam;
using namespace svam::policy;

namespace {

ForesightBundle random_bundle(int t = 4, int h = 8, int w = 8, uint64_t seed = 3) {
  rng::Stream g(seed, "bundle");
  ForesightBundle b;
  b.geo = Tensor::randn({t, world::kGeoChannels, h, w}, g);
  b.sem = Tensor::randn({t, world::kSemChannels, h, w}, g);
  b.raw = Tensor::randn({t, 40, h, w}, g);
  return b;
}

ExpertConfig micro_expert() {
  ExpertConfig e;
  e.n = 4;
  e.c_agg = 8;
  e.j = 4;
  e.chunk = 8;
  e.width = 8;
  e.blocks = 2;
  e.heads = 2;
  e.c_hol = 6;
  e.t = 2;
  e.h = e.w = 2;
  return e;
}

}  // namespace

TEST_CASE("context concat follows the fixed (geo, sem, raw) order and channel sums") {
  auto b = random_bundle();
  Tensor full = build_context(b);
  CHECK(full.shape() == Shape{4, 52, 8, 8});

  // Leading channels are the geo slice, then sem, then raw.
  for (int c = 0; c < 4; ++c) CHECK(full.at(c * 64 + 5) == doctest::Approx(b.geo.at(c * 64 + 5)));
  for (int c = 0; c < 8; ++c) {
    CHECK(full.at((4 + c) * 64 + 5) == doctest::Approx(b.sem.at(c * 64 + 5)));
  }
  CHECK(full.at((12 + 3) * 64 + 5) == doctest::Approx(b.raw.at(3 * 64 + 5)));

  CHECK(build_context(b, {false, true, true}).dim(1) == 48);
  CHECK(build_context(b, {true, false, true}).dim(1) == 44);
  CHECK(build_context(b, {true, true, false}).dim(1) == 12);
  CHECK(build_context(b, {false, false, true}).dim(1) == 40);
  CHECK_THROWS(build_context(b, {false, false, false}));
}

TEST_CASE("condensed tokens keep N×C_agg across context sizes") {
  ExpertConfig cfg;
  cfg.c_hol = 52;
  ActionExpert expert(cfg, 7);
  auto big = build_context(random_bundle(4, 8, 8));
  CHECK(expert.condense(big).shape() == Shape{16, 64});
  auto small = build_context(random_bundle(2, 4, 4, 9));
  CHECK(expert.condense(small).shape() == Shape{16, 64});
}

TEST_CASE("uni-perceiver cross-attention rows sum to one") {
  ExpertConfig cfg;
  cfg.c_hol = 52;
  ActionExpert expert(cfg, 8);
  Tensor weights;
  expert.condense(build_context(random_bundle()), &weights);
  REQUIRE(weights.rank() == 3);
  int rows = weights.dim(0) * weights.dim(1);
  int nk = weights.dim(2);
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int k = 0; k < nk; ++k) s += weights.at((int64_t)r * nk + k);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("mean-pool variant condenses to N repeated vectors of context width") {
  ExpertConfig cfg;
  cfg.c_hol = 52;
  cfg.mean_pool_tokens = true;
  ActionExpert expert(cfg, 9);
  Tensor out = expert.condense(build_context(random_bundle()));
  CHECK(out.shape() == Shape{16, 52});
  for (int c = 0; c < 52; ++c) CHECK(out.at(c) == doctest::Approx(out.at(52 + c)));
}

TEST_CASE("ablation wiring changes exactly the intended parameter groups") {
  ExpertConfig full_cfg;
  full_cfg.c_hol = 52;
  ExpertConfig pool_cfg = full_cfg;
  pool_cfg.mean_pool_tokens = true;
  ActionExpert full(full_cfg, 10), pooled(pool_cfg, 10);
  std::set<std::string> full_names, pool_names;
  for (const auto& [n, t] : full.params().items()) full_names.insert(n);
  for (const auto& [n, t] : pooled.params().items()) pool_names.insert(n);
  for (const auto& n : pool_names) {
    CHECK(full_names.count(n) == 1);
    CHECK(n.find("uniperceiver") == std::string::npos);
    CHECK(n != "queries");
  }
  for (const auto& n : full_names) {
    if (!pool_names.count(n)) {
      bool is_condenser = n == "queries" || n.rfind("uniperceiver", 0) == 0;
      CHECK(is_condenser);
    }
  }
}

TEST_CASE("policy denoiser output shape, step bounds, and context sensitivity") {
  ExpertConfig cfg = micro_expert();
  ActionExpert expert(cfg, 11);
  rng::Stream g(12, "pd");
  Tensor chunk = Tensor::randn({cfg.chunk, 3}, g);
  Tensor ctx_a = Tensor::randn({cfg.n, cfg.c_agg}, g);
  Tensor out = expert.denoise(chunk, 2, ctx_a, 1);
  CHECK(out.shape() == Shape{cfg.chunk, 3});
  CHECK_THROWS(expert.denoise(chunk, 0, ctx_a, 1));
  CHECK_THROWS(expert.denoise(chunk, cfg.j + 1, ctx_a, 1));

  Tensor ctx_b = Tensor::randn({cfg.n, cfg.c_agg}, g);
  Tensor out_b = expert.denoise(chunk, 2, ctx_b, 1);
  double diff = 0;
  for (int64_t i = 0; i < out.numel(); ++i) diff = std::max(diff, std::abs(out.at(i) - out_b.at(i)));
  CHECK(diff > 0.0);
}

TEST_CASE("uni-perceiver and policy pass micro gradient checks") {
  DtypeGuard mode(Dtype::f64);
  ExpertConfig cfg = micro_expert();
  cfg.chunk = 4;
  ActionExpert expert(cfg, 13);
  rng::Stream g(14, "gc");
  Tensor context = Tensor::randn({cfg.t, cfg.c_hol, cfg.h, cfg.w}, g);
  Tensor chunk = Tensor::randn({cfg.chunk, 3}, g);
  Tensor target = Tensor::randn({cfg.chunk, 3}, g);
  auto loss_fn = [&]() {
    Tensor condensed = expert.condense(context);
    return mse(expert.denoise(chunk, 2, condensed, 2), target);
  };
  auto report = grad_check(loss_fn, expert.params(), 1e-3);
  INFO("worst rel err ", report.worst());
  CHECK(report.pass);
}

TEST_CASE("action normalization round-trips") {
  auto data = world::generate_dataset(3, {1}, 16, 20, 16);
  auto stats = compute_action_stats(data);
  std::vector<world::Action> chunk(data.episodes[0].actions.begin(),
                                   data.episodes[0].actions.begin() + 8);
  auto rec = denormalize_actions(normalize_actions(chunk, stats), stats);
  for (int i = 0; i < 8; ++i) {
    CHECK(std::abs(rec[i].dx - chunk[i].dx) < 1e-6);
    CHECK(std::abs(rec[i].dy - chunk[i].dy) < 1e-6);
    CHECK(rec[i].dgrip == chunk[i].dgrip);
  }
}

TEST_CASE("action reverse process recovers a0 with the exact-noise oracle") {
  auto sched = vdm::NoiseSchedule::linear(16);
  rng::Stream g(17, "aoracle");
  Tensor a0 = Tensor::randn({8, 3}, g);
  Tensor eps = Tensor::randn({8, 3}, g);
  double ab = sched.alpha_bar[sched.steps - 1];
  Tensor a_start = add(scale(a0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
  auto oracle = [&](const Tensor& a, int j) {
    double abj = sched.alpha_bar[j - 1];
    return scale(sub(a, scale(a0, std::sqrt(abj))), 1.0 / std::sqrt(1.0 - abj));
  };
  Tensor rec = vdm::reverse_process(sched, a_start, oracle, rng::Stream(0, "u"), true, "actions");
  for (int64_t i = 0; i < a0.numel(); ++i) CHECK(std::abs(rec.at(i) - a0.at(i)) < 1e-4);
}

TEST_CASE("sample_actions is seed-deterministic and calls the policy J times") {
  ExpertConfig cfg;
  cfg.c_hol = 52;
  ActionExpert expert(cfg, 18);
  auto sched = vdm::NoiseSchedule::linear(cfg.j);
  auto bundle = random_bundle();

  instr::reset_counters();
  auto a = expert.sample_actions(bundle, {}, 1, sched, 99);
  CHECK(instr::policy_calls() == (uint64_t)cfg.j);
  auto b = expert.sample_actions(bundle, {}, 1, sched, 99);
  REQUIRE(a.size() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(a[i].dx == b[i].dx);
    CHECK(a[i].dy == b[i].dy);
    CHECK(a[i].dgrip == b[i].dgrip);
  }
  for (const auto& act : a) {
    CHECK(std::abs(act.dx) <= world::kActionBound);
    CHECK(std::abs(act.dy) <= world::kActionBound);
    CHECK((act.dgrip == -1 || act.dgrip == 0 || act.dgrip == 1));
  }
}

TEST_CASE("stage 3 trains only the expert and starts at the unit-noise loss") {
  vdm::DenoiserConfig vcfg;
  vcfg.t = 2;
  vcfg.c = 4;
  vcfg.h = vcfg.w = 4;
  vcfg.taps = {4, 4, 2};
  vcfg.steps = 3;
  vcfg.width_top = 8;
  vcfg.width_mid = 8;
  vcfg.mid_blocks = 1;
  vcfg.heads = 2;
  vcfg.frame_size = 16;
  vdm::Denoiser model(vcfg, 19);
  model.freeze();
  auto vsched = vdm::NoiseSchedule::linear(vcfg.steps, 1e-4, 0.02, 60);

  distill::DecouplerSettings gs{"geo", 10, world::kGeoChannels, 8, 1, 2, vcfg.t, vcfg.h, vcfg.w};
  distill::DecouplerSettings ss{"sem", 10, world::kSemChannels, 8, 1, 2, vcfg.t, vcfg.h, vcfg.w};
  distill::Decoupler geo(gs, 20), sem(ss, 21);
  geo.params().freeze();
  sem.params().freeze();

  ExpertConfig ecfg = micro_expert();
  ecfg.c_hol = world::kGeoChannels + world::kSemChannels + 10;
  ecfg.t = vcfg.t;
  ecfg.h = vcfg.h;
  ecfg.w = vcfg.w;
  ecfg.j = 4;
  ActionExpert expert(ecfg, 22);

  auto psched = vdm::NoiseSchedule::linear(ecfg.j);
  PipelineModels models{&model, &vsched, &geo, &sem, &expert, &psched, {}};
  auto data = world::generate_dataset(3, {1}, 23, 20, vcfg.frame_size);

  Stage3Options opt;
  opt.lr = 0.0;
  opt.batch = 4;
  opt.samples_per_episode = 2;
  Stage3Trainer trainer(models, expert, data, opt);

  uint64_t vdm_hash = model.params().content_hash();
  uint64_t geo_hash = geo.params().content_hash();
  double acc = 0;
  for (int i = 0; i < 10; ++i) acc += trainer.step();
  double mean_loss = acc / 10;
  INFO("stage3 init loss ", mean_loss);
  CHECK(mean_loss > 0.8);
  CHECK(mean_loss < 1.2);
  CHECK(model.params().content_hash() == vdm_hash);
  CHECK(geo.params().content_hash() == geo_hash);

  // With a real learning rate the expert parameters move.
  Stage3Options opt2 = opt;
  opt2.lr = 1e-3;
  Stage3Trainer t2(models, expert, data, opt2);
  uint64_t before = expert.params().content_hash();
  t2.step();
  CHECK(expert.params().content_hash() != before);
  CHECK(model.params().content_hash() == vdm_hash);
}

TEST_CASE("closed-loop rollout: one denoiser pass per chunk") {
  vdm::DenoiserConfig vcfg;
  vcfg.t = 2;
  vcfg.c = 4;
  vcfg.h = vcfg.w = 4;
  vcfg.taps = {4, 4, 2};
  vcfg.steps = 3;
  vcfg.width_top = 8;
  vcfg.width_mid = 8;
  vcfg.mid_blocks = 1;
  vcfg.heads = 2;
  vcfg.frame_size = 16;
  vdm::Denoiser model(vcfg, 29);
  model.freeze();
  auto vsched = vdm::NoiseSchedule::linear(vcfg.steps, 1e-4, 0.02, 60);

  ExpertConfig ecfg = micro_expert();
  ecfg.c_hol = 10;  // raw features only
  ecfg.t = vcfg.t;
  ecfg.h = vcfg.h;
  ecfg.w = vcfg.w;
  ActionExpert expert(ecfg, 30);

  auto psched = vdm::NoiseSchedule::linear(ecfg.j);
  PipelineModels models{&model, &vsched, nullptr, nullptr, &expert, &psched,
                        {false, false, true}};

  instr::reset_counters();
  auto result = closed_loop_rollout(models, 5, 1, 24);
  CHECK(result.steps > 0);
  uint64_t expected_chunks = (uint64_t)((result.steps + 7) / 8);
  CHECK(instr::denoiser_calls() == expected_chunks);
  CHECK(result.trace.size() == expected_chunks);
  for (const auto& tr : result.trace) {
    CHECK(tr.wall_backbone_ms >= 0.0);
    CHECK((int)tr.actions.size() <= 8);
  }

  // Deterministic per (env seed, checkpoint).
  auto again = closed_loop_rollout(models, 5, 1, 24);
  CHECK(again.steps == result.steps);
  CHECK(again.success == result.success);
}
