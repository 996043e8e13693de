// svam command-line front end; links only the shared C API.
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "svam/svam.h"

namespace {

int finish(svam_pipeline* p, svam_status st) {
  if (st != SVAM_OK) {
    std::fprintf(stderr, "svam: %s\n", p ? svam_last_error(p) : svam_global_error());
  }
  svam_close(p);
  return (int)st;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shortcut video-action pipeline for a synthetic 2D manipulation world"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool has_seed = false;
  app.add_option("--config", config_path, "JSON run configuration")->required();
  app.add_option("--out", out_dir, "output directory override");
  auto* seed_opt = app.add_option("--seed", seed, "seed override");

  auto* gen = app.add_subcommand("gen-data", "generate the expert demonstration dataset");

  int stage = 1;
  bool resume = false;
  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", stage, "training stage 1|2|3")->required();
  train->add_flag("--resume", resume, "continue from the stage checkpoint");

  int episodes = 100, seeds = 3;
  bool traces = false;
  auto* eval = app.add_subcommand("eval", "closed-loop evaluation");
  eval->add_option("--episodes", episodes, "episodes per seed");
  eval->add_option("--seeds", seeds, "evaluation seeds");
  eval->add_flag("--traces", traces, "write a rollout trace (JSON lines)");

  std::string variant = "full";
  auto* ablate = app.add_subcommand("ablate", "train and evaluate an ablation variant");
  ablate->add_option("--variant", variant,
                     "full|no_geo|no_sem|gt_targets|no_uniperceiver|no_raw_feature|raw_only")
      ->required();
  ablate->add_option("--episodes", episodes, "episodes per seed");
  ablate->add_option("--seeds", seeds, "evaluation seeds");

  int trials = 50;
  auto* bench = app.add_subcommand("bench-latency", "latency medians and ratios");
  bench->add_option("--trials", trials, "timed trials after warm-up");

  bool inject_fault = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gradcheck->add_flag("--inject-fault", inject_fault, "corrupt gradients to prove sensitivity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : SVAM_ERR_CONFIG;
  }
  has_seed = seed_opt->count() > 0;

  svam_pipeline* p = nullptr;
  svam_status st = svam_open(config_path.c_str(), &p);
  if (st != SVAM_OK) return finish(p, st);
  if (has_seed) svam_set_seed(p, seed);
  if (!out_dir.empty()) {
    st = svam_set_out_dir(p, out_dir.c_str());
    if (st != SVAM_OK) return finish(p, st);
  }

  if (gen->parsed()) {
    st = svam_gen_data(p);
  } else if (train->parsed()) {
    st = svam_train(p, stage, resume ? 1 : 0);
  } else if (eval->parsed()) {
    st = svam_eval(p, episodes, seeds, traces ? 1 : 0);
  } else if (ablate->parsed()) {
    st = svam_ablate(p, variant.c_str(), episodes, seeds);
  } else if (bench->parsed()) {
    st = svam_bench_latency(p, trials);
  } else if (gradcheck->parsed()) {
    st = svam_gradcheck(p, inject_fault ? 1 : 0);
  }
  return finish(p, st);
}
