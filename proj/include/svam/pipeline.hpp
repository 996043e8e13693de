#pragma once

#include <memory>
#include <string>

#include "json.hpp"
#include "svam/config.hpp"
#include "svam/distill.hpp"
#include "svam/policy.hpp"
#include "svam/vdm.hpp"

namespace svam::pipeline {

// One Table-3 row: which stages it retrains and how the context is wired.
struct VariantSpec {
  std::string name = "full";
  bool train_geo = true;
  bool train_sem = true;
  distill::TargetMode mode = distill::TargetMode::self_distill;
  policy::ContextFlags flags;
  bool mean_pool = false;

  static VariantSpec lookup(const std::string& name);
  static const std::vector<std::string>& names();
};

// Bundle of everything the control loop needs, owned together.
struct LoadedModels {
  std::unique_ptr<vdm::Denoiser> denoiser;
  std::unique_ptr<distill::Decoupler> geo, sem;
  std::unique_ptr<policy::ActionExpert> expert;
  vdm::NoiseSchedule vdm_sched, policy_sched;
  policy::ContextFlags flags;
  bool mean_pool = false;

  policy::PipelineModels view() const;
};

class Pipeline {
 public:
  explicit Pipeline(config::RunConfig cfg);

  void set_seed(uint64_t seed) { cfg_.training.seed = seed; }
  void set_out_dir(const std::string& dir) { cfg_.paths.out = dir; }
  void set_data_path(const std::string& path) { cfg_.paths.data = path; }
  const config::RunConfig& config() const { return cfg_; }

  std::string cmd_gen_data();
  void cmd_train(int stage, bool resume = false);
  nlohmann::json cmd_eval(int episodes = 100, int seeds = 3, bool write_traces = false);
  nlohmann::json cmd_ablate(const std::string& variant, int episodes = 100, int seeds = 3);
  nlohmann::json cmd_bench_latency(int trials = 50);
  nlohmann::json cmd_gradcheck(bool inject_fault = false);

  // Checkpoint locations inside `dir` (the run dir for the full model, a
  // variant subdirectory for ablations).
  std::string vdm_ckpt_path() const;
  std::string decoupler_ckpt_path(const std::string& branch, const std::string& dir) const;
  std::string policy_ckpt_path(const std::string& dir) const;
  std::string out_dir() const { return cfg_.paths.out; }

  LoadedModels load_models(const std::string& dir) const;

 private:
  void train_stage1(bool resume);
  void train_stage2(const VariantSpec& v, const std::string& dir, bool resume);
  void train_stage3(const VariantSpec& v, const std::string& dir, bool resume);
  nlohmann::json eval_models(const LoadedModels& models, int episodes, int seeds,
                             const std::string& report_path, const std::string& csv_path,
                             bool write_traces);
  std::unique_ptr<vdm::Denoiser> load_vdm() const;
  uint64_t teacher_model_key(const vdm::Denoiser& model) const;

  config::RunConfig cfg_;
};

void write_trace_jsonl(const std::string& path, const policy::RolloutResult& result);

}  // namespace svam::pipeline
