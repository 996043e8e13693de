#include "svam/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "svam/checkpoint.hpp"
#include "svam/error.hpp"
#include "svam/instrument.hpp"

namespace svam::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

double median(std::vector<double> v) {
  size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  return v[mid];
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

void ensure_parent_dir(const std::string& path) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const std::string& path) {
  ensure_parent_dir(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  return os;
}

void write_json(const std::string& path, const json& j) {
  auto os = open_out(path);
  os << j.dump(2) << "\n";
}

void verify_hash(const std::string& what, uint64_t stored, uint64_t live) {
  if (stored != live) {
    throw CheckpointError(what + " config hash mismatch: checkpoint " + hex64(stored) +
                          ", current config " + hex64(live));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// variants
// ---------------------------------------------------------------------------

VariantSpec VariantSpec::lookup(const std::string& name) {
  VariantSpec v;
  v.name = name;
  if (name == "full") return v;
  if (name == "no_geo") {
    v.train_geo = false;
    v.flags.use_geo = false;
    return v;
  }
  if (name == "no_sem") {
    v.train_sem = false;
    v.flags.use_sem = false;
    return v;
  }
  if (name == "gt_targets") {
    v.mode = distill::TargetMode::ground_truth;
    return v;
  }
  if (name == "no_uniperceiver") {
    v.mean_pool = true;
    return v;
  }
  if (name == "no_raw_feature") {
    v.flags.use_raw = false;
    return v;
  }
  if (name == "raw_only") {
    v.train_geo = v.train_sem = false;
    v.flags.use_geo = v.flags.use_sem = false;
    return v;
  }
  throw ConfigError("unknown ablation variant '" + name + "'");
}

const std::vector<std::string>& VariantSpec::names() {
  static const std::vector<std::string> all = {"full",           "no_geo",        "no_sem",
                                               "gt_targets",     "no_uniperceiver",
                                               "no_raw_feature", "raw_only"};
  return all;
}

policy::PipelineModels LoadedModels::view() const {
  policy::PipelineModels m;
  m.denoiser = denoiser.get();
  m.vdm_sched = &vdm_sched;
  m.geo = geo.get();
  m.sem = sem.get();
  m.expert = expert.get();
  m.policy_sched = &policy_sched;
  m.flags = flags;
  return m;
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

Pipeline::Pipeline(config::RunConfig cfg) : cfg_(std::move(cfg)) {}

std::string Pipeline::vdm_ckpt_path() const {
  return (fs::path(cfg_.paths.out) / "vdm.svamck").string();
}

std::string Pipeline::decoupler_ckpt_path(const std::string& branch,
                                          const std::string& dir) const {
  return (fs::path(dir) / ("decoupler_" + branch + ".svamck")).string();
}

std::string Pipeline::policy_ckpt_path(const std::string& dir) const {
  return (fs::path(dir) / "policy.svamck").string();
}

std::string Pipeline::cmd_gen_data() {
  auto set = world::generate_dataset(cfg_.world.episodes, cfg_.world.tasks, cfg_.training.seed,
                                     cfg_.world.h_ep, cfg_.world.frame);
  ensure_parent_dir(cfg_.paths.data);
  world::save_dataset(set, cfg_.paths.data);
  std::printf("[gen-data] wrote %d episodes to %s\n", (int)set.episodes.size(),
              cfg_.paths.data.c_str());
  return cfg_.paths.data;
}

std::unique_ptr<vdm::Denoiser> Pipeline::load_vdm() const {
  auto ck = ckpt::load(vdm_ckpt_path());
  verify_hash("vdm checkpoint", ck.config_hash, cfg_.hash_vdm());
  uint64_t init = rng::Stream(cfg_.training.seed, "init/vdm").u64();
  auto model = std::make_unique<vdm::Denoiser>(vdm::DenoiserConfig::from(cfg_), init);
  ckpt::load_params(model->params(), ck);
  return model;
}

uint64_t Pipeline::teacher_model_key(const vdm::Denoiser& model) const {
  return rng::mix64(cfg_.hash_vdm() ^ model.params().content_hash());
}

void Pipeline::cmd_train(int stage, bool resume) {
  if (stage < 1 || stage > 3) throw ConfigError("train: stage must be 1, 2 or 3");
  fs::create_directories(cfg_.paths.out);
  VariantSpec full = VariantSpec::lookup("full");
  if (stage == 1) {
    train_stage1(resume);
  } else if (stage == 2) {
    train_stage2(full, cfg_.paths.out, resume);
  } else {
    train_stage3(full, cfg_.paths.out, resume);
  }
}

void Pipeline::train_stage1(bool resume) {
  auto data = world::load_dataset(cfg_.paths.data);
  uint64_t init = rng::Stream(cfg_.training.seed, "init/vdm").u64();
  vdm::Denoiser model(vdm::DenoiserConfig::from(cfg_), init);
  auto sched = vdm::NoiseSchedule::linear(cfg_.vdm.s, cfg_.vdm.beta_start, cfg_.vdm.beta_end,
                                          cfg_.vdm.beta_base_steps);
  vdm::Stage1Trainer trainer(model, data, sched, cfg_.training.lr, cfg_.training.batch,
                             cfg_.vdm.clip_stride,
                             rng::Stream(cfg_.training.seed, "train/stage1").u64());
  std::string csv_path = (fs::path(cfg_.paths.out) / "stage1_loss.csv").string();
  if (resume && fs::exists(vdm_ckpt_path())) {
    auto ck = ckpt::load(vdm_ckpt_path());
    verify_hash("vdm checkpoint", ck.config_hash, cfg_.hash_vdm());
    ckpt::load_params(model.params(), ck);
    ckpt::load_adam(trainer.optimizer(), model.params(), ck);
  }
  std::ofstream csv;
  if (resume && fs::exists(csv_path)) {
    csv.open(csv_path, std::ios::app);
  } else {
    csv = open_out(csv_path);
    csv << "step,loss\n";
  }
  int budget = cfg_.training.steps[0];
  while (trainer.optimizer().step_count() < budget) {
    double loss = trainer.step();
    int64_t done = trainer.optimizer().step_count();
    csv << done << "," << loss << "\n";
    if (done % cfg_.training.log_every == 0 || done == budget) {
      std::printf("[stage1] step %lld/%d loss %.4f\n", (long long)done, budget, loss);
    }
  }
  ckpt::Checkpoint ck;
  ck.config_hash = cfg_.hash_vdm();
  ckpt::dump_params(model.params(), ck);
  ckpt::dump_adam(trainer.optimizer(), model.params(), ck);
  ckpt::save(vdm_ckpt_path(), ck);
  std::printf("[stage1] wrote %s\n", vdm_ckpt_path().c_str());
}

void Pipeline::train_stage2(const VariantSpec& v, const std::string& dir, bool resume) {
  if (!v.train_geo && !v.train_sem) return;  // raw_only skips stage 2 entirely
  auto data = world::load_dataset(cfg_.paths.data);
  auto model = load_vdm();
  model->freeze();
  auto sched = vdm::NoiseSchedule::linear(cfg_.vdm.s, cfg_.vdm.beta_start, cfg_.vdm.beta_end,
                                          cfg_.vdm.beta_base_steps);
  fs::create_directories(dir);

  std::unique_ptr<distill::Decoupler> geo, sem;
  if (v.train_geo) {
    geo = std::make_unique<distill::Decoupler>(
        distill::DecouplerSettings::from(cfg_, "geo"),
        rng::Stream(cfg_.training.seed, "init/decoupler_geo").u64());
  }
  if (v.train_sem) {
    sem = std::make_unique<distill::Decoupler>(
        distill::DecouplerSettings::from(cfg_, "sem"),
        rng::Stream(cfg_.training.seed, "init/decoupler_sem").u64());
  }

  distill::Stage2Options opt;
  opt.mode = v.mode;
  opt.train_geo = v.train_geo;
  opt.train_sem = v.train_sem;
  opt.lr = cfg_.training.lr;
  opt.batch = cfg_.training.batch;
  opt.clip_stride = cfg_.vdm.clip_stride;
  opt.seed = rng::Stream(cfg_.training.seed, "train/stage2").u64();
  if (v.mode == distill::TargetMode::self_distill) {
    opt.cache_dir = (fs::path(cfg_.paths.out) / "cache").string();
    opt.model_key = teacher_model_key(*model);
  }
  distill::Stage2Trainer trainer(*model, sched, data, geo.get(), sem.get(), opt);
  std::printf("[stage2] mode=%s branches=%s%s\n",
              v.mode == distill::TargetMode::ground_truth ? "gt" : "self",
              v.train_geo ? "geo " : "", v.train_sem ? "sem" : "");

  uint64_t vdm_hash_before = model->params().content_hash();
  auto geo_csv_path = (fs::path(dir) / "stage2_geo_loss.csv").string();
  auto sem_csv_path = (fs::path(dir) / "stage2_sem_loss.csv").string();
  std::ofstream geo_csv, sem_csv;
  auto open_csv = [&](std::ofstream& os, const std::string& path, bool active) {
    if (!active) return;
    os = open_out(path);
    os << "step,loss\n";
  };
  if (resume) {
    if (v.train_geo && fs::exists(decoupler_ckpt_path("geo", dir))) {
      auto ck = ckpt::load(decoupler_ckpt_path("geo", dir));
      verify_hash("geo decoupler checkpoint", ck.config_hash, cfg_.hash_decouplers());
      ckpt::load_params(geo->params(), ck);
      ckpt::load_adam(trainer.geo_optimizer(), geo->params(), ck);
    }
    if (v.train_sem && fs::exists(decoupler_ckpt_path("sem", dir))) {
      auto ck = ckpt::load(decoupler_ckpt_path("sem", dir));
      verify_hash("sem decoupler checkpoint", ck.config_hash, cfg_.hash_decouplers());
      ckpt::load_params(sem->params(), ck);
      ckpt::load_adam(trainer.sem_optimizer(), sem->params(), ck);
    }
  }
  if (v.train_geo && resume && fs::exists(geo_csv_path)) {
    geo_csv.open(geo_csv_path, std::ios::app);
  } else {
    open_csv(geo_csv, geo_csv_path, v.train_geo);
  }
  if (v.train_sem && resume && fs::exists(sem_csv_path)) {
    sem_csv.open(sem_csv_path, std::ios::app);
  } else {
    open_csv(sem_csv, sem_csv_path, v.train_sem);
  }

  int budget = cfg_.training.steps[1];
  int64_t done = std::max(trainer.geo_optimizer().step_count(), trainer.sem_optimizer().step_count());
  while (done < budget) {
    auto loss = trainer.step();
    done = std::max(trainer.geo_optimizer().step_count(), trainer.sem_optimizer().step_count());
    if (v.train_geo) geo_csv << done << "," << loss.geo << "\n";
    if (v.train_sem) sem_csv << done << "," << loss.sem << "\n";
    if (done % cfg_.training.log_every == 0 || done == budget) {
      std::printf("[stage2] step %lld/%d geo %.5f sem %.5f\n", (long long)done, budget, loss.geo,
                  loss.sem);
    }
  }
  if (!trainer.shared_trajectory_ok()) {
    throw Error(Status::error, "stage 2: shared-trajectory assertion failed");
  }
  if (model->params().content_hash() != vdm_hash_before) {
    throw Error(Status::error, "stage 2: frozen video model changed");
  }
  std::printf("[stage2] shared-trajectory assertion held on every batch\n");

  auto save_branch = [&](distill::Decoupler* dec, Adam& opt_state, const std::string& branch) {
    if (!dec) return;
    ckpt::Checkpoint ck;
    ck.config_hash = cfg_.hash_decouplers();
    ckpt::dump_params(dec->params(), ck);
    ckpt::dump_adam(opt_state, dec->params(), ck);
    ckpt::save(decoupler_ckpt_path(branch, dir), ck);
  };
  save_branch(geo.get(), trainer.geo_optimizer(), "geo");
  save_branch(sem.get(), trainer.sem_optimizer(), "sem");
}

void Pipeline::train_stage3(const VariantSpec& v, const std::string& dir, bool resume) {
  auto data = world::load_dataset(cfg_.paths.data);
  auto model = load_vdm();
  model->freeze();
  fs::create_directories(dir);

  LoadedModels lm;
  lm.denoiser = std::move(model);
  lm.vdm_sched = vdm::NoiseSchedule::linear(cfg_.vdm.s, cfg_.vdm.beta_start, cfg_.vdm.beta_end,
                                            cfg_.vdm.beta_base_steps);
  lm.policy_sched = vdm::NoiseSchedule::linear(cfg_.policy.j, cfg_.vdm.beta_start,
                                               cfg_.vdm.beta_end, cfg_.vdm.beta_base_steps);
  lm.flags = v.flags;
  if (v.flags.use_geo) {
    auto ck = ckpt::load(decoupler_ckpt_path("geo", dir));
    verify_hash("geo decoupler checkpoint", ck.config_hash, cfg_.hash_decouplers());
    lm.geo = std::make_unique<distill::Decoupler>(distill::DecouplerSettings::from(cfg_, "geo"), 1);
    ckpt::load_params(lm.geo->params(), ck);
    lm.geo->params().freeze();
  }
  if (v.flags.use_sem) {
    auto ck = ckpt::load(decoupler_ckpt_path("sem", dir));
    verify_hash("sem decoupler checkpoint", ck.config_hash, cfg_.hash_decouplers());
    lm.sem = std::make_unique<distill::Decoupler>(distill::DecouplerSettings::from(cfg_, "sem"), 1);
    ckpt::load_params(lm.sem->params(), ck);
    lm.sem->params().freeze();
  }

  policy::ExpertConfig ecfg = policy::ExpertConfig::from(cfg_, v.flags, v.mean_pool);
  policy::ActionExpert expert(ecfg, rng::Stream(cfg_.training.seed, "init/expert").u64());

  policy::Stage3Options opt;
  opt.lr = cfg_.training.lr;
  opt.batch = cfg_.training.batch;
  opt.seed = rng::Stream(cfg_.training.seed, "train/stage3").u64();
  opt.samples_per_episode = cfg_.training.samples_per_episode;
  auto models_view = lm.view();
  policy::Stage3Trainer trainer(models_view, expert, data, opt);

  uint64_t frozen_before = lm.denoiser->params().content_hash() ^
                           (lm.geo ? lm.geo->params().content_hash() : 0) ^
                           (lm.sem ? lm.sem->params().content_hash() : 0);

  auto csv_path = (fs::path(dir) / "stage3_loss.csv").string();
  std::ofstream csv;
  if (resume && fs::exists(policy_ckpt_path(dir))) {
    auto ck = ckpt::load(policy_ckpt_path(dir));
    verify_hash("policy checkpoint", ck.config_hash, cfg_.hash_policy());
    ckpt::load_params(expert.params(), ck);
    ckpt::load_adam(trainer.optimizer(), expert.params(), ck);
  }
  if (resume && fs::exists(csv_path)) {
    csv.open(csv_path, std::ios::app);
  } else {
    csv = open_out(csv_path);
    csv << "step,loss\n";
  }

  int budget = cfg_.training.steps[2];
  while (trainer.optimizer().step_count() < budget) {
    double loss = trainer.step();
    int64_t done = trainer.optimizer().step_count();
    csv << done << "," << loss << "\n";
    if (done % cfg_.training.log_every == 0 || done == budget) {
      std::printf("[stage3] step %lld/%d loss %.4f\n", (long long)done, budget, loss);
    }
  }

  uint64_t frozen_after = lm.denoiser->params().content_hash() ^
                          (lm.geo ? lm.geo->params().content_hash() : 0) ^
                          (lm.sem ? lm.sem->params().content_hash() : 0);
  if (frozen_before != frozen_after) {
    throw Error(Status::error, "stage 3: frozen modules changed");
  }

  ckpt::Checkpoint ck;
  ck.config_hash = cfg_.hash_policy();
  ckpt::dump_params(expert.params(), ck);
  ckpt::dump_adam(trainer.optimizer(), expert.params(), ck);
  const auto& st = expert.stats();
  ck.tensors.push_back({"action_stats.mean", {3},
                        {(float)st.mean[0], (float)st.mean[1], (float)st.mean[2]}});
  ck.tensors.push_back({"action_stats.stddev", {3},
                        {(float)st.stddev[0], (float)st.stddev[1], (float)st.stddev[2]}});
  ck.tensors.push_back({"context_flags", {4},
                        {v.flags.use_geo ? 1.f : 0.f, v.flags.use_sem ? 1.f : 0.f,
                         v.flags.use_raw ? 1.f : 0.f, v.mean_pool ? 1.f : 0.f}});
  ckpt::save(policy_ckpt_path(dir), ck);
  std::printf("[stage3] wrote %s\n", policy_ckpt_path(dir).c_str());
}

LoadedModels Pipeline::load_models(const std::string& dir) const {
  LoadedModels lm;
  lm.denoiser = load_vdm();
  lm.denoiser->freeze();
  lm.vdm_sched = vdm::NoiseSchedule::linear(cfg_.vdm.s, cfg_.vdm.beta_start, cfg_.vdm.beta_end,
                                            cfg_.vdm.beta_base_steps);
  lm.policy_sched = vdm::NoiseSchedule::linear(cfg_.policy.j, cfg_.vdm.beta_start,
                                               cfg_.vdm.beta_end, cfg_.vdm.beta_base_steps);

  auto pk = ckpt::load(policy_ckpt_path(dir));
  verify_hash("policy checkpoint", pk.config_hash, cfg_.hash_policy());
  const auto* flags_t = pk.find("context_flags");
  if (!flags_t || flags_t->data.size() != 4) {
    throw CheckpointError("policy checkpoint is missing context flags");
  }
  lm.flags.use_geo = flags_t->data[0] != 0.f;
  lm.flags.use_sem = flags_t->data[1] != 0.f;
  lm.flags.use_raw = flags_t->data[2] != 0.f;
  lm.mean_pool = flags_t->data[3] != 0.f;

  policy::ExpertConfig ecfg = policy::ExpertConfig::from(cfg_, lm.flags, lm.mean_pool);
  lm.expert = std::make_unique<policy::ActionExpert>(ecfg, 1);
  ckpt::load_params(lm.expert->params(), pk);
  const auto* mean_t = pk.find("action_stats.mean");
  const auto* std_t = pk.find("action_stats.stddev");
  if (!mean_t || !std_t) throw CheckpointError("policy checkpoint is missing action stats");
  for (int i = 0; i < 3; ++i) {
    lm.expert->stats().mean[i] = mean_t->data[i];
    lm.expert->stats().stddev[i] = std_t->data[i];
  }
  lm.expert->freeze();

  if (lm.flags.use_geo) {
    auto ck = ckpt::load(decoupler_ckpt_path("geo", dir));
    verify_hash("geo decoupler checkpoint", ck.config_hash, cfg_.hash_decouplers());
    lm.geo = std::make_unique<distill::Decoupler>(distill::DecouplerSettings::from(cfg_, "geo"), 1);
    ckpt::load_params(lm.geo->params(), ck);
    lm.geo->params().freeze();
  }
  if (lm.flags.use_sem) {
    auto ck = ckpt::load(decoupler_ckpt_path("sem", dir));
    verify_hash("sem decoupler checkpoint", ck.config_hash, cfg_.hash_decouplers());
    lm.sem = std::make_unique<distill::Decoupler>(distill::DecouplerSettings::from(cfg_, "sem"), 1);
    ckpt::load_params(lm.sem->params(), ck);
    lm.sem->params().freeze();
  }
  return lm;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

void write_trace_jsonl(const std::string& path, const policy::RolloutResult& result) {
  auto os = open_out(path);
  for (const auto& tr : result.trace) {
    json actions = json::array();
    for (const auto& a : tr.actions) {
      actions.push_back(json::array({a.dx, a.dy, (double)a.dgrip}));
    }
    json line{{"chunk_index", tr.chunk_index},
              {"wall_ms",
               {{"backbone", tr.wall_backbone_ms},
                {"decouplers", tr.wall_decouplers_ms},
                {"expert", tr.wall_expert_ms}}},
              {"actions", actions},
              {"success_so_far", tr.success_so_far}};
    os << line.dump() << "\n";
  }
}

nlohmann::json Pipeline::eval_models(const LoadedModels& models, int episodes, int seeds,
                                     const std::string& report_path, const std::string& csv_path,
                                     bool write_traces) {
  auto view = models.view();
  json tasks = json::object();
  auto csv = open_out(csv_path);
  csv << "task,seed_index,episode,env_seed,success,steps\n";
  bool wrote_trace = false;
  for (int task : cfg_.world.tasks) {
    json per_seed = json::array();
    json episodes_json = json::array();
    std::vector<double> rates;
    for (int si = 0; si < seeds; ++si) {
      int ok = 0;
      double steps_sum = 0;
      for (int e = 0; e < episodes; ++e) {
        uint64_t env_seed = rng::Stream(cfg_.training.seed, "eval")
                                .child("task", (uint64_t)task)
                                .child("seed", (uint64_t)si)
                                .child("episode", (uint64_t)e)
                                .u64();
        auto result = policy::closed_loop_rollout(view, env_seed, task, cfg_.world.h_ep);
        ok += result.success ? 1 : 0;
        steps_sum += result.steps;
        episodes_json.push_back(json{{"seed_index", si},
                                     {"episode", e},
                                     {"env_seed", env_seed},
                                     {"success", result.success},
                                     {"steps", result.steps}});
        csv << task << "," << si << "," << e << "," << env_seed << ","
            << (result.success ? 1 : 0) << "," << result.steps << "\n";
        if (write_traces && !wrote_trace) {
          write_trace_jsonl((fs::path(report_path).parent_path() / "rollout_trace.jsonl").string(),
                            result);
          wrote_trace = true;
        }
      }
      double rate = episodes > 0 ? (double)ok / episodes : 0.0;
      rates.push_back(rate);
      per_seed.push_back(json{{"seed_index", si},
                              {"success_rate", rate},
                              {"mean_steps", episodes > 0 ? steps_sum / episodes : 0.0}});
    }
    double mean = 0;
    for (double r : rates) mean += r;
    mean /= rates.empty() ? 1 : rates.size();
    double var = 0;
    for (double r : rates) var += (r - mean) * (r - mean);
    var /= rates.empty() ? 1 : rates.size();
    tasks[std::to_string(task)] = json{{"per_seed", per_seed},
                                       {"success_mean", mean},
                                       {"success_std", std::sqrt(var)},
                                       {"episodes", episodes_json}};
  }
  json report{{"config_hash", hex64(cfg_.hash_full())},
              {"episodes_per_seed", episodes},
              {"seeds", seeds},
              {"tasks", tasks}};
  write_json(report_path, report);
  return report;
}

nlohmann::json Pipeline::cmd_eval(int episodes, int seeds, bool write_traces) {
  auto models = load_models(cfg_.paths.out);
  auto report = eval_models(models, episodes, seeds,
                            (fs::path(cfg_.paths.out) / "eval_report.json").string(),
                            (fs::path(cfg_.paths.out) / "eval_episodes.csv").string(),
                            write_traces);
  for (auto& [task, entry] : report.at("tasks").items()) {
    std::printf("[eval] task %s success %.3f +- %.3f\n", task.c_str(),
                entry.at("success_mean").get<double>(), entry.at("success_std").get<double>());
  }
  return report;
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

nlohmann::json Pipeline::cmd_ablate(const std::string& variant, int episodes, int seeds) {
  VariantSpec spec = VariantSpec::lookup(variant);
  std::string matrix_path = (fs::path(cfg_.paths.out) / "ablation_matrix.json").string();
  json matrix;
  if (fs::exists(matrix_path)) {
    std::ifstream is(matrix_path);
    matrix = json::parse(is, nullptr, /*allow_exceptions=*/false);
    if (matrix.is_discarded()) matrix = json::object();
  } else {
    matrix = json::object();
  }
  if (!matrix.contains("variants")) matrix["variants"] = json::object();
  matrix["reference"] = "full";

  auto run_variant = [&](const VariantSpec& v) -> json {
    std::string dir = (fs::path(cfg_.paths.out) / "ablation" / v.name).string();
    fs::create_directories(dir);
    std::printf("[ablate] variant %s: stage 2\n", v.name.c_str());
    train_stage2(v, dir, /*resume=*/false);
    std::printf("[ablate] variant %s: stage 3\n", v.name.c_str());
    train_stage3(v, dir, /*resume=*/false);
    auto models = load_models(dir);
    auto report = eval_models(models, episodes, seeds,
                              (fs::path(dir) / "eval_report.json").string(),
                              (fs::path(dir) / "eval_episodes.csv").string(), false);
    json row;
    row["stage2_skipped"] = !v.train_geo && !v.train_sem;
    row["mode"] = v.mode == distill::TargetMode::ground_truth ? "gt" : "self";
    row["tasks"] = report["tasks"];
    double mean = 0;
    int count = 0;
    for (auto& [task, entry] : report["tasks"].items()) {
      mean += entry["success_mean"].get<double>();
      ++count;
    }
    row["success_mean"] = count ? mean / count : 0.0;
    return row;
  };

  // The matrix always carries the full variant as its reference row.
  if (variant != "full" && !matrix["variants"].contains("full")) {
    matrix["variants"]["full"] = run_variant(VariantSpec::lookup("full"));
  }
  matrix["variants"][spec.name] = run_variant(spec);

  if (matrix["variants"].contains("full")) {
    double full_mean = matrix["variants"]["full"]["success_mean"].get<double>();
    json deltas = json::object();
    for (auto& [name, row] : matrix["variants"].items()) {
      deltas[name] = row["success_mean"].get<double>() - full_mean;
    }
    matrix["delta_vs_full"] = deltas;
  }

  // Bootstrap confidence interval on the headline (full - raw_only) gap.
  if (matrix["variants"].contains("full") && matrix["variants"].contains("raw_only")) {
    auto collect = [&](const std::string& name) {
      std::vector<int> successes;
      for (auto& [task, entry] : matrix["variants"][name]["tasks"].items()) {
        for (auto& ep : entry["episodes"]) successes.push_back(ep["success"].get<bool>() ? 1 : 0);
      }
      return successes;
    };
    auto full_s = collect("full");
    auto raw_s = collect("raw_only");
    if (!full_s.empty() && !raw_s.empty()) {
      rng::Stream boot(cfg_.training.seed, "bootstrap");
      std::vector<double> deltas;
      for (int b = 0; b < 1000; ++b) {
        double pf = 0, pr = 0;
        for (size_t i = 0; i < full_s.size(); ++i) {
          pf += full_s[boot.uniform_int(0, (int)full_s.size() - 1)];
        }
        for (size_t i = 0; i < raw_s.size(); ++i) {
          pr += raw_s[boot.uniform_int(0, (int)raw_s.size() - 1)];
        }
        deltas.push_back(pf / full_s.size() - pr / raw_s.size());
      }
      std::sort(deltas.begin(), deltas.end());
      matrix["full_vs_raw_only"] = json{{"delta_ci_low", deltas[25]},
                                        {"delta_ci_high", deltas[974]},
                                        {"bootstrap_samples", 1000}};
    }
  }

  write_json(matrix_path, matrix);
  auto csv = open_out((fs::path(cfg_.paths.out) / "ablation_matrix.csv").string());
  csv << "variant,success_mean,delta_vs_full\n";
  for (auto& [name, row] : matrix["variants"].items()) {
    double delta = matrix.contains("delta_vs_full") && matrix["delta_vs_full"].contains(name)
                       ? matrix["delta_vs_full"][name].get<double>()
                       : 0.0;
    csv << name << "," << row["success_mean"].get<double>() << "," << delta << "\n";
  }
  return matrix;
}

// ---------------------------------------------------------------------------
// latency benchmark
// ---------------------------------------------------------------------------

nlohmann::json Pipeline::cmd_bench_latency(int trials) {
  auto models = load_models(cfg_.paths.out);
  auto view = models.view();
  int task = cfg_.world.tasks.front();
  world::Frame obs = world::render(world::reset(424242, task), cfg_.world.frame);
  const auto& dcfg = models.denoiser->config();

  std::vector<double> t_multi, t_one, t_dec, t_expert;
  int total = trials + 5;  // first five are warm-up
  for (int i = 0; i < total; ++i) {
    uint64_t seed = 1000 + (uint64_t)i;
    double a = now_ms();
    auto sample = vdm::ddpm_sample(*models.denoiser, obs, task, models.vdm_sched, seed);
    double b = now_ms();
    Tensor feats = vdm::one_step_features(*models.denoiser, obs, task, models.vdm_sched, seed);
    double c = now_ms();
    policy::ForesightBundle bundle;
    bundle.raw = feats;
    {
      NoGradGuard ng;
      if (models.geo) {
        bundle.geo = models.geo->forward(distill::fuse_input(
            feats, distill::reference_anchor(obs, "geo", dcfg.h, dcfg.w)));
      }
      if (models.sem) {
        bundle.sem = models.sem->forward(distill::fuse_input(
            feats, distill::reference_anchor(obs, "sem", dcfg.h, dcfg.w)));
      }
    }
    double d = now_ms();
    auto actions = models.expert->sample_actions(bundle, models.flags, task, models.policy_sched,
                                                 seed);
    double e = now_ms();
    (void)sample;
    (void)actions;
    if (i >= 5) {
      t_multi.push_back(b - a);
      t_one.push_back(c - b);
      t_dec.push_back(d - c);
      t_expert.push_back(e - d);
    }
  }

  double m_multi = median(t_multi);
  double m_one = median(t_one);
  double m_dec = median(t_dec);
  double m_expert = median(t_expert);
  json out{{"trials", trials},
           {"medians_ms",
            {{"multi_step_generation", m_multi},
             {"one_step_features", m_one},
             {"decouplers", m_dec},
             {"action_expert", m_expert}}},
           {"ratios",
            {{"multi_over_one", m_multi / m_one},
             {"overhead_fraction", (m_dec + m_expert) / m_one}}}};
  write_json((fs::path(cfg_.paths.out) / "latency.json").string(), out);
  std::printf("[bench] multi-step %.2f ms | one-step %.2f ms | decouplers %.2f ms | expert %.2f ms\n",
              m_multi, m_one, m_dec, m_expert);
  std::printf("[bench] multi/one ratio %.2f | (dec+expert)/one overhead %.2f\n", m_multi / m_one,
              (m_dec + m_expert) / m_one);
  return out;
}

// ---------------------------------------------------------------------------
// gradient check
// ---------------------------------------------------------------------------

nlohmann::json Pipeline::cmd_gradcheck(bool inject_fault) {
  DtypeGuard mode(Dtype::f64);
  double tol = 1e-3;
  double corrupt = inject_fault ? 2.0 : 1.0;
  json blocks = json::object();
  bool all_pass = true;

  auto record = [&](const std::string& name, const GradCheckReport& report) {
    json groups = json::array();
    for (const auto& e : report.entries) {
      groups.push_back(json{{"name", e.name}, {"max_rel_err", e.max_rel_err},
                            {"elements", e.elements}});
    }
    blocks[name] = json{{"pass", report.pass}, {"worst", report.worst()}, {"groups", groups}};
    all_pass = all_pass && report.pass;
    std::printf("[gradcheck] %-16s %s (worst rel err %.2e over %zu groups)\n", name.c_str(),
                report.pass ? "pass" : "FAIL", report.worst(), report.entries.size());
  };

  {
    vdm::DenoiserConfig dc;
    dc.t = 2;
    dc.c = 4;
    dc.h = dc.w = 4;
    dc.taps = {4, 4, 2};
    dc.steps = 4;
    dc.width_top = 8;
    dc.width_mid = 8;
    dc.mid_blocks = 1;
    dc.heads = 2;
    dc.frame_size = 16;
    vdm::Denoiser model(dc, 17);
    rng::Stream g(5, "gradcheck/vdm");
    Tensor z = Tensor::randn({dc.t, dc.c, dc.h, dc.w}, g);
    Tensor target = Tensor::randn(z.shape(), g);
    world::Frame obs = world::render(world::reset(3, 1), dc.frame_size);
    Tensor feat_target;
    auto loss_fn = [&]() {
      auto [eps, taps] = model.forward(z, 2, obs, 1);
      Tensor feat = concat({interpolate_bilinear(taps.volumes[0], dc.h, dc.w), taps.volumes[1],
                            taps.volumes[2]}, 1);
      if (!feat_target.defined()) {
        rng::Stream fg(6, "ft");
        feat_target = Tensor::randn(feat.shape(), fg);
      }
      return add(mse(eps, target), mse(feat, feat_target));
    };
    record("denoiser", grad_check(loss_fn, model.params(), tol, 1e-5, corrupt));
  }

  for (std::string branch : {std::string("geo"), std::string("sem")}) {
    distill::DecouplerSettings ds;
    ds.branch = branch;
    ds.c_in = 10;
    ds.c_out = branch == "geo" ? world::kGeoChannels : world::kSemChannels;
    ds.c_hidden = 8;
    ds.k = 2;
    ds.heads = 2;
    ds.t = 2;
    ds.h = ds.w = 2;
    distill::Decoupler dec(ds, 31);
    rng::Stream g(7, "gradcheck/dec");
    Tensor fused = Tensor::randn({ds.t, ds.c_in + ds.c_out, ds.h, ds.w}, g);
    Tensor target = Tensor::randn({ds.t, ds.c_out, ds.h, ds.w}, g);
    auto loss_fn = [&]() { return distill::distill_loss(dec.forward(fused), target); };
    record("decoupler_" + branch, grad_check(loss_fn, dec.params(), tol, 1e-5, corrupt));
  }

  {
    policy::ExpertConfig ec;
    ec.n = 4;
    ec.c_agg = 8;
    ec.j = 4;
    ec.chunk = 4;
    ec.width = 8;
    ec.blocks = 2;
    ec.heads = 2;
    ec.c_hol = 6;
    ec.t = 2;
    ec.h = ec.w = 2;
    policy::ActionExpert expert(ec, 41);
    rng::Stream g(9, "gradcheck/expert");
    Tensor context = Tensor::randn({ec.t, ec.c_hol, ec.h, ec.w}, g);
    Tensor chunk = Tensor::randn({ec.chunk, 3}, g);
    Tensor target = Tensor::randn({ec.chunk, 3}, g);
    auto loss_fn = [&]() {
      return mse(expert.denoise(chunk, 2, expert.condense(context), 1), target);
    };
    record("uni_perceiver_policy", grad_check(loss_fn, expert.params(), tol, 1e-5, corrupt));
  }

  json out{{"tol", tol}, {"inject_fault", inject_fault}, {"pass", all_pass}, {"blocks", blocks}};
  fs::create_directories(cfg_.paths.out);
  write_json((fs::path(cfg_.paths.out) / "gradcheck_report.json").string(), out);
  return out;
}

}  // namespace svam::pipeline
