#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "svam/checkpoint.hpp"
#include "svam/pipeline.hpp"

using namespace svam;
using namespace svam::pipeline;
namespace fs = std::filesystem;

namespace {

std::string tiny_config_text(const std::string& dir) {
  return R"({
    "world": {"tasks": [1], "h_ep": 24, "frame": 32, "episodes": 4},
    "vdm": {"t": 2, "s": 4, "taps": [6, 6, 4], "width_top": 16, "width_mid": 16,
            "mid_blocks": 1, "clip_stride": 4},
    "decouplers": {"c_hidden": 8, "heads": 2, "k": 1},
    "policy": {"n": 4, "c_agg": 16, "j": 4, "width": 16, "blocks": 1, "heads": 2},
    "training": {"steps": [5, 3, 5], "lr": 0.001, "batch": 2, "seed": 5,
                 "samples_per_episode": 2, "log_every": 100},
    "paths": {"data": ")" + dir + R"(/dataset.svamds", "out": ")" + dir + R"("}
  })";
}

Pipeline tiny_pipeline(const std::string& dir) {
  fs::create_directories(dir);
  return Pipeline(config::RunConfig::from_text(tiny_config_text(dir)));
}

std::vector<char> file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("canonical json sorts keys and pins float formatting") {
  nlohmann::json a = {{"beta", 0.1}, {"alpha", 2}};
  CHECK(config::canonical_json(a) == "{\"alpha\":2,\"beta\":0.10000000000000001}");
  nlohmann::json b;
  b["beta"] = 0.1;
  b["alpha"] = 2;
  CHECK(config::hash_json(a) == config::hash_json(b));
}

TEST_CASE("config section hashes react to their own fields only") {
  auto base = config::RunConfig::from_text("{}");
  auto changed_policy = base;
  changed_policy.policy.n = 8;
  CHECK(base.hash_vdm() == changed_policy.hash_vdm());
  CHECK(base.hash_decouplers() == changed_policy.hash_decouplers());
  CHECK(base.hash_policy() != changed_policy.hash_policy());

  auto changed_vdm = base;
  changed_vdm.vdm.s = 10;
  CHECK(base.hash_vdm() != changed_vdm.hash_vdm());
  CHECK(base.hash_decouplers() != changed_vdm.hash_decouplers());
}

TEST_CASE("config validation rejects malformed inputs") {
  CHECK_THROWS_AS(config::RunConfig::from_text("not json"), ConfigError);
  CHECK_THROWS_AS(config::RunConfig::from_text(R"({"world": {"tasks": [9]}})"), ConfigError);
  CHECK_THROWS_AS(config::RunConfig::from_text(R"({"training": {"steps": [1, 2]}})"), ConfigError);
  CHECK_THROWS_AS(config::RunConfig::from_text(R"({"decouplers": {"mode": "odd"}})"), ConfigError);
  CHECK_THROWS_AS(config::RunConfig::from_text(R"({"vdm": {"h": 5}})"), ConfigError);
}

TEST_CASE("checkpoints round-trip parameters and optimizer state") {
  TempDir tmp("svam_ckpt_rt");
  ParamStore store;
  rng::Stream g(3, "p");
  auto w = store.add("layer.w", Tensor::randn({3, 4}, g));
  auto b = store.add("layer.b", Tensor::randn({4}, g));

  Adam opt;
  auto loss = mse(linear(Tensor::randn({2, 3}, g), w, b), Tensor::zeros({2, 4}));
  backward(loss);
  opt.step(store);

  ckpt::Checkpoint ck;
  ck.config_hash = 0xabcdef;
  ckpt::dump_params(store, ck);
  ckpt::dump_adam(opt, store, ck);
  auto path = (tmp.path / "t.svamck").string();
  ckpt::save(path, ck);

  auto loaded = ckpt::load(path);
  CHECK(loaded.config_hash == 0xabcdef);
  ParamStore store2;
  rng::Stream g2(99, "other");
  store2.add("layer.w", Tensor::randn({3, 4}, g2));
  store2.add("layer.b", Tensor::randn({4}, g2));
  ckpt::load_params(store2, loaded);
  CHECK(store2.content_hash() == store.content_hash());

  Adam opt2;
  ckpt::load_adam(opt2, store2, loaded);
  CHECK(opt2.step_count() == 1);

  ParamStore wrong;
  wrong.add("layer.w", Tensor::zeros({3, 5}));
  CHECK_THROWS_AS(ckpt::load_params(wrong, loaded), CheckpointError);
}

TEST_CASE("checkpoint magic reads SVAMCK1") {
  TempDir tmp("svam_ckpt_magic");
  ckpt::Checkpoint ck;
  ck.tensors.push_back({"x", {2}, {1.f, 2.f}});
  auto path = (tmp.path / "m.svamck").string();
  ckpt::save(path, ck);
  auto bytes = file_bytes(path);
  CHECK(std::string(bytes.data(), 7) == "SVAMCK1");
  CHECK(bytes[7] == '\0');
}

TEST_CASE("dataset generation through the pipeline is byte-identical per seed") {
  TempDir tmp("svam_gen_repro");
  auto p = tiny_pipeline(tmp.path.string());
  auto path1 = p.cmd_gen_data();
  auto bytes1 = file_bytes(path1);
  p.cmd_gen_data();
  CHECK(file_bytes(path1) == bytes1);
}

TEST_CASE("stage 2 without stage 1 is a hard checkpoint error") {
  TempDir tmp("svam_missing_stage1");
  auto p = tiny_pipeline(tmp.path.string());
  p.cmd_gen_data();
  CHECK_THROWS_AS(p.cmd_train(2), CheckpointError);
  CHECK_THROWS_AS(p.cmd_train(3), CheckpointError);
}

TEST_CASE("checkpoint config-hash mismatches are refused by later stages") {
  TempDir tmp("svam_hash_mismatch");
  auto p = tiny_pipeline(tmp.path.string());
  p.cmd_gen_data();
  p.cmd_train(1);

  auto text = tiny_config_text(tmp.path.string());
  auto changed = config::RunConfig::from_text(text);
  changed.vdm.width_mid = 24;  // architecture change invalidates stage 1
  Pipeline p2{changed};
  try {
    p2.cmd_train(2);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    std::string msg = e.what();
    CHECK(msg.find("hash mismatch") != std::string::npos);
  }
}

TEST_CASE("full tiny pipeline produces artifacts and deterministic eval") {
  TempDir tmp("svam_tiny_e2e");
  auto p = tiny_pipeline(tmp.path.string());
  p.cmd_gen_data();
  p.cmd_train(1);
  p.cmd_train(2);
  p.cmd_train(3);
  CHECK(fs::exists(tmp.path / "vdm.svamck"));
  CHECK(fs::exists(tmp.path / "decoupler_geo.svamck"));
  CHECK(fs::exists(tmp.path / "decoupler_sem.svamck"));
  CHECK(fs::exists(tmp.path / "policy.svamck"));
  CHECK(fs::exists(tmp.path / "stage1_loss.csv"));
  CHECK(fs::exists(tmp.path / "stage2_geo_loss.csv"));
  CHECK(fs::exists(tmp.path / "stage3_loss.csv"));

  std::ifstream csv((tmp.path / "stage1_loss.csv").string());
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,loss");

  auto report = p.cmd_eval(2, 2, true);
  CHECK(report.at("episodes_per_seed") == 2);
  CHECK(report.at("tasks").contains("1"));
  CHECK((int)report.at("tasks").at("1").at("episodes").size() == 4);
  auto bytes = file_bytes((tmp.path / "eval_report.json").string());
  p.cmd_eval(2, 2, false);
  CHECK(file_bytes((tmp.path / "eval_report.json").string()) == bytes);

  // Per-chunk trace lines carry the documented record layout.
  std::ifstream trace((tmp.path / "rollout_trace.jsonl").string());
  std::string line;
  int lines = 0;
  while (std::getline(trace, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("chunk_index"));
    CHECK(j.at("wall_ms").contains("backbone"));
    CHECK(j.at("wall_ms").contains("decouplers"));
    CHECK(j.at("wall_ms").contains("expert"));
    CHECK(j.at("actions").size() <= 8);
    CHECK(j.contains("success_so_far"));
    ++lines;
  }
  CHECK(lines >= 1);
}

TEST_CASE("resume continues the loss curve within noise") {
  TempDir tmp_a("svam_resume_a");
  TempDir tmp_b("svam_resume_b");

  auto run_full = tiny_pipeline(tmp_a.path.string());
  run_full.cmd_gen_data();
  run_full.cmd_train(1);

  auto cfg = config::RunConfig::from_text(tiny_config_text(tmp_b.path.string()));
  cfg.training.steps[0] = 3;
  Pipeline part1{cfg};
  part1.cmd_gen_data();
  part1.cmd_train(1);
  cfg.training.steps[0] = 5;
  Pipeline part2{cfg};
  part2.cmd_train(1, /*resume=*/true);

  auto read_losses = [](const std::string& path) {
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);  // header
    std::vector<double> out;
    while (std::getline(is, line)) {
      auto comma = line.find(',');
      out.push_back(std::stod(line.substr(comma + 1)));
    }
    return out;
  };
  auto full = read_losses((tmp_a.path / "stage1_loss.csv").string());
  auto resumed = read_losses((tmp_b.path / "stage1_loss.csv").string());
  REQUIRE(full.size() == 5);
  REQUIRE(resumed.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(std::abs(full[i] - resumed[i]) < 0.05 * std::max(1.0, std::abs(full[i])));
  }
}

TEST_CASE("ablation variants wire the documented component changes") {
  auto raw = VariantSpec::lookup("raw_only");
  CHECK_FALSE(raw.train_geo);
  CHECK_FALSE(raw.train_sem);
  CHECK_FALSE(raw.flags.use_geo);
  CHECK(raw.flags.use_raw);
  auto gt = VariantSpec::lookup("gt_targets");
  CHECK(gt.mode == distill::TargetMode::ground_truth);
  auto pool = VariantSpec::lookup("no_uniperceiver");
  CHECK(pool.mean_pool);
  auto noraw = VariantSpec::lookup("no_raw_feature");
  CHECK_FALSE(noraw.flags.use_raw);
  CHECK(noraw.train_geo);
  CHECK_THROWS_AS(VariantSpec::lookup("bogus"), ConfigError);
}

TEST_CASE("raw_only ablation skips stage 2 and the matrix keeps the full reference") {
  TempDir tmp("svam_ablate_raw");
  auto p = tiny_pipeline(tmp.path.string());
  p.cmd_gen_data();
  p.cmd_train(1);
  auto matrix = p.cmd_ablate("raw_only", 2, 1);

  CHECK(matrix.at("reference") == "full");
  CHECK(matrix.at("variants").contains("full"));
  CHECK(matrix.at("variants").contains("raw_only"));
  CHECK(matrix.at("variants").at("raw_only").at("stage2_skipped") == true);
  CHECK_FALSE(fs::exists(tmp.path / "ablation" / "raw_only" / "decoupler_geo.svamck"));
  CHECK(fs::exists(tmp.path / "ablation" / "full" / "decoupler_geo.svamck"));
  CHECK(matrix.contains("full_vs_raw_only"));
  CHECK(matrix.at("full_vs_raw_only").at("bootstrap_samples") == 1000);
  CHECK(fs::exists(tmp.path / "ablation_matrix.csv"));
}

TEST_CASE("gradcheck command passes clean and fails under fault injection") {
  TempDir tmp("svam_gradcheck_cmd");
  auto p = tiny_pipeline(tmp.path.string());
  auto report = p.cmd_gradcheck(false);
  CHECK(report.at("pass") == true);
  // Coverage: every block lists its parameter groups.
  for (const char* block : {"denoiser", "decoupler_geo", "decoupler_sem", "uni_perceiver_policy"}) {
    CHECK(report.at("blocks").at(block).at("groups").size() > 0);
  }
  auto corrupted = p.cmd_gradcheck(true);
  CHECK(corrupted.at("pass") == false);
  CHECK(fs::exists(tmp.path / "gradcheck_report.json"));
}

TEST_CASE("latency benchmark emits medians and ratios") {
  TempDir tmp("svam_bench_cmd");
  auto p = tiny_pipeline(tmp.path.string());
  p.cmd_gen_data();
  p.cmd_train(1);
  p.cmd_train(2);
  p.cmd_train(3);
  auto out = p.cmd_bench_latency(8);
  CHECK(out.at("medians_ms").at("one_step_features").get<double>() > 0.0);
  CHECK(out.at("ratios").at("multi_over_one").get<double>() > 1.0);
  CHECK(fs::exists(tmp.path / "latency.json"));

  // Medians of repeated deterministic work stay within 20% across two runs.
  auto out2 = p.cmd_bench_latency(8);
  double a = out.at("medians_ms").at("one_step_features").get<double>();
  double b = out2.at("medians_ms").at("one_step_features").get<double>();
  CHECK(std::abs(a - b) / std::max(a, b) < 0.2);
}
