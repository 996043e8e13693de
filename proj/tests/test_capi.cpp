#include <filesystem>
#include <string>

#include "doctest.h"
#include "svam/svam.h"

namespace fs = std::filesystem;

namespace {

std::string tiny_config(const std::string& dir) {
  return R"({
    "world": {"tasks": [1], "h_ep": 24, "frame": 32, "episodes": 3},
    "vdm": {"t": 2, "s": 3, "taps": [6, 6, 4], "width_top": 16, "width_mid": 16,
            "mid_blocks": 1, "clip_stride": 4},
    "decouplers": {"c_hidden": 8, "heads": 2, "k": 1},
    "policy": {"n": 4, "c_agg": 16, "j": 3, "width": 16, "blocks": 1, "heads": 2},
    "training": {"steps": [3, 2, 3], "lr": 0.001, "batch": 2, "seed": 7,
                 "samples_per_episode": 2, "log_every": 100},
    "paths": {"data": ")" + dir + R"(/dataset.svamds", "out": ")" + dir + R"("}
  })";
}

}  // namespace

TEST_CASE("opening a missing config reports a config error") {
  svam_pipeline* p = nullptr;
  CHECK(svam_open("/definitely/not/a/config.json", &p) == SVAM_ERR_CONFIG);
  CHECK(p == nullptr);
  CHECK(std::string(svam_global_error()).find("config") != std::string::npos);
}

TEST_CASE("invalid json and invalid fields map to config errors") {
  svam_pipeline* p = nullptr;
  CHECK(svam_open_text("{ nope", &p) == SVAM_ERR_CONFIG);
  CHECK(svam_open_text(R"({"world": {"tasks": [42]}})", &p) == SVAM_ERR_CONFIG);
}

TEST_CASE("status codes follow the documented exit-code contract") {
  auto dir = fs::temp_directory_path() / "svam_capi";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto cfg = tiny_config(dir.string());

  svam_pipeline* p = nullptr;
  REQUIRE(svam_open_text(cfg.c_str(), &p) == SVAM_OK);
  CHECK(std::string(svam_last_error(p)).empty());
  CHECK(svam_set_seed(p, 7) == SVAM_OK);

  // Later stages before stage 1: checkpoint error, message names the file.
  CHECK(svam_gen_data(p) == SVAM_OK);
  CHECK(svam_train(p, 2, 0) == SVAM_ERR_CHECKPOINT);
  CHECK(std::string(svam_last_error(p)).find("checkpoint") != std::string::npos);
  CHECK(svam_eval(p, 1, 1, 0) == SVAM_ERR_CHECKPOINT);
  CHECK(svam_train(p, 9, 0) == SVAM_ERR_CONFIG);
  CHECK(svam_ablate(p, "not_a_variant", 1, 1) == SVAM_ERR_CONFIG);

  CHECK(svam_train(p, 1, 0) == SVAM_OK);
  CHECK(svam_train(p, 2, 0) == SVAM_OK);
  CHECK(svam_train(p, 3, 0) == SVAM_OK);
  CHECK(svam_eval(p, 1, 1, 0) == SVAM_OK);
  CHECK(fs::exists(dir / "eval_report.json"));

  CHECK(svam_gradcheck(p, 0) == SVAM_OK);
  CHECK(svam_gradcheck(p, 1) == SVAM_ERROR);

  svam_close(p);
  fs::remove_all(dir);
}

TEST_CASE("version string is present") {
  CHECK(std::string(svam_version()).find("svam") == 0);
}
