#include "svam/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "svam/error.hpp"
#include "svam/rng.hpp"
#include "svam/world.hpp"

namespace svam::config {

using nlohmann::json;

namespace {

template <class T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

json section_world(const WorldSection& w) {
  return json{{"tasks", w.tasks}, {"h_ep", w.h_ep}, {"frame", w.frame}, {"episodes", w.episodes}};
}

json section_vdm(const VdmSection& v) {
  return json{{"t", v.t},
              {"c", v.c},
              {"h", v.h},
              {"w", v.w},
              {"taps", v.taps},
              {"s", v.s},
              {"beta_start", v.beta_start},
              {"beta_end", v.beta_end},
              {"beta_base_steps", v.beta_base_steps},
              {"width_top", v.width_top},
              {"width_mid", v.width_mid},
              {"mid_blocks", v.mid_blocks},
              {"heads", v.heads},
              {"clip_stride", v.clip_stride}};
}

json section_decouplers(const DecouplerSection& d) {
  return json{{"k", d.k},         {"c_hidden", d.c_hidden}, {"c_geo", d.c_geo},
              {"c_sem", d.c_sem}, {"heads", d.heads},       {"mode", d.mode}};
}

json section_policy(const PolicySection& p) {
  return json{{"n", p.n},         {"c_agg", p.c_agg},   {"j", p.j},     {"chunk", p.chunk},
              {"width", p.width}, {"blocks", p.blocks}, {"heads", p.heads}};
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  if (j.contains("world")) {
    const auto& w = j.at("world");
    read_field(w, "tasks", c.world.tasks);
    read_field(w, "h_ep", c.world.h_ep);
    read_field(w, "frame", c.world.frame);
    read_field(w, "episodes", c.world.episodes);
  }
  if (j.contains("vdm")) {
    const auto& v = j.at("vdm");
    read_field(v, "t", c.vdm.t);
    read_field(v, "c", c.vdm.c);
    read_field(v, "h", c.vdm.h);
    read_field(v, "w", c.vdm.w);
    read_field(v, "taps", c.vdm.taps);
    read_field(v, "s", c.vdm.s);
    read_field(v, "beta_start", c.vdm.beta_start);
    read_field(v, "beta_end", c.vdm.beta_end);
    read_field(v, "beta_base_steps", c.vdm.beta_base_steps);
    read_field(v, "width_top", c.vdm.width_top);
    read_field(v, "width_mid", c.vdm.width_mid);
    read_field(v, "mid_blocks", c.vdm.mid_blocks);
    read_field(v, "heads", c.vdm.heads);
    read_field(v, "clip_stride", c.vdm.clip_stride);
  }
  if (j.contains("decouplers")) {
    const auto& d = j.at("decouplers");
    read_field(d, "k", c.decouplers.k);
    read_field(d, "c_hidden", c.decouplers.c_hidden);
    read_field(d, "c_geo", c.decouplers.c_geo);
    read_field(d, "c_sem", c.decouplers.c_sem);
    read_field(d, "heads", c.decouplers.heads);
    read_field(d, "mode", c.decouplers.mode);
  }
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    read_field(p, "n", c.policy.n);
    read_field(p, "c_agg", c.policy.c_agg);
    read_field(p, "j", c.policy.j);
    read_field(p, "chunk", c.policy.chunk);
    read_field(p, "width", c.policy.width);
    read_field(p, "blocks", c.policy.blocks);
    read_field(p, "heads", c.policy.heads);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    read_field(t, "steps", c.training.steps);
    read_field(t, "lr", c.training.lr);
    read_field(t, "batch", c.training.batch);
    read_field(t, "seed", c.training.seed);
    read_field(t, "samples_per_episode", c.training.samples_per_episode);
    read_field(t, "log_every", c.training.log_every);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    read_field(p, "data", c.paths.data);
    read_field(p, "out", c.paths.out);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str());
}

RunConfig RunConfig::from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json t{{"steps", training.steps},
         {"lr", training.lr},
         {"batch", training.batch},
         {"seed", training.seed},
         {"samples_per_episode", training.samples_per_episode},
         {"log_every", training.log_every}};
  json p{{"data", paths.data}, {"out", paths.out}};
  return json{{"world", section_world(world)},   {"vdm", section_vdm(vdm)},
              {"decouplers", section_decouplers(decouplers)},
              {"policy", section_policy(policy)}, {"training", t},
              {"paths", p}};
}

void RunConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (world.tasks.empty()) fail("world.tasks is empty");
  for (int task : world.tasks) {
    if (task < 0 || task >= world::kNumTasks) fail("unknown task id " + std::to_string(task));
  }
  if (world.h_ep < 2) fail("world.h_ep must be at least 2");
  if (world.frame % 4 != 0 || world.frame < 8) fail("world.frame must be a multiple of 4, >= 8");
  if (world.episodes < 1) fail("world.episodes must be positive");
  if (vdm.t < 1 || vdm.s < 1) fail("vdm.t and vdm.s must be positive");
  if (vdm.h != world.frame / 4 || vdm.w != world.frame / 4) {
    fail("vdm latent size must equal frame/4 (fixed 4x4 patchify)");
  }
  if (vdm.taps.size() != 3) fail("vdm.taps must list three tap widths");
  if (vdm.h % 2 != 0 || vdm.w % 2 != 0) fail("vdm latent size must be even (2x2 merge)");
  if (vdm.beta_base_steps < vdm.s) fail("vdm.beta_base_steps must be >= vdm.s");
  if (!(vdm.beta_start > 0 && vdm.beta_end < 1 && vdm.beta_start <= vdm.beta_end)) {
    fail("vdm beta range must satisfy 0 < start <= end < 1");
  }
  if ((vdm.t - 1) * vdm.clip_stride >= world.h_ep) fail("vdm clip does not fit into an episode");
  if (decouplers.c_geo != world::kGeoChannels) fail("decouplers.c_geo must match the geo encoder");
  if (decouplers.c_sem != world::kSemChannels) fail("decouplers.c_sem must match the sem encoder");
  if (decouplers.c_hidden % decouplers.heads != 0) fail("decouplers.c_hidden must divide by heads");
  if (decouplers.mode != "self" && decouplers.mode != "gt") fail("decouplers.mode must be self|gt");
  if (decouplers.k < 1) fail("decouplers.k must be positive");
  if (policy.chunk < 1 || policy.chunk >= world.h_ep) fail("policy.chunk must fit an episode");
  if (policy.width % policy.heads != 0) fail("policy.width must divide by heads");
  if (policy.c_agg % policy.heads != 0) fail("policy.c_agg must divide by heads");
  if (policy.j < 1) fail("policy.j must be positive");
  if (training.steps.size() != 3) fail("training.steps must list three stage budgets");
  if (training.batch < 1) fail("training.batch must be positive");
  if (training.lr <= 0) fail("training.lr must be positive");
  if (training.samples_per_episode < 1) fail("training.samples_per_episode must be positive");
}

namespace {

void canonical_dump(const json& j, std::string& out) {
  switch (j.type()) {
    case json::value_t::object: {
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {  // nlohmann objects iterate sorted
        if (!first) out += ',';
        first = false;
        out += '"';
        out += it.key();
        out += "\":";
        canonical_dump(it.value(), out);
      }
      out += '}';
      break;
    }
    case json::value_t::array: {
      out += '[';
      for (size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        canonical_dump(j[i], out);
      }
      out += ']';
      break;
    }
    case json::value_t::number_float: {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", j.get<double>());
      out += buf;
      break;
    }
    default:
      out += j.dump();
  }
}

}  // namespace

std::string canonical_json(const json& j) {
  std::string out;
  canonical_dump(j, out);
  return out;
}

uint64_t hash_json(const json& j) {
  std::string s = canonical_json(j);
  return rng::fnv1a(s.data(), s.size());
}

uint64_t RunConfig::hash_vdm() const {
  return hash_json(json{{"world", section_world(world)}, {"vdm", section_vdm(vdm)}});
}

uint64_t RunConfig::hash_decouplers() const {
  return hash_json(json{{"world", section_world(world)},
                        {"vdm", section_vdm(vdm)},
                        {"decouplers", section_decouplers(decouplers)}});
}

uint64_t RunConfig::hash_policy() const {
  return hash_json(json{{"world", section_world(world)},
                        {"vdm", section_vdm(vdm)},
                        {"decouplers", section_decouplers(decouplers)},
                        {"policy", section_policy(policy)}});
}

uint64_t RunConfig::hash_full() const { return hash_json(to_json()); }

}  // namespace svam::config
