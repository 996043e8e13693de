#include "svam/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "svam/error.hpp"

static_assert(std::endian::native == std::endian::little, "file formats are little-endian");

namespace svam::ckpt {

namespace {

constexpr char kMagic[8] = {'S', 'V', 'A', 'M', 'C', 'K', '1', '\0'};

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(kMagic, 8);
  write_pod<uint32_t>(os, (uint32_t)ck.tensors.size());
  for (const auto& t : ck.tensors) {
    if (t.name.size() > 0xFFFF) throw IoError("checkpoint tensor name too long");
    write_pod<uint16_t>(os, (uint16_t)t.name.size());
    os.write(t.name.data(), (std::streamsize)t.name.size());
    write_pod<uint8_t>(os, (uint8_t)t.shape.size());
    int64_t n = 1;
    for (int d : t.shape) {
      write_pod<uint32_t>(os, (uint32_t)d);
      n *= d;
    }
    if (n != (int64_t)t.data.size()) throw IoError("checkpoint tensor size mismatch: " + t.name);
    os.write(reinterpret_cast<const char*>(t.data.data()), (std::streamsize)t.data.size() * 4);
  }
  write_pod<uint64_t>(os, ck.config_hash);
  if (!os) throw IoError("failed while writing checkpoint " + path);
}

Checkpoint load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("missing checkpoint " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw CheckpointError("bad checkpoint magic in " + path);
  }
  Checkpoint ck;
  uint32_t count = read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    uint16_t len = read_pod<uint16_t>(is);
    t.name.resize(len);
    is.read(t.name.data(), len);
    uint8_t rank = read_pod<uint8_t>(is);
    int64_t n = 1;
    for (int r = 0; r < rank; ++r) {
      uint32_t d = read_pod<uint32_t>(is);
      t.shape.push_back((int)d);
      n *= d;
    }
    t.data.resize(n);
    is.read(reinterpret_cast<char*>(t.data.data()), (std::streamsize)n * 4);
    ck.tensors.push_back(std::move(t));
  }
  ck.config_hash = read_pod<uint64_t>(is);
  if (!is) throw CheckpointError("truncated checkpoint " + path);
  return ck;
}

void dump_params(const ParamStore& params, Checkpoint& ck, const std::string& prefix) {
  for (const auto& [name, t] : params.items()) {
    ck.tensors.push_back({prefix + name, t.shape(), t.to_f32()});
  }
}

void load_params(ParamStore& params, const Checkpoint& ck, const std::string& prefix) {
  for (auto& [name, t] : params.items()) {
    const NamedTensor* src = ck.find(prefix + name);
    if (!src) throw CheckpointError("checkpoint is missing tensor " + prefix + name);
    if (src->shape != t.shape()) {
      throw CheckpointError("checkpoint tensor " + prefix + name + " has shape " +
                            shape_str(src->shape) + ", expected " + shape_str(t.shape()));
    }
    Tensor& dst = const_cast<Tensor&>(t);
    for (int64_t i = 0; i < dst.numel(); ++i) dst.set_at(i, src->data[i]);
  }
}

void dump_adam(const Adam& opt, const ParamStore& params, Checkpoint& ck) {
  Adam& o = const_cast<Adam&>(opt);
  for (const auto& [name, t] : params.items()) {
    if (!o.has_state(name)) continue;
    auto& m = o.first_moment(name);
    auto& v = o.second_moment(name);
    NamedTensor mt{"adam.m." + name, t.shape(), std::vector<float>(m.begin(), m.end())};
    NamedTensor vt{"adam.v." + name, t.shape(), std::vector<float>(v.begin(), v.end())};
    ck.tensors.push_back(std::move(mt));
    ck.tensors.push_back(std::move(vt));
  }
  ck.tensors.push_back({"adam.step", {1}, {(float)opt.step_count()}});
}

void load_adam(Adam& opt, const ParamStore& params, const Checkpoint& ck) {
  const NamedTensor* step = ck.find("adam.step");
  if (!step) return;  // checkpoint without optimizer state is fine for inference
  opt.set_step_count((int64_t)std::lround(step->data[0]));
  for (const auto& [name, t] : params.items()) {
    const NamedTensor* m = ck.find("adam.m." + name);
    const NamedTensor* v = ck.find("adam.v." + name);
    if (!m || !v) continue;
    opt.init_state(name, std::vector<double>(m->data.begin(), m->data.end()),
                   std::vector<double>(v->data.begin(), v->data.end()));
  }
}

}  // namespace svam::ckpt
