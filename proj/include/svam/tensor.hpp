#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "svam/error.hpp"
#include "svam/rng.hpp"

namespace svam {

// Training paths run in 32-bit; gradient checking flips the process-wide
// mode to 64-bit so central finite differences at step 1e-5 stay meaningful.
enum class Dtype { f32, f64 };

Dtype active_dtype();
void set_active_dtype(Dtype dt);

struct DtypeGuard {
  explicit DtypeGuard(Dtype dt) : prev_(active_dtype()) { set_active_dtype(dt); }
  ~DtypeGuard() { set_active_dtype(prev_); }

 private:
  Dtype prev_;
};

bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }

 private:
  bool prev_;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Buf {
  Dtype dt = Dtype::f32;
  std::vector<float> f;
  std::vector<double> d;

  int64_t size() const { return dt == Dtype::f32 ? (int64_t)f.size() : (int64_t)d.size(); }
  bool empty() const { return size() == 0; }
  void alloc(Dtype t, int64_t n, bool zero = true);
  void clear() { f.clear(); f.shrink_to_fit(); d.clear(); d.shrink_to_fit(); }
  double get(int64_t i) const { return dt == Dtype::f32 ? (double)f[i] : d[i]; }
  void set(int64_t i, double v) {
    if (dt == Dtype::f32) f[i] = (float)v; else d[i] = v;
  }
};

struct Node {
  Shape shape;
  Buf data;
  Buf grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into parents' grads; grad is fully formed
  // when it runs (reverse topological order).
  std::function<void(Node&)> backward_fn;
  Buf saved;                     // op-specific forward state
  std::vector<int64_t> saved_i;  // op-specific integer state

  int64_t numel() const { return shape_numel(shape); }
  void ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, const std::vector<double>& vals, bool requires_grad = false);
  static Tensor from_data(const Shape& s, const std::vector<float>& vals, bool requires_grad = false);
  static Tensor randn(const Shape& s, rng::Stream& g, double mean = 0.0, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(const Shape& s, rng::Stream& g, double lo, double hi,
                        bool requires_grad = false);
  static Tensor identity(int n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return (int)shape().size(); }
  int dim(int i) const { return shape()[i]; }
  int64_t numel() const;
  Dtype dtype() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);  // leaves only

  double at(int64_t i) const;
  void set_at(int64_t i, double v);  // leaves only (optimizers, finite differences)

  std::vector<double> to_vector() const;
  std::vector<float> to_f32() const;
  void copy_from(const std::vector<double>& vals);  // leaves only, same numel

  bool has_grad() const;
  double grad_at(int64_t i) const;
  std::vector<double> grad_to_vector() const;
  void zero_grad();
  void scale_grad(double factor);  // fault injection for gradient-check tests

  Tensor detach() const;  // leaf copy sharing nothing with the tape
  uint64_t data_hash() const;
  bool all_finite() const;

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// --- core op family -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
// y = x @ W + b applied over the trailing dimension of x.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor concat(const std::vector<Tensor>& xs, int dim);
Tensor slice(const Tensor& x, int dim, int start, int len);
Tensor reshape(const Tensor& x, const Shape& s);
Tensor permute(const Tensor& x, const std::vector<int>& order);
// Repeats a size-1 dimension `times` times.
Tensor repeat_dim(const Tensor& x, int dim, int times);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, int dim);
Tensor layer_norm(const Tensor& x, int dim);
Tensor layer_norm(const Tensor& x, int dim, const Tensor& gain, const Tensor& bias);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Scaled dot-product attention. Inputs are n×d (single set) or B×n×d
// (batched); `heads` splits the trailing width. Weights per query row sum
// to 1; `weights_out`, when given, receives the softmax weights
// (B*heads) × n_q × n_k detached from the tape.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads = 1,
                 Tensor* weights_out = nullptr);

// Align-corners bilinear resize of a T×C×h×w volume.
Tensor interpolate_bilinear(const Tensor& x, int out_h, int out_w);

void backward(const Tensor& loss);

// --- parameters and optimizer ---------------------------------------------

class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t);
  Tensor* find(const std::string& name);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }
  int64_t total_elements() const;
  void zero_grads();
  void freeze();  // drops requires_grad on every parameter
  uint64_t content_hash() const;
  void append_all(ParamStore& other, const std::string& prefix = "");

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected Adam. Gradients are left intact; callers zero them.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& params);
  int64_t step_count() const { return step_count_; }

  AdamConfig& config() { return cfg_; }
  // Moment access for checkpointing, keyed like the parameter store.
  std::vector<double>& first_moment(const std::string& name);
  std::vector<double>& second_moment(const std::string& name);
  bool has_state(const std::string& name) const;
  void init_state(const std::string& name, std::vector<double> m, std::vector<double> v);
  void set_step_count(int64_t n) { step_count_ = n; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  Slot& slot_for(const std::string& name, int64_t n);

  AdamConfig cfg_;
  int64_t step_count_ = 0;
  std::vector<std::pair<std::string, Slot>> slots_;
};

// --- gradient checking -----------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int64_t elements = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;
  bool pass = false;
  double worst() const;
};

// Compares tape gradients of `loss_fn` against central finite differences.
// Requires the 64-bit mode. `corrupt_factor` != 1 scales the tape gradients
// to emulate a broken backward pass (the checker must then fail).
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, ParamStore& params, double tol,
                           double fd_step = 1e-5, double corrupt_factor = 1.0);

}  // namespace svam
