#pragma once

#include <string>

#include "svam/rng.hpp"
#include "svam/tensor.hpp"

namespace svam::nn {

// Affine map over the trailing dimension. Weights init N(0, w_std/sqrt(fan_in)).
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, rng::Stream init,
         double w_std = 1.0);
  Tensor operator()(const Tensor& x) const { return linear(x, w_, b_); }
  int in_features() const { return w_.dim(0); }
  int out_features() const { return w_.dim(1); }

 private:
  Tensor w_, b_;
};

// Learned layer norm over the trailing dimension.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int width);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, x.rank() - 1, gain_, bias_); }

 private:
  Tensor gain_, bias_;
};

// Multi-head attention with learned projections. Queries keep their width
// through the output projection; keys/values may come from a wider stream.
class Mha {
 public:
  Mha() = default;
  Mha(ParamStore& store, const std::string& name, int q_width, int kv_width, int inner_width,
      int heads, rng::Stream init);
  Tensor operator()(const Tensor& q, const Tensor& kv, Tensor* weights_out = nullptr) const;
  Tensor operator()(const Tensor& x) const { return (*this)(x, x); }

 private:
  Linear wq_, wk_, wv_, wo_;
  int heads_ = 1;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, int width, int hidden, rng::Stream init);
  Tensor operator()(const Tensor& x) const { return fc2_(gelu(fc1_(x))); }

 private:
  Linear fc1_, fc2_;
};

// Pre-norm transformer block: x += MHA(LN(x)); x += MLP(LN(x)). MLP ratio 2.
class Block {
 public:
  Block() = default;
  Block(ParamStore& store, const std::string& name, int width, int heads, rng::Stream init);
  Tensor operator()(const Tensor& x) const;

 private:
  LayerNorm ln1_, ln2_;
  Mha attn_;
  Mlp mlp_;
};

// Classic fixed sinusoidal embedding of a step index.
Tensor sinusoidal_embedding(int index, int dim);

// T×C×h×w volume <-> T×(h·w)×C token layouts.
Tensor vol_to_tokens(const Tensor& vol);
Tensor tokens_to_vol(const Tensor& tokens, int h, int w);
// T×n×W <-> n×T×W (frames-major vs cells-major).
Tensor swap_batch_seq(const Tensor& tokens);

}  // namespace svam::nn
