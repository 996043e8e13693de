#include "svam/nn.hpp"

#include <cmath>

namespace svam::nn {

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, rng::Stream init,
               double w_std) {
  double stddev = w_std / std::sqrt((double)in);
  w_ = store.add(name + ".w", Tensor::randn({in, out}, init, 0.0, stddev));
  b_ = store.add(name + ".b", Tensor::zeros({out}));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int width) {
  gain_ = store.add(name + ".gain", Tensor::full({width}, 1.0));
  bias_ = store.add(name + ".bias", Tensor::zeros({width}));
}

Mha::Mha(ParamStore& store, const std::string& name, int q_width, int kv_width, int inner_width,
         int heads, rng::Stream init)
    : heads_(heads) {
  wq_ = Linear(store, name + ".q", q_width, inner_width, init.child("q"));
  wk_ = Linear(store, name + ".k", kv_width, inner_width, init.child("k"));
  wv_ = Linear(store, name + ".v", kv_width, inner_width, init.child("v"));
  wo_ = Linear(store, name + ".o", inner_width, q_width, init.child("o"));
}

Tensor Mha::operator()(const Tensor& q, const Tensor& kv, Tensor* weights_out) const {
  Tensor attn_out = attention(wq_(q), wk_(kv), wv_(kv), heads_, weights_out);
  return wo_(attn_out);
}

Mlp::Mlp(ParamStore& store, const std::string& name, int width, int hidden, rng::Stream init) {
  fc1_ = Linear(store, name + ".fc1", width, hidden, init.child("fc1"));
  fc2_ = Linear(store, name + ".fc2", hidden, width, init.child("fc2"));
}

Block::Block(ParamStore& store, const std::string& name, int width, int heads, rng::Stream init) {
  ln1_ = LayerNorm(store, name + ".ln1", width);
  ln2_ = LayerNorm(store, name + ".ln2", width);
  attn_ = Mha(store, name + ".attn", width, width, width, heads, init.child("attn"));
  mlp_ = Mlp(store, name + ".mlp", width, 2 * width, init.child("mlp"));
}

Tensor Block::operator()(const Tensor& x) const {
  Tensor h = add(x, attn_(ln1_(x)));
  return add(h, mlp_(ln2_(h)));
}

Tensor sinusoidal_embedding(int index, int dim) {
  std::vector<double> v(dim, 0.0);
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * (double)i / (double)half);
    v[i] = std::sin(index * freq);
    v[half + i] = std::cos(index * freq);
  }
  return Tensor::from_data({dim}, v);
}

Tensor vol_to_tokens(const Tensor& vol) {
  int t = vol.dim(0), c = vol.dim(1), h = vol.dim(2), w = vol.dim(3);
  return reshape(permute(vol, {0, 2, 3, 1}), {t, h * w, c});
}

Tensor tokens_to_vol(const Tensor& tokens, int h, int w) {
  int t = tokens.dim(0), c = tokens.dim(2);
  return permute(reshape(tokens, {t, h, w, c}), {0, 3, 1, 2});
}

Tensor swap_batch_seq(const Tensor& tokens) { return permute(tokens, {1, 0, 2}); }

}  // namespace svam::nn
