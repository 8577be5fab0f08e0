#pragma once

#include <string>

#include "espex/ops.hpp"
#include "espex/rng.hpp"

namespace espex::nn {

// Uniform fan-in init, U(-1/sqrt(fan_in), +1/sqrt(fan_in)). Values are drawn
// in double and cast so float and double builds of the same seed agree.
template <typename S>
Tensor<S> init_uniform(std::vector<long> shape, long fan_in, CounterRng& rng) {
  long total = 1;
  for (long d : shape) total *= d;
  std::vector<S> v(static_cast<size_t>(total));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
  return Tensor<S>::from(std::move(shape), std::move(v));
}

template <typename S>
struct Conv1dLayer {
  Tensor<S> weight, bias;
  long stride, pad_l, pad_r;

  Conv1dLayer() = default;
  Conv1dLayer(ParamRegistry<S>& reg, const std::string& prefix, long c_in, long c_out, long k,
              long stride_, long pad_l_, long pad_r_, CounterRng& rng)
      : stride(stride_), pad_l(pad_l_), pad_r(pad_r_) {
    weight = reg.add(prefix + ".weight", init_uniform<S>({c_out, c_in, k}, c_in * k, rng)).tensor;
    bias = reg.add(prefix + ".bias", init_uniform<S>({c_out}, c_in * k, rng)).tensor;
  }
  Tensor<S> forward(Tensor<S> x) const { return conv1d(x, weight, bias, stride, pad_l, pad_r); }
};

template <typename S>
struct DepthwiseConv1dLayer {
  Tensor<S> weight, bias;
  long pad_l, pad_r, dilation;

  DepthwiseConv1dLayer() = default;
  DepthwiseConv1dLayer(ParamRegistry<S>& reg, const std::string& prefix, long channels, long k,
                       long dilation_, CounterRng& rng)
      : dilation(dilation_) {
    // Length-preserving pads; even kernels put the extra tap on the left.
    const long total = (k - 1) * dilation_;
    pad_l = (total + 1) / 2;
    pad_r = total - pad_l;
    weight = reg.add(prefix + ".weight", init_uniform<S>({channels, k}, k, rng)).tensor;
    bias = reg.add(prefix + ".bias", init_uniform<S>({channels}, k, rng)).tensor;
  }
  Tensor<S> forward(Tensor<S> x) const {
    return depthwise_conv1d(x, weight, bias, pad_l, pad_r, dilation);
  }
};

template <typename S>
struct LinearLayer {
  Tensor<S> weight, bias;

  LinearLayer() = default;
  LinearLayer(ParamRegistry<S>& reg, const std::string& prefix, long in_dim, long out_dim,
              CounterRng& rng) {
    weight = reg.add(prefix + ".weight", init_uniform<S>({out_dim, in_dim}, in_dim, rng)).tensor;
    bias = reg.add(prefix + ".bias", init_uniform<S>({out_dim}, in_dim, rng)).tensor;
  }
  Tensor<S> forward(Tensor<S> x) const { return linear_cols(weight, x, bias); }
};

template <typename S>
struct LayerNormLayer {
  Tensor<S> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(ParamRegistry<S>& reg, const std::string& prefix, long channels) {
    gamma = reg.add(prefix + ".gamma",
                    Tensor<S>::from({channels}, std::vector<S>(static_cast<size_t>(channels), S(1))))
                .tensor;
    beta = reg.add(prefix + ".beta", Tensor<S>::zeros({channels})).tensor;
  }
  Tensor<S> forward(Tensor<S> x) const { return layer_norm(x, gamma, beta); }
};

template <typename S>
struct PReluLayer {
  Tensor<S> slopes;

  PReluLayer() = default;
  PReluLayer(ParamRegistry<S>& reg, const std::string& prefix, long channels) {
    slopes = reg.add(prefix + ".slope", Tensor<S>::from({channels}, std::vector<S>(
                                            static_cast<size_t>(channels), S(0.25))))
                 .tensor;
  }
  Tensor<S> forward(Tensor<S> x) const { return prelu(x, slopes); }
};

// Multi-head attention with learned q/k/v/output projections.
// Self-attention is the q_in == kv_in case.
template <typename S>
struct MultiHeadAttentionLayer {
  LinearLayer<S> wq, wk, wv, wo;
  long heads = 1;

  MultiHeadAttentionLayer() = default;
  MultiHeadAttentionLayer(ParamRegistry<S>& reg, const std::string& prefix, long q_in_dim,
                          long kv_in_dim, long model_dim, long heads_, long out_dim,
                          CounterRng& rng)
      : heads(heads_) {
    check(model_dim % heads_ == 0, "attention: model dim not divisible by heads");
    wq = LinearLayer<S>(reg, prefix + ".wq", q_in_dim, model_dim, rng);
    wk = LinearLayer<S>(reg, prefix + ".wk", kv_in_dim, model_dim, rng);
    wv = LinearLayer<S>(reg, prefix + ".wv", kv_in_dim, model_dim, rng);
    wo = LinearLayer<S>(reg, prefix + ".wo", model_dim, out_dim, rng);
  }

  Tensor<S> forward(Tensor<S> q_in, Tensor<S> kv_in) const {
    auto q = wq.forward(q_in);
    auto k = wk.forward(kv_in);
    auto v = wv.forward(kv_in);
    return wo.forward(scaled_dot_attention(q, k, v, heads));
  }
};

}  // namespace espex::nn
