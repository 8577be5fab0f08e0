#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "espex/tensor.hpp"

// Differentiable kernels. Conventions:
//   - 2-D tensors are [channels x time], row-major.
//   - conv weights are [C_out x C_in x K]; depthwise weights [C x K].
//   - every op validates shapes and reports offending dims.
// Dense inner products go through Eigen; everything around them (padding,
// stride, softmax, normalization, accumulation) is explicit here.

namespace espex::nn {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapMat = Eigen::Map<const RowMat<S>>;

// ---------------------------------------------------------------------------
// pointwise & affine
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  check(a.shape() == b.shape(),
        "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.value());
  for (long i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] += b.value()[static_cast<size_t>(i)];
  auto an = a.node(), bn = b.node();
  return make_op<S>(
      a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<S>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
        }
      });
}

template <typename S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
  check(a.shape() == b.shape(),
        "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.value());
  for (long i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] -= b.value()[static_cast<size_t>(i)];
  auto an = a.node(), bn = b.node();
  return make_op<S>(
      a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<S>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
        }
      });
}

// Elementwise product (the masking op).
template <typename S>
Tensor<S> multiply(Tensor<S> a, Tensor<S> b) {
  check(a.shape() == b.shape(),
        "multiply: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(static_cast<size_t>(a.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_op<S>(
      a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<S>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
        }
      });
}

template <typename S>
Tensor<S> scale(Tensor<S> a, S c) {
  std::vector<S> out(a.value());
  for (auto& v : out) v *= c;
  auto an = a.node();
  return make_op<S>(a.shape(), std::move(out), {a}, [an, c](TensorNode<S>& o) {
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += c * o.grad[i];
  });
}

template <typename S>
Tensor<S> relu(Tensor<S> a) {
  std::vector<S> out(a.value());
  for (auto& v : out) v = v > S(0) ? v : S(0);
  auto an = a.node();
  return make_op<S>(a.shape(), std::move(out), {a}, [an](TensorNode<S>& o) {
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i)
      if (an->value[i] > S(0)) an->grad[i] += o.grad[i];
  });
}

// PReLU with one learnable slope per channel. x: [C x T], slopes: [C].
template <typename S>
Tensor<S> prelu(Tensor<S> x, Tensor<S> slopes) {
  check(x.rank() == 2 && slopes.rank() == 1 && slopes.dim(0) == x.dim(0),
        "prelu: expected x [CxT] with slopes [C], got " + shape_str(x.shape()) + " and " +
            shape_str(slopes.shape()));
  const long C = x.dim(0), T = x.dim(1);
  std::vector<S> out(static_cast<size_t>(C * T));
  for (long c = 0; c < C; ++c) {
    const S a = slopes.value()[static_cast<size_t>(c)];
    for (long t = 0; t < T; ++t) {
      const S v = x.value()[static_cast<size_t>(c * T + t)];
      out[static_cast<size_t>(c * T + t)] = v > S(0) ? v : a * v;
    }
  }
  auto xn = x.node(), sn = slopes.node();
  return make_op<S>(
      x.shape(), std::move(out), {x, slopes}, [xn, sn, C, T](TensorNode<S>& o) {
        for (long c = 0; c < C; ++c) {
          const S a = sn->value[static_cast<size_t>(c)];
          S dslope = S(0);
          for (long t = 0; t < T; ++t) {
            const size_t i = static_cast<size_t>(c * T + t);
            const S v = xn->value[i];
            if (v > S(0)) {
              if (xn->requires_grad) {
                xn->ensure_grad();
                xn->grad[i] += o.grad[i];
              }
            } else {
              dslope += o.grad[i] * v;
              if (xn->requires_grad) {
                xn->ensure_grad();
                xn->grad[i] += a * o.grad[i];
              }
            }
          }
          if (sn->requires_grad) {
            sn->ensure_grad();
            sn->grad[static_cast<size_t>(c)] += dslope;
          }
        }
      });
}

template <typename S>
Tensor<S> sum(Tensor<S> a) {
  S s = S(0);
  for (S v : a.value()) s += v;
  auto an = a.node();
  return make_op<S>({1}, {s}, {a}, [an](TensorNode<S>& o) {
    an->ensure_grad();
    for (auto& g : an->grad) g += o.grad[0];
  });
}

template <typename S>
Tensor<S> mean(Tensor<S> a) {
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

// y = W x + b applied per column: W [out x in], x [in x T], b [out].
// This is the "linear_map" op, also the decoder frame projection.
template <typename S>
Tensor<S> linear_cols(Tensor<S> w, Tensor<S> x, Tensor<S> b) {
  check(w.rank() == 2 && x.rank() == 2 && w.dim(1) == x.dim(0),
        "linear_cols: W " + shape_str(w.shape()) + " incompatible with x " + shape_str(x.shape()));
  check(b.rank() == 1 && b.dim(0) == w.dim(0),
        "linear_cols: bias " + shape_str(b.shape()) + " must be [" + std::to_string(w.dim(0)) + "]");
  const long out_dim = w.dim(0), in_dim = w.dim(1), T = x.dim(1);
  std::vector<S> out(static_cast<size_t>(out_dim * T));
  MapMat<S>(out.data(), out_dim, T).noalias() =
      CMapMat<S>(w.value().data(), out_dim, in_dim) * CMapMat<S>(x.value().data(), in_dim, T);
  for (long r = 0; r < out_dim; ++r) {
    const S bv = b.value()[static_cast<size_t>(r)];
    for (long t = 0; t < T; ++t) out[static_cast<size_t>(r * T + t)] += bv;
  }
  auto wn = w.node(), xn = x.node(), bn = b.node();
  return make_op<S>(
      {out_dim, T}, std::move(out), {w, x, b},
      [wn, xn, bn, out_dim, in_dim, T](TensorNode<S>& o) {
        CMapMat<S> dY(o.grad.data(), out_dim, T);
        if (wn->requires_grad) {
          wn->ensure_grad();
          MapMat<S>(wn->grad.data(), out_dim, in_dim).noalias() +=
              dY * CMapMat<S>(xn->value.data(), in_dim, T).transpose();
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          MapMat<S>(xn->grad.data(), in_dim, T).noalias() +=
              CMapMat<S>(wn->value.data(), out_dim, in_dim).transpose() * dY;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (long r = 0; r < out_dim; ++r) {
            S s = S(0);
            for (long t = 0; t < T; ++t) s += o.grad[static_cast<size_t>(r * T + t)];
            bn->grad[static_cast<size_t>(r)] += s;
          }
        }
      });
}

template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
        "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const long m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<size_t>(m * n));
  MapMat<S>(out.data(), m, n).noalias() =
      CMapMat<S>(a.value().data(), m, k) * CMapMat<S>(b.value().data(), k, n);
  auto an = a.node(), bn = b.node();
  return make_op<S>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode<S>& o) {
    CMapMat<S> dC(o.grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      MapMat<S>(an->grad.data(), m, k).noalias() +=
          dC * CMapMat<S>(bn->value.data(), k, n).transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      MapMat<S>(bn->grad.data(), k, n).noalias() +=
          CMapMat<S>(an->value.data(), m, k).transpose() * dC;
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

// Slice along the last axis (rank 1 or 2).
template <typename S>
Tensor<S> slice_last(Tensor<S> x, long start, long len) {
  const int r = x.rank();
  check(r == 1 || r == 2, "slice_last: rank must be 1 or 2");
  const long T = x.dim(r - 1);
  const long C = r == 2 ? x.dim(0) : 1;
  check(start >= 0 && len >= 1 && start + len <= T, "slice_last: range out of bounds");
  std::vector<S> out(static_cast<size_t>(C * len));
  for (long c = 0; c < C; ++c)
    for (long t = 0; t < len; ++t)
      out[static_cast<size_t>(c * len + t)] = x.value()[static_cast<size_t>(c * T + start + t)];
  std::vector<long> oshape = r == 2 ? std::vector<long>{C, len} : std::vector<long>{len};
  auto xn = x.node();
  return make_op<S>(std::move(oshape), std::move(out), {x},
                    [xn, start, len, C, T](TensorNode<S>& o) {
                      xn->ensure_grad();
                      for (long c = 0; c < C; ++c)
                        for (long t = 0; t < len; ++t)
                          xn->grad[static_cast<size_t>(c * T + start + t)] +=
                              o.grad[static_cast<size_t>(c * len + t)];
                    });
}

// Stack two [C x T] tensors along the channel axis.
template <typename S>
Tensor<S> concat_channels(Tensor<S> a, Tensor<S> b) {
  check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
        "concat_channels: time mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const long Ca = a.dim(0), Cb = b.dim(0), T = a.dim(1);
  std::vector<S> out;
  out.reserve(static_cast<size_t>((Ca + Cb) * T));
  out.insert(out.end(), a.value().begin(), a.value().end());
  out.insert(out.end(), b.value().begin(), b.value().end());
  auto an = a.node(), bn = b.node();
  return make_op<S>({Ca + Cb, T}, std::move(out), {a, b}, [an, bn, Ca, Cb, T](TensorNode<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < static_cast<size_t>(Ca * T); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      const size_t off = static_cast<size_t>(Ca * T);
      for (size_t i = 0; i < static_cast<size_t>(Cb * T); ++i) bn->grad[i] += o.grad[off + i];
    }
  });
}

// Endpoint-aligned linear interpolation along time: [C x T_in] -> [C x t_out].
// First and last columns are copied bit-exactly.
template <typename S>
Tensor<S> interp_time(Tensor<S> x, long t_out) {
  check(x.rank() == 2, "interp_time: expected [CxT]");
  const long C = x.dim(0), T_in = x.dim(1);
  check(T_in >= 2, "interp_time: input length must be >= 2");
  check(t_out >= 2, "interp_time: output length must be >= 2");
  std::vector<S> out(static_cast<size_t>(C * t_out));
  std::vector<long> i0(static_cast<size_t>(t_out));
  std::vector<S> frac(static_cast<size_t>(t_out));
  for (long j = 0; j < t_out; ++j) {
    const double pos = static_cast<double>(j * (T_in - 1)) / static_cast<double>(t_out - 1);
    long lo = static_cast<long>(pos);
    if (lo >= T_in - 1) lo = T_in - 2;
    i0[static_cast<size_t>(j)] = lo;
    frac[static_cast<size_t>(j)] = static_cast<S>(pos - static_cast<double>(lo));
  }
  for (long c = 0; c < C; ++c) {
    const S* row = x.value().data() + c * T_in;
    S* orow = out.data() + c * t_out;
    for (long j = 0; j < t_out; ++j) {
      const S f = frac[static_cast<size_t>(j)];
      const long lo = i0[static_cast<size_t>(j)];
      orow[j] = (S(1) - f) * row[lo] + f * row[lo + 1];
    }
  }
  auto xn = x.node();
  return make_op<S>({C, t_out}, std::move(out), {x},
                    [xn, C, T_in, t_out, i0, frac](TensorNode<S>& o) {
                      xn->ensure_grad();
                      for (long c = 0; c < C; ++c) {
                        S* grow = xn->grad.data() + c * T_in;
                        const S* dorow = o.grad.data() + c * t_out;
                        for (long j = 0; j < t_out; ++j) {
                          const S f = frac[static_cast<size_t>(j)];
                          const long lo = i0[static_cast<size_t>(j)];
                          grow[lo] += (S(1) - f) * dorow[j];
                          grow[lo + 1] += f * dorow[j];
                        }
                      }
                    });
}

// Sum overlapping frames: frames [L x T_frames], hop in [1, L].
// Output length (T_frames - 1) * hop + L; every frame sample lands at
// out[f * hop + l].
template <typename S>
Tensor<S> overlap_add(Tensor<S> frames, long hop) {
  check(frames.rank() == 2, "overlap_add: expected [L x T_frames]");
  const long L = frames.dim(0), F = frames.dim(1);
  check(hop >= 1 && hop <= L, "overlap_add: hop must be in [1, L]");
  const long T = (F - 1) * hop + L;
  std::vector<S> out(static_cast<size_t>(T), S(0));
  for (long l = 0; l < L; ++l)
    for (long f = 0; f < F; ++f)
      out[static_cast<size_t>(f * hop + l)] += frames.value()[static_cast<size_t>(l * F + f)];
  auto fn = frames.node();
  return make_op<S>({T}, std::move(out), {frames}, [fn, L, F, hop](TensorNode<S>& o) {
    fn->ensure_grad();
    for (long l = 0; l < L; ++l)
      for (long f = 0; f < F; ++f)
        fn->grad[static_cast<size_t>(l * F + f)] += o.grad[static_cast<size_t>(f * hop + l)];
  });
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

namespace detail {
// col is [(C_in*K) x T_out]; zero outside the padded input.
template <typename S>
void im2col(const S* x, long C_in, long T, long K, long stride, long pad_l, long T_out, S* col) {
  for (long ci = 0; ci < C_in; ++ci) {
    for (long k = 0; k < K; ++k) {
      S* crow = col + (ci * K + k) * T_out;
      for (long t = 0; t < T_out; ++t) {
        const long src = t * stride + k - pad_l;
        crow[t] = (src >= 0 && src < T) ? x[ci * T + src] : S(0);
      }
    }
  }
}
}  // namespace detail

// Cross-correlation Conv1D: x [C_in x T], w [C_out x C_in x K], b [C_out].
// T_out = floor((T + pad_l + pad_r - K) / stride) + 1.
template <typename S>
Tensor<S> conv1d(Tensor<S> x, Tensor<S> w, Tensor<S> b, long stride, long pad_l, long pad_r) {
  check(x.rank() == 2 && w.rank() == 3, "conv1d: x must be [C_in x T], w [C_out x C_in x K]");
  const long C_in = x.dim(0), T = x.dim(1);
  const long C_out = w.dim(0), K = w.dim(2);
  check(w.dim(1) == C_in, "conv1d: weight C_in " + std::to_string(w.dim(1)) +
                              " does not match input channels " + std::to_string(C_in));
  check(b.rank() == 1 && b.dim(0) == C_out,
        "conv1d: bias must be [" + std::to_string(C_out) + "], got " + shape_str(b.shape()));
  check(K >= 1 && stride >= 1 && pad_l >= 0 && pad_r >= 0, "conv1d: bad kernel/stride/pads");
  check(T + pad_l + pad_r >= K, "conv1d: input too short for kernel");
  const long T_out = (T + pad_l + pad_r - K) / stride + 1;

  std::vector<S> col(static_cast<size_t>(C_in * K * T_out));
  detail::im2col(x.value().data(), C_in, T, K, stride, pad_l, T_out, col.data());
  std::vector<S> out(static_cast<size_t>(C_out * T_out));
  MapMat<S>(out.data(), C_out, T_out).noalias() =
      CMapMat<S>(w.value().data(), C_out, C_in * K) * CMapMat<S>(col.data(), C_in * K, T_out);
  for (long co = 0; co < C_out; ++co) {
    const S bv = b.value()[static_cast<size_t>(co)];
    for (long t = 0; t < T_out; ++t) out[static_cast<size_t>(co * T_out + t)] += bv;
  }

  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op<S>(
      {C_out, T_out}, std::move(out), {x, w, b},
      [xn, wn, bn, C_in, T, C_out, K, stride, pad_l, T_out](TensorNode<S>& o) {
        CMapMat<S> dY(o.grad.data(), C_out, T_out);
        // col is rebuilt here rather than saved; it is the largest buffer.
        std::vector<S> col(static_cast<size_t>(C_in * K * T_out));
        detail::im2col(xn->value.data(), C_in, T, K, stride, pad_l, T_out, col.data());
        if (wn->requires_grad) {
          wn->ensure_grad();
          MapMat<S>(wn->grad.data(), C_out, C_in * K).noalias() +=
              dY * CMapMat<S>(col.data(), C_in * K, T_out).transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (long co = 0; co < C_out; ++co) {
            S s = S(0);
            for (long t = 0; t < T_out; ++t) s += o.grad[static_cast<size_t>(co * T_out + t)];
            bn->grad[static_cast<size_t>(co)] += s;
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          std::vector<S> dcol(static_cast<size_t>(C_in * K * T_out));
          MapMat<S>(dcol.data(), C_in * K, T_out).noalias() =
              CMapMat<S>(wn->value.data(), C_out, C_in * K).transpose() * dY;
          for (long ci = 0; ci < C_in; ++ci)
            for (long k = 0; k < K; ++k) {
              const S* drow = dcol.data() + (ci * K + k) * T_out;
              for (long t = 0; t < T_out; ++t) {
                const long src = t * stride + k - pad_l;
                if (src >= 0 && src < T) xn->grad[static_cast<size_t>(ci * T + src)] += drow[t];
              }
            }
        }
      });
}

// Depthwise Conv1D, length-preserving: each channel convolved with its own
// kernel row. Pads must satisfy pad_l + pad_r = (K - 1) * dilation.
template <typename S>
Tensor<S> depthwise_conv1d(Tensor<S> x, Tensor<S> w, Tensor<S> b, long pad_l, long pad_r,
                           long dilation = 1) {
  check(x.rank() == 2 && w.rank() == 2, "depthwise_conv1d: x [CxT], w [CxK]");
  const long C = x.dim(0), T = x.dim(1), K = w.dim(1);
  check(w.dim(0) == C, "depthwise_conv1d: weight channels " + std::to_string(w.dim(0)) +
                           " != input channels " + std::to_string(C));
  check(b.rank() == 1 && b.dim(0) == C, "depthwise_conv1d: bias must be [C]");
  check(dilation >= 1, "depthwise_conv1d: dilation must be >= 1");
  check(pad_l + pad_r == (K - 1) * dilation,
        "depthwise_conv1d: pads not length-preserving (need pad_l+pad_r = (K-1)*dilation)");
  std::vector<S> out(static_cast<size_t>(C * T));
  for (long c = 0; c < C; ++c) {
    const S* xr = x.value().data() + c * T;
    const S* wr = w.value().data() + c * K;
    const S bv = b.value()[static_cast<size_t>(c)];
    S* orow = out.data() + c * T;
    for (long t = 0; t < T; ++t) {
      S acc = bv;
      for (long k = 0; k < K; ++k) {
        const long src = t + k * dilation - pad_l;
        if (src >= 0 && src < T) acc += wr[k] * xr[src];
      }
      orow[t] = acc;
    }
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op<S>(
      {C, T}, std::move(out), {x, w, b}, [xn, wn, bn, C, T, K, pad_l, dilation](TensorNode<S>& o) {
        for (long c = 0; c < C; ++c) {
          const S* xr = xn->value.data() + c * T;
          const S* wr = wn->value.data() + c * K;
          const S* dor = o.grad.data() + c * T;
          if (bn->requires_grad) {
            bn->ensure_grad();
            S s = S(0);
            for (long t = 0; t < T; ++t) s += dor[t];
            bn->grad[static_cast<size_t>(c)] += s;
          }
          if (wn->requires_grad) {
            wn->ensure_grad();
            for (long k = 0; k < K; ++k) {
              S s = S(0);
              for (long t = 0; t < T; ++t) {
                const long src = t + k * dilation - pad_l;
                if (src >= 0 && src < T) s += dor[t] * xr[src];
              }
              wn->grad[static_cast<size_t>(c * K + k)] += s;
            }
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            S* gx = xn->grad.data() + c * T;
            for (long t = 0; t < T; ++t) {
              const S d = dor[t];
              for (long k = 0; k < K; ++k) {
                const long src = t + k * dilation - pad_l;
                if (src >= 0 && src < T) gx[src] += wr[k] * d;
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Per time step, normalize across channels to zero mean / unit variance
// (population variance, eps inside the sqrt), then scale/shift per channel.
template <typename S>
Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gamma, Tensor<S> beta, S eps = S(1e-5)) {
  check(x.rank() == 2, "layer_norm: expected [CxT]");
  const long C = x.dim(0), T = x.dim(1);
  check(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 && beta.dim(0) == C,
        "layer_norm: gamma/beta must be [C]");
  std::vector<S> out(static_cast<size_t>(C * T));
  auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(C * T));
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(T));
  for (long t = 0; t < T; ++t) {
    S mu = S(0);
    for (long c = 0; c < C; ++c) mu += x.value()[static_cast<size_t>(c * T + t)];
    mu /= static_cast<S>(C);
    S var = S(0);
    for (long c = 0; c < C; ++c) {
      const S d = x.value()[static_cast<size_t>(c * T + t)] - mu;
      var += d * d;
    }
    var /= static_cast<S>(C);
    const S istd = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(t)] = istd;
    for (long c = 0; c < C; ++c) {
      const size_t i = static_cast<size_t>(c * T + t);
      const S xh = (x.value()[i] - mu) * istd;
      (*xhat)[i] = xh;
      out[i] = gamma.value()[static_cast<size_t>(c)] * xh + beta.value()[static_cast<size_t>(c)];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op<S>(
      {C, T}, std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat, inv_std, C, T](TensorNode<S>& o) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (long t = 0; t < T; ++t) {
          S sum_dxh = S(0), sum_dxh_xh = S(0);
          for (long c = 0; c < C; ++c) {
            const size_t i = static_cast<size_t>(c * T + t);
            const S dy = o.grad[i];
            const S xh = (*xhat)[i];
            if (gn->requires_grad) gn->grad[static_cast<size_t>(c)] += dy * xh;
            if (bn->requires_grad) bn->grad[static_cast<size_t>(c)] += dy;
            const S dxh = dy * gn->value[static_cast<size_t>(c)];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          if (xn->requires_grad) {
            const S istd = (*inv_std)[static_cast<size_t>(t)];
            const S invC = S(1) / static_cast<S>(C);
            for (long c = 0; c < C; ++c) {
              const size_t i = static_cast<size_t>(c * T + t);
              const S dxh = o.grad[i] * gn->value[static_cast<size_t>(c)];
              xn->grad[i] += istd * (dxh - invC * sum_dxh - (*xhat)[i] * invC * sum_dxh_xh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

// Scaled dot-product attention over already-projected q/k/v.
//   q [D x T_q], k [D x T_k], v [Dv x T_k]; per head d = D/heads:
//   A_h = softmax(q_h^T k_h / sqrt(d)) rows over T_k, out_h = v_h A_h^T.
// Heads are concatenated along the channel axis: out [Dv x T_q].
template <typename S>
Tensor<S> scaled_dot_attention(Tensor<S> q, Tensor<S> k, Tensor<S> v, long heads) {
  check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: q/k/v must be rank 2");
  const long D = q.dim(0), Tq = q.dim(1), Tk = k.dim(1), Dv = v.dim(0);
  check(k.dim(0) == D, "attention: q/k dim mismatch");
  check(v.dim(1) == Tk, "attention: k/v time mismatch");
  check(heads >= 1 && D % heads == 0 && Dv % heads == 0,
        "attention: dims not divisible by heads");
  const long d = D / heads, dv = Dv / heads;
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(d));

  std::vector<S> out(static_cast<size_t>(Dv * Tq));
  auto attn = std::make_shared<std::vector<S>>(static_cast<size_t>(heads * Tq * Tk));

  CMapMat<S> Q(q.value().data(), D, Tq), K(k.value().data(), D, Tk), V(v.value().data(), Dv, Tk);
  MapMat<S> O(out.data(), Dv, Tq);
  for (long h = 0; h < heads; ++h) {
    MapMat<S> A(attn->data() + h * Tq * Tk, Tq, Tk);
    A.noalias() = (Q.middleRows(h * d, d).transpose() * K.middleRows(h * d, d)) * inv_sqrt_d;
    for (long i = 0; i < Tq; ++i) {
      S* row = A.data() + i * Tk;
      S mx = row[0];
      for (long j = 1; j < Tk; ++j) mx = std::max(mx, row[j]);
      S z = S(0);
      for (long j = 0; j < Tk; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      const S iz = S(1) / z;
      for (long j = 0; j < Tk; ++j) row[j] *= iz;
    }
    O.middleRows(h * dv, dv).noalias() = V.middleRows(h * dv, dv) * A.transpose();
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  return make_op<S>(
      {Dv, Tq}, std::move(out), {q, k, v},
      [qn, kn, vn, attn, heads, d, dv, Tq, Tk, inv_sqrt_d](TensorNode<S>& o) {
        const long D = heads * d, Dv = heads * dv;
        CMapMat<S> dO(o.grad.data(), Dv, Tq);
        CMapMat<S> Q(qn->value.data(), D, Tq), K(kn->value.data(), D, Tk),
            V(vn->value.data(), Dv, Tk);
        if (qn->requires_grad) qn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        if (vn->requires_grad) vn->ensure_grad();
        for (long h = 0; h < heads; ++h) {
          CMapMat<S> A(attn->data() + h * Tq * Tk, Tq, Tk);
          if (vn->requires_grad) {
            MapMat<S>(vn->grad.data(), Dv, Tk).middleRows(h * dv, dv).noalias() +=
                dO.middleRows(h * dv, dv) * A;
          }
          if (!qn->requires_grad && !kn->requires_grad) continue;
          RowMat<S> dA(Tq, Tk);
          dA.noalias() = dO.middleRows(h * dv, dv).transpose() * V.middleRows(h * dv, dv);
          // softmax backward, row-wise: dS = A .* (dA - rowsum(dA .* A))
          for (long i = 0; i < Tq; ++i) {
            S dot = S(0);
            for (long j = 0; j < Tk; ++j) dot += dA(i, j) * A(i, j);
            for (long j = 0; j < Tk; ++j) dA(i, j) = A(i, j) * (dA(i, j) - dot);
          }
          if (qn->requires_grad) {
            MapMat<S>(qn->grad.data(), D, Tq).middleRows(h * d, d).noalias() +=
                (K.middleRows(h * d, d) * dA.transpose()) * inv_sqrt_d;
          }
          if (kn->requires_grad) {
            MapMat<S>(kn->grad.data(), D, Tk).middleRows(h * d, d).noalias() +=
                (Q.middleRows(h * d, d) * dA) * inv_sqrt_d;
          }
        }
      });
}

}  // namespace espex::nn
