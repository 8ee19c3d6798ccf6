#pragma once

// Forward/backward neural layers recorded on the autodiff tape.
//
// Rank-4 activations are laid out [batch, channels, rows, cols].  Convolution
// weights are [Cout, Cin, k, k]; transposed-convolution weights are
// [Cin, Cout, k, k] so that deconv2d's forward pass is exactly the adjoint of
// conv2d with the same kernel.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "stv/tape.hpp"
#include "stv/tensor.hpp"

namespace stv::nn {

using ad::Tape;
using ad::Var;

enum class LayerKind {
  conv2d,
  maxpool2d,
  maxunpool2d,
  deconv2d,
  batchnorm2d,
  dropout,
  fully_connected,
  relu,
  l2norm,
  softmax,
  concat,
  subtract_merge,
  inception_lite,
  // plumbing kinds used by the network graphs
  input,
  crop2d,
  flatten,
  reshape_map,  // [B, C*H*W] -> [B, C, H, W]
};

enum class HaarPattern { two_rect_horizontal, two_rect_vertical, four_rect_checker };

enum class Mode { train, eval };

namespace detail {

inline void check_rank4(const char* op, const Tensor& t) {
  if (t.rank() != 4)
    throw ShapeError(std::string(op) + ": rank-4 [B,C,H,W] input required, got " +
                     shape_str(t.shape));
}

/// Output indices o with 0 <= o*stride + k - pad < extent, as [lo, hi).
inline std::pair<std::size_t, std::size_t> valid_out_range(std::size_t extent,
                                                           std::size_t out_extent,
                                                           std::size_t k, std::size_t stride,
                                                           long pad) {
  long lo = 0;
  const long off = static_cast<long>(k) - pad;
  if (off < 0) {
    // o*stride >= -off
    lo = (-off + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  }
  // o*stride <= extent - 1 - off
  const long top = static_cast<long>(extent) - 1 - off;
  long hi = top < 0 ? -1 : top / static_cast<long>(stride);
  hi = std::min(hi, static_cast<long>(out_extent) - 1);
  lo = std::max(lo, 0L);
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi) + 1};
}

inline std::size_t conv_extent(const char* op, std::size_t in, std::size_t pad,
                               std::size_t k, std::size_t stride) {
  if (in + 2 * pad < k)
    throw ShapeError(std::string(op) + ": spatial extent " + std::to_string(in) +
                     " (+2*" + std::to_string(pad) + " pad) smaller than kernel " +
                     std::to_string(k));
  const std::size_t span = in + 2 * pad - k;
  if (span % stride != 0)
    throw ShapeError(std::string(op) + ": non-integral output extent ((" +
                     std::to_string(in) + " + 2*" + std::to_string(pad) + " - " +
                     std::to_string(k) + ") / " + std::to_string(stride) + ")");
  return span / stride + 1;
}

}  // namespace detail

// --- convolution ---------------------------------------------------------------

/// 2-D convolution (cross-correlation): out = w * x + b.
/// x: [B,Cin,H,W], w: [Cout,Cin,k,k], b: [Cout].
inline Var conv2d(Tape& t, Var x, Var w, Var b, std::size_t stride = 1,
                  std::size_t pad = 0) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  detail::check_rank4("conv2d", xv);
  if (wv.rank() != 4)
    throw ShapeError("conv2d: weights must be [Cout,Cin,k,k], got " + shape_str(wv.shape));
  const std::size_t B = xv.shape[0], Cin = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  const std::size_t Cout = wv.shape[0], k = wv.shape[2];
  if (wv.shape[1] != Cin)
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(Cin) +
                     " channels but weights expect " + std::to_string(wv.shape[1]));
  if (wv.shape[3] != k) throw ShapeError("conv2d: non-square kernel " + shape_str(wv.shape));
  if (bv.shape != Shape{Cout})
    throw ShapeError("conv2d: bias must be [Cout], got " + shape_str(bv.shape));
  const std::size_t Ho = detail::conv_extent("conv2d", H, pad, k, stride);
  const std::size_t Wo = detail::conv_extent("conv2d", W, pad, k, stride);

  Tensor out({B, Cout, Ho, Wo});
  const long ipad = static_cast<long>(pad);
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t co = 0; co < Cout; ++co) {
      double* oplane = &out.data[(bi * Cout + co) * Ho * Wo];
      const double bias = bv.data[co];
      for (std::size_t i = 0; i < Ho * Wo; ++i) oplane[i] = bias;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* iplane = &xv.data[(bi * Cin + ci) * H * W];
        const double* wker = &wv.data[(co * Cin + ci) * k * k];
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto [oy_lo, oy_hi] = detail::valid_out_range(H, Ho, ky, stride, ipad);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wgt = wker[ky * k + kx];
            const auto [ox_lo, ox_hi] = detail::valid_out_range(W, Wo, kx, stride, ipad);
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const std::size_t iy = oy * stride + ky - static_cast<std::size_t>(ipad);
              const double* irow = &iplane[iy * W + ox_lo * stride + kx -
                                           static_cast<std::size_t>(ipad)];
              double* orow = &oplane[oy * Wo];
              if (stride == 1) {
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                  orow[ox] += wgt * irow[ox - ox_lo];
              } else {
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                  orow[ox] += wgt * irow[(ox - ox_lo) * stride];
              }
            }
          }
        }
      }
    }
  }

  int xid = x.id, wid = w.id, bid = b.id;
  auto bw = [xid, wid, bid, B, Cin, Cout, H, W, Ho, Wo, k, stride,
             ipad](Tape& tp, const std::vector<double>& g, auto& flow) {
    const auto& xv2 = tp.node(xid).value.data;
    const auto& wv2 = tp.node(wid).value.data;
    const bool gx = tp.node(xid).needs_grad;
    const bool gw = tp.node(wid).needs_grad;
    const bool gb = tp.node(bid).needs_grad;
    std::vector<double>* fx = gx ? &Tape::flow_of(flow, xid, B * Cin * H * W) : nullptr;
    std::vector<double>* fw = gw ? &Tape::flow_of(flow, wid, Cout * Cin * k * k) : nullptr;
    std::vector<double>* fb = gb ? &Tape::flow_of(flow, bid, Cout) : nullptr;
    for (std::size_t bi = 0; bi < B; ++bi) {
      for (std::size_t co = 0; co < Cout; ++co) {
        const double* gplane = &g[(bi * Cout + co) * Ho * Wo];
        if (fb) {
          double s = 0.0;
          for (std::size_t i = 0; i < Ho * Wo; ++i) s += gplane[i];
          (*fb)[co] += s;
        }
        if (!fx && !fw) continue;
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          const double* iplane = &xv2[(bi * Cin + ci) * H * W];
          const double* wker = &wv2[(co * Cin + ci) * k * k];
          double* fxplane = fx ? &(*fx)[(bi * Cin + ci) * H * W] : nullptr;
          double* fwker = fw ? &(*fw)[(co * Cin + ci) * k * k] : nullptr;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto [oy_lo, oy_hi] = detail::valid_out_range(H, Ho, ky, stride, ipad);
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double wgt = wker[ky * k + kx];
              const auto [ox_lo, ox_hi] = detail::valid_out_range(W, Wo, kx, stride, ipad);
              double wacc = 0.0;
              for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                const std::size_t iy = oy * stride + ky - static_cast<std::size_t>(ipad);
                const std::size_t ix0 = ox_lo * stride + kx - static_cast<std::size_t>(ipad);
                const double* grow = &gplane[oy * Wo];
                const double* irow = &iplane[iy * W + ix0];
                if (fxplane) {
                  double* frow = &fxplane[iy * W + ix0];
                  if (stride == 1) {
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                      frow[ox - ox_lo] += wgt * grow[ox];
                      wacc += grow[ox] * irow[ox - ox_lo];
                    }
                  } else {
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                      frow[(ox - ox_lo) * stride] += wgt * grow[ox];
                      wacc += grow[ox] * irow[(ox - ox_lo) * stride];
                    }
                  }
                } else {
                  if (stride == 1) {
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                      wacc += grow[ox] * irow[ox - ox_lo];
                  } else {
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                      wacc += grow[ox] * irow[(ox - ox_lo) * stride];
                  }
                }
              }
              if (fwker) fwker[ky * k + kx] += wacc;
            }
          }
        }
      }
    }
  };
  return t.record("conv2d", {xid, wid, bid}, std::move(out), std::move(bw));
}

// --- max pooling -----------------------------------------------------------------

struct PoolResult {
  Var out;
  // flat indices into the pool input's data array, one per output entry
  std::vector<std::size_t> indices;
  Shape input_shape;
};

/// Max pooling with argmax indices.  Optional padding treats out-of-bounds
/// samples as -inf, so indices always reference real entries.
inline PoolResult maxpool2d(Tape& t, Var x, std::size_t window, std::size_t stride,
                            std::size_t pad = 0) {
  const Tensor& xv = t.value(x);
  detail::check_rank4("maxpool2d", xv);
  const std::size_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  if (window == 0 || window > H + 2 * pad || window > W + 2 * pad)
    throw ShapeError("maxpool2d: window " + std::to_string(window) +
                     " exceeds spatial extent " + shape_str(xv.shape));
  if (pad >= window) throw ShapeError("maxpool2d: pad must be smaller than window");
  const std::size_t Ho = (H + 2 * pad - window) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - window) / stride + 1;

  Tensor out({B, C, Ho, Wo});
  std::vector<std::size_t> idx(out.numel());
  const long ipad = static_cast<long>(pad);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* iplane = &xv.data[bc * H * W];
    double* oplane = &out.data[bc * Ho * Wo];
    std::size_t* iidx = &idx[bc * Ho * Wo];
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t besti = 0;
        for (std::size_t wy = 0; wy < window; ++wy) {
          const long iy = static_cast<long>(oy * stride + wy) - ipad;
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t wx = 0; wx < window; ++wx) {
            const long ix = static_cast<long>(ox * stride + wx) - ipad;
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            const std::size_t flat = static_cast<std::size_t>(iy) * W +
                                     static_cast<std::size_t>(ix);
            if (iplane[flat] > best) {
              best = iplane[flat];
              besti = flat;
            }
          }
        }
        oplane[oy * Wo + ox] = best;
        iidx[oy * Wo + ox] = bc * H * W + besti;
      }
    }
  }

  int xid = x.id;
  const std::size_t n_in = xv.numel(), n_out = out.numel();
  const Shape in_shape = xv.shape;  // copy before record() may reallocate nodes
  std::vector<std::size_t> idx_copy = idx;
  Var out_var = t.record("maxpool2d", {xid}, std::move(out),
                         [xid, n_in, n_out, idx_copy](Tape& tp, const std::vector<double>& g,
                                                      auto& flow) {
                           if (!tp.node(xid).needs_grad) return;
                           auto& fx = Tape::flow_of(flow, xid, n_in);
                           for (std::size_t i = 0; i < n_out; ++i) fx[idx_copy[i]] += g[i];
                         });
  return PoolResult{out_var, std::move(idx), in_shape};
}

/// Scatters values back to the argmax positions recorded by a matching pool;
/// all other entries are zero.  Overlapping windows accumulate.
inline Var maxunpool2d(Tape& t, Var x, const std::vector<std::size_t>& indices,
                       const Shape& target_shape) {
  const Tensor& xv = t.value(x);
  detail::check_rank4("maxunpool2d", xv);
  if (indices.size() != xv.numel())
    throw ShapeError("maxunpool2d: " + std::to_string(indices.size()) +
                     " indices for " + std::to_string(xv.numel()) + " entries");
  Tensor out(target_shape);
  const std::size_t n_out = out.numel();
  for (std::size_t i : indices)
    if (i >= n_out)
      throw ShapeError("maxunpool2d: index " + std::to_string(i) +
                       " outside target shape " + shape_str(target_shape));
  for (std::size_t i = 0; i < indices.size(); ++i) out.data[indices[i]] += xv.data[i];
  int xid = x.id;
  const std::size_t n_in = xv.numel();
  std::vector<std::size_t> idx_copy = indices;
  return t.record("maxunpool2d", {xid}, std::move(out),
                  [xid, n_in, idx_copy](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, xid, n_in);
                    for (std::size_t i = 0; i < n_in; ++i) fx[i] += g[idx_copy[i]];
                  });
}

// --- transposed convolution --------------------------------------------------------

/// Transposed convolution.  x: [B,Cin,H,W], w: [Cin,Cout,k,k], b: [Cout].
/// Output extent: (H-1)*stride + k - 2*pad.  Forward equals the gradient of
/// conv2d w.r.t. its input for the same kernel.
inline Var deconv2d(Tape& t, Var x, Var w, Var b, std::size_t stride = 1,
                    std::size_t pad = 0) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  detail::check_rank4("deconv2d", xv);
  if (wv.rank() != 4)
    throw ShapeError("deconv2d: weights must be [Cin,Cout,k,k], got " + shape_str(wv.shape));
  const std::size_t B = xv.shape[0], Cin = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  const std::size_t Cout = wv.shape[1], k = wv.shape[2];
  if (wv.shape[0] != Cin)
    throw ShapeError("deconv2d: channel mismatch, input has " + std::to_string(Cin) +
                     " channels but weights expect " + std::to_string(wv.shape[0]));
  if (bv.shape != Shape{Cout})
    throw ShapeError("deconv2d: bias must be [Cout], got " + shape_str(bv.shape));
  const long Ho_l = static_cast<long>((H - 1) * stride + k) - 2 * static_cast<long>(pad);
  const long Wo_l = static_cast<long>((W - 1) * stride + k) - 2 * static_cast<long>(pad);
  if (Ho_l < 1 || Wo_l < 1)
    throw ShapeError("deconv2d: invalid geometry, output extent would be " +
                     std::to_string(Ho_l) + "x" + std::to_string(Wo_l));
  const std::size_t Ho = static_cast<std::size_t>(Ho_l), Wo = static_cast<std::size_t>(Wo_l);

  Tensor out({B, Cout, Ho, Wo});
  const long ipad = static_cast<long>(pad);
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t co = 0; co < Cout; ++co) {
      double* oplane = &out.data[(bi * Cout + co) * Ho * Wo];
      for (std::size_t i = 0; i < Ho * Wo; ++i) oplane[i] = bv.data[co];
    }
    for (std::size_t ci = 0; ci < Cin; ++ci) {
      const double* iplane = &xv.data[(bi * Cin + ci) * H * W];
      for (std::size_t co = 0; co < Cout; ++co) {
        double* oplane = &out.data[(bi * Cout + co) * Ho * Wo];
        const double* wker = &wv.data[(ci * Cout + co) * k * k];
        for (std::size_t iy = 0; iy < H; ++iy) {
          for (std::size_t ix = 0; ix < W; ++ix) {
            const double xval = iplane[iy * W + ix];
            if (xval == 0.0) continue;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long oy = static_cast<long>(iy * stride + ky) - ipad;
              if (oy < 0 || oy >= static_cast<long>(Ho)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ox = static_cast<long>(ix * stride + kx) - ipad;
                if (ox < 0 || ox >= static_cast<long>(Wo)) continue;
                oplane[static_cast<std::size_t>(oy) * Wo + static_cast<std::size_t>(ox)] +=
                    xval * wker[ky * k + kx];
              }
            }
          }
        }
      }
    }
  }

  int xid = x.id, wid = w.id, bid = b.id;
  auto bw = [xid, wid, bid, B, Cin, Cout, H, W, Ho, Wo, k, stride,
             ipad](Tape& tp, const std::vector<double>& g, auto& flow) {
    const auto& xv2 = tp.node(xid).value.data;
    const auto& wv2 = tp.node(wid).value.data;
    const bool gx = tp.node(xid).needs_grad;
    const bool gw = tp.node(wid).needs_grad;
    const bool gb = tp.node(bid).needs_grad;
    std::vector<double>* fx = gx ? &Tape::flow_of(flow, xid, B * Cin * H * W) : nullptr;
    std::vector<double>* fw = gw ? &Tape::flow_of(flow, wid, Cin * Cout * k * k) : nullptr;
    std::vector<double>* fb = gb ? &Tape::flow_of(flow, bid, Cout) : nullptr;
    if (fb) {
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t co = 0; co < Cout; ++co) {
          const double* gplane = &g[(bi * Cout + co) * Ho * Wo];
          double s = 0.0;
          for (std::size_t i = 0; i < Ho * Wo; ++i) s += gplane[i];
          (*fb)[co] += s;
        }
    }
    if (!fx && !fw) return;
    for (std::size_t bi = 0; bi < B; ++bi) {
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* iplane = &xv2[(bi * Cin + ci) * H * W];
        double* fxplane = fx ? &(*fx)[(bi * Cin + ci) * H * W] : nullptr;
        for (std::size_t co = 0; co < Cout; ++co) {
          const double* gplane = &g[(bi * Cout + co) * Ho * Wo];
          const double* wker = &wv2[(ci * Cout + co) * k * k];
          double* fwker = fw ? &(*fw)[(ci * Cout + co) * k * k] : nullptr;
          for (std::size_t iy = 0; iy < H; ++iy) {
            for (std::size_t ix = 0; ix < W; ++ix) {
              const double xval = iplane[iy * W + ix];
              double acc = 0.0;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long oy = static_cast<long>(iy * stride + ky) - ipad;
                if (oy < 0 || oy >= static_cast<long>(Ho)) continue;
                const double* grow = &gplane[static_cast<std::size_t>(oy) * Wo];
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ox = static_cast<long>(ix * stride + kx) - ipad;
                  if (ox < 0 || ox >= static_cast<long>(Wo)) continue;
                  const double gv = grow[static_cast<std::size_t>(ox)];
                  acc += gv * wker[ky * k + kx];
                  if (fwker) fwker[ky * k + kx] += gv * xval;
                }
              }
              if (fxplane) fxplane[iy * W + ix] += acc;
            }
          }
        }
      }
    }
  };
  return t.record("deconv2d", {xid, wid, bid}, std::move(out), std::move(bw));
}

// --- batch normalization -------------------------------------------------------------

/// Running statistics owned by the network's training context.
struct BatchNormState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]

  static BatchNormState init(std::size_t channels) {
    BatchNormState s;
    s.running_mean = Tensor({channels});
    s.running_var = Tensor({channels}, 1.0);
    return s;
  }
};

/// Spatial batch normalization over [B,C,H,W] with affine scale/shift.
/// Train mode normalizes with batch statistics and updates `state` in place
/// (momentum convention: running <- momentum*running + (1-momentum)*batch).
inline Var batchnorm2d(Tape& t, Var x, Var gamma, Var beta, BatchNormState* state,
                       Mode mode, double epsilon = 1e-5, double momentum = 0.9) {
  const Tensor& xv = t.value(x);
  detail::check_rank4("batchnorm2d", xv);
  if (epsilon <= 0.0) throw DomainError("batchnorm2d: epsilon must be positive");
  const std::size_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  if (gv.shape != Shape{C} || bv.shape != Shape{C})
    throw ShapeError("batchnorm2d: gamma/beta must be [C]=[" + std::to_string(C) + "], got " +
                     shape_str(gv.shape) + " and " + shape_str(bv.shape));
  const std::size_t N = B * H * W;  // per-channel sample count

  std::vector<double> mean_c(C), invstd_c(C);
  if (mode == Mode::train) {
    if (N < 2)
      throw DomainError("batchnorm2d: train mode needs batch*H*W >= 2 per channel, got " +
                        std::to_string(N));
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t bi = 0; bi < B; ++bi) {
        const double* plane = &xv.data[(bi * C + c) * H * W];
        for (std::size_t i = 0; i < H * W; ++i) s += plane[i];
      }
      const double mu = s / static_cast<double>(N);
      double ss = 0.0;
      for (std::size_t bi = 0; bi < B; ++bi) {
        const double* plane = &xv.data[(bi * C + c) * H * W];
        for (std::size_t i = 0; i < H * W; ++i) {
          const double d = plane[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(N);
      mean_c[c] = mu;
      invstd_c[c] = 1.0 / std::sqrt(var + epsilon);
      if (state) {
        state->running_mean.data[c] = momentum * state->running_mean.data[c] +
                                      (1.0 - momentum) * mu;
        state->running_var.data[c] = momentum * state->running_var.data[c] +
                                     (1.0 - momentum) * var;
      }
    }
  } else {
    if (!state) throw DomainError("batchnorm2d: eval mode requires running statistics");
    for (std::size_t c = 0; c < C; ++c) {
      mean_c[c] = state->running_mean.data[c];
      invstd_c[c] = 1.0 / std::sqrt(state->running_var.data[c] + epsilon);
    }
  }

  Tensor out(xv.shape);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t c = 0; c < C; ++c) {
      const double* iplane = &xv.data[(bi * C + c) * H * W];
      double* oplane = &out.data[(bi * C + c) * H * W];
      const double mu = mean_c[c], is = invstd_c[c], ga = gv.data[c], be = bv.data[c];
      for (std::size_t i = 0; i < H * W; ++i) oplane[i] = ga * (iplane[i] - mu) * is + be;
    }

  int xid = x.id, gid = gamma.id, bid = beta.id;
  const bool train = mode == Mode::train;
  auto bw = [xid, gid, bid, B, C, H, W, N, mean_c, invstd_c,
             train](Tape& tp, const std::vector<double>& g, auto& flow) {
    const auto& xv2 = tp.node(xid).value.data;
    const auto& gv2 = tp.node(gid).value.data;
    const bool gx = tp.node(xid).needs_grad;
    const bool gg = tp.node(gid).needs_grad;
    const bool gb = tp.node(bid).needs_grad;
    std::vector<double>* fx = gx ? &Tape::flow_of(flow, xid, B * C * H * W) : nullptr;
    std::vector<double>* fg = gg ? &Tape::flow_of(flow, gid, C) : nullptr;
    std::vector<double>* fb = gb ? &Tape::flow_of(flow, bid, C) : nullptr;
    const std::size_t plane = H * W;
    for (std::size_t c = 0; c < C; ++c) {
      const double mu = mean_c[c], is = invstd_c[c], ga = gv2[c];
      double sum_g = 0.0, sum_gxhat = 0.0;
      for (std::size_t bi = 0; bi < B; ++bi) {
        const double* gpl = &g[(bi * C + c) * plane];
        const double* xpl = &xv2[(bi * C + c) * plane];
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += gpl[i];
          sum_gxhat += gpl[i] * (xpl[i] - mu) * is;
        }
      }
      if (fg) (*fg)[c] += sum_gxhat;
      if (fb) (*fb)[c] += sum_g;
      if (!fx) continue;
      if (train) {
        // dx = (gamma*invstd/N) * (N*g - sum_g - xhat*sum(g*xhat))
        const double kf = ga * is / static_cast<double>(N);
        for (std::size_t bi = 0; bi < B; ++bi) {
          const double* gpl = &g[(bi * C + c) * plane];
          const double* xpl = &xv2[(bi * C + c) * plane];
          double* fpl = &(*fx)[(bi * C + c) * plane];
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (xpl[i] - mu) * is;
            fpl[i] += kf * (static_cast<double>(N) * gpl[i] - sum_g - xhat * sum_gxhat);
          }
        }
      } else {
        const double kf = ga * is;
        for (std::size_t bi = 0; bi < B; ++bi) {
          const double* gpl = &g[(bi * C + c) * plane];
          double* fpl = &(*fx)[(bi * C + c) * plane];
          for (std::size_t i = 0; i < plane; ++i) fpl[i] += kf * gpl[i];
        }
      }
    }
  };
  return t.record("batchnorm2d", {xid, gid, bid}, std::move(out), std::move(bw));
}

// --- dropout -------------------------------------------------------------------------

/// Inverted dropout: train mode zeroes entries with probability p and scales
/// survivors by 1/(1-p); eval mode is the identity.  Mask is a pure function
/// of the seed.
inline Var dropout(Tape& t, Var x, double p, std::uint64_t seed, Mode mode) {
  if (p < 0.0 || p >= 1.0)
    throw DomainError("dropout: p must lie in [0,1), got " + std::to_string(p));
  const Tensor& xv = t.value(x);
  const std::size_t n = xv.numel();
  if (mode == Mode::eval || p == 0.0) {
    Tensor out = xv;
    out.requires_grad = false;
    out.grad.reset();
    int xid = x.id;
    return t.record("dropout", {xid}, std::move(out),
                    [xid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
                      if (!tp.node(xid).needs_grad) return;
                      auto& fx = Tape::flow_of(flow, xid, n);
                      for (std::size_t i = 0; i < n; ++i) fx[i] += g[i];
                    });
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> mask(n);
  const double inv_keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < n; ++i) mask[i] = u(rng) < p ? 0.0 : inv_keep;
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = xv.data[i] * mask[i];
  int xid = x.id;
  return t.record("dropout", {xid}, std::move(out),
                  [xid, n, mask](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, xid, n);
                    for (std::size_t i = 0; i < n; ++i) fx[i] += g[i] * mask[i];
                  });
}

// --- fully connected -------------------------------------------------------------------

/// y = W x + b.  x: [n] or [B,n]; w: [out,n]; b: [out].
inline Var fully_connected(Tape& t, Var x, Var w, Var b) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  if (wv.rank() != 2) throw ShapeError("fully_connected: weights must be rank-2");
  const std::size_t out_dim = wv.shape[0], in_dim = wv.shape[1];
  if (bv.shape != Shape{out_dim})
    throw ShapeError("fully_connected: bias must be [" + std::to_string(out_dim) + "], got " +
                     shape_str(bv.shape));
  const bool batched = xv.rank() == 2;
  if (!batched && xv.rank() != 1)
    throw ShapeError("fully_connected: input must be rank-1 or rank-2, got " +
                     shape_str(xv.shape));
  const std::size_t B = batched ? xv.shape[0] : 1;
  const std::size_t n = batched ? xv.shape[1] : xv.shape[0];
  if (n != in_dim)
    throw ShapeError("fully_connected: input length " + std::to_string(n) +
                     " does not match weight inner dimension " + std::to_string(in_dim));

  Tensor out(batched ? Shape{B, out_dim} : Shape{out_dim});
  for (std::size_t bi = 0; bi < B; ++bi) {
    const double* xrow = &xv.data[bi * n];
    double* orow = &out.data[bi * out_dim];
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wrow = &wv.data[o * n];
      double s = bv.data[o];
      for (std::size_t i = 0; i < n; ++i) s += wrow[i] * xrow[i];
      orow[o] = s;
    }
  }
  int xid = x.id, wid = w.id, bid = b.id;
  return t.record(
      "fully_connected", {xid, wid, bid}, std::move(out),
      [xid, wid, bid, B, n, out_dim](Tape& tp, const std::vector<double>& g, auto& flow) {
        const auto& xv2 = tp.node(xid).value.data;
        const auto& wv2 = tp.node(wid).value.data;
        const bool gx = tp.node(xid).needs_grad;
        const bool gw = tp.node(wid).needs_grad;
        const bool gb = tp.node(bid).needs_grad;
        std::vector<double>* fx = gx ? &Tape::flow_of(flow, xid, B * n) : nullptr;
        std::vector<double>* fw = gw ? &Tape::flow_of(flow, wid, out_dim * n) : nullptr;
        std::vector<double>* fb = gb ? &Tape::flow_of(flow, bid, out_dim) : nullptr;
        for (std::size_t bi = 0; bi < B; ++bi) {
          const double* grow = &g[bi * out_dim];
          const double* xrow = &xv2[bi * n];
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double go = grow[o];
            if (fb) (*fb)[o] += go;
            const double* wrow = &wv2[o * n];
            double* fwrow = fw ? &(*fw)[o * n] : nullptr;
            double* fxrow = fx ? &(*fx)[bi * n] : nullptr;
            for (std::size_t i = 0; i < n; ++i) {
              if (fxrow) fxrow[i] += go * wrow[i];
              if (fwrow) fwrow[i] += go * xrow[i];
            }
          }
        }
      });
}

// --- structural rank-4 ops ---------------------------------------------------------------

/// Crops a [B,C,H,W] tensor to a spatial window at offset (y0, x0).
inline Var crop2d(Tape& t, Var x, std::size_t y0, std::size_t x0, std::size_t h,
                  std::size_t w) {
  const Tensor& xv = t.value(x);
  detail::check_rank4("crop2d", xv);
  const std::size_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  if (y0 + h > H || x0 + w > W)
    throw ShapeError("crop2d: window " + std::to_string(h) + "x" + std::to_string(w) +
                     " at (" + std::to_string(y0) + "," + std::to_string(x0) +
                     ") exceeds " + shape_str(xv.shape));
  Tensor out({B, C, h, w});
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(&xv.data[bc * H * W + (y0 + y) * W + x0], w,
                  &out.data[bc * h * w + y * w]);
  int xid = x.id;
  return t.record("crop2d", {xid}, std::move(out),
                  [xid, B, C, H, W, y0, x0, h, w](Tape& tp, const std::vector<double>& g,
                                                  auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, xid, B * C * H * W);
                    for (std::size_t bc = 0; bc < B * C; ++bc)
                      for (std::size_t y = 0; y < h; ++y)
                        for (std::size_t xw = 0; xw < w; ++xw)
                          fx[bc * H * W + (y0 + y) * W + x0 + xw] +=
                              g[bc * h * w + y * w + xw];
                  });
}

/// Channel-concatenates rank-4 tensors with matching [B,:,H,W].
inline Var concat_channels(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw DomainError("concat_channels: empty input list");
  const Tensor& first = t.value(parts[0]);
  detail::check_rank4("concat_channels", first);
  const std::size_t B = first.shape[0], H = first.shape[2], W = first.shape[3];
  std::size_t Ctot = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    detail::check_rank4("concat_channels", pv);
    if (pv.shape[0] != B || pv.shape[2] != H || pv.shape[3] != W)
      throw ShapeError("concat_channels: incompatible part shape " + shape_str(pv.shape) +
                       " vs " + shape_str(first.shape));
    Ctot += pv.shape[1];
  }
  Tensor out({B, Ctot, H, W});
  std::vector<int> ids;
  std::vector<std::size_t> chans;
  std::size_t coff = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    const std::size_t C = pv.shape[1];
    for (std::size_t bi = 0; bi < B; ++bi)
      std::copy_n(&pv.data[bi * C * H * W], C * H * W,
                  &out.data[(bi * Ctot + coff) * H * W]);
    ids.push_back(p.id);
    chans.push_back(C);
    coff += C;
  }
  return t.record("concat_channels", ids, std::move(out),
                  [ids, chans, B, H, W, Ctot](Tape& tp, const std::vector<double>& g,
                                              auto& flow) {
                    std::size_t coff2 = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      const std::size_t C = chans[k];
                      if (tp.node(ids[k]).needs_grad) {
                        auto& f = Tape::flow_of(flow, ids[k], B * C * H * W);
                        for (std::size_t bi = 0; bi < B; ++bi)
                          for (std::size_t i = 0; i < C * H * W; ++i)
                            f[bi * C * H * W + i] += g[(bi * Ctot + coff2) * H * W + i];
                      }
                      coff2 += C;
                    }
                  });
}

// --- Haar-like subtraction merge ------------------------------------------------------------

/// Signed elementwise sum of sub-branch maps: black maps are negated.
/// two_rect patterns take [white, black]; four_rect_checker takes
/// [w1, b1, w2, b2].
inline Var haar_split_merge(Tape& t, const std::vector<Var>& maps, HaarPattern pattern) {
  const std::size_t want = pattern == HaarPattern::four_rect_checker ? 4 : 2;
  if (maps.size() != want)
    throw ShapeError("haar_split_merge: pattern expects " + std::to_string(want) +
                     " maps, got " + std::to_string(maps.size()));
  const Tensor& first = t.value(maps[0]);
  for (Var m : maps)
    if (!same_shape(t.value(m), first))
      throw ShapeError("haar_split_merge: map shape " + shape_str(t.value(m).shape) +
                       " differs from " + shape_str(first.shape));
  const std::size_t n = first.numel();
  std::vector<double> sign(maps.size());
  for (std::size_t k = 0; k < maps.size(); ++k) sign[k] = (k % 2 == 0) ? 1.0 : -1.0;
  Tensor out(first.shape);
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const auto& d = t.value(maps[k]).data;
    for (std::size_t i = 0; i < n; ++i) out.data[i] += sign[k] * d[i];
  }
  std::vector<int> ids;
  for (Var m : maps) ids.push_back(m.id);
  return t.record("haar_split_merge", ids, std::move(out),
                  [ids, sign, n](Tape& tp, const std::vector<double>& g, auto& flow) {
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!tp.node(ids[k]).needs_grad) continue;
                      auto& f = Tape::flow_of(flow, ids[k], n);
                      for (std::size_t i = 0; i < n; ++i) f[i] += sign[k] * g[i];
                    }
                  });
}

// --- inception-lite ------------------------------------------------------------------------

/// Per-path output widths of an inception-lite block.
struct InceptionLiteCfg {
  std::size_t c1x1 = 0;
  std::size_t c3x3 = 0;
  std::size_t c5x5 = 0;
  std::size_t cpool = 0;

  std::size_t total() const { return c1x1 + c3x3 + c5x5 + cpool; }

  static InceptionLiteCfg split_evenly(std::size_t budget) {
    if (budget == 0 || budget % 4 != 0)
      throw DomainError("inception_lite: channel budget " + std::to_string(budget) +
                        " is not divisible across 4 paths");
    const std::size_t c = budget / 4;
    return InceptionLiteCfg{c, c, c, c};
  }
};

/// Parameter tensors of one inception-lite block.
struct InceptionLiteParams {
  Var w1, b1;      // 1x1 path
  Var w3, b3;      // 3x3 path, pad 1
  Var w5, b5;      // 5x5 path, pad 2
  Var wp, bp;      // 1x1 conv after 3x3 maxpool (stride 1, pad 1)
};

/// Channel concatenation of four parallel paths; spatial extent preserved.
inline Var inception_lite(Tape& t, Var x, const InceptionLiteParams& p) {
  Var p1 = conv2d(t, x, p.w1, p.b1, 1, 0);
  Var p3 = conv2d(t, x, p.w3, p.b3, 1, 1);
  Var p5 = conv2d(t, x, p.w5, p.b5, 1, 2);
  Var pool = maxpool2d(t, x, 3, 1, 1).out;
  Var pp = conv2d(t, pool, p.wp, p.bp, 1, 0);
  return concat_channels(t, {p1, p3, p5, pp});
}

// relu on rank-4 maps reuses the elementwise op.
inline Var relu_map(Tape& t, Var x) { return ad::relu(t, x); }

/// Flattens [B,C,H,W] to [B, C*H*W] (or any tensor to rank-1 when B absent).
inline Var flatten_batch(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  if (xv.rank() < 2) return x;
  return ad::reshape(t, x, {xv.shape[0], xv.numel() / xv.shape[0]});
}

}  // namespace stv::nn
