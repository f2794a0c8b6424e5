#ifndef ATDT_OPS_HPP_
#define ATDT_OPS_HPP_

#include <cmath>
#include <cstdint>
#include <vector>

#include "atdt/tensor.hpp"

// Structured differentiable ops: conv2d, batchnorm2d, bilinear upsampling and
// the dense-prediction losses. Convolution is direct cross-correlation with
// cache-friendly row loops; inner loops use fixed accumulation order so runs
// are bit-reproducible.

namespace atdt {

namespace detail {

// contiguous dot product with 8 independent accumulators (fixed order)
template <class S>
inline S dot8(const S* a, const S* b, int n) {
    S acc[8] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
    int i = 0;
    for (; i + 8 <= n; i += 8)
        for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
    S tail = S(0);
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

struct ConvDims {
    int B, Cin, H, W, Cout, k, stride, dilation, padding, Ho, Wo;
};

inline ConvDims conv_dims(const std::vector<int>& in_shape, const std::vector<int>& w_shape,
                          int stride, int dilation, int padding) {
    check(in_shape.size() == 4, "conv2d: input must be [B,Cin,H,W]");
    check(w_shape.size() == 4, "conv2d: weight must be [Cout,Cin,k,k]");
    ConvDims d;
    d.B = in_shape[0];
    d.Cin = in_shape[1];
    d.H = in_shape[2];
    d.W = in_shape[3];
    d.Cout = w_shape[0];
    d.k = w_shape[2];
    d.stride = stride;
    d.dilation = dilation;
    d.padding = padding;
    check(w_shape[1] == d.Cin, "conv2d: channel mismatch");
    check(w_shape[3] == d.k, "conv2d: non-square kernel");
    check(d.k % 2 == 1, "conv2d: kernel size must be odd");
    check(stride >= 1 && dilation >= 1 && padding >= 0, "conv2d: bad stride/dilation/padding");
    int hn = d.H + 2 * padding - dilation * (d.k - 1) - 1;
    int wn = d.W + 2 * padding - dilation * (d.k - 1) - 1;
    check(hn >= 0 && wn >= 0, "conv2d: kernel larger than padded input");
    d.Ho = hn / stride + 1;  // floor semantics, as usual
    d.Wo = wn / stride + 1;
    return d;
}

// valid output range [lo, hi) for one kernel tap: 0 <= o*s - p + t*dil < extent
inline void tap_range(int out_extent, int in_extent, int stride, int padding, int tap_off, int* lo,
                      int* hi) {
    int off = tap_off - padding;  // input index = o*stride + off
    int l = 0;
    if (off < 0) l = (-off + stride - 1) / stride;
    int h = out_extent;
    int max_in = in_extent - 1 - off;
    if (max_in < 0)
        h = 0;
    else if (max_in / stride + 1 < h)
        h = max_in / stride + 1;
    *lo = l;
    *hi = h < l ? l : h;
}

// Patch matrix for one image: rows indexed by (ci, ky, kx), columns by output
// location. Sharing it across all output channels is what makes the direct
// convolution cache-friendly at the bottleneck's tiny spatial extents.
template <class S>
void im2col(const ConvDims& d, const S* image, S* cols) {
    const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
    const std::size_t out_plane = static_cast<std::size_t>(d.Ho) * d.Wo;
    S* crow = cols;
    for (int ci = 0; ci < d.Cin; ++ci) {
        const S* ib = image + ci * in_plane;
        for (int ky = 0; ky < d.k; ++ky)
            for (int kx = 0; kx < d.k; ++kx) {
                const int offx = kx * d.dilation - d.padding;
                for (int oy = 0; oy < d.Ho; ++oy, crow += d.Wo) {
                    const int iy = oy * d.stride - d.padding + ky * d.dilation;
                    if (iy < 0 || iy >= d.H) {
                        for (int ox = 0; ox < d.Wo; ++ox) crow[ox] = S(0);
                        continue;
                    }
                    const S* irow = ib + static_cast<std::size_t>(iy) * d.W;
                    if (d.stride == 1) {
                        const int xlo = std::max(0, -offx);
                        const int xhi = std::min(d.Wo, d.W - offx);
                        for (int ox = 0; ox < xlo; ++ox) crow[ox] = S(0);
                        for (int ox = xlo; ox < xhi; ++ox) crow[ox] = irow[ox + offx];
                        for (int ox = std::max(xlo, xhi); ox < d.Wo; ++ox) crow[ox] = S(0);
                    } else {
                        for (int ox = 0; ox < d.Wo; ++ox) {
                            const int ix = ox * d.stride + offx;
                            crow[ox] = (ix >= 0 && ix < d.W) ? irow[ix] : S(0);
                        }
                    }
                }
            }
    }
    (void)out_plane;
}

// scatter-add of a patch-matrix gradient back onto the input image
template <class S>
void col2im_add(const ConvDims& d, const S* cols, S* gimage) {
    const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
    const S* crow = cols;
    for (int ci = 0; ci < d.Cin; ++ci) {
        S* gb = gimage + ci * in_plane;
        for (int ky = 0; ky < d.k; ++ky)
            for (int kx = 0; kx < d.k; ++kx) {
                const int offx = kx * d.dilation - d.padding;
                for (int oy = 0; oy < d.Ho; ++oy, crow += d.Wo) {
                    const int iy = oy * d.stride - d.padding + ky * d.dilation;
                    if (iy < 0 || iy >= d.H) continue;
                    S* grow = gb + static_cast<std::size_t>(iy) * d.W;
                    if (d.stride == 1) {
                        const int xlo = std::max(0, -offx);
                        const int xhi = std::min(d.Wo, d.W - offx);
                        for (int ox = xlo; ox < xhi; ++ox) grow[ox + offx] += crow[ox];
                    } else {
                        for (int ox = 0; ox < d.Wo; ++ox) {
                            const int ix = ox * d.stride + offx;
                            if (ix >= 0 && ix < d.W) grow[ix] += crow[ox];
                        }
                    }
                }
            }
    }
}

template <class S>
std::vector<S>& conv_scratch(std::size_t n) {
    thread_local std::vector<S> buf;
    if (buf.size() < n) buf.resize(n);
    return buf;
}

template <class S>
void conv2d_forward(const ConvDims& d, const S* in, const S* w, const S* bias, S* out) {
    const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
    const std::size_t out_plane = static_cast<std::size_t>(d.Ho) * d.Wo;
    const std::size_t rows = static_cast<std::size_t>(d.Cin) * d.k * d.k;
    std::vector<S>& cols = conv_scratch<S>(rows * out_plane);
    for (int b = 0; b < d.B; ++b) {
        im2col(d, in + static_cast<std::size_t>(b) * d.Cin * in_plane, cols.data());
        for (int co = 0; co < d.Cout; ++co) {
            S* ob = out + (static_cast<std::size_t>(b) * d.Cout + co) * out_plane;
            const S bv = bias ? bias[co] : S(0);
            for (std::size_t i = 0; i < out_plane; ++i) ob[i] = bv;
            const S* wr = w + co * rows;
            // pairs of axpy rows: fewer passes over the output row
            std::size_t r = 0;
            for (; r + 2 <= rows; r += 2) {
                const S w0 = wr[r], w1 = wr[r + 1];
                const S* c0 = cols.data() + r * out_plane;
                const S* c1 = c0 + out_plane;
                for (std::size_t i = 0; i < out_plane; ++i) ob[i] += w0 * c0[i] + w1 * c1[i];
            }
            for (; r < rows; ++r) {
                const S wv = wr[r];
                const S* c0 = cols.data() + r * out_plane;
                for (std::size_t i = 0; i < out_plane; ++i) ob[i] += wv * c0[i];
            }
        }
    }
}

template <class S>
void conv2d_backward(const ConvDims& d, const S* in, const S* w, const S* gout, S* gin, S* gw,
                     S* gbias) {
    const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
    const std::size_t out_plane = static_cast<std::size_t>(d.Ho) * d.Wo;
    const std::size_t rows = static_cast<std::size_t>(d.Cin) * d.k * d.k;
    if (gbias) {
        for (int b = 0; b < d.B; ++b)
            for (int co = 0; co < d.Cout; ++co) {
                const S* gb = gout + (static_cast<std::size_t>(b) * d.Cout + co) * out_plane;
                S acc = S(0);
                for (std::size_t i = 0; i < out_plane; ++i) acc += gb[i];
                gbias[co] += acc;
            }
    }
    std::vector<S>& cols = conv_scratch<S>(rows * out_plane * 2);
    S* patches = cols.data();
    S* gcols = cols.data() + rows * out_plane;
    for (int b = 0; b < d.B; ++b) {
        im2col(d, in + static_cast<std::size_t>(b) * d.Cin * in_plane, patches);
        if (gin) std::fill(gcols, gcols + rows * out_plane, S(0));
        // output channels in pairs: each patch row and gcols row is touched
        // once for two channels' worth of work
        int co = 0;
        for (; co + 2 <= d.Cout; co += 2) {
            const S* g0 = gout + (static_cast<std::size_t>(b) * d.Cout + co) * out_plane;
            const S* g1 = g0 + out_plane;
            const S* w0 = w + static_cast<std::size_t>(co) * rows;
            const S* w1 = w0 + rows;
            for (std::size_t r = 0; r < rows; ++r) {
                const S* pr = patches + r * out_plane;
                if (gw) {
                    gw[static_cast<std::size_t>(co) * rows + r] +=
                        dot8(g0, pr, static_cast<int>(out_plane));
                    gw[(static_cast<std::size_t>(co) + 1) * rows + r] +=
                        dot8(g1, pr, static_cast<int>(out_plane));
                }
                if (gin) {
                    S* gc = gcols + r * out_plane;
                    const S wv0 = w0[r], wv1 = w1[r];
                    for (std::size_t i = 0; i < out_plane; ++i)
                        gc[i] += wv0 * g0[i] + wv1 * g1[i];
                }
            }
        }
        for (; co < d.Cout; ++co) {
            const S* gb = gout + (static_cast<std::size_t>(b) * d.Cout + co) * out_plane;
            const S* wr = w + static_cast<std::size_t>(co) * rows;
            for (std::size_t r = 0; r < rows; ++r) {
                const S* pr = patches + r * out_plane;
                if (gw) gw[static_cast<std::size_t>(co) * rows + r] +=
                    dot8(gb, pr, static_cast<int>(out_plane));
                if (gin) {
                    S* gc = gcols + r * out_plane;
                    const S wv = wr[r];
                    for (std::size_t i = 0; i < out_plane; ++i) gc[i] += wv * gb[i];
                }
            }
        }
        if (gin)
            col2im_add(d, gcols, gin + static_cast<std::size_t>(b) * d.Cin * in_plane);
    }
}

}  // namespace detail

// Cross-correlation, [B,Cin,H,W] x [Cout,Cin,k,k] (+bias[Cout]) -> [B,Cout,Ho,Wo].
template <class S>
Tensor<S> conv2d(Tape<S>& tape, const Tensor<S>& input, const Tensor<S>& weight,
                 const Tensor<S>& bias, int stride = 1, int dilation = 1, int padding = 0) {
    detail::ConvDims d = detail::conv_dims(input.shape, weight.shape, stride, dilation, padding);
    check(bias.numel() == static_cast<std::size_t>(d.Cout), "conv2d: bias size mismatch");
    Tensor<S> out(std::vector<int>{d.B, d.Cout, d.Ho, d.Wo});
    detail::conv2d_forward(d, input.data.data(), weight.data.data(), bias.data.data(),
                           out.data.data());
    ATDT_FINITE(out, "conv2d");
    if (input.tracked() || weight.tracked() || bias.tracked()) {
        std::vector<int> parents;
        for (int n : {input.node, weight.node, bias.node})
            if (n >= 0) parents.push_back(n);
        out.node = tape.record(out.numel(), parents);
        tape.set_backward(out.node,
                          [d, in = input.data, wv = weight.data, xn = input.node, wn = weight.node,
                           bn = bias.node, on = out.node](Tape<S>& tp) {
                              const std::vector<S>& go = tp.grad(on);
                              detail::conv2d_backward(
                                  d, in.data(), wv.data(), go.data(),
                                  xn >= 0 ? tp.grad(xn).data() : nullptr,
                                  wn >= 0 ? tp.grad(wn).data() : nullptr,
                                  bn >= 0 ? tp.grad(bn).data() : nullptr);
                          });
    }
    return out;
}

enum class BnMode { Train, Eval };

template <class S>
struct BnState {
    std::vector<S> running_mean;
    std::vector<S> running_var;  // biased variance

    static BnState init(int channels) {
        return BnState{std::vector<S>(channels, S(0)), std::vector<S>(channels, S(1))};
    }
};

// Batch normalization over [B,C,H,W]. Train mode normalizes by batch
// statistics (gradients flow through them) and updates `state` in place with
// the given momentum; eval mode uses the running statistics only.
template <class S>
Tensor<S> batchnorm2d(Tape<S>& tape, const Tensor<S>& input, const Tensor<S>& gamma,
                      const Tensor<S>& beta, BnState<S>& state, BnMode mode,
                      S momentum = S(0.1), S epsilon = S(1e-5)) {
    check(input.rank() == 4, "batchnorm2d: expected [B,C,H,W]");
    const int B = input.shape[0], C = input.shape[1], H = input.shape[2], W = input.shape[3];
    check(gamma.numel() == static_cast<std::size_t>(C) && beta.numel() == static_cast<std::size_t>(C),
          "batchnorm2d: gamma/beta size mismatch");
    check(static_cast<int>(state.running_mean.size()) == C, "batchnorm2d: state size mismatch");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t n_per_c = static_cast<std::size_t>(B) * plane;
    check(mode == BnMode::Eval || n_per_c >= 2, "batchnorm2d: train mode needs B*H*W >= 2");

    std::vector<S> mean_c(C), inv_std_c(C);
    if (mode == BnMode::Train) {
        for (int c = 0; c < C; ++c) {
            S m = S(0);
            for (int b = 0; b < B; ++b) {
                const S* p = input.data.data() + (static_cast<std::size_t>(b) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) m += p[i];
            }
            m /= static_cast<S>(n_per_c);
            S v = S(0);
            for (int b = 0; b < B; ++b) {
                const S* p = input.data.data() + (static_cast<std::size_t>(b) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    S dlt = p[i] - m;
                    v += dlt * dlt;
                }
            }
            v /= static_cast<S>(n_per_c);
            mean_c[c] = m;
            inv_std_c[c] = S(1) / std::sqrt(v + epsilon);
            state.running_mean[c] = (S(1) - momentum) * state.running_mean[c] + momentum * m;
            state.running_var[c] = (S(1) - momentum) * state.running_var[c] + momentum * v;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean_c[c] = state.running_mean[c];
            inv_std_c[c] = S(1) / std::sqrt(state.running_var[c] + epsilon);
        }
    }

    Tensor<S> out(input.shape);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const S* p = input.data.data() + (static_cast<std::size_t>(b) * C + c) * plane;
            S* q = out.data.data() + (static_cast<std::size_t>(b) * C + c) * plane;
            const S m = mean_c[c], is = inv_std_c[c], g = gamma.data[c], bt = beta.data[c];
            for (std::size_t i = 0; i < plane; ++i) q[i] = g * (p[i] - m) * is + bt;
        }
    ATDT_FINITE(out, "batchnorm2d");

    if (input.tracked() || gamma.tracked() || beta.tracked()) {
        std::vector<int> parents;
        for (int n : {input.node, gamma.node, beta.node})
            if (n >= 0) parents.push_back(n);
        out.node = tape.record(out.numel(), parents);
        const bool train = mode == BnMode::Train;
        tape.set_backward(
            out.node, [B, C, plane, n_per_c, train, in = input.data, mean_c, inv_std_c,
                       gv = gamma.data, xn = input.node, gn = gamma.node, btn = beta.node,
                       on = out.node](Tape<S>& tp) {
                const std::vector<S>& go = tp.grad(on);
                for (int c = 0; c < C; ++c) {
                    const S m = mean_c[c], is = inv_std_c[c], g = gv[c];
                    // per-channel reductions over B,H,W
                    S sum_go = S(0), sum_go_xhat = S(0);
                    for (int b = 0; b < B; ++b) {
                        const S* p = in.data() + (static_cast<std::size_t>(b) * C + c) * plane;
                        const S* q = go.data() + (static_cast<std::size_t>(b) * C + c) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            sum_go += q[i];
                            sum_go_xhat += q[i] * (p[i] - m) * is;
                        }
                    }
                    if (gn >= 0) tp.grad(gn)[c] += sum_go_xhat;
                    if (btn >= 0) tp.grad(btn)[c] += sum_go;
                    if (xn >= 0) {
                        std::vector<S>& gx = tp.grad(xn);
                        const S inv_n = S(1) / static_cast<S>(n_per_c);
                        for (int b = 0; b < B; ++b) {
                            const S* p = in.data() + (static_cast<std::size_t>(b) * C + c) * plane;
                            const S* q = go.data() + (static_cast<std::size_t>(b) * C + c) * plane;
                            S* r = gx.data() + (static_cast<std::size_t>(b) * C + c) * plane;
                            if (train) {
                                for (std::size_t i = 0; i < plane; ++i) {
                                    S xhat = (p[i] - m) * is;
                                    r[i] += g * is *
                                            (q[i] - inv_n * sum_go - xhat * inv_n * sum_go_xhat);
                                }
                            } else {
                                for (std::size_t i = 0; i < plane; ++i) r[i] += g * is * q[i];
                            }
                        }
                    }
                }
            });
    }
    return out;
}

// Bilinear upsampling by an integer factor, align-corners=false convention:
// source sample center for output index o is (o + 0.5)/f - 0.5, edge-clamped.
template <class S>
Tensor<S> bilinear_upsample(Tape<S>& tape, const Tensor<S>& input, int factor) {
    check(input.rank() == 4, "bilinear_upsample: expected [B,C,H,W]");
    check(factor == 2 || factor == 4, "bilinear_upsample: factor must be 2 or 4");
    const int B = input.shape[0], C = input.shape[1], H = input.shape[2], W = input.shape[3];
    const int Ho = H * factor, Wo = W * factor;

    // precompute 1-d sampling taps
    struct Tap {
        int i0, i1;
        S w0, w1;
    };
    auto make_taps = [factor](int in_extent, int out_extent) {
        std::vector<Tap> taps(out_extent);
        for (int o = 0; o < out_extent; ++o) {
            double s = (o + 0.5) / factor - 0.5;
            int i0 = static_cast<int>(std::floor(s));
            double w1 = s - i0;
            int i1 = i0 + 1;
            if (i0 < 0) i0 = 0;
            if (i1 < 0) i1 = 0;
            if (i0 > in_extent - 1) i0 = in_extent - 1;
            if (i1 > in_extent - 1) i1 = in_extent - 1;
            taps[o] = Tap{i0, i1, static_cast<S>(1.0 - w1), static_cast<S>(w1)};
        }
        return taps;
    };
    std::vector<Tap> ty = make_taps(H, Ho), tx = make_taps(W, Wo);

    Tensor<S> out(std::vector<int>{B, C, Ho, Wo});
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
    for (int bc = 0; bc < B * C; ++bc) {
        const S* p = input.data.data() + static_cast<std::size_t>(bc) * in_plane;
        S* q = out.data.data() + static_cast<std::size_t>(bc) * out_plane;
        for (int oy = 0; oy < Ho; ++oy) {
            const Tap& y = ty[oy];
            const S* r0 = p + static_cast<std::size_t>(y.i0) * W;
            const S* r1 = p + static_cast<std::size_t>(y.i1) * W;
            S* orow = q + static_cast<std::size_t>(oy) * Wo;
            for (int ox = 0; ox < Wo; ++ox) {
                const Tap& x = tx[ox];
                orow[ox] = y.w0 * (x.w0 * r0[x.i0] + x.w1 * r0[x.i1]) +
                           y.w1 * (x.w0 * r1[x.i0] + x.w1 * r1[x.i1]);
            }
        }
    }
    ATDT_FINITE(out, "bilinear_upsample");

    if (input.tracked()) {
        out.node = tape.record(out.numel(), {input.node});
        tape.set_backward(out.node, [B, C, H, W, Ho, Wo, ty, tx, xn = input.node,
                                     on = out.node](Tape<S>& tp) {
            const std::vector<S>& go = tp.grad(on);
            std::vector<S>& gx = tp.grad(xn);
            const std::size_t in_plane = static_cast<std::size_t>(H) * W;
            const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
            for (int bc = 0; bc < B * C; ++bc) {
                S* p = gx.data() + static_cast<std::size_t>(bc) * in_plane;
                const S* q = go.data() + static_cast<std::size_t>(bc) * out_plane;
                for (int oy = 0; oy < Ho; ++oy) {
                    const Tap& y = ty[oy];
                    for (int ox = 0; ox < Wo; ++ox) {
                        const Tap& x = tx[ox];
                        const S g = q[static_cast<std::size_t>(oy) * Wo + ox];
                        p[static_cast<std::size_t>(y.i0) * W + x.i0] += y.w0 * x.w0 * g;
                        p[static_cast<std::size_t>(y.i0) * W + x.i1] += y.w0 * x.w1 * g;
                        p[static_cast<std::size_t>(y.i1) * W + x.i0] += y.w1 * x.w0 * g;
                        p[static_cast<std::size_t>(y.i1) * W + x.i1] += y.w1 * x.w1 * g;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses

// Mean over non-ignored pixels of -log softmax(logits)[label].
// Returns 0 and sets *all_ignored when every pixel carries the ignore index.
template <class S>
Tensor<S> spatial_softmax_cross_entropy(Tape<S>& tape, const Tensor<S>& logits,
                                        const std::vector<int>& labels, int ignore_index,
                                        bool* all_ignored = nullptr) {
    check(logits.rank() == 4, "cross_entropy: logits must be [B,K,H,W]");
    const int B = logits.shape[0], K = logits.shape[1], H = logits.shape[2], W = logits.shape[3];
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    check(labels.size() == static_cast<std::size_t>(B) * plane, "cross_entropy: label size mismatch");

    std::size_t n_valid = 0;
    double acc = 0.0;
    // softmax probabilities are kept for the backward rule
    std::vector<S> prob(logits.numel());
    for (int b = 0; b < B; ++b) {
        const S* lb = logits.data.data() + static_cast<std::size_t>(b) * K * plane;
        S* pb = prob.data() + static_cast<std::size_t>(b) * K * plane;
        const int* yb = labels.data() + static_cast<std::size_t>(b) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            S mx = lb[i];
            for (int k = 1; k < K; ++k) mx = std::max(mx, lb[static_cast<std::size_t>(k) * plane + i]);
            S z = S(0);
            for (int k = 0; k < K; ++k) {
                S e = std::exp(lb[static_cast<std::size_t>(k) * plane + i] - mx);
                pb[static_cast<std::size_t>(k) * plane + i] = e;
                z += e;
            }
            for (int k = 0; k < K; ++k) pb[static_cast<std::size_t>(k) * plane + i] /= z;
            const int y = yb[i];
            if (y == ignore_index) continue;
            check(y >= 0 && y < K, "cross_entropy: label out of range");
            ++n_valid;
            acc -= std::log(static_cast<double>(
                std::max(pb[static_cast<std::size_t>(y) * plane + i], S(1e-30))));
        }
    }
    if (all_ignored) *all_ignored = n_valid == 0;
    Tensor<S> out(std::vector<int>{},
                  std::vector<S>{n_valid == 0 ? S(0) : static_cast<S>(acc / n_valid)});
    ATDT_FINITE(out, "spatial_softmax_cross_entropy");
    if (logits.tracked() && n_valid > 0) {
        out.node = tape.record(1, {logits.node});
        tape.set_backward(out.node, [B, K, plane, n_valid, prob = std::move(prob), labels,
                                     ignore_index, ln = logits.node, on = out.node](Tape<S>& tp) {
            const S g = tp.grad(on)[0] / static_cast<S>(n_valid);
            std::vector<S>& gl = tp.grad(ln);
            for (int b = 0; b < B; ++b) {
                const S* pb = prob.data() + static_cast<std::size_t>(b) * K * plane;
                S* gb = gl.data() + static_cast<std::size_t>(b) * K * plane;
                const int* yb = labels.data() + static_cast<std::size_t>(b) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const int y = yb[i];
                    if (y == ignore_index) continue;
                    for (int k = 0; k < K; ++k) {
                        S p = pb[static_cast<std::size_t>(k) * plane + i];
                        gb[static_cast<std::size_t>(k) * plane + i] += g * (p - (k == y ? S(1) : S(0)));
                    }
                }
            }
        });
    }
    return out;
}

// Mean absolute difference over valid pixels; subgradient at ties is 0.
template <class S>
Tensor<S> l1_loss(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target,
                  const std::vector<std::uint8_t>* mask = nullptr) {
    check(same_shape(pred, target), "l1_loss: shape mismatch");
    if (mask) check(mask->size() == pred.numel(), "l1_loss: mask size mismatch");
    std::size_t n = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        if (mask && !(*mask)[i]) continue;
        ++n;
        acc += std::abs(static_cast<double>(pred.data[i] - target.data[i]));
    }
    check(n > 0, "l1_loss: empty mask");
    Tensor<S> out(std::vector<int>{}, std::vector<S>{static_cast<S>(acc / n)});
    ATDT_FINITE(out, "l1_loss");
    if (pred.tracked()) {
        std::vector<S> diff(pred.numel());
        for (std::size_t i = 0; i < pred.numel(); ++i) diff[i] = pred.data[i] - target.data[i];
        out.node = tape.record(1, {pred.node});
        tape.set_backward(out.node, [n, diff = std::move(diff),
                                     maskv = mask ? *mask : std::vector<std::uint8_t>{},
                                     pn = pred.node, on = out.node](Tape<S>& tp) {
            const S g = tp.grad(on)[0] / static_cast<S>(n);
            std::vector<S>& gp = tp.grad(pn);
            for (std::size_t i = 0; i < gp.size(); ++i) {
                if (!maskv.empty() && !maskv[i]) continue;
                if (diff[i] > S(0))
                    gp[i] += g;
                else if (diff[i] < S(0))
                    gp[i] -= g;
            }
        });
    }
    return out;
}

// Mean of squared differences over all elements.
template <class S>
Tensor<S> mse_loss(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target) {
    check(same_shape(pred, target), "mse_loss: shape mismatch");
    const std::size_t n = pred.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dlt = static_cast<double>(pred.data[i]) - static_cast<double>(target.data[i]);
        acc += dlt * dlt;
    }
    Tensor<S> out(std::vector<int>{}, std::vector<S>{static_cast<S>(acc / n)});
    ATDT_FINITE(out, "mse_loss");
    if (pred.tracked()) {
        std::vector<S> diff(n);
        for (std::size_t i = 0; i < n; ++i) diff[i] = pred.data[i] - target.data[i];
        out.node = tape.record(1, {pred.node});
        tape.set_backward(out.node, [n, diff = std::move(diff), pn = pred.node,
                                     on = out.node](Tape<S>& tp) {
            const S g = tp.grad(on)[0] * S(2) / static_cast<S>(n);
            std::vector<S>& gp = tp.grad(pn);
            for (std::size_t i = 0; i < n; ++i) gp[i] += g * diff[i];
        });
    }
    return out;
}

}  // namespace atdt

#endif  // ATDT_OPS_HPP_
