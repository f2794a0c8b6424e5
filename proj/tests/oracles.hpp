#ifndef ATDT_TESTS_ORACLES_HPP_
#define ATDT_TESTS_ORACLES_HPP_

#include <cmath>
#include <cstdint>
#include <vector>

// Naive straight-from-definition reference implementations, written with
// plain loops and no shared code with the library. Tests compare library
// results against these.

namespace oracle {

// direct cross-correlation, [B,Cin,H,W] x [Cout,Cin,k,k] + bias
template <class S>
std::vector<S> conv2d(const std::vector<S>& in, int B, int Cin, int H, int W,
                      const std::vector<S>& w, int Cout, int k, const std::vector<S>& bias,
                      int stride, int dilation, int padding, int* Ho_out, int* Wo_out) {
    const int Ho = (H + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    const int Wo = (W + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    *Ho_out = Ho;
    *Wo_out = Wo;
    std::vector<S> out(static_cast<std::size_t>(B) * Cout * Ho * Wo, S(0));
    auto I = [&](int b, int c, int y, int x) -> S {
        if (y < 0 || y >= H || x < 0 || x >= W) return S(0);
        return in[((static_cast<std::size_t>(b) * Cin + c) * H + y) * W + x];
    };
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    S acc = bias[co];
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx)
                                acc += w[((static_cast<std::size_t>(co) * Cin + ci) * k + ky) * k +
                                         kx] *
                                       I(b, ci, oy * stride - padding + ky * dilation,
                                         ox * stride - padding + kx * dilation);
                    out[((static_cast<std::size_t>(b) * Cout + co) * Ho + oy) * Wo + ox] = acc;
                }
    return out;
}

// bilinear upsampling, align-corners=false, edge clamped
template <class S>
std::vector<S> bilinear_upsample(const std::vector<S>& in, int B, int C, int H, int W, int f) {
    const int Ho = H * f, Wo = W * f;
    std::vector<S> out(static_cast<std::size_t>(B) * C * Ho * Wo);
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const double sy = (oy + 0.5) / f - 0.5;
                    const double sx = (ox + 0.5) / f - 0.5;
                    const int y0 = static_cast<int>(std::floor(sy));
                    const int x0 = static_cast<int>(std::floor(sx));
                    const double wy = sy - y0, wx = sx - x0;
                    auto I = [&](int y, int x) -> double {
                        return in[((static_cast<std::size_t>(b) * C + c) * H +
                                   clampi(y, 0, H - 1)) *
                                      W +
                                  clampi(x, 0, W - 1)];
                    };
                    const double v = (1 - wy) * ((1 - wx) * I(y0, x0) + wx * I(y0, x0 + 1)) +
                                     wy * ((1 - wx) * I(y0 + 1, x0) + wx * I(y0 + 1, x0 + 1));
                    out[((static_cast<std::size_t>(b) * C + c) * Ho + oy) * Wo + ox] =
                        static_cast<S>(v);
                }
    return out;
}

struct SegOracle {
    std::vector<double> per_class_iou;  // NaN encoded as -1 (absent class)
    double miou = 0.0;
    double acc = 0.0;
};

// mIoU / Acc straight from the definition via a double-loop tally
inline SegOracle seg_metrics(const std::vector<int>& pred, const std::vector<int>& gt, int k,
                             int ignore_index) {
    std::vector<std::uint64_t> cm(static_cast<std::size_t>(k) * k, 0);
    std::uint64_t total = 0, correct = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] == ignore_index) continue;
        ++cm[static_cast<std::size_t>(gt[i]) * k + pred[i]];
        ++total;
        if (gt[i] == pred[i]) ++correct;
    }
    SegOracle o;
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < k; ++c) {
        std::uint64_t tp = cm[static_cast<std::size_t>(c) * k + c], fp = 0, fn = 0;
        for (int j = 0; j < k; ++j) {
            if (j == c) continue;
            fp += cm[static_cast<std::size_t>(j) * k + c];
            fn += cm[static_cast<std::size_t>(c) * k + j];
        }
        if (tp + fp + fn == 0) {
            o.per_class_iou.push_back(-1.0);
            continue;
        }
        const double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        o.per_class_iou.push_back(iou);
        sum += iou;
        ++n;
    }
    o.miou = sum / n;
    o.acc = static_cast<double>(correct) / static_cast<double>(total);
    return o;
}

struct DepthOracle {
    double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0, d1 = 0, d2 = 0, d3 = 0;
};

// the seven standard depth metrics, one plain loop each
inline DepthOracle depth_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                                 const std::vector<std::uint8_t>* mask = nullptr) {
    DepthOracle o;
    double n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        n += 1;
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        o.abs_rel += std::abs(pred[i] - gt[i]) / gt[i] / n;
        o.sq_rel += (pred[i] - gt[i]) * (pred[i] - gt[i]) / gt[i] / n;
    }
    double se = 0, sel = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        se += (pred[i] - gt[i]) * (pred[i] - gt[i]);
        const double dl = std::log(pred[i]) - std::log(gt[i]);
        sel += dl * dl;
    }
    o.rmse = std::sqrt(se / n);
    o.rmse_log = std::sqrt(sel / n);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        const double r = std::max(pred[i] / gt[i], gt[i] / pred[i]);
        if (r < 1.25) o.d1 += 1 / n;
        if (r < 1.25 * 1.25) o.d2 += 1 / n;
        if (r < 1.25 * 1.25 * 1.25) o.d3 += 1 / n;
    }
    return o;
}

// per-location channel norm by triple loop
template <class S>
std::vector<S> channel_l2_norm(const std::vector<S>& f, int B, int C, int H, int W) {
    std::vector<S> out(static_cast<std::size_t>(B) * H * W, S(0));
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0;
                for (int c = 0; c < C; ++c) {
                    const double v =
                        f[((static_cast<std::size_t>(b) * C + c) * H + y) * W + x];
                    acc += v * v;
                }
                out[(static_cast<std::size_t>(b) * H + y) * W + x] =
                    static_cast<S>(std::sqrt(acc));
            }
    return out;
}

}  // namespace oracle

#endif  // ATDT_TESTS_ORACLES_HPP_
