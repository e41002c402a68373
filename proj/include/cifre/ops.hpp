#pragma once

#include <algorithm>
#include <cmath>

#include "cifre/tensor.hpp"

namespace cifre {

namespace detail {

inline int div_floor(int a, int b) {
    const int q = a / b, r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
inline int div_ceil(int a, int b) { return -div_floor(-a, b); }

}  // namespace detail

// 2-D convolution geometry and grouping. Weight layout is [Co, Ci/groups, K, K].
struct ConvSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
    bool has_bias = false;

    void validate() const {
        if (in_channels < 1 || out_channels < 1)
            throw SpecError("conv: channels must be >= 1 (in=" + std::to_string(in_channels) +
                            ", out=" + std::to_string(out_channels) + ")");
        if (kernel < 1 || stride < 1 || dilation < 1)
            throw SpecError("conv: kernel/stride/dilation must be >= 1");
        if (padding < 0) throw SpecError("conv: padding must be >= 0");
        if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0)
            throw SpecError("conv: groups=" + std::to_string(groups) +
                            " must divide in=" + std::to_string(in_channels) +
                            " and out=" + std::to_string(out_channels));
    }

    // Effective kernel extent with dilation.
    int extent() const { return dilation * (kernel - 1) + 1; }

    // floor((in + 2*padding - extent) / stride) + 1; <= 0 means the input is too small.
    int out_dim(int in) const {
        const int span = in + 2 * padding - extent();
        if (span < 0) return 0;
        return span / stride + 1;
    }
};

namespace detail {

// One loop nest drives conv forward and both data/weight backward passes; only the
// role of the three buffers changes. Bounds below keep every tap inside the input,
// so padding never materializes.
enum class ConvPass { forward, grad_input, grad_weight };

template <class T, ConvPass pass>
void conv_loop(const ConvSpec& sp, int N, int H, int W, int Ho, int Wo, const T* x, const T* w,
               const T* dy, T* out) {
    const int Ci = sp.in_channels, Co = sp.out_channels, K = sp.kernel;
    const int s = sp.stride, p = sp.padding, d = sp.dilation;
    const int cig = Ci / sp.groups, cog = Co / sp.groups;
    const long long hw = static_cast<long long>(H) * W;
    const long long howo = static_cast<long long>(Ho) * Wo;

    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            const int gi = co / cog;
            const long long ybase = (static_cast<long long>(n) * Co + co) * howo;
            for (int cio = 0; cio < cig; ++cio) {
                const int ci = gi * cig + cio;
                const long long xbase = (static_cast<long long>(n) * Ci + ci) * hw;
                const long long wbase = (static_cast<long long>(co) * cig + cio) * K * K;
                for (int kh = 0; kh < K; ++kh) {
                    const int hoff = kh * d - p;
                    const int oh_lo = std::max(0, div_ceil(-hoff, s));
                    const int oh_hi = std::min(Ho - 1, div_floor(H - 1 - hoff, s));
                    for (int kw = 0; kw < K; ++kw) {
                        const int woff = kw * d - p;
                        const int ow_lo = std::max(0, div_ceil(-woff, s));
                        const int ow_hi = std::min(Wo - 1, div_floor(W - 1 - woff, s));
                        if (oh_lo > oh_hi || ow_lo > ow_hi) continue;
                        const long long widx = wbase + kh * K + kw;

                        if constexpr (pass == ConvPass::grad_weight) {
                            T acc = T(0);
                            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                const T* xrow = x + xbase +
                                                static_cast<long long>(oh * s + hoff) * W + woff;
                                const T* grow = dy + ybase + static_cast<long long>(oh) * Wo;
                                if (s == 1)
                                    for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                        acc += xrow[ow] * grow[ow];
                                else
                                    for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                        acc += xrow[ow * s] * grow[ow];
                            }
                            out[widx] += acc;
                        } else {
                            const T wv = w[widx];
                            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                const long long xrow =
                                    xbase + static_cast<long long>(oh * s + hoff) * W + woff;
                                const long long yrow = ybase + static_cast<long long>(oh) * Wo;
                                if constexpr (pass == ConvPass::forward) {
                                    const T* xr = x + xrow;
                                    T* yr = out + yrow;
                                    if (s == 1)
                                        for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                            yr[ow] += wv * xr[ow];
                                    else
                                        for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                            yr[ow] += wv * xr[ow * s];
                                } else {  // grad_input
                                    T* xg = out + xrow;
                                    const T* gr = dy + yrow;
                                    if (s == 1)
                                        for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                            xg[ow] += wv * gr[ow];
                                    else
                                        for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                            xg[ow * s] += wv * gr[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Grouped dilated 2-D convolution with implicit zero padding.
// x: [N, Ci, H, W], w: [Co, Ci/groups, K, K], bias: [Co] (required iff spec.has_bias).
template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 const ConvSpec& spec) {
    spec.validate();
    if (x.rank() != 4) throw ShapeError("conv2d: input must be rank 4, got " + shape_str(x.shape()));
    if (x.dim(1) != spec.in_channels)
        throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, spec wants " +
                         std::to_string(spec.in_channels));
    const Shape want_w{spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel};
    if (w.shape() != want_w)
        throw ShapeError("conv2d: weight shape " + shape_str(w.shape()) + " != " + shape_str(want_w));
    if (spec.has_bias) {
        if (!bias || bias->shape() != Shape{spec.out_channels})
            throw ShapeError("conv2d: bias must be [" + std::to_string(spec.out_channels) + "]");
    } else if (bias && bias->defined()) {
        throw ContractError("conv2d: bias given but spec.has_bias is false");
    }

    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = spec.out_dim(H), Wo = spec.out_dim(W);
    if (Ho < 1 || Wo < 1)
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel extent " +
                         std::to_string(spec.extent()) + " with padding " +
                         std::to_string(spec.padding));

    Tensor<T> y(Shape{N, spec.out_channels, Ho, Wo});
    if (spec.has_bias) {
        const T* b = bias->data();
        T* py = y.data();
        const long long howo = static_cast<long long>(Ho) * Wo;
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < spec.out_channels; ++co) {
                T* row = py + (static_cast<long long>(n) * spec.out_channels + co) * howo;
                std::fill(row, row + howo, b[co]);
            }
    }
    detail::conv_loop<T, detail::ConvPass::forward>(spec, N, H, W, Ho, Wo, x.data(), w.data(),
                                                    nullptr, y.data());
    detail::assert_finite(y, "conv2d");

    if (tape) {
        auto xn = x.node(), wn = w.node(), yn = y.node();
        auto bn = spec.has_bias ? bias->node() : nullptr;
        const ConvSpec sp = spec;
        tape->record([xn, wn, bn, yn, sp]() {
            if (yn->g.empty()) return;
            const int N = xn->shape[0], H = xn->shape[2], W = xn->shape[3];
            const int Ho = yn->shape[2], Wo = yn->shape[3];
            const T* dy = yn->g.data();
            auto& gx = detail::grad_of(xn);
            detail::conv_loop<T, detail::ConvPass::grad_input>(sp, N, H, W, Ho, Wo, nullptr,
                                                               wn->v.data(), dy, gx.data());
            auto& gw = detail::grad_of(wn);
            detail::conv_loop<T, detail::ConvPass::grad_weight>(sp, N, H, W, Ho, Wo, xn->v.data(),
                                                                nullptr, dy, gw.data());
            if (bn) {
                auto& gb = detail::grad_of(bn);
                const long long howo = static_cast<long long>(Ho) * Wo;
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < sp.out_channels; ++co) {
                        const T* row = dy + (static_cast<long long>(n) * sp.out_channels + co) * howo;
                        T s = T(0);
                        for (long long i = 0; i < howo; ++i) s += row[i];
                        gb[co] += s;
                    }
            }
        });
    }
    return y;
}

// Lets a literal nullptr bias deduce T from the other arguments.
template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, std::nullptr_t,
                 const ConvSpec& spec) {
    return conv2d(tape, x, w, static_cast<const Tensor<T>*>(nullptr), spec);
}

// Depthwise conv followed by a pointwise 1x1 conv, "same" padding, stride 1:
// spatial dims are preserved for any dilation. dw_w: [C, 1, K, K] with odd K;
// pw_w: [Co, C, 1, 1]; bias applies to the pointwise step.
template <class T>
Tensor<T> depthwise_separable(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& dw_w,
                              const Tensor<T>& pw_w, const Tensor<T>* bias, int dilation) {
    if (x.rank() != 4) throw ShapeError("depthwise_separable: input must be rank 4");
    if (dw_w.rank() != 4 || dw_w.dim(1) != 1)
        throw ShapeError("depthwise_separable: dw weight must be [C,1,K,K]");
    const int C = dw_w.dim(0), K = dw_w.dim(2);
    if (K % 2 == 0) throw SpecError("depthwise_separable: kernel must be odd for same padding");
    ConvSpec dw;
    dw.in_channels = dw.out_channels = dw.groups = C;
    dw.kernel = K;
    dw.dilation = dilation;
    dw.padding = dilation * (K - 1) / 2;
    Tensor<T> mid = conv2d(tape, x, dw_w, nullptr, dw);

    ConvSpec pw;
    pw.in_channels = C;
    pw.out_channels = pw_w.dim(0);
    pw.has_bias = bias != nullptr;
    return conv2d(tape, mid, pw_w, bias, pw);
}

// Batch normalization state for one channel axis. Running statistics follow
// running = (1 - momentum) * running + momentum * batch, with biased batch variance.
template <class T>
struct BatchNormState {
    Tensor<T> gamma, beta;
    std::vector<T> running_mean, running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);
    bool training = false;

    void init(int channels) {
        gamma = Tensor<T>::ones(Shape{channels});
        beta = Tensor<T>::zeros(Shape{channels});
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
        running_mean.assign(static_cast<size_t>(channels), T(0));
        running_var.assign(static_cast<size_t>(channels), T(1));
    }
    int channels() const { return gamma.defined() ? gamma.dim(0) : 0; }
};

template <class T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, BatchNormState<T>& st) {
    if (x.rank() != 4) throw ShapeError("batch_norm: input must be rank 4");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != st.channels())
        throw ShapeError("batch_norm: input has " + std::to_string(C) + " channels, state has " +
                         std::to_string(st.channels()));
    const long long hw = static_cast<long long>(H) * W;
    const long long m = static_cast<long long>(N) * hw;

    std::vector<T> mean(C), invstd(C);
    if (st.training) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* p = x.data() + (static_cast<long long>(n) * C + c) * hw;
                for (long long i = 0; i < hw; ++i) s += static_cast<double>(p[i]);
            }
            const double mu = s / static_cast<double>(m);
            double sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* p = x.data() + (static_cast<long long>(n) * C + c) * hw;
                for (long long i = 0; i < hw; ++i) {
                    const double d = static_cast<double>(p[i]) - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(m);
            mean[c] = static_cast<T>(mu);
            invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(st.eps)));
            st.running_mean[c] =
                (T(1) - st.momentum) * st.running_mean[c] + st.momentum * static_cast<T>(mu);
            st.running_var[c] =
                (T(1) - st.momentum) * st.running_var[c] + st.momentum * static_cast<T>(var);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = st.running_mean[c];
            invstd[c] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(st.running_var[c]) + static_cast<double>(st.eps)));
        }
    }

    Tensor<T> y(x.shape());
    const T* gam = st.gamma.data();
    const T* bet = st.beta.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const long long base = (static_cast<long long>(n) * C + c) * hw;
            const T mu = mean[c], is = invstd[c], g = gam[c], b = bet[c];
            const T* px = x.data() + base;
            T* py = y.data() + base;
            for (long long i = 0; i < hw; ++i) py[i] = g * (px[i] - mu) * is + b;
        }
    detail::assert_finite(y, "batch_norm");

    if (tape) {
        auto xn = x.node(), yn = y.node();
        auto gn = st.gamma.node(), bn = st.beta.node();
        const bool training = st.training;
        tape->record([xn, yn, gn, bn, mean, invstd, training]() {
            if (yn->g.empty()) return;
            const int N = xn->shape[0], C = xn->shape[1];
            const long long hw = static_cast<long long>(xn->shape[2]) * xn->shape[3];
            const long long m = static_cast<long long>(N) * hw;
            const T* dy = yn->g.data();
            const T* px = xn->v.data();
            auto& gx = detail::grad_of(xn);
            auto& gg = detail::grad_of(gn);
            auto& gb = detail::grad_of(bn);
            for (int c = 0; c < C; ++c) {
                const T mu = mean[c], is = invstd[c], gam = gn->v[static_cast<size_t>(c)];
                double s1 = 0.0, s2 = 0.0;  // sum(dy), sum(dy * xhat)
                for (int n = 0; n < N; ++n) {
                    const long long base = (static_cast<long long>(n) * C + c) * hw;
                    for (long long i = 0; i < hw; ++i) {
                        const double d = static_cast<double>(dy[base + i]);
                        s1 += d;
                        s2 += d * static_cast<double>((px[base + i] - mu) * is);
                    }
                }
                gg[static_cast<size_t>(c)] += static_cast<T>(s2);
                gb[static_cast<size_t>(c)] += static_cast<T>(s1);
                if (training) {
                    // dx = gamma*invstd/m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                    const double k = static_cast<double>(gam) * static_cast<double>(is) /
                                     static_cast<double>(m);
                    for (int n = 0; n < N; ++n) {
                        const long long base = (static_cast<long long>(n) * C + c) * hw;
                        for (long long i = 0; i < hw; ++i) {
                            const double xh = static_cast<double>((px[base + i] - mu) * is);
                            gx[base + i] += static_cast<T>(
                                k * (static_cast<double>(m) * static_cast<double>(dy[base + i]) -
                                     s1 - xh * s2));
                        }
                    }
                } else {
                    const T k = gam * is;
                    for (int n = 0; n < N; ++n) {
                        const long long base = (static_cast<long long>(n) * C + c) * hw;
                        for (long long i = 0; i < hw; ++i) gx[base + i] += k * dy[base + i];
                    }
                }
            }
        });
    }
    return y;
}

// PReLU with one slope per channel; channel axis is dim 1 for rank 4 and rank 2.
// The subgradient at exactly 0 is taken as 1.
template <class T>
Tensor<T> prelu(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& alpha) {
    if (x.rank() != 4 && x.rank() != 2)
        throw ShapeError("prelu: input must be rank 4 or rank 2");
    const int C = x.dim(1);
    if (alpha.shape() != Shape{C})
        throw ShapeError("prelu: alpha shape " + shape_str(alpha.shape()) + " != [" +
                         std::to_string(C) + "]");
    const int N = x.dim(0);
    const long long hw = x.rank() == 4 ? static_cast<long long>(x.dim(2)) * x.dim(3) : 1;

    Tensor<T> y(x.shape());
    const T* pa = alpha.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const long long base = (static_cast<long long>(n) * C + c) * hw;
            const T a = pa[c];
            const T* px = x.data() + base;
            T* py = y.data() + base;
            for (long long i = 0; i < hw; ++i) py[i] = px[i] < T(0) ? a * px[i] : px[i];
        }
    detail::assert_finite(y, "prelu");

    if (tape) {
        auto xn = x.node(), an = alpha.node(), yn = y.node();
        tape->record([xn, an, yn]() {
            if (yn->g.empty()) return;
            const int N = xn->shape[0], C = xn->shape[1];
            const long long hw =
                xn->shape.size() == 4 ? static_cast<long long>(xn->shape[2]) * xn->shape[3] : 1;
            const T* dy = yn->g.data();
            const T* px = xn->v.data();
            auto& gx = detail::grad_of(xn);
            auto& ga = detail::grad_of(an);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const long long base = (static_cast<long long>(n) * C + c) * hw;
                    const T a = an->v[static_cast<size_t>(c)];
                    T sa = T(0);
                    for (long long i = 0; i < hw; ++i) {
                        const T xv = px[base + i];
                        if (xv < T(0)) {
                            gx[base + i] += a * dy[base + i];
                            sa += xv * dy[base + i];
                        } else {
                            gx[base + i] += dy[base + i];
                        }
                    }
                    ga[static_cast<size_t>(c)] += sa;
                }
        });
    }
    return y;
}

// [N,C,H,W] -> [N,C,1,1] spatial mean.
template <class T>
Tensor<T> global_avg_pool(Tape<T>* tape, const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be rank 4");
    const int N = x.dim(0), C = x.dim(1);
    const long long hw = static_cast<long long>(x.dim(2)) * x.dim(3);
    Tensor<T> y(Shape{N, C, 1, 1});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x.data() + (static_cast<long long>(n) * C + c) * hw;
            double s = 0.0;
            for (long long i = 0; i < hw; ++i) s += static_cast<double>(p[i]);
            y[static_cast<long long>(n) * C + c] = static_cast<T>(s / static_cast<double>(hw));
        }
    detail::assert_finite(y, "global_avg_pool");

    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn]() {
            if (yn->g.empty()) return;
            const int N = xn->shape[0], C = xn->shape[1];
            const long long hw = static_cast<long long>(xn->shape[2]) * xn->shape[3];
            const T inv = T(1) / static_cast<T>(hw);
            auto& gx = detail::grad_of(xn);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const T dv = yn->g[static_cast<size_t>(n) * C + c] * inv;
                    T* g = gx.data() + (static_cast<long long>(n) * C + c) * hw;
                    for (long long i = 0; i < hw; ++i) g[i] += dv;
                }
        });
    }
    return y;
}

namespace detail {

// Source coordinates for half-pixel-aligned bilinear resize (align_corners=false):
// src = (dst + 0.5) * in/out - 0.5, clamped into the valid range.
inline void bilinear_axis(int in, int out, std::vector<int>& i0, std::vector<int>& i1,
                          std::vector<double>& frac) {
    i0.resize(static_cast<size_t>(out));
    i1.resize(static_cast<size_t>(out));
    frac.resize(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        if (src < 0.0) src = 0.0;
        if (src > in - 1) src = in - 1;
        const int lo = static_cast<int>(src);
        i0[static_cast<size_t>(o)] = lo;
        i1[static_cast<size_t>(o)] = std::min(lo + 1, in - 1);
        frac[static_cast<size_t>(o)] = src - lo;
    }
}

}  // namespace detail

template <class T>
Tensor<T> bilinear_upsample(Tape<T>* tape, const Tensor<T>& x, int out_h, int out_w) {
    if (x.rank() != 4) throw ShapeError("bilinear_upsample: input must be rank 4");
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_upsample: output dims must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);

    std::vector<int> h0, h1, w0, w1;
    std::vector<double> fh, fw;
    detail::bilinear_axis(H, out_h, h0, h1, fh);
    detail::bilinear_axis(W, out_w, w0, w1, fw);

    Tensor<T> y(Shape{N, C, out_h, out_w});
    const long long hw = static_cast<long long>(H) * W;
    const long long ohw = static_cast<long long>(out_h) * out_w;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x.data() + (static_cast<long long>(n) * C + c) * hw;
            T* q = y.data() + (static_cast<long long>(n) * C + c) * ohw;
            for (int oh = 0; oh < out_h; ++oh) {
                const T* r0 = p + static_cast<long long>(h0[static_cast<size_t>(oh)]) * W;
                const T* r1 = p + static_cast<long long>(h1[static_cast<size_t>(oh)]) * W;
                const double ah = fh[static_cast<size_t>(oh)];
                for (int ow = 0; ow < out_w; ++ow) {
                    const int a = w0[static_cast<size_t>(ow)], b = w1[static_cast<size_t>(ow)];
                    const double aw = fw[static_cast<size_t>(ow)];
                    const double top = (1.0 - aw) * r0[a] + aw * r0[b];
                    const double bot = (1.0 - aw) * r1[a] + aw * r1[b];
                    q[static_cast<long long>(oh) * out_w + ow] =
                        static_cast<T>((1.0 - ah) * top + ah * bot);
                }
            }
        }
    detail::assert_finite(y, "bilinear_upsample");

    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn, h0, h1, w0, w1, fh, fw]() {
            if (yn->g.empty()) return;
            const int N = xn->shape[0], C = xn->shape[1], H = xn->shape[2], W = xn->shape[3];
            const int out_h = yn->shape[2], out_w = yn->shape[3];
            const long long hw = static_cast<long long>(H) * W;
            const long long ohw = static_cast<long long>(out_h) * out_w;
            auto& gx = detail::grad_of(xn);
            const T* dy = yn->g.data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    T* g = gx.data() + (static_cast<long long>(n) * C + c) * hw;
                    const T* d = dy + (static_cast<long long>(n) * C + c) * ohw;
                    for (int oh = 0; oh < out_h; ++oh) {
                        const long long b0 = static_cast<long long>(h0[static_cast<size_t>(oh)]) * W;
                        const long long b1 = static_cast<long long>(h1[static_cast<size_t>(oh)]) * W;
                        const double ah = fh[static_cast<size_t>(oh)];
                        for (int ow = 0; ow < out_w; ++ow) {
                            const double aw = fw[static_cast<size_t>(ow)];
                            const double dv =
                                static_cast<double>(d[static_cast<long long>(oh) * out_w + ow]);
                            const int a = w0[static_cast<size_t>(ow)],
                                      b = w1[static_cast<size_t>(ow)];
                            g[b0 + a] += static_cast<T>((1.0 - ah) * (1.0 - aw) * dv);
                            g[b0 + b] += static_cast<T>((1.0 - ah) * aw * dv);
                            g[b1 + a] += static_cast<T>(ah * (1.0 - aw) * dv);
                            g[b1 + b] += static_cast<T>(ah * aw * dv);
                        }
                    }
                }
        });
    }
    return y;
}

// Channel shuffle: view C as (groups, C/groups), transpose, flatten.
// out[:, c] = in[:, (c % groups) * (C/groups) + c / groups].
template <class T>
Tensor<T> channel_shuffle(Tape<T>* tape, const Tensor<T>& x, int groups) {
    if (x.rank() != 4) throw ShapeError("channel_shuffle: input must be rank 4");
    if (groups < 1) throw SpecError("channel_shuffle: groups must be >= 1");
    const int C = x.dim(1);
    if (C % groups != 0)
        throw SpecError("channel_shuffle: groups=" + std::to_string(groups) +
                        " does not divide C=" + std::to_string(C));
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int per = C / groups;
    const long long hw = static_cast<long long>(H) * W;

    std::vector<int> src(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) src[static_cast<size_t>(c)] = (c % groups) * per + c / groups;

    Tensor<T> y(x.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x.data() + (static_cast<long long>(n) * C + src[static_cast<size_t>(c)]) * hw;
            T* q = y.data() + (static_cast<long long>(n) * C + c) * hw;
            std::copy(p, p + hw, q);
        }

    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn, src]() {
            if (yn->g.empty()) return;
            const int N = xn->shape[0], C = xn->shape[1];
            const long long hw = static_cast<long long>(xn->shape[2]) * xn->shape[3];
            auto& gx = detail::grad_of(xn);
            const T* dy = yn->g.data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    T* g = gx.data() +
                           (static_cast<long long>(n) * C + src[static_cast<size_t>(c)]) * hw;
                    const T* d = dy + (static_cast<long long>(n) * C + c) * hw;
                    for (long long i = 0; i < hw; ++i) g[i] += d[i];
                }
        });
    }
    return y;
}

// Softmax over the channel axis (dim 1), per spatial position; max-shifted for stability.
template <class T>
Tensor<T> softmax_channels(Tape<T>* tape, const Tensor<T>& x) {
    if (x.rank() != 4 && x.rank() != 2)
        throw ShapeError("softmax_channels: input must be rank 4 or rank 2");
    const int N = x.dim(0), C = x.dim(1);
    const long long hw = x.rank() == 4 ? static_cast<long long>(x.dim(2)) * x.dim(3) : 1;

    Tensor<T> y(x.shape());
    const long long chw = static_cast<long long>(C) * hw;
    for (int n = 0; n < N; ++n) {
        const T* p = x.data() + static_cast<long long>(n) * chw;
        T* q = y.data() + static_cast<long long>(n) * chw;
        for (long long i = 0; i < hw; ++i) {
            T mx = p[i];
            for (int c = 1; c < C; ++c) mx = std::max(mx, p[c * hw + i]);
            double z = 0.0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(static_cast<double>(p[c * hw + i] - mx));
                q[c * hw + i] = static_cast<T>(e);
                z += e;
            }
            const double inv = 1.0 / z;
            for (int c = 0; c < C; ++c)
                q[c * hw + i] = static_cast<T>(static_cast<double>(q[c * hw + i]) * inv);
        }
    }
    detail::assert_finite(y, "softmax_channels");

    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn]() {
            if (yn->g.empty()) return;
            const int N = xn->shape[0], C = xn->shape[1];
            const long long hw =
                xn->shape.size() == 4 ? static_cast<long long>(xn->shape[2]) * xn->shape[3] : 1;
            const long long chw = static_cast<long long>(C) * hw;
            auto& gx = detail::grad_of(xn);
            for (int n = 0; n < N; ++n) {
                const T* yv = yn->v.data() + static_cast<long long>(n) * chw;
                const T* dy = yn->g.data() + static_cast<long long>(n) * chw;
                T* g = gx.data() + static_cast<long long>(n) * chw;
                for (long long i = 0; i < hw; ++i) {
                    double dot = 0.0;
                    for (int c = 0; c < C; ++c)
                        dot += static_cast<double>(dy[c * hw + i]) *
                               static_cast<double>(yv[c * hw + i]);
                    for (int c = 0; c < C; ++c)
                        g[c * hw + i] += static_cast<T>(
                            static_cast<double>(yv[c * hw + i]) *
                            (static_cast<double>(dy[c * hw + i]) - dot));
                }
            }
        });
    }
    return y;
}

// Fully connected layer. x: [N,F], w: [O,F], b: [O] or null.
template <class T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
    if (x.rank() != 2 || w.rank() != 2) throw ShapeError("linear: x and w must be rank 2");
    const int N = x.dim(0), F = x.dim(1), O = w.dim(0);
    if (w.dim(1) != F)
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    if (b && b->defined() && b->shape() != Shape{O})
        throw ShapeError("linear: bias must be [" + std::to_string(O) + "]");

    Tensor<T> y(Shape{N, O});
    for (int n = 0; n < N; ++n) {
        const T* px = x.data() + static_cast<long long>(n) * F;
        T* py = y.data() + static_cast<long long>(n) * O;
        for (int o = 0; o < O; ++o) {
            const T* pw = w.data() + static_cast<long long>(o) * F;
            T s = (b && b->defined()) ? (*b)[o] : T(0);
            for (int f = 0; f < F; ++f) s += pw[f] * px[f];
            py[o] = s;
        }
    }
    detail::assert_finite(y, "linear");

    if (tape) {
        auto xn = x.node(), wn = w.node(), yn = y.node();
        auto bn = (b && b->defined()) ? b->node() : nullptr;
        tape->record([xn, wn, bn, yn]() {
            if (yn->g.empty()) return;
            const int N = xn->shape[0], F = xn->shape[1], O = wn->shape[0];
            const T* dy = yn->g.data();
            auto& gx = detail::grad_of(xn);
            auto& gw = detail::grad_of(wn);
            for (int n = 0; n < N; ++n) {
                const T* drow = dy + static_cast<long long>(n) * O;
                const T* xrow = xn->v.data() + static_cast<long long>(n) * F;
                T* gxrow = gx.data() + static_cast<long long>(n) * F;
                for (int o = 0; o < O; ++o) {
                    const T d = drow[o];
                    const T* wrow = wn->v.data() + static_cast<long long>(o) * F;
                    T* gwrow = gw.data() + static_cast<long long>(o) * F;
                    for (int f = 0; f < F; ++f) {
                        gxrow[f] += d * wrow[f];
                        gwrow[f] += d * xrow[f];
                    }
                }
            }
            if (bn) {
                auto& gb = detail::grad_of(bn);
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) gb[static_cast<size_t>(o)] += dy[n * O + o];
            }
        });
    }
    return y;
}

// Mean pixel-wise cross entropy over positions whose label != ignore_index.
// logits: [N,K,H,W], labels: int32 [N,H,W] with values in [0,K) or ignore_index.
// Returns a [1] tensor; all positions ignored -> 0 with zero gradient.
template <class T>
Tensor<T> cross_entropy_loss(Tape<T>* tape, const Tensor<T>& logits, const Tensor<int32_t>& labels,
                             int ignore_index = 255) {
    if (logits.rank() != 4) throw ShapeError("cross_entropy_loss: logits must be rank 4");
    const int N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    if (labels.shape() != Shape{N, H, W})
        throw ShapeError("cross_entropy_loss: labels " + shape_str(labels.shape()) +
                         " do not match logits " + shape_str(logits.shape()));

    const long long hw = static_cast<long long>(H) * W;
    const long long khw = static_cast<long long>(K) * hw;
    long long valid = 0;
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const T* p = logits.data() + static_cast<long long>(n) * khw;
        const int32_t* lab = labels.data() + static_cast<long long>(n) * hw;
        for (long long i = 0; i < hw; ++i) {
            const int32_t cls = lab[i];
            if (cls == ignore_index) continue;
            if (cls < 0 || cls >= K)
                throw DataError("cross_entropy_loss: label " + std::to_string(cls) +
                                " out of range [0," + std::to_string(K) + ")");
            T mx = p[i];
            for (int c = 1; c < K; ++c) mx = std::max(mx, p[c * hw + i]);
            double z = 0.0;
            for (int c = 0; c < K; ++c) z += std::exp(static_cast<double>(p[c * hw + i] - mx));
            total += std::log(z) + static_cast<double>(mx) - static_cast<double>(p[cls * hw + i]);
            ++valid;
        }
    }
    const T loss = valid > 0 ? static_cast<T>(total / static_cast<double>(valid)) : T(0);
    Tensor<T> y = Tensor<T>::scalar(loss);
    detail::assert_finite(y, "cross_entropy_loss");

    if (tape) {
        auto xn = logits.node(), yn = y.node();
        auto ln = labels.node();
        tape->record([xn, yn, ln, ignore_index, valid]() {
            if (yn->g.empty() || valid == 0) return;
            const int N = xn->shape[0], K = xn->shape[1];
            const long long hw = static_cast<long long>(xn->shape[2]) * xn->shape[3];
            const long long khw = static_cast<long long>(K) * hw;
            const T gscale = yn->g[0] / static_cast<T>(valid);
            auto& gx = detail::grad_of(xn);
            for (int n = 0; n < N; ++n) {
                const T* p = xn->v.data() + static_cast<long long>(n) * khw;
                T* g = gx.data() + static_cast<long long>(n) * khw;
                const int32_t* lab = ln->v.data() + static_cast<long long>(n) * hw;
                for (long long i = 0; i < hw; ++i) {
                    const int32_t cls = lab[i];
                    if (cls == ignore_index) continue;
                    T mx = p[i];
                    for (int c = 1; c < K; ++c) mx = std::max(mx, p[c * hw + i]);
                    double z = 0.0;
                    for (int c = 0; c < K; ++c)
                        z += std::exp(static_cast<double>(p[c * hw + i] - mx));
                    const double inv = 1.0 / z;
                    for (int c = 0; c < K; ++c) {
                        const double prob =
                            std::exp(static_cast<double>(p[c * hw + i] - mx)) * inv;
                        const double ind = (c == cls) ? 1.0 : 0.0;
                        g[c * hw + i] += static_cast<T>((prob - ind)) * gscale;
                    }
                }
            }
        });
    }
    return y;
}

}  // namespace cifre
