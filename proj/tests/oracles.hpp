#pragma once

// Independent reference implementations used to cross-check the library.
// Everything here is written the slow, obvious way on purpose.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cifre/ops.hpp"
#include "cifre/rng.hpp"

namespace oracle {

template <class T>
void fill_uniform(cifre::Tensor<T>& t, cifre::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (long long i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
}

// Plain 6-nested-loop cross-correlation with zero padding, groups, dilation,
// stride and optional bias. Weight layout is [Co, Ci/g, k, k].
template <class T>
cifre::Tensor<T> naive_conv2d(const cifre::Tensor<T>& x, const cifre::Tensor<T>& w,
                              const cifre::Tensor<T>* bias, const cifre::ConvSpec& spec) {
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = spec.out_channels, k = spec.kernel, g = spec.groups;
    const int cig = Ci / g, cog = Co / g;
    const int Ho = (H + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
    const int Wo = (W + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
    cifre::Tensor<T> y(cifre::Shape{N, Co, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    T acc = bias ? (*bias)[co] : T(0);
                    const int grp = co / cog;
                    for (int ci = 0; ci < cig; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
                                const int ix = ox * spec.stride - spec.padding + kx * spec.dilation;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x.at({n, grp * cig + ci, iy, ix}) * w.at({co, ci, ky, kx});
                            }
                    y.at({n, co, oy, ox}) = acc;
                }
    return y;
}

template <class T>
cifre::Tensor<T> naive_conv2d(const cifre::Tensor<T>& x, const cifre::Tensor<T>& w, std::nullptr_t,
                              const cifre::ConvSpec& spec) {
    return naive_conv2d(x, w, static_cast<const cifre::Tensor<T>*>(nullptr), spec);
}

// Scalar reference for align-corners-false bilinear resize of one plane.
inline double ref_bilinear_at(const std::vector<double>& plane, int h, int w, int out_h, int out_w,
                              int oy, int ox) {
    auto sample_axis = [](int in, int out, int o, int& i0, int& i1, double& f) {
        double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
        src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
        i0 = static_cast<int>(std::floor(src));
        i1 = std::min(i0 + 1, in - 1);
        f = src - i0;
    };
    int y0, y1, x0, x1;
    double fy, fx;
    sample_axis(h, out_h, oy, y0, y1, fy);
    sample_axis(w, out_w, ox, x0, x1, fx);
    const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
    const double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
    return top * (1 - fy) + bot * fy;
}

template <class T>
cifre::Tensor<T> ref_bilinear(const cifre::Tensor<T>& x, int out_h, int out_w) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    cifre::Tensor<T> y(cifre::Shape{N, C, out_h, out_w});
    std::vector<double> plane(static_cast<size_t>(H) * W);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            for (int i = 0; i < H * W; ++i) plane[i] = x.at({n, c, i / W, i % W});
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox)
                    y.at({n, c, oy, ox}) =
                        static_cast<T>(ref_bilinear_at(plane, H, W, out_h, out_w, oy, ox));
        }
    return y;
}

// Brute-force broadcast of a [1,C,1,1] (or [C]) vector onto a rank-4 tensor.
template <class T, class F>
cifre::Tensor<T> broadcast_ref(const cifre::Tensor<T>& full, const cifre::Tensor<T>& vec, F op) {
    cifre::Tensor<T> y(full.shape());
    const int C = full.dim(1), H = full.dim(2), W = full.dim(3);
    for (int n = 0; n < full.dim(0); ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H * W; ++i) {
                const long long off = ((static_cast<long long>(n) * C + c) * H * W) + i;
                y[off] = op(full[off], vec[c]);
            }
    return y;
}

// Shuffle permutation built literally as view (g, C/g) -> transpose -> flatten.
inline std::vector<int> shuffle_perm(int channels, int groups) {
    const int per = channels / groups;
    std::vector<int> grid(static_cast<size_t>(channels));
    for (int a = 0; a < groups; ++a)
        for (int b = 0; b < per; ++b) grid[a * per + b] = a * per + b;
    std::vector<int> out;
    out.reserve(grid.size());
    for (int b = 0; b < per; ++b)
        for (int a = 0; a < groups; ++a) out.push_back(grid[a * per + b]);
    return out;  // out[new_pos] = source channel
}

}  // namespace oracle
