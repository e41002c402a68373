#include "cifre/train.hpp"

#include <algorithm>
#include <cmath>

namespace cifre {

void sgd_step(std::vector<ParamRef<float>>& params, SgdState& state, double lr, double momentum,
              double weight_decay) {
    if (state.velocity.empty()) {
        state.velocity.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i)
            state.velocity[i].assign(static_cast<size_t>(params[i].tensor.numel()), 0.0f);
    }
    if (state.velocity.size() != params.size())
        throw ShapeError("sgd: velocity count does not match parameter count");
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto& v = state.velocity[i];
        if (static_cast<long long>(v.size()) != p.tensor.numel())
            throw ShapeError("sgd: velocity shape mismatch for " + p.name);
        const float* g = p.tensor.grad_buffer().data();
        float* w = p.tensor.data();
        const float wd = p.decay ? static_cast<float>(weight_decay) : 0.0f;
        const float mu = static_cast<float>(momentum);
        const float step = static_cast<float>(lr);
        for (size_t j = 0; j < v.size(); ++j) {
            v[j] = mu * v[j] + (g[j] + wd * w[j]);
            w[j] -= step * v[j];
        }
    }
}

namespace {

float sample_bilinear(const float* img, int H, int W, double sy, double sx) {
    const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
    const double fy = sy - y0, fx = sx - x0;
    double acc = 0;
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            const int y = y0 + dy, x = x0 + dx;
            if (y < 0 || y >= H || x < 0 || x >= W) continue;
            const double wgt = (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
            acc += wgt * img[static_cast<long long>(y) * W + x];
        }
    return static_cast<float>(acc);
}

}  // namespace

ToySample scale_sample(const ToySample& s, double factor) {
    if (factor <= 0) throw ContractError("scale: factor must be > 0");
    const int H = s.image.dim(1), W = s.image.dim(2);
    const int oh = std::max(1, static_cast<int>(std::lround(H * factor)));
    const int ow = std::max(1, static_cast<int>(std::lround(W * factor)));
    ToySample out;
    out.image = Tensor<float>(Shape{3, oh, ow});
    out.label = Tensor<int32_t>(Shape{oh, ow});
    std::vector<int> y0, y1, x0, x1;
    std::vector<double> fy, fx;
    detail::bilinear_axis(H, oh, y0, y1, fy);
    detail::bilinear_axis(W, ow, x0, x1, fx);
    for (int c = 0; c < 3; ++c) {
        const float* src = s.image.data() + static_cast<long long>(c) * H * W;
        float* dst = out.image.data() + static_cast<long long>(c) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                const size_t uy = static_cast<size_t>(y), ux = static_cast<size_t>(x);
                const double top = (1.0 - fx[ux]) * src[static_cast<long long>(y0[uy]) * W + x0[ux]] +
                                   fx[ux] * src[static_cast<long long>(y0[uy]) * W + x1[ux]];
                const double bot = (1.0 - fx[ux]) * src[static_cast<long long>(y1[uy]) * W + x0[ux]] +
                                   fx[ux] * src[static_cast<long long>(y1[uy]) * W + x1[ux]];
                dst[static_cast<long long>(y) * ow + x] =
                    static_cast<float>((1.0 - fy[uy]) * top + fy[uy] * bot);
            }
    }
    for (int y = 0; y < oh; ++y) {
        const int sy = std::min(H - 1, static_cast<int>((y + 0.5) * H / oh));
        for (int x = 0; x < ow; ++x) {
            const int sx = std::min(W - 1, static_cast<int>((x + 0.5) * W / ow));
            out.label[static_cast<long long>(y) * ow + x] =
                s.label[static_cast<long long>(sy) * W + sx];
        }
    }
    return out;
}

ToySample hflip_sample(const ToySample& s) {
    const int H = s.image.dim(1), W = s.image.dim(2);
    ToySample out;
    out.image = Tensor<float>(s.image.shape());
    out.label = Tensor<int32_t>(s.label.shape());
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                out.image[(static_cast<long long>(c) * H + y) * W + x] =
                    s.image[(static_cast<long long>(c) * H + y) * W + (W - 1 - x)];
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            out.label[static_cast<long long>(y) * W + x] =
                s.label[static_cast<long long>(y) * W + (W - 1 - x)];
    return out;
}

ToySample rotate_sample(const ToySample& s, double degrees, int ignore_index) {
    const int H = s.image.dim(1), W = s.image.dim(2);
    const double rad = degrees * M_PI / 180.0;
    const double c = std::cos(rad), sn = std::sin(rad);
    const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
    ToySample out;
    out.image = Tensor<float>(s.image.shape());
    out.label = Tensor<int32_t>(s.label.shape());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double sx = c * dx + sn * dy + cx;
            const double sy = -sn * dx + c * dy + cy;
            for (int ch = 0; ch < 3; ++ch)
                out.image[(static_cast<long long>(ch) * H + y) * W + x] = sample_bilinear(
                    s.image.data() + static_cast<long long>(ch) * H * W, H, W, sy, sx);
            const int ny = static_cast<int>(std::lround(sy));
            const int nx = static_cast<int>(std::lround(sx));
            out.label[static_cast<long long>(y) * W + x] =
                (ny < 0 || ny >= H || nx < 0 || nx >= W)
                    ? ignore_index
                    : s.label[static_cast<long long>(ny) * W + nx];
        }
    return out;
}

ToySample crop_sample(const ToySample& s, int oy, int ox, int h, int w, int ignore_index) {
    if (h < 1 || w < 1) throw ContractError("crop: dims must be >= 1");
    const int H = s.image.dim(1), W = s.image.dim(2);
    ToySample out;
    out.image = Tensor<float>::zeros(Shape{3, h, w});
    out.label = Tensor<int32_t>::full(Shape{h, w}, ignore_index);
    for (int y = 0; y < h; ++y) {
        const int sy = oy + y;
        if (sy < 0 || sy >= H) continue;
        for (int x = 0; x < w; ++x) {
            const int sx = ox + x;
            if (sx < 0 || sx >= W) continue;
            for (int ch = 0; ch < 3; ++ch)
                out.image[(static_cast<long long>(ch) * h + y) * w + x] =
                    s.image[(static_cast<long long>(ch) * H + sy) * W + sx];
            out.label[static_cast<long long>(y) * w + x] =
                s.label[static_cast<long long>(sy) * W + sx];
        }
    }
    return out;
}

ToySample augment(const ToySample& s, const AugmentCfg& cfg, Rng& rng, int ignore_index) {
    cfg.validate();
    const double factor = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    ToySample cur = scale_sample(s, factor);
    if (cfg.hflip && rng.coin(0.5)) cur = hflip_sample(cur);
    const double angle = rng.uniform(cfg.rotate_lo, cfg.rotate_hi);
    cur = rotate_sample(cur, angle, ignore_index);
    const int H = cur.image.dim(1), W = cur.image.dim(2);
    const int ry = rng.uniform_int(0, std::max(0, H - cfg.crop_h));
    const int rx = rng.uniform_int(0, std::max(0, W - cfg.crop_w));
    const int oy = H >= cfg.crop_h ? ry : -((cfg.crop_h - H) / 2);
    const int ox = W >= cfg.crop_w ? rx : -((cfg.crop_w - W) / 2);
    cur = crop_sample(cur, oy, ox, cfg.crop_h, cfg.crop_w, ignore_index);
    for (int c = 0; c < 3; ++c) {
        const float m = static_cast<float>(cfg.mean[static_cast<size_t>(c)]);
        float* p = cur.image.data() + static_cast<long long>(c) * cfg.crop_h * cfg.crop_w;
        for (long long i = 0; i < static_cast<long long>(cfg.crop_h) * cfg.crop_w; ++i)
            p[i] -= m;
    }
    return cur;
}

namespace {

struct Palette {
    double r, g, b;
};

// Classes 1 and 3 share a palette entry on purpose: they differ only by disk
// size, so separating them takes spatial context rather than color.
const Palette kPalette[6] = {{0.66, 0.26, 0.22}, {0.22, 0.32, 0.68}, {0.66, 0.26, 0.22},
                             {0.75, 0.68, 0.25}, {0.55, 0.25, 0.65}, {0.25, 0.62, 0.60}};

}  // namespace

ToySample gen_toy_sample(const ToyDataCfg& cfg, int index) {
    if (cfg.num_classes < 2) throw ConfigError("toy data: need at least 2 classes");
    if (cfg.height < 16 || cfg.width < 16) throw ConfigError("toy data: canvas too small");
    if (index < 0) throw ContractError("toy data: index must be >= 0");
    const int H = cfg.height, W = cfg.width, K = cfg.num_classes;
    Rng rng(cfg.seed, 0xD5A7A000ull + static_cast<uint64_t>(index));

    ToySample s;
    s.image = Tensor<float>(Shape{3, H, W});
    s.label = Tensor<int32_t>::zeros(Shape{H, W});

    // Textured background: per-channel base + linear shading + a low-frequency wave.
    double base[3] = {0.34 + rng.uniform(0, 0.08), 0.42 + rng.uniform(0, 0.08),
                      0.36 + rng.uniform(0, 0.08)};
    const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
    const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
    const double ph = rng.uniform(0, 2 * M_PI);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double u = static_cast<double>(x) / W - 0.5, v = static_cast<double>(y) / H - 0.5;
            const double wave = 0.03 * std::sin(2 * M_PI * (fx * u + fy * v) + ph);
            for (int c = 0; c < 3; ++c)
                s.image[(static_cast<long long>(c) * H + y) * W + x] =
                    static_cast<float>(base[c] + gx * u + gy * v + wave);
        }

    const int n_shapes = 1 + rng.uniform_int(0, 3);
    for (int k = 0; k < n_shapes; ++k) {
        const int cls = 1 + rng.uniform_int(0, K - 2);
        const int form = (cls - 1) % 3;  // 0: small disk, 1: rect, 2: large disk
        ToyShape sh;
        sh.cls = cls;
        double extent_y, extent_x;
        if (form == 1) {
            sh.kind = 1;
            sh.a = rng.uniform_int(5, 11);
            sh.b = rng.uniform_int(5, 11);
            extent_x = sh.a;
            extent_y = sh.b;
        } else {
            sh.kind = 0;
            // Radius floors keep rasterized pixel counts within 5% of pi*r^2.
            sh.a = form == 0 ? rng.uniform(8.0, 10.5) : rng.uniform(16.0, 22.0);
            sh.b = sh.a;
            extent_x = extent_y = sh.a;
        }
        const int margin_x = static_cast<int>(extent_x) + 2;
        const int margin_y = static_cast<int>(extent_y) + 2;
        if (2 * margin_x + 2 >= W || 2 * margin_y + 2 >= H) continue;

        bool placed = false;
        for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
            double cx, cy;
            if (sh.kind == 1) {  // integer center keeps the rect area exact
                cx = rng.uniform_int(margin_x, W - 1 - margin_x);
                cy = rng.uniform_int(margin_y, H - 1 - margin_y);
            } else {
                cx = rng.uniform(margin_x, W - 1 - margin_x);
                cy = rng.uniform(margin_y, H - 1 - margin_y);
            }
            bool clash = false;
            for (const auto& other : s.shapes) {
                const double need_x = extent_x + std::max(other.a, other.b) + 3;
                const double need_y = extent_y + std::max(other.a, other.b) + 3;
                if (std::abs(cx - other.cx) < need_x && std::abs(cy - other.cy) < need_y)
                    clash = true;
            }
            if (clash) continue;
            sh.cx = cx;
            sh.cy = cy;
            placed = true;
        }
        if (!placed) continue;

        const Palette& pal = kPalette[(cls - 1) % 6];
        const double jr = rng.uniform(-0.05, 0.05), jg = rng.uniform(-0.05, 0.05),
                     jb = rng.uniform(-0.05, 0.05);
        const double col[3] = {pal.r + jr, pal.g + jg, pal.b + jb};

        if (sh.kind == 1) {
            const int x0 = static_cast<int>(sh.cx - sh.a), x1 = static_cast<int>(sh.cx + sh.a);
            const int y0 = static_cast<int>(sh.cy - sh.b), y1 = static_cast<int>(sh.cy + sh.b);
            sh.area = static_cast<double>(x1 - x0 + 1) * (y1 - y0 + 1);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    s.label[static_cast<long long>(y) * W + x] = cls;
                    for (int c = 0; c < 3; ++c)
                        s.image[(static_cast<long long>(c) * H + y) * W + x] =
                            static_cast<float>(col[c]);
                }
        } else {
            sh.area = M_PI * sh.a * sh.a;
            const double r2 = sh.a * sh.a;
            const int y0 = static_cast<int>(std::floor(sh.cy - sh.a)),
                      y1 = static_cast<int>(std::ceil(sh.cy + sh.a));
            const int x0 = static_cast<int>(std::floor(sh.cx - sh.a)),
                      x1 = static_cast<int>(std::ceil(sh.cx + sh.a));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double dx = x - sh.cx, dy = y - sh.cy;
                    if (dx * dx + dy * dy > r2) continue;
                    s.label[static_cast<long long>(y) * W + x] = cls;
                    for (int c = 0; c < 3; ++c)
                        s.image[(static_cast<long long>(c) * H + y) * W + x] =
                            static_cast<float>(col[c]);
                }
        }
        s.shapes.push_back(sh);
    }

    for (long long i = 0; i < s.image.numel(); ++i) {
        const double noisy = s.image[i] + rng.normal(0.0, 0.02);
        s.image[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
    return s;
}

std::vector<ToySample> gen_toy_dataset(const ToyDataCfg& cfg) {
    if (cfg.num_classes < 2) throw ConfigError("toy data: need at least 2 classes");
    if (cfg.n_samples < 1) throw ConfigError("toy data: n_samples must be >= 1");
    std::vector<ToySample> out;
    out.reserve(static_cast<size_t>(cfg.n_samples));
    for (int i = 0; i < cfg.n_samples; ++i) out.push_back(gen_toy_sample(cfg, i));
    return out;
}

std::vector<double> dataset_mean(const std::vector<ToySample>& data) {
    if (data.empty()) throw ContractError("dataset_mean: empty dataset");
    std::vector<double> mean(3, 0.0);
    long long count = 0;
    for (const auto& s : data) {
        const long long hw = static_cast<long long>(s.image.dim(1)) * s.image.dim(2);
        for (int c = 0; c < 3; ++c) {
            const float* p = s.image.data() + c * hw;
            for (long long i = 0; i < hw; ++i) mean[static_cast<size_t>(c)] += p[i];
        }
        count += hw;
    }
    for (auto& m : mean) m /= static_cast<double>(count);
    return mean;
}

TrainResult train_loop(CIFReNet<float>& net, const std::vector<ToySample>& data,
                       const TrainCfg& cfg, const std::function<void(const HistoryRow&)>& on_iter) {
    cfg.validate();
    if (data.empty()) throw ContractError("train: dataset is empty");
    if (cfg.augment.crop_h % net.cfg.output_stride != 0 ||
        cfg.augment.crop_w % net.cfg.output_stride != 0)
        throw ConfigError("train: crop dims must be divisible by output_stride " +
                          std::to_string(net.cfg.output_stride));

    net.set_train(true);
    auto params = net.parameters();
    SgdState opt;
    Rng pick(cfg.seed, 0xBA7C4);
    const int B = cfg.batch, h = cfg.augment.crop_h, w = cfg.augment.crop_w;

    TrainResult res;
    res.history.reserve(static_cast<size_t>(cfg.max_iter));
    for (int iter = 0; iter < cfg.max_iter; ++iter) {
        Tensor<float> images(Shape{B, 3, h, w});
        Tensor<int32_t> labels(Shape{B, h, w});
        for (int b = 0; b < B; ++b) {
            const int idx = pick.uniform_int(0, static_cast<int>(data.size()) - 1);
            Rng aug_rng(cfg.seed, 0xA46000ull + static_cast<uint64_t>(iter) * B + b);
            ToySample s = augment(data[static_cast<size_t>(idx)], cfg.augment, aug_rng,
                                  cfg.ignore_index);
            std::copy(s.image.data(), s.image.data() + s.image.numel(),
                      images.data() + static_cast<long long>(b) * 3 * h * w);
            std::copy(s.label.data(), s.label.data() + s.label.numel(),
                      labels.data() + static_cast<long long>(b) * h * w);
        }

        Tape<float> tape;
        Tensor<float> logits = net.forward(&tape, images);
        Tensor<float> loss = cross_entropy_loss(&tape, logits, labels, cfg.ignore_index);
        const double lval = loss[0];
        if (!std::isfinite(lval))
            throw DataError("train: loss is not finite at iter " + std::to_string(iter));

        for (auto& p : params) p.tensor.zero_grad();
        backward(tape, loss);
        const double lr = poly_lr(iter, cfg);
        sgd_step(params, opt, lr, cfg.momentum, cfg.weight_decay);

        HistoryRow row{iter, lval, lr};
        res.history.push_back(row);
        if (on_iter) on_iter(row);
    }

    res.final_train_miou = evaluate(net, data, cfg.augment.mean, cfg.ignore_index).miou;
    return res;
}

MiouReport evaluate(CIFReNet<float>& net, const std::vector<ToySample>& data,
                    const std::vector<double>& mean, int ignore_index) {
    if (data.empty()) throw ContractError("evaluate: empty dataset");
    if (mean.size() != 3) throw ConfigError("evaluate: mean must have 3 channels");
    net.set_train(false);
    ConfusionMatrix cm(net.cfg.num_classes);
    for (const auto& s : data) {
        const int H = s.image.dim(1), W = s.image.dim(2);
        Tensor<float> img(Shape{1, 3, H, W});
        const long long hw = static_cast<long long>(H) * W;
        for (int c = 0; c < 3; ++c) {
            const float m = static_cast<float>(mean[static_cast<size_t>(c)]);
            for (long long i = 0; i < hw; ++i) img[c * hw + i] = s.image[c * hw + i] - m;
        }
        Tensor<float> logits = net.forward(nullptr, img);
        Tensor<int32_t> pred = argmax_classes(logits);
        Tensor<int32_t> pred2(Shape{H, W}, std::vector<int32_t>(
                                               pred.data(), pred.data() + pred.numel()));
        update_confusion(cm, pred2, s.label, ignore_index);
    }
    return miou_report(cm);
}

}  // namespace cifre
