#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cifre/tensor.hpp"

namespace cifre {

// counts[i][j] = pixels of true class i predicted as class j.
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<long long> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int k) : num_classes(k) {
        if (k < 1) throw ContractError("confusion: need at least one class");
        counts.assign(static_cast<size_t>(k) * k, 0);
    }

    long long& at(int t, int p) { return counts[static_cast<size_t>(t) * num_classes + p]; }
    long long at(int t, int p) const { return counts[static_cast<size_t>(t) * num_classes + p]; }

    long long total() const {
        long long s = 0;
        for (long long c : counts) s += c;
        return s;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.num_classes != num_classes) throw ShapeError("confusion: class count mismatch");
        for (size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }
};

// Argmax over the class axis of [N,K,H,W] logits; ties go to the lowest index.
template <class T>
Tensor<int32_t> argmax_classes(const Tensor<T>& logits) {
    if (logits.rank() != 4) throw ShapeError("argmax: logits must be [N,K,H,W]");
    const int N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    Tensor<int32_t> out(Shape{N, H, W});
    const long long hw = static_cast<long long>(H) * W;
    for (int n = 0; n < N; ++n)
        for (long long px = 0; px < hw; ++px) {
            const T* base = logits.data() + (static_cast<long long>(n) * K) * hw + px;
            int best = 0;
            T best_v = base[0];
            for (int k = 1; k < K; ++k) {
                const T v = base[k * hw];
                if (v > best_v) {
                    best_v = v;
                    best = k;
                }
            }
            out[n * hw + px] = best;
        }
    return out;
}

inline void update_confusion(ConfusionMatrix& cm, const Tensor<int32_t>& pred,
                             const Tensor<int32_t>& label, int ignore_index = 255) {
    if (pred.shape() != label.shape())
        throw ShapeError("confusion: pred " + shape_str(pred.shape()) + " vs label " +
                         shape_str(label.shape()));
    for (long long i = 0; i < pred.numel(); ++i) {
        const int t = label[i];
        if (t == ignore_index) continue;
        const int p = pred[i];
        if (t < 0 || t >= cm.num_classes)
            throw DataError("confusion: label " + std::to_string(t) + " outside [0," +
                            std::to_string(cm.num_classes) + ")");
        if (p < 0 || p >= cm.num_classes)
            throw DataError("confusion: prediction " + std::to_string(p) + " outside [0," +
                            std::to_string(cm.num_classes) + ")");
        cm.at(t, p) += 1;
    }
}

struct MiouReport {
    double miou = 0;
    std::vector<double> per_class;  // NaN for classes excluded by the zero-denominator rule
};

// Classes absent from both prediction and truth are excluded from the mean.
inline MiouReport miou_report(const ConfusionMatrix& cm) {
    if (cm.num_classes < 1 || cm.total() == 0)
        throw ContractError("miou: empty confusion matrix");
    MiouReport rep;
    rep.per_class.assign(static_cast<size_t>(cm.num_classes),
                         std::numeric_limits<double>::quiet_NaN());
    double sum = 0;
    int valid = 0;
    for (int c = 0; c < cm.num_classes; ++c) {
        long long tp = cm.at(c, c), row = 0, col = 0;
        for (int j = 0; j < cm.num_classes; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const long long denom = row + col - tp;
        if (denom == 0) continue;
        const double iou = static_cast<double>(tp) / static_cast<double>(denom);
        rep.per_class[static_cast<size_t>(c)] = iou;
        sum += iou;
        ++valid;
    }
    if (valid == 0) throw ContractError("miou: every class has zero denominator");
    rep.miou = sum / valid;
    return rep;
}

inline double miou(const ConfusionMatrix& cm) { return miou_report(cm).miou; }

}  // namespace cifre
