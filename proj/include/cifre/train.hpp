#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cifre/metrics.hpp"
#include "cifre/net.hpp"
#include "cifre/rng.hpp"

namespace cifre {

struct AugmentCfg {
    double scale_lo = 0.5, scale_hi = 1.5;
    bool hflip = true;
    double rotate_lo = -3.0, rotate_hi = 3.0;
    std::vector<double> mean = {0.0, 0.0, 0.0};  // per-channel, subtracted last
    int crop_h = 96, crop_w = 96;

    void validate() const {
        if (scale_lo > scale_hi || scale_lo <= 0)
            throw ConfigError("augment: scale range must satisfy 0 < lo <= hi");
        if (rotate_lo > rotate_hi) throw ConfigError("augment: rotation range inverted");
        if (crop_h < 1 || crop_w < 1) throw ConfigError("augment: crop dims must be >= 1");
        if (mean.size() != 3) throw ConfigError("augment: mean must have 3 channels");
    }
};

struct TrainCfg {
    double base_lr = 0.005;
    double power = 0.9;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int max_iter = 2000;
    int batch = 4;
    uint64_t seed = 0;
    int ignore_index = 255;
    AugmentCfg augment;

    void validate() const {
        if (base_lr <= 0) throw ConfigError("train: base_lr must be > 0");
        if (power <= 0) throw ConfigError("train: power must be > 0");
        if (max_iter < 1) throw ConfigError("train: max_iter must be >= 1");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (momentum < 0 || momentum >= 1) throw ConfigError("train: momentum must be in [0,1)");
        if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
        augment.validate();
    }
};

inline double poly_lr(int iter, const TrainCfg& cfg) {
    cfg.validate();
    if (iter < 0 || iter > cfg.max_iter)
        throw ContractError("poly_lr: iter " + std::to_string(iter) + " outside [0," +
                            std::to_string(cfg.max_iter) + "]");
    return cfg.base_lr *
           std::pow(1.0 - static_cast<double>(iter) / cfg.max_iter, cfg.power);
}

// Momentum buffers keyed by position in the parameter list.
struct SgdState {
    std::vector<std::vector<float>> velocity;
};

// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.
// Decay applies only to refs flagged decay (conv/linear weights).
void sgd_step(std::vector<ParamRef<float>>& params, SgdState& state, double lr, double momentum,
              double weight_decay);

struct ToyShape {
    int cls = 0;
    int kind = 0;  // 0 = disk, 1 = rect
    double cx = 0, cy = 0;
    double a = 0, b = 0;     // disk: radius in a; rect: half extents
    double area = 0;         // analytic pixel area
};

struct ToySample {
    Tensor<float> image;    // [3,H,W] in [0,1] as generated
    Tensor<int32_t> label;  // [H,W], values in [0,K) plus ignore_index after augment
    std::vector<ToyShape> shapes;
};

struct ToyDataCfg {
    int n_samples = 0;
    int num_classes = 4;
    int height = 96, width = 96;
    uint64_t seed = 0;
};

std::vector<ToySample> gen_toy_dataset(const ToyDataCfg& cfg);
ToySample gen_toy_sample(const ToyDataCfg& cfg, int index);

// Per-channel mean of a dataset's images (stored in config for mean subtraction).
std::vector<double> dataset_mean(const std::vector<ToySample>& data);

// Deterministic geometric primitives used by augment(); exposed for direct testing.
ToySample scale_sample(const ToySample& s, double factor);
ToySample hflip_sample(const ToySample& s);
ToySample rotate_sample(const ToySample& s, double degrees, int ignore_index);
ToySample crop_sample(const ToySample& s, int oy, int ox, int h, int w, int ignore_index);

// scale -> optional hflip -> rotate -> random crop -> mean subtraction.
// Draw order from rng: scale factor, flip coin, angle, crop oy, crop ox.
ToySample augment(const ToySample& s, const AugmentCfg& cfg, Rng& rng, int ignore_index = 255);

struct HistoryRow {
    int iter = 0;
    double loss = 0;
    double lr = 0;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    double final_train_miou = 0;  // computed on the raw (unaugmented) training set
};

// max_iter steps of augment -> forward -> cross-entropy -> backward -> sgd with
// poly lr. Aborts with a data error when the loss stops being finite.
TrainResult train_loop(CIFReNet<float>& net, const std::vector<ToySample>& data,
                       const TrainCfg& cfg,
                       const std::function<void(const HistoryRow&)>& on_iter = {});

// MIoU of the net over raw samples (no augmentation beyond mean subtraction).
MiouReport evaluate(CIFReNet<float>& net, const std::vector<ToySample>& data,
                    const std::vector<double>& mean, int ignore_index = 255);

}  // namespace cifre
