#pragma once

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cifre/ops.hpp"

namespace cifre {

// One analytic-cost row per primitive, in network execution order.
struct CostRow {
    std::string name;
    std::string kind;  // conv | linear | bn | prelu | gap | upsample | softmax | add | mul | shuffle | concat
    long long params = 0;
    long long macs = 0;
    long long rf = 0;  // single-layer field of view; 0 where not applicable
    Shape out;
};

struct CostReport {
    std::vector<CostRow> rows;
    long long cascade_rf = 0;  // pyramid-cascade field of view when the context module is present

    long long total_params() const {
        long long s = 0;
        for (const auto& r : rows) s += r.params;
        return s;
    }
    long long weight_params() const {
        long long s = 0;
        for (const auto& r : rows)
            if (r.kind == "conv" || r.kind == "linear") s += r.params;
        return s;
    }
    long long aux_params() const { return total_params() - weight_params(); }
    long long total_macs() const {
        long long s = 0;
        for (const auto& r : rows) s += r.macs;
        return s;
    }
    long long total_flops() const { return 2 * total_macs(); }

    std::string to_table() const {
        std::ostringstream os;
        os << std::left << std::setw(34) << "name" << std::setw(10) << "kind" << std::setw(20)
           << "out" << std::right << std::setw(10) << "params" << std::setw(16) << "macs"
           << std::setw(6) << "rf" << "\n";
        os << std::string(96, '-') << "\n";
        for (const auto& r : rows) {
            os << std::left << std::setw(34) << r.name << std::setw(10) << r.kind << std::setw(20)
               << shape_str(r.out) << std::right << std::setw(10) << r.params << std::setw(16)
               << r.macs << std::setw(6) << r.rf << "\n";
        }
        os << std::string(96, '-') << "\n";
        os << "conv/linear params: " << weight_params() << "\n";
        os << "norm/act params:    " << aux_params() << "\n";
        os << "total params:       " << total_params() << "\n";
        os << "total macs:         " << total_macs() << "\n";
        os << "total flops (2x):   " << total_flops() << "\n";
        if (cascade_rf > 0) os << "cascade rf:         " << cascade_rf << "\n";
        return os.str();
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "name,params,macs,rf,out_shape\n";
        for (const auto& r : rows) {
            os << r.name << "," << r.params << "," << r.macs << "," << r.rf << ",";
            for (size_t i = 0; i < r.out.size(); ++i) os << (i ? "x" : "") << r.out[i];
            os << "\n";
        }
        return os.str();
    }
};

// Field of view of a single conv: 1 + (k-1)*d.
inline long long rf_single(int kernel, int dilation) {
    if (kernel < 1 || dilation < 1) throw ContractError("rf: kernel and dilation must be >= 1");
    return 1 + static_cast<long long>(kernel - 1) * dilation;
}

struct RfLayer {
    int kernel = 1;
    int dilation = 1;
    int stride = 1;
};

// Chained field of view: r = 1 + sum (k_i - 1) * d_i * jump_i, where jump_i is the
// product of the strides of all earlier layers.
inline long long receptive_field(const std::vector<RfLayer>& layers) {
    if (layers.empty()) throw ContractError("receptive_field: empty layer chain");
    long long r = 1, jump = 1;
    for (const auto& l : layers) {
        if (l.kernel < 1 || l.dilation < 1 || l.stride < 1)
            throw ContractError("receptive_field: kernel, dilation, stride must be >= 1");
        r += static_cast<long long>(l.kernel - 1) * l.dilation * jump;
        jump *= l.stride;
    }
    return r;
}

// Weight-element count; bias included only for bias-carrying convs.
inline long long count_params(const ConvSpec& cs) {
    cs.validate();
    long long p = static_cast<long long>(cs.out_channels) * (cs.in_channels / cs.groups) *
                  cs.kernel * cs.kernel;
    if (cs.has_bias) p += cs.out_channels;
    return p;
}

inline long long count_macs(const ConvSpec& cs, int batch, int in_h, int in_w) {
    cs.validate();
    const int oh = cs.out_dim(in_h), ow = cs.out_dim(in_w);
    if (oh < 1 || ow < 1) throw ShapeError("count_macs: conv output would be empty");
    return static_cast<long long>(batch) * cs.out_channels * (cs.in_channels / cs.groups) *
           cs.kernel * cs.kernel * oh * ow;
}

// Comparison-table helpers for the standard convolution variants.
inline long long regular_conv_params(int in_ch, int out_ch, int kernel) {
    return count_params(ConvSpec{in_ch, out_ch, kernel});
}
inline long long group_conv_params(int in_ch, int out_ch, int kernel, int groups) {
    return count_params(ConvSpec{in_ch, out_ch, kernel, 1, 0, 1, groups});
}
inline long long separable_params(int in_ch, int out_ch, int kernel) {
    return count_params(ConvSpec{in_ch, in_ch, kernel, 1, 0, 1, in_ch}) +
           count_params(ConvSpec{in_ch, out_ch, 1});
}
// Pyramid built from regular convs: plain 1x1 reduction to c*num/den channels, then
// n regular k x k branches at the reduced width.
inline long long pyramid_regular_params(int channels, int kernel, int n_paths, int reduce_num,
                                        int reduce_den) {
    const long long num = static_cast<long long>(channels) * reduce_num;
    if (reduce_num < 1 || reduce_den < 1 || num % reduce_den != 0 || num / reduce_den < 1)
        throw SpecError("pyramid: channels*r must be a positive integer");
    const int cr = static_cast<int>(num / reduce_den);
    return regular_conv_params(channels, cr, 1) +
           static_cast<long long>(n_paths) * regular_conv_params(cr, cr, kernel);
}

// Appends a conv row and advances `io` to the conv's output shape.
inline void describe_conv(const std::string& name, const ConvSpec& cs, Shape& io,
                          CostReport& rep) {
    if (io.size() != 4) throw ShapeError("describe: conv input must be rank 4");
    if (io[1] != cs.in_channels)
        throw ShapeError("describe: " + name + " expects " + std::to_string(cs.in_channels) +
                         " channels, got " + shape_str(io));
    CostRow row;
    row.name = name;
    row.kind = "conv";
    row.params = count_params(cs);
    row.macs = count_macs(cs, io[0], io[2], io[3]);
    row.rf = rf_single(cs.kernel, cs.dilation);
    io = {io[0], cs.out_channels, cs.out_dim(io[2]), cs.out_dim(io[3])};
    row.out = io;
    rep.rows.push_back(std::move(row));
}

// Appends a shape-preserving row costed at macs_per_el per output element.
inline void describe_eltwise(const std::string& name, const std::string& kind, long long params,
                             long long macs_per_el, const Shape& shape, CostReport& rep) {
    CostRow row;
    row.name = name;
    row.kind = kind;
    row.params = params;
    row.macs = macs_per_el * shape_numel(shape);
    row.out = shape;
    rep.rows.push_back(std::move(row));
}

// Variant for reductions: cost counted over `in`, output recorded as `out`.
inline void describe_eltwise(const std::string& name, const std::string& kind, long long params,
                             long long macs_per_el, const Shape& in, CostReport& rep,
                             const Shape& out) {
    CostRow row;
    row.name = name;
    row.kind = kind;
    row.params = params;
    row.macs = macs_per_el * shape_numel(in);
    row.out = out;
    rep.rows.push_back(std::move(row));
}

}  // namespace cifre
