// Acceptance gate: one pass/fail line per criterion, nonzero exit on any failure.
// Runs without the finite-value guards so the training criterion sees release speed.
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "cifre/gradcheck.hpp"
#include "cifre/io.hpp"
#include "cifre/train.hpp"

#include "oracles.hpp"

using namespace cifre;
using Clock = std::chrono::steady_clock;

namespace {

double secs(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Gate {
    int failures = 0;

    void report(int num, const char* name, bool pass, const std::string& detail) {
        std::printf("criterion %d (%s): %s%s%s\n", num, name, pass ? "PASS" : "FAIL",
                    detail.empty() ? "" : " -- ", detail.c_str());
        std::fflush(stdout);
        if (!pass) ++failures;
    }
};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

// --- criterion 1: published parameter table, exact integers, < 1 s ---
void c1(Gate& g) {
    const auto t0 = Clock::now();
    DSPSpec dsp;
    dsp.channels = 320;
    dsp.n_paths = 4;
    dsp.reduce_num = 1;
    dsp.reduce_den = 4;
    dsp.groups = 4;
    dsp.with_gap = false;
    dsp.dilations = {1, 2, 3, 5};

    const long long rc = regular_conv_params(320, 320, 3);
    const long long gc = group_conv_params(320, 320, 3, 4);
    const long long dsc = separable_params(320, 320, 3);
    const long long rc_dsp = pyramid_regular_params(320, 3, 4, 1, 4);
    const long long dsp_p = count_params(dsp);
    const double el = secs(t0);

    const bool pass = rc == 921600 && gc == 230400 && dsc == 105280 && rc_dsp == 256000 &&
                      dsp_p == 34880 && el < 1.0;
    g.report(1, "parameter table", pass,
             fmt("RC %lld GC %lld DSC %lld RC-DSP %lld DSP %lld in %.3f s", rc, gc, dsc, rc_dsp,
                 dsp_p, el));
}

// --- criterion 2: rf subcommand prints 83 for the default cascade ---
void c2(Gate& g) {
    const long long lib = receptive_field({{3, 5, 1}, {3, 13, 1}, {3, 23, 1}});

    char exe[4096];
    const ssize_t n = ::readlink("/proc/self/exe", exe, sizeof exe - 1);
    std::string out, cmd;
    if (n > 0) {
        exe[n] = '\0';
        std::string dir(exe);
        dir.resize(dir.find_last_of('/'));
        cmd = dir + "/cifrenet rf";
        if (FILE* p = ::popen(cmd.c_str(), "r")) {
            char buf[64];
            while (std::fgets(buf, sizeof buf, p)) out += buf;
            ::pclose(p);
        }
    }
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();

    const bool pass = lib == 83 && out == "83";
    g.report(2, "receptive field", pass,
             fmt("library %lld, `rf` printed '%s'", lib, out.c_str()));
}

// --- criterion 3: default build within 10% of 1.9e6 params, 25% of 7.3e9 MACs ---
void c3(Gate& g) {
    NetworkCfg cfg;
    const long long params = count_params(cfg);
    const long long macs = count_macs(cfg, 1, 640, 360);
    const double dp = std::abs(params - 1.9e6) / 1.9e6;
    const double dm = std::abs(macs - 7.3e9) / 7.3e9;
    const bool pass = dp <= 0.10 && dm <= 0.25;
    g.report(3, "network scale", pass,
             fmt("params %lld (%.1f%% off 1.9M), macs %lld (%.1f%% off 7.3G, 1 MAC = 1 FLOP)",
                 params, 100 * dp, macs, 100 * dm));
}

// --- criterion 4: gradient suite, 10 seeds, < 5 min ---
void c4(Gate& g) {
    const auto t0 = Clock::now();
    auto results = run_gradcheck_suite(10, 1e-4);
    const double el = secs(t0);
    int failed = 0;
    double worst = 0;
    std::string bad;
    for (const auto& r : results) {
        worst = std::max(worst, r.max_rel);
        if (!r.pass) {
            ++failed;
            bad += " " + r.name;
        }
    }
    const bool pass = results.size() == 28 && failed == 0 && el < 300.0;
    g.report(4, "gradient suite", pass,
             fmt("%zu checks, worst rel %.2e, %.1f s%s%s", results.size(), worst, el,
                 failed ? ", failing:" : "", bad.c_str()));
}

// --- criterion 5: conv matches the naive oracle; shuffle matches the permutation oracle ---
void c5(Gate& g) {
    Rng rng(505);
    double worst = 0;
    const int kGroups[] = {1, 2, 4, 8};
    const int kDils[] = {1, 2, 3, 5, 7, 13, 23};
    for (int gr : kGroups)
        for (int d : kDils) {
            ConvSpec cs{8, 8, 3, 1, d, d, gr, (gr + d) % 2 == 0};
            Tensor<float> x(Shape{2, 8, 16, 16}), w(Shape{8, 8 / gr, 3, 3});
            oracle::fill_uniform(x, rng, -1.0, 1.0);
            oracle::fill_uniform(w, rng, -0.5, 0.5);
            Tensor<float> b(Shape{8});
            oracle::fill_uniform(b, rng, -0.2, 0.2);
            Tensor<float> got = conv2d<float>(nullptr, x, w, cs.has_bias ? &b : nullptr, cs);
            Tensor<float> want = oracle::naive_conv2d(x, w, cs.has_bias ? &b : nullptr, cs);
            for (long long i = 0; i < got.numel(); ++i) {
                const double den = std::max({std::abs(double(want[i])), 1e-3});
                worst = std::max(worst, std::abs(double(got[i]) - want[i]) / den);
            }
        }
    // strided pointwise and strided grouped 3x3, as used by the backbone
    for (const ConvSpec cs : {ConvSpec{8, 4, 1, 2, 0, 1, 4, false},
                              ConvSpec{6, 6, 3, 2, 1, 1, 6, false}}) {
        Tensor<float> x(Shape{2, cs.in_channels, 16, 16});
        Tensor<float> w(Shape{cs.out_channels, cs.in_channels / cs.groups, cs.kernel, cs.kernel});
        oracle::fill_uniform(x, rng, -1.0, 1.0);
        oracle::fill_uniform(w, rng, -0.5, 0.5);
        Tensor<float> got = conv2d<float>(nullptr, x, w, nullptr, cs);
        Tensor<float> want = oracle::naive_conv2d(x, w, nullptr, cs);
        for (long long i = 0; i < got.numel(); ++i) {
            const double den = std::max({std::abs(double(want[i])), 1e-3});
            worst = std::max(worst, std::abs(double(got[i]) - want[i]) / den);
        }
    }

    bool shuffle_ok = true;
    for (int gr : {2, 3, 4}) {
        Tensor<float> x(Shape{2, 12, 5, 3});
        oracle::fill_uniform(x, rng, -1.0, 1.0);
        Tensor<float> y = channel_shuffle<float>(nullptr, x, gr);
        const auto perm = oracle::shuffle_perm(12, gr);
        const long long hw = 15;
        for (int n = 0; n < 2 && shuffle_ok; ++n)
            for (int c = 0; c < 12 && shuffle_ok; ++c)
                for (long long i = 0; i < hw; ++i)
                    if (y[(n * 12 + c) * hw + i] != x[(n * 12 + perm[c]) * hw + i]) {
                        shuffle_ok = false;
                        break;
                    }
    }

    const bool pass = worst < 1e-5 && shuffle_ok;
    g.report(5, "oracle equivalence", pass,
             fmt("conv worst rel %.2e, shuffle %s", worst, shuffle_ok ? "exact" : "MISMATCH"));
}

// --- criterion 6: structural invariants ---
void c6(Gate& g) {
    std::string detail;
    bool pass = true;

    NetworkCfg cfg;
    Rng rng(66);

    DSPBlock<float> dsp;
    dsp.spec = cfg.dsp_spec(cfg.dil_small);
    dsp.init(rng);
    Tensor<float> wrong(Shape{1, 324, 9, 7});
    oracle::fill_uniform(wrong, rng, -1.0, 1.0);
    bool threw = false;
    try {
        dsp.forward(nullptr, wrong);
    } catch (const ContractError&) {
        threw = true;
    }
    if (!threw) {
        pass = false;
        detail += "dsp residual contract missing; ";
    }

    Tensor<float> logits(Shape{2, 160});
    oracle::fill_uniform(logits, rng, -4.0, 4.0);
    Tensor<float> att = softmax_channels<float>(nullptr, logits);
    for (int r = 0; r < 2; ++r) {
        double s = 0;
        for (int c = 0; c < 160; ++c) s += att[r * 160 + c];
        if (std::abs(s - 1.0) > 1e-6) {
            pass = false;
            detail += fmt("softmax row sum %.8f; ", s);
        }
    }

    MCIMModule<float> mcim;
    mcim.spec = cfg.mcim_spec();
    mcim.init(rng);
    Tensor<float> f(Shape{1, 320, 7, 5});
    oracle::fill_uniform(f, rng, -1.0, 1.0);
    const int out_ch = mcim.forward(nullptr, f).dim(1);
    if (out_ch != 400) {
        pass = false;
        detail += fmt("mcim channels %d; ", out_ch);
    }

    CIFReNet<float> net = build_cifrenet<float>(mini_cfg(), 3);
    net.set_train(false);
    Tensor<float> img(Shape{1, 3, 48, 32});
    oracle::fill_uniform(img, rng, -1.0, 1.0);
    Tensor<float> y = net.forward(nullptr, img);
    if (!(y.dim(2) == 48 && y.dim(3) == 32)) {
        pass = false;
        detail += fmt("logits %dx%d for 48x32 input; ", y.dim(2), y.dim(3));
    }

    if (pass) detail = "residual contract, attention sums, 400 channels, logits shape";
    g.report(6, "structural invariants", pass, detail);
}

// --- criterion 7: desk-scale learning on the toy dataset ---
void c7(Gate& g) {
    ToyDataCfg dc;
    dc.num_classes = 4;
    dc.height = 96;
    dc.width = 96;
    dc.seed = 0;
    std::vector<ToySample> train, val;
    for (int i = 0; i < 200; ++i) train.push_back(gen_toy_sample(dc, i));
    for (int i = 200; i < 250; ++i) val.push_back(gen_toy_sample(dc, i));

    TrainCfg tc;  // 2000 iterations, batch 4, poly 0.005, 96x96 crops
    tc.augment.mean = dataset_mean(train);

    std::printf("  [7] training mini (lrm+mcim) ...\n");
    std::fflush(stdout);
    const auto t0 = Clock::now();
    CIFReNet<float> net = build_cifrenet<float>(mini_cfg(), tc.seed);
    TrainResult res = train_loop(net, train, tc);
    const double train_s = secs(t0);
    MiouReport vm = evaluate(net, val, tc.augment.mean, tc.ignore_index);

    std::printf("  [7] val miou %.4f in %.0f s; training ablation ...\n", vm.miou, train_s);
    std::fflush(stdout);
    NetworkCfg abl_cfg = mini_cfg();
    abl_cfg.use_lrm = false;
    abl_cfg.use_mcim = false;
    CIFReNet<float> abl = build_cifrenet<float>(abl_cfg, tc.seed);
    train_loop(abl, train, tc);
    MiouReport am = evaluate(abl, val, tc.augment.mean, tc.ignore_index);

    std::printf("  [7] ablation val miou %.4f; rerun for reproducibility ...\n", am.miou);
    std::fflush(stdout);
    CIFReNet<float> net2 = build_cifrenet<float>(mini_cfg(), tc.seed);
    TrainResult res2 = train_loop(net2, train, tc);
    bool bitwise = res.history.size() == res2.history.size();
    for (size_t i = 0; bitwise && i < res.history.size(); ++i)
        bitwise = res.history[i].iter == res2.history[i].iter &&
                  std::memcmp(&res.history[i].loss, &res2.history[i].loss, 8) == 0 &&
                  std::memcmp(&res.history[i].lr, &res2.history[i].lr, 8) == 0;
    std::vector<ParamRef<float>> pa, pb;
    std::vector<StatRef<float>> sa, sb;
    net.collect(pa, sa);
    net2.collect(pb, sb);
    for (size_t i = 0; bitwise && i < pa.size(); ++i)
        bitwise = std::memcmp(pa[i].tensor.data(), pb[i].tensor.data(),
                              static_cast<size_t>(pa[i].tensor.numel()) * 4) == 0;
    for (size_t i = 0; bitwise && i < sa.size(); ++i) bitwise = *sa[i].vec == *sb[i].vec;

    const bool pass = vm.miou >= 0.85 && vm.miou - am.miou >= 0.03 && train_s < 1800.0 && bitwise;
    g.report(7, "desk-scale learning", pass,
             fmt("val miou %.4f (ablation %.4f, gap %.4f), %.0f s train, rerun %s", vm.miou,
                 am.miou, vm.miou - am.miou, train_s, bitwise ? "bitwise equal" : "DIVERGED"));
}

// --- criterion 8: protocol arithmetic ---
void c8(Gate& g) {
    TrainCfg tc;
    tc.base_lr = 0.005;
    tc.max_iter = 2000;
    const double lr0 = poly_lr(0, tc);
    const double lr_end = poly_lr(2000, tc);
    const double lr_mid = poly_lr(1000, tc);

    ConfusionMatrix cm(2);
    cm.at(0, 0) = 3;
    cm.at(0, 1) = 1;
    cm.at(1, 0) = 1;
    cm.at(1, 1) = 3;
    const double m = miou(cm);

    const bool pass = lr0 == 0.005 && lr_end == 0.0 && std::abs(lr_mid - 0.0026794) < 1e-7 &&
                      m == 0.6;
    g.report(8, "protocol arithmetic", pass,
             fmt("lr {%.6f, %.9f, %.1f}, miou %.17g", lr0, lr_mid, lr_end, m));
}

// --- criterion 9: bitwise I/O round trips and the golden fixture ---
void c9(Gate& g) {
    std::string detail;
    bool pass = true;
    const std::string dir = "/tmp/cifre_acceptance_" + std::to_string(::getpid());
    std::filesystem::create_directories(dir);

    Rng rng(909);
    std::vector<float> w(60);
    for (auto& v : w) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    std::vector<int32_t> li = {-5, 0, 7, 1 << 30};
    std::vector<TensorRecord> recs;
    recs.push_back(record_f32("w", Shape{3, 4, 5}, w.data()));
    recs.push_back(record_i32("l", Shape{4}, li.data()));
    recs.push_back(record_u8("t", {0, 127, 255}));
    save_container(dir + "/rt.cift", recs);
    auto back = load_container(dir + "/rt.cift");
    if (back.size() != 3 || back[0].bytes != recs[0].bytes || back[1].bytes != recs[1].bytes ||
        back[2].bytes != recs[2].bytes) {
        pass = false;
        detail += "container round trip; ";
    }

    Tensor<float> img(Shape{3, 6, 7});
    for (long long i = 0; i < img.numel(); ++i)
        img[i] = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
    write_ppm(dir + "/a.ppm", img);
    Tensor<float> img2 = read_ppm(dir + "/a.ppm");
    for (long long i = 0; i < img.numel(); ++i)
        if (img[i] != img2[i]) {
            pass = false;
            detail += "ppm round trip; ";
            break;
        }

    Tensor<int32_t> lab(Shape{4, 4});
    for (long long i = 0; i < 16; ++i) lab[i] = static_cast<int32_t>(rng.uniform_int(0, 255));
    write_pgm(dir + "/a.pgm", lab);
    Tensor<int32_t> lab2 = read_pgm(dir + "/a.pgm");
    for (long long i = 0; i < 16; ++i)
        if (lab[i] != lab2[i]) {
            pass = false;
            detail += "pgm round trip; ";
            break;
        }

    try {
        auto gold = load_container(std::string(CIFRE_SOURCE_DIR) + "/tests/data/golden.cift");
        const std::vector<float> wf = {0.0f, 1.0f, -1.0f, 0.5f, 3.25f, -2.75f};
        bool ok = gold.size() == 3 && gold[0].name == "weights" &&
                  gold[0].dims == std::vector<uint32_t>{2, 3} &&
                  record_as_f32(gold[0]) == wf && gold[1].name == "labels" &&
                  record_as_i32(gold[1]) == std::vector<int32_t>{0, -1, 255, 2147483647} &&
                  record_as_text(gold[2]) == "hello";
        if (!ok) {
            pass = false;
            detail += "golden fixture values; ";
        }
    } catch (const Error& e) {
        pass = false;
        detail += fmt("golden fixture: %s; ", e.what());
    }

    if (pass) detail = "container, ppm, pgm, golden fixture";
    g.report(9, "bit-exact io", pass, detail);
}

}  // namespace

int main() {
    Gate g;
    c1(g);
    c2(g);
    c3(g);
    c8(g);
    c9(g);
    c5(g);
    c6(g);
    c4(g);
    c7(g);
    std::printf("%s\n", g.failures ? "ACCEPTANCE: FAIL" : "ACCEPTANCE: PASS");
    return g.failures ? 1 : 0;
}
