#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cifre/gradcheck.hpp"
#include "cifre/io.hpp"
#include "cifre/train.hpp"

namespace fs = std::filesystem;
using namespace cifre;

namespace {

Shape parse_shape(const std::string& text) {
    Shape dims;
    std::string cur;
    for (char ch : text + "x") {
        if (ch == 'x' || ch == 'X') {
            if (cur.empty()) throw ConfigError("shape '" + text + "': empty dimension");
            dims.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    return dims;
}

RunCfg load_run_cfg(const std::string& path) {
    if (path.empty()) return RunCfg{};
    return load_config(path);
}

std::vector<ToySample> load_dataset(const std::string& dir) {
    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("img_", 0) == 0 && name.size() > 8 &&
            name.substr(name.size() - 4) == ".ppm")
            stems.push_back(name.substr(4, name.size() - 8));
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty()) throw DataError("no img_*.ppm files in '" + dir + "'");
    std::vector<ToySample> data;
    data.reserve(stems.size());
    for (const auto& stem : stems) {
        ToySample s;
        s.image = read_ppm(dir + "/img_" + stem + ".ppm");
        const std::string lab = dir + "/lab_" + stem + ".pgm";
        if (!fs::exists(lab)) throw DataError("missing label map '" + lab + "'");
        s.label = read_pgm(lab);
        if (s.label.dim(0) != s.image.dim(1) || s.label.dim(1) != s.image.dim(2))
            throw DataError("image/label size mismatch for index " + stem);
        data.push_back(std::move(s));
    }
    return data;
}

// Fixed display palette for --colorize; class k uses entry k mod 8.
const int kPalette[8][3] = {{0, 0, 0},       {220, 60, 50},  {60, 90, 220},  {240, 200, 60},
                            {150, 60, 180},  {60, 180, 170}, {230, 130, 40}, {130, 200, 80}};

void write_colorized(const std::string& path, const Tensor<int32_t>& mask) {
    const int H = mask.dim(0), W = mask.dim(1);
    Tensor<float> img(Shape{3, H, W});
    const long long hw = static_cast<long long>(H) * W;
    for (long long i = 0; i < hw; ++i) {
        const int* col = kPalette[mask[i] % 8];
        for (int c = 0; c < 3; ++c) img[c * hw + i] = static_cast<float>(col[c]) / 255.0f;
    }
    write_ppm(path, img);
}

int run(int argc, char** argv) {
    CLI::App app{"CIFReNet desk-scale segmentation toolkit"};
    app.require_subcommand(1);

    auto* sum_cmd = app.add_subcommand("summarize", "Cost report for a network config");
    std::string sum_config, sum_shape = "1x3x640x360", sum_csv;
    sum_cmd->add_option("--config", sum_config, "config file");
    sum_cmd->add_option("--input-shape", sum_shape, "NxCxHxW");
    sum_cmd->add_option("--csv", sum_csv, "also write rows as CSV");

    auto* rf_cmd = app.add_subcommand("rf", "Receptive field of the context cascade");
    std::string rf_config, rf_layers;
    rf_cmd->add_option("--config", rf_config, "config file");
    rf_cmd->add_option("--layers", rf_layers,
                       "explicit chain as k,d,s;k,d,s;... (overrides the cascade)");

    auto* gc_cmd = app.add_subcommand("gradcheck", "64-bit finite-difference suite");
    int gc_seeds = 10;
    double gc_tol = 1e-4;
    gc_cmd->add_option("--seeds", gc_seeds, "random seeds per check");
    gc_cmd->add_option("--tol", gc_tol, "max relative error");

    auto* gen_cmd = app.add_subcommand("gen-data", "Write a toy dataset as PPM/PGM pairs");
    std::string gen_out, gen_size = "96x96";
    int gen_count = 200, gen_classes = 4, gen_start = 0;
    uint64_t gen_seed = 0;
    gen_cmd->add_option("--out", gen_out, "output directory")->required();
    gen_cmd->add_option("--seed", gen_seed, "dataset seed");
    gen_cmd->add_option("--count", gen_count, "number of samples");
    gen_cmd->add_option("--classes", gen_classes, "number of classes incl. background");
    gen_cmd->add_option("--size", gen_size, "HxW canvas");
    gen_cmd->add_option("--start", gen_start, "first sample index (val splits use an offset)");

    auto* train_cmd = app.add_subcommand("train", "Train on a PPM/PGM directory");
    std::string tr_config, tr_data, tr_out = "checkpoint.cift", tr_metrics;
    train_cmd->add_option("--config", tr_config, "config file");
    train_cmd->add_option("--data-dir", tr_data, "training data directory")->required();
    train_cmd->add_option("--out", tr_out, "checkpoint path");
    train_cmd->add_option("--metrics", tr_metrics, "history CSV path");

    auto* eval_cmd = app.add_subcommand("eval", "MIoU of a checkpoint on a data directory");
    std::string ev_ckpt, ev_data, ev_json;
    eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--data-dir", ev_data, "evaluation data directory")->required();
    eval_cmd->add_option("--metrics-json", ev_json, "metrics output path");

    auto* inf_cmd = app.add_subcommand("infer", "Segment a PPM image");
    std::string in_ckpt, in_img, in_out = "mask.pgm", in_color;
    inf_cmd->add_option("--ckpt", in_ckpt, "checkpoint path")->required();
    inf_cmd->add_option("--image", in_img, "input PPM")->required();
    inf_cmd->add_option("--out", in_out, "output mask PGM");
    inf_cmd->add_option("--colorize", in_color, "also write a palette PPM");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    if (sum_cmd->parsed()) {
        RunCfg cfg = load_run_cfg(sum_config);
        const Shape in = parse_shape(sum_shape);
        CostReport rep = summarize(cfg.net, in);
        std::cout << rep.to_table();
        std::cout << "count_params(cfg):  " << count_params(cfg.net) << "\n";
        if (!sum_csv.empty()) atomic_write_file(sum_csv, rep.to_csv());
        return 0;
    }
    if (rf_cmd->parsed()) {
        long long rf = 0;
        if (!rf_layers.empty()) {
            std::vector<RfLayer> chain;
            std::stringstream ss(rf_layers);
            std::string part;
            while (std::getline(ss, part, ';')) {
                int k = 1, d = 1, s = 1;
                if (std::sscanf(part.c_str(), "%d,%d,%d", &k, &d, &s) != 3)
                    throw ConfigError("rf: layer '" + part + "' is not k,d,s");
                chain.push_back({k, d, s});
            }
            rf = receptive_field(chain);
        } else {
            RunCfg cfg = load_run_cfg(rf_config);
            const MCIMSpec m = cfg.net.mcim_spec();
            rf = receptive_field({RfLayer{m.dsp_s.kernel, m.dsp_s.dilations.back(), 1},
                                  RfLayer{m.dsp_m.kernel, m.dsp_m.dilations.back(), 1},
                                  RfLayer{m.dsp_l.kernel, m.dsp_l.dilations.back(), 1}});
        }
        std::cout << rf << "\n";
        return 0;
    }
    if (gc_cmd->parsed()) {
        auto results = run_gradcheck_suite(gc_seeds, gc_tol);
        bool all = true;
        for (const auto& r : results) {
            std::printf("%-34s max_rel %.3e  %s\n", r.name.c_str(), r.max_rel,
                        r.pass ? "pass" : "FAIL");
            all = all && r.pass;
        }
        std::printf("%zu checks, %s\n", results.size(), all ? "all passed" : "FAILURES");
        return all ? 0 : 1;
    }
    if (gen_cmd->parsed()) {
        const Shape hw = parse_shape(gen_size);
        if (hw.size() != 2) throw ConfigError("gen-data: --size must be HxW");
        ToyDataCfg cfg;
        cfg.num_classes = gen_classes;
        cfg.height = hw[0];
        cfg.width = hw[1];
        cfg.seed = gen_seed;
        fs::create_directories(gen_out);
        for (int i = 0; i < gen_count; ++i) {
            const int index = gen_start + i;
            ToySample s = gen_toy_sample(cfg, index);
            char stem[16];
            std::snprintf(stem, sizeof stem, "%05d", index);
            write_ppm(gen_out + "/img_" + stem + ".ppm", s.image);
            write_pgm(gen_out + "/lab_" + stem + ".pgm", s.label);
        }
        std::cout << "wrote " << gen_count << " samples to " << gen_out << "\n";
        return 0;
    }
    if (train_cmd->parsed()) {
        RunCfg cfg = load_run_cfg(tr_config);
        auto data = load_dataset(tr_data);
        if (cfg.auto_mean) {
            cfg.train.augment.mean = dataset_mean(data);
            cfg.auto_mean = false;
        }
        auto net = build_cifrenet<float>(cfg.net, cfg.train.seed);
        TrainResult res = train_loop(net, data, cfg.train, [&](const HistoryRow& row) {
            if (row.iter % 100 == 0 || row.iter + 1 == cfg.train.max_iter)
                std::printf("iter %5d  loss %.4f  lr %.6f\n", row.iter, row.loss, row.lr);
        });
        save_checkpoint(tr_out, net, cfg);
        if (!tr_metrics.empty()) write_history_csv(tr_metrics, res.history);
        std::printf("final train miou %.4f\n", res.final_train_miou);
        std::cout << "checkpoint written to " << tr_out << "\n";
        return 0;
    }
    if (eval_cmd->parsed()) {
        Checkpoint ck = read_checkpoint(ev_ckpt);
        auto net = restore_network(ck);
        auto data = load_dataset(ev_data);
        std::vector<double> mean = ck.cfg.auto_mean ? dataset_mean(data)
                                                    : ck.cfg.train.augment.mean;
        MiouReport rep = evaluate(net, data, mean, ck.cfg.train.ignore_index);
        std::printf("miou %.6f\n", rep.miou);
        for (size_t c = 0; c < rep.per_class.size(); ++c) {
            if (std::isnan(rep.per_class[c]))
                std::printf("class %zu  iou n/a (absent)\n", c);
            else
                std::printf("class %zu  iou %.6f\n", c, rep.per_class[c]);
        }
        if (!ev_json.empty()) {
            const int H = data[0].image.dim(1), W = data[0].image.dim(2);
            write_metrics_json(ev_json, rep, count_params(ck.cfg.net),
                               count_macs(ck.cfg.net, 1, H, W));
        }
        return 0;
    }
    if (inf_cmd->parsed()) {
        Checkpoint ck = read_checkpoint(in_ckpt);
        auto net = restore_network(ck);
        if (ck.cfg.auto_mean)
            throw DataError("checkpoint has no stored dataset mean; cannot infer");
        Tensor<float> img = read_ppm(in_img);
        const int H = img.dim(1), W = img.dim(2);
        Tensor<float> batch(Shape{1, 3, H, W});
        const long long hw = static_cast<long long>(H) * W;
        for (int c = 0; c < 3; ++c) {
            const float m = static_cast<float>(ck.cfg.train.augment.mean[static_cast<size_t>(c)]);
            for (long long i = 0; i < hw; ++i) batch[c * hw + i] = img[c * hw + i] - m;
        }
        net.set_train(false);
        Tensor<float> logits = net.forward(nullptr, batch);
        Tensor<int32_t> pred = argmax_classes(logits);
        Tensor<int32_t> mask(Shape{H, W},
                             std::vector<int32_t>(pred.data(), pred.data() + pred.numel()));
        write_pgm(in_out, mask);
        if (!in_color.empty()) write_colorized(in_color, mask);
        std::cout << "mask written to " << in_out << "\n";
        return 0;
    }
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
