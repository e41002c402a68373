#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "cifre/io.hpp"
#include "cifre/net.hpp"

#include "oracles.hpp"

using namespace cifre;

namespace {

std::string tdir() {
    static const std::string d = [] {
        auto p = std::filesystem::temp_directory_path() /
                 ("cifre_io_" + std::to_string(::getpid()));
        std::filesystem::create_directories(p);
        return p.string();
    }();
    return d;
}

std::string at(const std::string& name) { return tdir() + "/" + name; }

void write_raw(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// True when fn throws E and the message mentions needle.
template <class E, class F>
bool throws_with(F&& fn, const std::string& needle) {
    try {
        fn();
    } catch (const E& e) {
        return std::string(e.what()).find(needle) != std::string::npos;
    } catch (...) {
        return false;
    }
    return false;
}

void put_u32(std::string& s, uint32_t v) {
    s.push_back(static_cast<char>(v & 0xFF));
    s.push_back(static_cast<char>((v >> 8) & 0xFF));
    s.push_back(static_cast<char>((v >> 16) & 0xFF));
    s.push_back(static_cast<char>((v >> 24) & 0xFF));
}

std::string header_bytes(uint32_t version, uint32_t count) {
    std::string s = "CIFT";
    put_u32(s, version);
    put_u32(s, count);
    return s;
}

std::string record_section(const std::string& name, uint8_t dtype,
                           const std::vector<uint32_t>& dims, const std::string& payload) {
    std::string s;
    put_u32(s, static_cast<uint32_t>(name.size()));
    s += name;
    s.push_back(static_cast<char>(dtype));
    s.push_back(static_cast<char>(dims.size()));
    for (uint32_t d : dims) put_u32(s, d);
    s += payload;
    return s;
}

}  // namespace

TEST_CASE("container round trip is bitwise for all three dtypes") {
    std::vector<float> w(24);
    Rng rng(11);
    for (auto& v : w) v = static_cast<float>(rng.uniform(-3.0, 3.0));
    std::vector<int32_t> lab = {0, -1, 255, std::numeric_limits<int32_t>::max(),
                                std::numeric_limits<int32_t>::min()};
    std::vector<uint8_t> text = {'h', 'i', 0, 255, 7};

    std::vector<TensorRecord> recs;
    recs.push_back(record_f32("weights", Shape{2, 3, 2, 2}, w.data()));
    recs.push_back(record_i32("labels", Shape{5}, lab.data()));
    recs.push_back(record_u8("note", text));

    const std::string path = at("roundtrip.cift");
    save_container(path, recs);
    auto back = load_container(path);

    REQUIRE(back.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(back[i].name == recs[i].name);
        CHECK(back[i].dtype == recs[i].dtype);
        CHECK(back[i].dims == recs[i].dims);
        CHECK(back[i].bytes == recs[i].bytes);
    }
    auto wf = record_as_f32(back[0]);
    REQUIRE(wf.size() == w.size());
    CHECK(std::memcmp(wf.data(), w.data(), w.size() * 4) == 0);
    CHECK(record_as_i32(back[1]) == lab);
    CHECK(record_as_text(back[2]) == std::string("hi\0\xff\x07", 5));

    CHECK_THROWS_AS(record_as_f32(back[1]), FormatError);
    CHECK_THROWS_AS(record_as_i32(back[2]), FormatError);
    CHECK_THROWS_AS(record_as_text(back[0]), FormatError);
}

TEST_CASE("container preserves non-finite float bit patterns") {
    std::vector<float> v = {0.0f, -0.0f, std::numeric_limits<float>::infinity(),
                            -std::numeric_limits<float>::infinity(),
                            std::numeric_limits<float>::quiet_NaN(),
                            std::numeric_limits<float>::denorm_min()};
    auto rec = record_f32("bits", Shape{6}, v.data());
    const std::string path = at("bits.cift");
    save_container(path, {rec});
    auto back = load_container(path);
    REQUIRE(back.size() == 1);
    CHECK(back[0].bytes == rec.bytes);
}

TEST_CASE("empty container is valid and 12 bytes") {
    const std::string path = at("empty.cift");
    save_container(path, {});
    CHECK(std::filesystem::file_size(path) == 12);
    CHECK(load_container(path).empty());
}

TEST_CASE("container magic and version errors carry byte offsets") {
    const std::string path = at("bad.cift");

    std::string good = header_bytes(1, 0);
    good[0] = 'X';
    write_raw(path, good);
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "bad magic at byte 0"));

    write_raw(path, header_bytes(2, 0));
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "version 2 at byte 4"));
}

TEST_CASE("container truncation reports what was being read") {
    const float one = 1.0f;
    const std::string full =
        header_bytes(1, 1) +
        record_section("a", 0, {1}, std::string(reinterpret_cast<const char*>(&one), 4));
    const std::string path = at("trunc.cift");

    write_raw(path, full.substr(0, 6));  // inside the version field
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "version"));

    write_raw(path, full.substr(0, 14));  // inside the name length field
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "truncated"));

    write_raw(path, full.substr(0, full.size() - 2));  // inside the payload
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "payload"));
}

TEST_CASE("container rejects malformed record headers") {
    const std::string path = at("malformed.cift");
    const std::string payload(4, '\0');

    write_raw(path, header_bytes(1, 1) + record_section("a", 3, {1}, payload));
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "unknown dtype 3"));

    write_raw(path, header_bytes(1, 1) + record_section("a", 0, {0}, payload));
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "zero dim"));

    std::string deep;  // rank 9
    put_u32(deep, 1);
    deep += "a";
    deep.push_back(0);
    deep.push_back(9);
    for (int i = 0; i < 9; ++i) put_u32(deep, 1);
    write_raw(path, header_bytes(1, 1) + deep + payload);
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "rank 9"));

    std::string anon = record_section("", 0, {1}, payload);
    write_raw(path, header_bytes(1, 1) + anon);
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "name length 0"));
}

TEST_CASE("container trailing bytes are rejected") {
    const std::string path = at("trailing.cift");
    write_raw(path, header_bytes(1, 0) + "x");
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "1 trailing bytes at offset 12"));
}

TEST_CASE("container duplicate names fail on save and on load") {
    const float one = 1.0f;
    auto rec = record_f32("twin", Shape{1}, &one);
    CHECK_THROWS_AS(save_container(at("dup.cift"), {rec, rec}), ContractError);

    const std::string section =
        record_section("twin", 0, {1}, std::string(reinterpret_cast<const char*>(&one), 4));
    const std::string path = at("dup2.cift");
    write_raw(path, header_bytes(1, 2) + section + section);
    CHECK(throws_with<FormatError>([&] { load_container(path); }, "duplicate record name 'twin'"));
}

TEST_CASE("save rejects records whose payload disagrees with dims") {
    TensorRecord r;
    r.name = "odd";
    r.dtype = 0;
    r.dims = {2};
    r.bytes.resize(5);
    CHECK(throws_with<ContractError>([&] { save_container(at("odd.cift"), {r}); },
                                     "payload is 5 bytes, dims say 8"));
}

TEST_CASE("golden fixture parses to pinned values") {
    auto recs = load_container(std::string(CIFRE_SOURCE_DIR) + "/tests/data/golden.cift");
    REQUIRE(recs.size() == 3);

    CHECK(recs[0].name == "weights");
    CHECK(recs[0].dims == std::vector<uint32_t>{2, 3});
    auto w = record_as_f32(recs[0]);
    const std::vector<float> want = {0.0f, 1.0f, -1.0f, 0.5f, 3.25f, -2.75f};
    REQUIRE(w.size() == want.size());
    for (size_t i = 0; i < w.size(); ++i) CHECK(w[i] == want[i]);

    CHECK(recs[1].name == "labels");
    CHECK(record_as_i32(recs[1]) == std::vector<int32_t>{0, -1, 255, 2147483647});

    CHECK(recs[2].name == "note");
    CHECK(record_as_text(recs[2]) == "hello");
}

TEST_CASE("ppm reads 1x1 white as exact ones") {
    const std::string path = at("white.ppm");
    write_raw(path, std::string("P6\n1 1\n255\n") + "\xff\xff\xff");
    auto img = read_ppm(path);
    REQUIRE(img.shape() == Shape{3, 1, 1});
    for (long long i = 0; i < 3; ++i) CHECK(img[i] == 1.0f);
}

TEST_CASE("ppm write then read is bitwise for quantized values") {
    Tensor<float> img(Shape{3, 4, 5});
    Rng rng(23);
    for (long long i = 0; i < img.numel(); ++i)
        img[i] = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
    const std::string path = at("rt.ppm");
    write_ppm(path, img);
    auto back = read_ppm(path);
    REQUIRE(back.shape() == img.shape());
    for (long long i = 0; i < img.numel(); ++i) CHECK(back[i] == img[i]);
}

TEST_CASE("ppm write clamps out-of-range values") {
    Tensor<float> img(Shape{3, 1, 1});
    img[0] = -0.5f;
    img[1] = 1.5f;
    img[2] = 0.0f;
    const std::string path = at("clamp.ppm");
    write_ppm(path, img);
    auto back = read_ppm(path);
    CHECK(back[0] == 0.0f);
    CHECK(back[1] == 1.0f);
    CHECK(back[2] == 0.0f);
}

TEST_CASE("pnm header comments and whitespace are tolerated") {
    const std::string path = at("comment.ppm");
    write_raw(path, std::string("P6 # binary rgb\n# full-line comment\n 2 1\n# again\n255\n") +
                        std::string(6, '\x40'));
    auto img = read_ppm(path);
    REQUIRE(img.shape() == Shape{3, 1, 2});
    CHECK(img[0] == 64.0f / 255.0f);
}

TEST_CASE("ascii pnm variants are refused") {
    const std::string p3 = at("ascii.ppm");
    write_raw(p3, "P3\n1 1\n255\n255 255 255\n");
    CHECK(throws_with<FormatError>([&] { read_ppm(p3); }, "ASCII P3 is unsupported"));

    const std::string p2 = at("ascii.pgm");
    write_raw(p2, "P2\n1 1\n255\n7\n");
    CHECK(throws_with<FormatError>([&] { read_pgm(p2); }, "ASCII P2 is unsupported"));
}

TEST_CASE("pnm malformed headers are refused") {
    const std::string path = at("badhdr.ppm");

    write_raw(path, "P7\n1 1\n255\nxyz");
    CHECK(throws_with<FormatError>([&] { read_ppm(path); }, "expected P6"));

    write_raw(path, std::string("P6\n1 1\n127\n") + "\x00\x00\x00");
    CHECK(throws_with<FormatError>([&] { read_ppm(path); }, "maxval 255"));

    write_raw(path, "P6\nw 1\n255\n");
    CHECK(throws_with<FormatError>([&] { read_ppm(path); }, "malformed header"));

    write_raw(path, "P6\n2 1");
    CHECK(throws_with<FormatError>([&] { read_ppm(path); }, "truncated header"));
}

TEST_CASE("pnm payload size errors name expected and actual") {
    const std::string path = at("short.ppm");
    write_raw(path, std::string("P6\n2 2\n255\n") + std::string(11, '\0'));
    CHECK(throws_with<FormatError>([&] { read_ppm(path); },
                                   "payload is 11 bytes, expected 12"));

    const std::string pgm = at("long.pgm");
    write_raw(pgm, std::string("P5\n2 2\n255\n") + std::string(5, '\0'));
    CHECK(throws_with<FormatError>([&] { read_pgm(pgm); }, "payload is 5 bytes, expected 4"));
}

TEST_CASE("pgm write then read is bitwise and range checked") {
    Tensor<int32_t> lab(Shape{2, 3});
    const int32_t vals[] = {0, 255, 7, 128, 1, 254};
    for (long long i = 0; i < 6; ++i) lab[i] = vals[i];
    const std::string path = at("rt.pgm");
    write_pgm(path, lab);
    auto back = read_pgm(path);
    REQUIRE(back.shape() == Shape{2, 3});
    for (long long i = 0; i < 6; ++i) CHECK(back[i] == lab[i]);

    lab[0] = 256;
    CHECK(throws_with<DataError>([&] { write_pgm(at("bad.pgm"), lab); }, "outside [0,255]"));
    lab[0] = -1;
    CHECK_THROWS_AS(write_pgm(at("bad.pgm"), lab), DataError);

    Tensor<int32_t> flat(Shape{6});
    CHECK_THROWS_AS(write_pgm(at("bad.pgm"), flat), ShapeError);
    Tensor<float> gray(Shape{1, 2, 2});
    CHECK_THROWS_AS(write_ppm(at("bad.ppm"), gray), ShapeError);
}

TEST_CASE("atomic write leaves no temp file and round trips binary data") {
    std::string blob = "head";
    blob.push_back('\0');
    blob.push_back('\xff');
    blob += "tail";
    const std::string path = at("blob.bin");
    atomic_write_file(path, blob);
    CHECK(!std::filesystem::exists(path + ".tmp"));
    CHECK(read_file(path) == blob);

    CHECK_THROWS_AS(read_file(at("nope.bin")), DataError);
}

TEST_CASE("config parses keys, comments, and blank lines") {
    RunCfg cfg = parse_config(
        "# a comment\n"
        "num_classes = 7\n"
        "base_lr=0.01\n"
        "\n"
        "hflip = false  # trailing comment\n"
        "hdrs = 2,3,5\n"
        "mean = 0.25,0.5,0.75\n");
    CHECK(cfg.net.num_classes == 7);
    CHECK(cfg.train.base_lr == 0.01);
    CHECK(cfg.train.augment.hflip == false);
    CHECK(cfg.net.hdrs == std::vector<int>{2, 3, 5});
    CHECK(cfg.auto_mean == false);
    CHECK(cfg.train.augment.mean == std::vector<double>{0.25, 0.5, 0.75});
    CHECK(cfg.net.output_stride == 8);  // untouched keys keep defaults
}

TEST_CASE("config rejects unknown keys and bad values") {
    CHECK(throws_with<ConfigError>([] { parse_config("bogus_key = 1\n"); },
                                   "unknown config key 'bogus_key'"));
    CHECK(throws_with<ConfigError>([] { parse_config("num_classes 7\n"); }, "line 1"));
    CHECK(throws_with<ConfigError>([] { parse_config("= 7\n"); }, "empty key"));
    CHECK_THROWS_AS(parse_config("num_classes = abc\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("base_lr = fast\n"), ConfigError);
    CHECK(throws_with<ConfigError>([] { parse_config("hflip = yes\n"); }, "true/false"));
    CHECK_THROWS_AS(parse_config("hdrs = 1,,3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("hdrs = \n"), ConfigError);
    CHECK_THROWS_AS(parse_config("mean = 1,2\n"), ConfigError);
    CHECK(throws_with<ConfigError>([] { parse_config("preset = tiny\n"); },
                                   "not default or mini"));
}

TEST_CASE("preset applies first regardless of line order") {
    RunCfg cfg = parse_config("num_classes = 6\npreset = mini\n");
    CHECK(cfg.preset == "mini");
    CHECK(cfg.net.width_multiplier == 0.25);
    CHECK(cfg.net.output_stride == 4);
    CHECK(cfg.net.num_classes == 6);  // explicit key overrides the preset

    RunCfg plain = parse_config("preset = default\n");
    CHECK(plain.net.num_classes == NetworkCfg{}.num_classes);
}

TEST_CASE("config render then parse is lossless") {
    RunCfg cfg;
    cfg.net.num_classes = 5;
    cfg.net.width_multiplier = 0.75;
    cfg.train.base_lr = 0.0075;
    cfg.train.seed = 123456789012345ULL;
    cfg.train.augment.mean = {0.1, 0.2, 0.3};
    cfg.auto_mean = false;

    const std::string text = render_config(config_kv(cfg));
    RunCfg back = parse_config(text);
    CHECK(config_kv(back) == config_kv(cfg));
    CHECK(back.train.seed == cfg.train.seed);
    CHECK(back.net.width_multiplier == cfg.net.width_multiplier);

    RunCfg mini = RunCfg{mini_cfg(), TrainCfg{}, true, "mini"};
    CHECK(config_kv(parse_config(render_config(config_kv(mini)))) == config_kv(mini));
}

TEST_CASE("checkpoint restore reproduces the forward pass bitwise") {
    RunCfg cfg = RunCfg{mini_cfg(), TrainCfg{}, true, "mini"};
    CIFReNet<float> net = build_cifrenet<float>(cfg.net, 7);

    Tensor<float> x(Shape{1, 3, 16, 16});
    Rng rng(40);
    oracle::fill_uniform(x, rng, -1.0, 1.0);

    net.set_train(true);  // perturb running stats so they must round trip too
    net.forward(nullptr, x);
    net.set_train(false);
    Tensor<float> want = net.forward(nullptr, x);

    const std::string path = at("mini.ckpt");
    save_checkpoint(path, net, cfg);

    Checkpoint ck = read_checkpoint(path);
    CHECK(ck.cfg.net.width_multiplier == 0.25);
    CHECK(ck.cfg.net.output_stride == 4);

    CIFReNet<float> back = restore_network(ck);
    back.set_train(false);
    Tensor<float> got = back.forward(nullptr, x);
    REQUIRE(got.shape() == want.shape());
    for (long long i = 0; i < got.numel(); ++i) CHECK(got[i] == want[i]);
}

TEST_CASE("checkpoint restore rejects missing, extra, and resized tensors") {
    RunCfg cfg = RunCfg{mini_cfg(), TrainCfg{}, true, "mini"};
    CIFReNet<float> net = build_cifrenet<float>(cfg.net, 9);
    const std::string path = at("edit.ckpt");
    save_checkpoint(path, net, cfg);
    Checkpoint ck = read_checkpoint(path);

    Checkpoint missing = ck;
    missing.tensors.erase(std::find_if(missing.tensors.begin(), missing.tensors.end(),
                                       [](const TensorRecord& r) { return r.name == "stem.weight"; }));
    CHECK(throws_with<DataError>([&] { restore_network(missing); },
                                 "missing tensor 'stem.weight'"));

    Checkpoint extra = ck;
    const float one = 1.0f;
    extra.tensors.push_back(record_f32("bogus", Shape{1}, &one));
    CHECK(throws_with<DataError>([&] { restore_network(extra); }, "unexpected tensor 'bogus'"));

    Checkpoint resized = ck;
    for (auto& r : resized.tensors)
        if (r.name == "head.bias") {
            r.dims = {1};
            r.bytes.resize(4);
        }
    CHECK(throws_with<DataError>([&] { restore_network(resized); }, "head.bias"));
}

TEST_CASE("checkpoint without config record is refused") {
    const float one = 1.0f;
    const std::string path = at("noconfig.cift");
    save_container(path, {record_f32("stem.weight", Shape{1}, &one)});
    CHECK(throws_with<FormatError>([&] { read_checkpoint(path); }, "__config__"));
}

TEST_CASE("history csv has the pinned header and one row per entry") {
    std::vector<HistoryRow> hist = {{0, 1.5, 0.5}, {1, 1.25, 0.25}};
    const std::string path = at("history.csv");
    write_history_csv(path, hist);
    const std::string text = read_file(path);
    CHECK(text.rfind("iter,loss,lr\n", 0) == 0);
    CHECK(text.find("0,1.5,0.5\n") != std::string::npos);
    CHECK(text.find("1,1.25,0.25\n") != std::string::npos);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("metrics json renders nan iou as null") {
    MiouReport rep;
    rep.miou = 0.5;
    rep.per_class = {1.0, std::numeric_limits<double>::quiet_NaN(), 0.0};
    const std::string path = at("metrics.json");
    write_metrics_json(path, rep, 1234, 5678);
    const std::string text = read_file(path);
    CHECK(text.find("\"miou\": 0.5") != std::string::npos);
    CHECK(text.find("null") != std::string::npos);
    CHECK(text.find("\"params\": 1234") != std::string::npos);
    CHECK(text.find("\"macs\": 5678") != std::string::npos);
    CHECK(text.find("[1, null, 0]") != std::string::npos);
}
