#include "cifre/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cifre {

namespace {

constexpr uint32_t kVersion = 1;
constexpr size_t kMaxName = 4096;
constexpr int kMaxRank = 8;

size_t dtype_size(uint8_t dtype) {
    switch (dtype) {
        case 0: return 4;
        case 1: return 1;
        case 2: return 4;
        default: throw FormatError("container: unknown dtype " + std::to_string(dtype));
    }
}

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

struct Cursor {
    const uint8_t* p;
    size_t n;
    size_t off = 0;

    void need(size_t k, const char* what) {
        if (off + k > n)
            throw FormatError("container: truncated while reading " + std::string(what) +
                              " (need " + std::to_string(k) + " bytes at offset " +
                              std::to_string(off) + ", file has " + std::to_string(n) + ")");
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return p[off++];
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = static_cast<uint32_t>(p[off]) | (static_cast<uint32_t>(p[off + 1]) << 8) |
                     (static_cast<uint32_t>(p[off + 2]) << 16) |
                     (static_cast<uint32_t>(p[off + 3]) << 24);
        off += 4;
        return v;
    }
    const uint8_t* raw(size_t k, const char* what) {
        need(k, what);
        const uint8_t* q = p + off;
        off += k;
        return q;
    }
};

}  // namespace

TensorRecord record_f32(const std::string& name, const Shape& dims, const float* data) {
    TensorRecord r;
    r.name = name;
    r.dtype = 0;
    long long n = 1;
    for (int d : dims) {
        r.dims.push_back(static_cast<uint32_t>(d));
        n *= d;
    }
    r.bytes.resize(static_cast<size_t>(n) * 4);
    for (long long i = 0; i < n; ++i) {
        uint32_t bits;
        std::memcpy(&bits, data + i, 4);
        r.bytes[static_cast<size_t>(i) * 4 + 0] = static_cast<uint8_t>(bits & 0xFF);
        r.bytes[static_cast<size_t>(i) * 4 + 1] = static_cast<uint8_t>((bits >> 8) & 0xFF);
        r.bytes[static_cast<size_t>(i) * 4 + 2] = static_cast<uint8_t>((bits >> 16) & 0xFF);
        r.bytes[static_cast<size_t>(i) * 4 + 3] = static_cast<uint8_t>((bits >> 24) & 0xFF);
    }
    return r;
}

TensorRecord record_i32(const std::string& name, const Shape& dims, const int32_t* data) {
    TensorRecord r;
    r.name = name;
    r.dtype = 2;
    long long n = 1;
    for (int d : dims) {
        r.dims.push_back(static_cast<uint32_t>(d));
        n *= d;
    }
    r.bytes.resize(static_cast<size_t>(n) * 4);
    for (long long i = 0; i < n; ++i) {
        const uint32_t bits = static_cast<uint32_t>(data[i]);
        r.bytes[static_cast<size_t>(i) * 4 + 0] = static_cast<uint8_t>(bits & 0xFF);
        r.bytes[static_cast<size_t>(i) * 4 + 1] = static_cast<uint8_t>((bits >> 8) & 0xFF);
        r.bytes[static_cast<size_t>(i) * 4 + 2] = static_cast<uint8_t>((bits >> 16) & 0xFF);
        r.bytes[static_cast<size_t>(i) * 4 + 3] = static_cast<uint8_t>((bits >> 24) & 0xFF);
    }
    return r;
}

TensorRecord record_u8(const std::string& name, const std::vector<uint8_t>& data) {
    TensorRecord r;
    r.name = name;
    r.dtype = 1;
    r.dims.push_back(static_cast<uint32_t>(data.size()));
    r.bytes = data;
    return r;
}

std::vector<float> record_as_f32(const TensorRecord& r) {
    if (r.dtype != 0) throw FormatError("record '" + r.name + "' is not float32");
    std::vector<float> out(static_cast<size_t>(r.numel()));
    for (size_t i = 0; i < out.size(); ++i) {
        uint32_t bits = static_cast<uint32_t>(r.bytes[i * 4]) |
                        (static_cast<uint32_t>(r.bytes[i * 4 + 1]) << 8) |
                        (static_cast<uint32_t>(r.bytes[i * 4 + 2]) << 16) |
                        (static_cast<uint32_t>(r.bytes[i * 4 + 3]) << 24);
        std::memcpy(&out[i], &bits, 4);
    }
    return out;
}

std::vector<int32_t> record_as_i32(const TensorRecord& r) {
    if (r.dtype != 2) throw FormatError("record '" + r.name + "' is not int32");
    std::vector<int32_t> out(static_cast<size_t>(r.numel()));
    for (size_t i = 0; i < out.size(); ++i) {
        const uint32_t bits = static_cast<uint32_t>(r.bytes[i * 4]) |
                              (static_cast<uint32_t>(r.bytes[i * 4 + 1]) << 8) |
                              (static_cast<uint32_t>(r.bytes[i * 4 + 2]) << 16) |
                              (static_cast<uint32_t>(r.bytes[i * 4 + 3]) << 24);
        out[i] = static_cast<int32_t>(bits);
    }
    return out;
}

std::string record_as_text(const TensorRecord& r) {
    if (r.dtype != 1) throw FormatError("record '" + r.name + "' is not uint8");
    return std::string(r.bytes.begin(), r.bytes.end());
}

void save_container(const std::string& path, const std::vector<TensorRecord>& records) {
    for (size_t i = 0; i < records.size(); ++i)
        for (size_t j = i + 1; j < records.size(); ++j)
            if (records[i].name == records[j].name)
                throw ContractError("container: duplicate record name '" + records[i].name + "'");
    std::string out;
    out += "CIFT";
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(records.size()));
    for (const auto& r : records) {
        if (r.name.empty() || r.name.size() > kMaxName)
            throw ContractError("container: record name length out of range");
        if (r.dims.size() > kMaxRank) throw ContractError("container: rank above 8");
        const size_t want = static_cast<size_t>(r.numel()) * dtype_size(r.dtype);
        if (r.bytes.size() != want)
            throw ContractError("container: record '" + r.name + "' payload is " +
                                std::to_string(r.bytes.size()) + " bytes, dims say " +
                                std::to_string(want));
        put_u32(out, static_cast<uint32_t>(r.name.size()));
        out += r.name;
        out.push_back(static_cast<char>(r.dtype));
        out.push_back(static_cast<char>(r.dims.size()));
        for (uint32_t d : r.dims) put_u32(out, d);
        out.append(reinterpret_cast<const char*>(r.bytes.data()), r.bytes.size());
    }
    atomic_write_file(path, out);
}

std::vector<TensorRecord> load_container(const std::string& path) {
    const std::string blob = read_file(path);
    Cursor c{reinterpret_cast<const uint8_t*>(blob.data()), blob.size()};
    const uint8_t* magic = c.raw(4, "magic");
    if (std::memcmp(magic, "CIFT", 4) != 0)
        throw FormatError("container: bad magic at byte 0 in " + path);
    const uint32_t version = c.u32("version");
    if (version != kVersion)
        throw FormatError("container: unsupported version " + std::to_string(version) +
                          " at byte 4");
    const uint32_t count = c.u32("record count");
    std::vector<TensorRecord> records;
    records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        TensorRecord r;
        const uint32_t name_len = c.u32("name length");
        if (name_len == 0 || name_len > kMaxName)
            throw FormatError("container: name length " + std::to_string(name_len) +
                              " out of range at offset " + std::to_string(c.off - 4));
        const uint8_t* name = c.raw(name_len, "name");
        r.name.assign(reinterpret_cast<const char*>(name), name_len);
        const size_t dtype_off = c.off;
        r.dtype = c.u8("dtype");
        if (r.dtype > 2)
            throw FormatError("container: unknown dtype " + std::to_string(r.dtype) +
                              " at offset " + std::to_string(dtype_off));
        const uint8_t rank = c.u8("rank");
        if (rank > kMaxRank)
            throw FormatError("container: rank " + std::to_string(rank) + " above 8 at offset " +
                              std::to_string(c.off - 1));
        long long n = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            const uint32_t dim = c.u32("dim");
            if (dim == 0)
                throw FormatError("container: zero dim at offset " + std::to_string(c.off - 4));
            r.dims.push_back(dim);
            n *= dim;
        }
        const size_t payload = static_cast<size_t>(n) * dtype_size(r.dtype);
        const uint8_t* body = c.raw(payload, "payload");
        r.bytes.assign(body, body + payload);
        for (const auto& prev : records)
            if (prev.name == r.name)
                throw FormatError("container: duplicate record name '" + r.name + "'");
        records.push_back(std::move(r));
    }
    if (c.off != blob.size())
        throw FormatError("container: " + std::to_string(blob.size() - c.off) +
                          " trailing bytes at offset " + std::to_string(c.off));
    return records;
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot open '" + tmp + "' for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw DataError("short write to '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

namespace {

// Reads one whitespace-delimited header token, honoring # comments.
std::string pnm_token(const std::string& blob, size_t& off, const std::string& path) {
    while (off < blob.size()) {
        const char ch = blob[off];
        if (ch == '#') {
            while (off < blob.size() && blob[off] != '\n') ++off;
        } else if (std::isspace(static_cast<unsigned char>(ch))) {
            ++off;
        } else {
            break;
        }
    }
    if (off >= blob.size()) throw FormatError(path + ": truncated header");
    std::string tok;
    while (off < blob.size() && !std::isspace(static_cast<unsigned char>(blob[off])))
        tok.push_back(blob[off++]);
    return tok;
}

struct PnmHeader {
    int w = 0, h = 0;
    size_t payload_off = 0;
};

PnmHeader parse_pnm(const std::string& blob, const std::string& path, const char* want_magic,
                    const char* ascii_magic) {
    size_t off = 0;
    const std::string magic = pnm_token(blob, off, path);
    if (magic == ascii_magic)
        throw FormatError(path + ": ASCII " + ascii_magic + " is unsupported, use binary " +
                          want_magic);
    if (magic != want_magic) throw FormatError(path + ": expected " + want_magic + ", got '" +
                                               magic + "'");
    PnmHeader hd;
    try {
        hd.w = std::stoi(pnm_token(blob, off, path));
        hd.h = std::stoi(pnm_token(blob, off, path));
        const int maxval = std::stoi(pnm_token(blob, off, path));
        if (maxval != 255) throw FormatError(path + ": only maxval 255 is supported");
    } catch (const std::invalid_argument&) {
        throw FormatError(path + ": malformed header number");
    }
    if (hd.w < 1 || hd.h < 1) throw FormatError(path + ": non-positive dimensions");
    if (off >= blob.size()) throw FormatError(path + ": truncated after header");
    ++off;  // single whitespace byte separates header from payload
    hd.payload_off = off;
    return hd;
}

void check_payload(const std::string& blob, const PnmHeader& hd, long long want,
                   const std::string& path) {
    const long long have = static_cast<long long>(blob.size()) -
                           static_cast<long long>(hd.payload_off);
    if (have != want)
        throw FormatError(path + ": payload is " + std::to_string(have) + " bytes, expected " +
                          std::to_string(want));
}

}  // namespace

Tensor<float> read_ppm(const std::string& path) {
    const std::string blob = read_file(path);
    const PnmHeader hd = parse_pnm(blob, path, "P6", "P3");
    check_payload(blob, hd, 3LL * hd.w * hd.h, path);
    Tensor<float> img(Shape{3, hd.h, hd.w});
    const uint8_t* p = reinterpret_cast<const uint8_t*>(blob.data()) + hd.payload_off;
    const long long hw = static_cast<long long>(hd.h) * hd.w;
    for (long long i = 0; i < hw; ++i)
        for (int ch = 0; ch < 3; ++ch)
            img[ch * hw + i] = static_cast<float>(p[i * 3 + ch]) / 255.0f;
    return img;
}

void write_ppm(const std::string& path, const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: image must be [3,H,W]");
    const int H = image.dim(1), W = image.dim(2);
    std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    const long long hw = static_cast<long long>(H) * W;
    for (long long i = 0; i < hw; ++i)
        for (int ch = 0; ch < 3; ++ch) {
            const double v = std::lround(std::clamp(image[ch * hw + i], 0.0f, 1.0f) * 255.0f);
            out.push_back(static_cast<char>(static_cast<uint8_t>(v)));
        }
    atomic_write_file(path, out);
}

Tensor<int32_t> read_pgm(const std::string& path) {
    const std::string blob = read_file(path);
    const PnmHeader hd = parse_pnm(blob, path, "P5", "P2");
    check_payload(blob, hd, static_cast<long long>(hd.w) * hd.h, path);
    Tensor<int32_t> lab(Shape{hd.h, hd.w});
    const uint8_t* p = reinterpret_cast<const uint8_t*>(blob.data()) + hd.payload_off;
    for (long long i = 0; i < lab.numel(); ++i) lab[i] = p[i];
    return lab;
}

void write_pgm(const std::string& path, const Tensor<int32_t>& labels) {
    if (labels.rank() != 2) throw ShapeError("write_pgm: labels must be [H,W]");
    std::string out = "P5\n" + std::to_string(labels.dim(1)) + " " +
                      std::to_string(labels.dim(0)) + "\n255\n";
    for (long long i = 0; i < labels.numel(); ++i) {
        const int32_t v = labels[i];
        if (v < 0 || v > 255)
            throw DataError("write_pgm: value " + std::to_string(v) + " outside [0,255]");
        out.push_back(static_cast<char>(static_cast<uint8_t>(v)));
    }
    atomic_write_file(path, out);
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) throw ConfigError(key + ": empty list element");
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigError(key + ": '" + item + "' is not an integer");
        }
    }
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

std::vector<double> parse_double_list(const std::string& v, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigError(key + ": '" + item + "' is not a number");
        }
    }
    return out;
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        return std::stoi(trim(v));
    } catch (const std::exception&) {
        throw ConfigError(key + ": '" + v + "' is not an integer");
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        return std::stod(trim(v));
    } catch (const std::exception&) {
        throw ConfigError(key + ": '" + v + "' is not a number");
    }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        return std::stoull(trim(v));
    } catch (const std::exception&) {
        throw ConfigError(key + ": '" + v + "' is not an unsigned integer");
    }
}

bool parse_bool(const std::string& v, const std::string& key) {
    const std::string t = trim(v);
    if (t == "true" || t == "1") return true;
    if (t == "false" || t == "0") return false;
    throw ConfigError(key + ": '" + v + "' is not a boolean (use true/false)");
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

void apply_key(RunCfg& cfg, const std::string& key, const std::string& value) {
    NetworkCfg& n = cfg.net;
    TrainCfg& t = cfg.train;
    AugmentCfg& a = t.augment;
    if (key == "preset") {
        // handled in a first pass
    } else if (key == "num_classes") {
        n.num_classes = parse_int(value, key);
    } else if (key == "output_stride") {
        n.output_stride = parse_int(value, key);
    } else if (key == "width_multiplier") {
        n.width_multiplier = parse_double(value, key);
    } else if (key == "max_repeat") {
        n.max_repeat = parse_int(value, key);
    } else if (key == "use_lrm") {
        n.use_lrm = parse_bool(value, key);
    } else if (key == "use_mcim") {
        n.use_mcim = parse_bool(value, key);
    } else if (key == "lrm_tap_low") {
        n.lrm_tap_low = parse_int(value, key);
    } else if (key == "lrm_tap_deep") {
        n.lrm_tap_deep = parse_int(value, key);
    } else if (key == "lrm_reduction") {
        n.lrm_reduction = parse_int(value, key);
    } else if (key == "global_channels") {
        n.global_channels = parse_int(value, key);
    } else if (key == "dsp_paths") {
        n.dsp_paths = parse_int(value, key);
    } else if (key == "dsp_reduce_num") {
        n.dsp_reduce_num = parse_int(value, key);
    } else if (key == "dsp_reduce_den") {
        n.dsp_reduce_den = parse_int(value, key);
    } else if (key == "dsp_groups") {
        n.dsp_groups = parse_int(value, key);
    } else if (key == "dsp_gap") {
        n.dsp_gap = parse_bool(value, key);
    } else if (key == "dsp_kernel") {
        n.dsp_kernel = parse_int(value, key);
    } else if (key == "dil_small") {
        n.dil_small = parse_int_list(value, key);
    } else if (key == "dil_medium") {
        n.dil_medium = parse_int_list(value, key);
    } else if (key == "dil_large") {
        n.dil_large = parse_int_list(value, key);
    } else if (key == "hdrs") {
        n.hdrs = parse_int_list(value, key);
    } else if (key == "stage_channels") {
        n.stage_channels = parse_int_list(value, key);
    } else if (key == "stage_repeats") {
        n.stage_repeats = parse_int_list(value, key);
    } else if (key == "base_lr") {
        t.base_lr = parse_double(value, key);
    } else if (key == "power") {
        t.power = parse_double(value, key);
    } else if (key == "momentum") {
        t.momentum = parse_double(value, key);
    } else if (key == "weight_decay") {
        t.weight_decay = parse_double(value, key);
    } else if (key == "max_iter") {
        t.max_iter = parse_int(value, key);
    } else if (key == "batch") {
        t.batch = parse_int(value, key);
    } else if (key == "seed") {
        t.seed = parse_u64(value, key);
    } else if (key == "ignore_index") {
        t.ignore_index = parse_int(value, key);
    } else if (key == "scale_lo") {
        a.scale_lo = parse_double(value, key);
    } else if (key == "scale_hi") {
        a.scale_hi = parse_double(value, key);
    } else if (key == "hflip") {
        a.hflip = parse_bool(value, key);
    } else if (key == "rotate_lo") {
        a.rotate_lo = parse_double(value, key);
    } else if (key == "rotate_hi") {
        a.rotate_hi = parse_double(value, key);
    } else if (key == "crop_h") {
        a.crop_h = parse_int(value, key);
    } else if (key == "crop_w") {
        a.crop_w = parse_int(value, key);
    } else if (key == "mean") {
        if (trim(value) == "auto") {
            cfg.auto_mean = true;
        } else {
            auto m = parse_double_list(value, key);
            if (m.size() != 3) throw ConfigError("mean: need 3 channels or 'auto'");
            a.mean = m;
            cfg.auto_mean = false;
        }
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

}  // namespace

RunCfg parse_config(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> kvs;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        kvs.emplace_back(key, value);
    }

    RunCfg cfg;
    for (const auto& [key, value] : kvs)
        if (key == "preset") {
            if (value == "mini")
                cfg = RunCfg{mini_cfg(), TrainCfg{}, true, "mini"};
            else if (value == "default")
                cfg = RunCfg{};
            else
                throw ConfigError("preset: '" + value + "' is not default or mini");
        }
    for (const auto& [key, value] : kvs) apply_key(cfg, key, value);
    return cfg;
}

RunCfg load_config(const std::string& path) { return parse_config(read_file(path)); }

std::map<std::string, std::string> config_kv(const RunCfg& cfg) {
    const NetworkCfg& n = cfg.net;
    const TrainCfg& t = cfg.train;
    const AugmentCfg& a = t.augment;
    std::map<std::string, std::string> kv;
    kv["num_classes"] = std::to_string(n.num_classes);
    kv["output_stride"] = std::to_string(n.output_stride);
    kv["width_multiplier"] = fmt_double(n.width_multiplier);
    kv["max_repeat"] = std::to_string(n.max_repeat);
    kv["use_lrm"] = n.use_lrm ? "true" : "false";
    kv["use_mcim"] = n.use_mcim ? "true" : "false";
    kv["lrm_tap_low"] = std::to_string(n.lrm_tap_low);
    kv["lrm_tap_deep"] = std::to_string(n.lrm_tap_deep);
    kv["lrm_reduction"] = std::to_string(n.lrm_reduction);
    kv["global_channels"] = std::to_string(n.global_channels);
    kv["dsp_paths"] = std::to_string(n.dsp_paths);
    kv["dsp_reduce_num"] = std::to_string(n.dsp_reduce_num);
    kv["dsp_reduce_den"] = std::to_string(n.dsp_reduce_den);
    kv["dsp_groups"] = std::to_string(n.dsp_groups);
    kv["dsp_gap"] = n.dsp_gap ? "true" : "false";
    kv["dsp_kernel"] = std::to_string(n.dsp_kernel);
    kv["dil_small"] = join_ints(n.dil_small);
    kv["dil_medium"] = join_ints(n.dil_medium);
    kv["dil_large"] = join_ints(n.dil_large);
    kv["hdrs"] = join_ints(n.hdrs);
    kv["stage_channels"] = join_ints(n.stage_channels);
    kv["stage_repeats"] = join_ints(n.stage_repeats);
    kv["base_lr"] = fmt_double(t.base_lr);
    kv["power"] = fmt_double(t.power);
    kv["momentum"] = fmt_double(t.momentum);
    kv["weight_decay"] = fmt_double(t.weight_decay);
    kv["max_iter"] = std::to_string(t.max_iter);
    kv["batch"] = std::to_string(t.batch);
    kv["seed"] = std::to_string(t.seed);
    kv["ignore_index"] = std::to_string(t.ignore_index);
    kv["scale_lo"] = fmt_double(a.scale_lo);
    kv["scale_hi"] = fmt_double(a.scale_hi);
    kv["hflip"] = a.hflip ? "true" : "false";
    kv["rotate_lo"] = fmt_double(a.rotate_lo);
    kv["rotate_hi"] = fmt_double(a.rotate_hi);
    kv["crop_h"] = std::to_string(a.crop_h);
    kv["crop_w"] = std::to_string(a.crop_w);
    if (cfg.auto_mean)
        kv["mean"] = "auto";
    else
        kv["mean"] = fmt_double(a.mean[0]) + "," + fmt_double(a.mean[1]) + "," +
                     fmt_double(a.mean[2]);
    return kv;
}

std::string render_config(const std::map<std::string, std::string>& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

void save_checkpoint(const std::string& path, CIFReNet<float>& net, const RunCfg& cfg) {
    std::vector<TensorRecord> records;
    std::vector<ParamRef<float>> ps;
    std::vector<StatRef<float>> ss;
    net.collect(ps, ss);
    for (auto& p : ps) records.push_back(record_f32(p.name, p.tensor.shape(), p.tensor.data()));
    for (auto& s : ss)
        records.push_back(record_f32(s.name, Shape{static_cast<int>(s.vec->size())},
                                     s.vec->data()));
    const std::string text = render_config(config_kv(cfg));
    records.push_back(record_u8("__config__", std::vector<uint8_t>(text.begin(), text.end())));
    save_container(path, records);
}

Checkpoint read_checkpoint(const std::string& path) {
    Checkpoint ck;
    ck.tensors = load_container(path);
    bool found = false;
    for (const auto& r : ck.tensors)
        if (r.name == "__config__") {
            ck.cfg = parse_config(record_as_text(r));
            found = true;
        }
    if (!found) throw FormatError(path + ": checkpoint has no __config__ record");
    return ck;
}

CIFReNet<float> restore_network(const Checkpoint& ckpt) {
    CIFReNet<float> net = build_cifrenet<float>(ckpt.cfg.net, 0);
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : ckpt.tensors) by_name[r.name] = &r;
    by_name.erase("__config__");

    std::vector<ParamRef<float>> ps;
    std::vector<StatRef<float>> ss;
    net.collect(ps, ss);
    for (auto& p : ps) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw DataError("checkpoint: missing tensor '" + p.name + "'");
        auto vals = record_as_f32(*it->second);
        if (static_cast<long long>(vals.size()) != p.tensor.numel())
            throw DataError("checkpoint: tensor '" + p.name + "' has " +
                            std::to_string(vals.size()) + " values, network expects " +
                            std::to_string(p.tensor.numel()));
        std::copy(vals.begin(), vals.end(), p.tensor.data());
        by_name.erase(it);
    }
    for (auto& s : ss) {
        auto it = by_name.find(s.name);
        if (it == by_name.end()) throw DataError("checkpoint: missing tensor '" + s.name + "'");
        auto vals = record_as_f32(*it->second);
        if (vals.size() != s.vec->size())
            throw DataError("checkpoint: tensor '" + s.name + "' has wrong size");
        *s.vec = vals;
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw DataError("checkpoint: unexpected tensor '" + by_name.begin()->first + "'");
    return net;
}

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& history) {
    std::string out = "iter,loss,lr\n";
    for (const auto& row : history)
        out += std::to_string(row.iter) + "," + fmt_double(row.loss) + "," + fmt_double(row.lr) +
               "\n";
    atomic_write_file(path, out);
}

void write_metrics_json(const std::string& path, const MiouReport& rep, long long params,
                        long long macs) {
    std::string out = "{\n  \"miou\": " + fmt_double(rep.miou) + ",\n  \"per_class_iou\": [";
    for (size_t i = 0; i < rep.per_class.size(); ++i) {
        out += i ? ", " : "";
        out += std::isnan(rep.per_class[i]) ? "null" : fmt_double(rep.per_class[i]);
    }
    out += "],\n  \"params\": " + std::to_string(params) + ",\n  \"macs\": " +
           std::to_string(macs) + "\n}\n";
    atomic_write_file(path, out);
}

}  // namespace cifre
