#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cifre/net.hpp"
#include "cifre/train.hpp"

namespace cifre {

// One named tensor in a CIFT container. dtype: 0 = float32, 1 = uint8, 2 = int32.
struct TensorRecord {
    std::string name;
    uint8_t dtype = 0;
    std::vector<uint32_t> dims;
    std::vector<uint8_t> bytes;

    long long numel() const {
        long long n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
};

TensorRecord record_f32(const std::string& name, const Shape& dims, const float* data);
TensorRecord record_i32(const std::string& name, const Shape& dims, const int32_t* data);
TensorRecord record_u8(const std::string& name, const std::vector<uint8_t>& data);

std::vector<float> record_as_f32(const TensorRecord& r);
std::vector<int32_t> record_as_i32(const TensorRecord& r);
std::string record_as_text(const TensorRecord& r);

// Layout: "CIFT", version u32, record count u32; per record: name length u32 +
// name bytes, dtype u8, rank u8, dims u32 each, row-major little-endian payload.
void save_container(const std::string& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> load_container(const std::string& path);

// write temp + rename, so readers never observe a partial file
void atomic_write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

// PPM (P6) <-> [3,H,W] float in [0,1]; PGM (P5) <-> [H,W] int in [0,255].
Tensor<float> read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor<float>& image);
Tensor<int32_t> read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Tensor<int32_t>& labels);

// Plain-text `key = value` lines with # comments; unknown keys fail fast.
struct RunCfg {
    NetworkCfg net;
    TrainCfg train;
    bool auto_mean = true;  // mean = auto: compute from the training set
    std::string preset = "default";
};

RunCfg parse_config(const std::string& text);
RunCfg load_config(const std::string& path);
std::map<std::string, std::string> config_kv(const RunCfg& cfg);
std::string render_config(const std::map<std::string, std::string>& kv);

// Checkpoint = parameter + running-stat records plus a __config__ text record.
void save_checkpoint(const std::string& path, CIFReNet<float>& net, const RunCfg& cfg);

struct Checkpoint {
    RunCfg cfg;
    std::vector<TensorRecord> tensors;
};

Checkpoint read_checkpoint(const std::string& path);
CIFReNet<float> restore_network(const Checkpoint& ckpt);

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& history);
void write_metrics_json(const std::string& path, const MiouReport& rep, long long params,
                        long long macs);

}  // namespace cifre
