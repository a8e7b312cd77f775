#ifndef XR2VOL_CHECKPOINT_HPP
#define XR2VOL_CHECKPOINT_HPP

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xr2vol/networks.hpp"
#include "xr2vol/nn.hpp"

namespace xr2vol {

// Optimizer and bookkeeping needed to resume a training phase exactly.
struct TrainState {
    AdamW opt;
    std::string rng_state;
    std::int64_t step = 0;
    std::string phase;  // "ae" | "diff"
};

// Container format: 8-byte magic, u32 version, u64 header length, JSON
// header, then the tensors as raw little-endian 32-bit floats in header
// order. Saving a loaded file reproduces it byte for byte.
void write_checkpoint_file(const std::string& path, const nlohmann::json& meta,
                           const std::vector<std::pair<std::string, const Tensor*>>& tensors);

struct RawCheckpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

RawCheckpoint read_checkpoint_file(const std::string& path);

// Whole-model save: configs, flags and EMA metadata in the header; every
// parameter, EMA shadow and (optionally) optimizer moment as a tensor.
void save_checkpoint(const std::string& path, const ModelBundle& bundle,
                     const TrainState* train = nullptr);

ModelBundle load_checkpoint(const std::string& path, TrainState* train = nullptr);

}  // namespace xr2vol

#endif
