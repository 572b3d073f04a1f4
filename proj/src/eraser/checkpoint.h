#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "eraser/denoiser.h"
#include "eraser/schedule.h"
#include "eraser/tensor.h"

namespace eraser {

// On-disk blob format shared by checkpoints and inversion bundles: one line of
// compact JSON  {"version","kind",...,"tensors":[{"name","shape","offset"}]},
// a single '\n', then the little-endian f32 payloads. Offsets are bytes from
// the start of the payload, in header order.
struct NamedTensor {
    std::string name;
    Tensor t;
};

void write_blob(const std::string & path, const std::string & kind, nlohmann::json meta,
                const std::vector<NamedTensor> & tensors);

struct Blob {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;
};

Blob read_blob(const std::string & path, const std::string & expect_kind);

struct Checkpoint {
    DenoiserWeights weights;
    NoiseSchedule sched;
    int image_size = 16;
};

void save_checkpoint(const std::string & path, const DenoiserWeights & w, const NoiseSchedule & sched,
                     int image_size);

// Validates kind, schedule params, shape-for-shape tensor match, parameter
// count and finiteness.
Checkpoint load_checkpoint(const std::string & path);

} // namespace eraser
