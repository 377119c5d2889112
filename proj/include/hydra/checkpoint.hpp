#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hydra/nn.hpp"

namespace hydra {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Directory of named raw little-endian float32 tensors plus a JSON manifest
// carrying names, shapes, dtype, the global step and a config hash. Round
// trips are bit-exact; loads refuse on config-hash or shape mismatches.
//
// Optimizer moments are stored alongside weights as `adam.m/<name>` and
// `adam.v/<name>` entries when present.
void checkpoint_save(const std::string& dir, const ParamRefs<float>& params, int64_t step,
                     uint64_t config_hash, bool with_moments = true);

struct CheckpointInfo {
    int64_t step = 0;
    uint64_t config_hash = 0;
};

// strict: every parameter must be present. Loads moments when found.
CheckpointInfo checkpoint_load(const std::string& dir, const ParamRefs<float>& params,
                               uint64_t expected_config_hash, bool verify_hash = true);

CheckpointInfo checkpoint_peek(const std::string& dir);

// Raw named-tensor dumps (feature banks etc.) use the same layout.
void tensor_dump(const std::string& dir, const std::string& name, const Tensor<float>& t);
Tensor<float> tensor_load(const std::string& dir, const std::string& name);

}  // namespace hydra
