#pragma once

#include <filesystem>
#include <stdexcept>

#include <json.hpp>

#include "sheetcoder/autodiff.hpp"

namespace sheetcoder {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointData {
    nlohmann::json meta;
    ad::ParamStore params;
    bool has_optimizer_state = false;
};

/// Binary layout: magic "SHCKPT01", u32 version, u64 meta length, meta JSON,
/// u64 parameter count, then per parameter: u32 name length, name, u32 rank,
/// u64 dims, f64 values (little-endian). With optimizer state each record is
/// followed by the Adam moments m and v, and the file ends with the step.
void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta, const ad::ParamStore& params,
                      bool include_optimizer_state);

CheckpointData read_checkpoint(const std::filesystem::path& path);

}  // namespace sheetcoder
