#pragma once

#include <filesystem>

#include "aanet/backbone.hpp"

namespace aanet {

inline constexpr const char* kCheckpointVersion = "aanets-checkpoint/1";

struct Checkpoint {
    int phase_index = 0;
    AANet model;
    AggregationWeights alphas;
};

// Stores θ_base, every branch tensor keyed "level<k>/<branch>/layer<q>/...",
// the aggregation weights, the classifier head, the architecture and its tag.
// Values are written as raw doubles, so load(save(x)) == x bit for bit.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace aanet
