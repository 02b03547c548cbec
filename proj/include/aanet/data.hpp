#pragma once

#include <span>
#include <vector>

#include "aanet/tensor.hpp"

namespace aanet {

struct ImageShape {
    int channels = 3;
    int height = 8;
    int width = 8;
    std::size_t size() const { return static_cast<std::size_t>(channels) * height * width; }
    bool operator==(const ImageShape&) const = default;
};

// One labeled image, channel-major, stored in single precision.
struct Sample {
    std::vector<float> pixels;
    int label = 0;
    bool operator==(const Sample&) const = default;
};

// Where a pool entry came from: new-class training data or the exemplar memory.
enum class Origin { NewData, Exemplar };

struct TaggedSample {
    Sample sample;
    Origin origin = Origin::NewData;
};

using Pool = std::vector<TaggedSample>;

struct Batch {
    Tensor images;
    std::vector<int> labels;
    std::vector<Origin> origins;
    int size() const { return static_cast<int>(labels.size()); }
};

Batch make_batch(const Pool& pool, std::span<const std::size_t> indices, const ImageShape& shape);
Batch make_batch(std::span<const Sample> samples, const ImageShape& shape,
                 Origin origin = Origin::NewData);
Tensor to_tensor(std::span<const Sample> samples, const ImageShape& shape);

}  // namespace aanet
