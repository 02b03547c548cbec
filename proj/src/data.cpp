#include "aanet/data.hpp"

#include <algorithm>

#include "aanet/errors.hpp"

namespace aanet {

namespace {

void copy_pixels(const Sample& s, const ImageShape& shape, std::span<double> dst) {
    if (s.pixels.size() != shape.size()) {
        throw DimensionError("sample has " + std::to_string(s.pixels.size()) +
                             " pixels, expected " + std::to_string(shape.size()));
    }
    std::copy(s.pixels.begin(), s.pixels.end(), dst.begin());
}

}  // namespace

Batch make_batch(const Pool& pool, std::span<const std::size_t> indices, const ImageShape& shape) {
    Batch b;
    b.images = Tensor(Shape{static_cast<int>(indices.size()), shape.channels, shape.height, shape.width});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const TaggedSample& t = pool.at(indices[i]);
        copy_pixels(t.sample, shape, b.images.sample(static_cast<int>(i)));
        b.labels.push_back(t.sample.label);
        b.origins.push_back(t.origin);
    }
    return b;
}

Batch make_batch(std::span<const Sample> samples, const ImageShape& shape, Origin origin) {
    Batch b;
    b.images = to_tensor(samples, shape);
    for (const Sample& s : samples) {
        b.labels.push_back(s.label);
        b.origins.push_back(origin);
    }
    return b;
}

Tensor to_tensor(std::span<const Sample> samples, const ImageShape& shape) {
    Tensor t(Shape{static_cast<int>(samples.size()), shape.channels, shape.height, shape.width});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        copy_pixels(samples[i], shape, t.sample(static_cast<int>(i)));
    }
    return t;
}

}  // namespace aanet
