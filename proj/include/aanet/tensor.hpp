#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace aanet {

// NCHW shape of a batch of feature maps.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::size_t size() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t per_sample() const {
        return static_cast<std::size_t>(c) * h * w;
    }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

// Dense NCHW batch of feature maps in double precision.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(shape), data_(shape.size(), fill) {}

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& at(int n, int c, int y, int x) {
        return data_[index(n, c, y, x)];
    }
    double at(int n, int c, int y, int x) const {
        return data_[index(n, c, y, x)];
    }

    std::span<double> sample(int n) {
        return std::span<double>(data_).subspan(n * shape_.per_sample(),
                                                shape_.per_sample());
    }
    std::span<const double> sample(int n) const {
        return std::span<const double>(data_).subspan(n * shape_.per_sample(),
                                                      shape_.per_sample());
    }

    bool operator==(const Tensor&) const = default;

private:
    std::size_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
                   shape_.w +
               x;
    }

    Shape shape_;
    std::vector<double> data_;
};

// Square-kernel convolution with "same" zero padding (k / 2).
struct ConvGeometry {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;

    int pad() const { return kernel / 2; }
    int out_extent(int in_extent) const {
        return (in_extent + 2 * pad() - kernel) / stride + 1;
    }
    std::size_t weight_count() const {
        return static_cast<std::size_t>(out_channels) * in_channels * kernel *
               kernel;
    }
    std::size_t filter_size() const {
        return static_cast<std::size_t>(in_channels) * kernel * kernel;
    }
    bool operator==(const ConvGeometry&) const = default;
};

// weight layout: [out][in][ky][kx]; bias: [out].
Tensor conv2d(const Tensor& x, std::span<const double> weight,
              std::span<const double> bias, const ConvGeometry& g);

// Accumulates into dx / dweight / dbias; any of them may be empty to skip.
void conv2d_backward(const Tensor& x, std::span<const double> weight,
                     const ConvGeometry& g, const Tensor& dy, Tensor* dx,
                     std::span<double> dweight, std::span<double> dbias);

Tensor relu(const Tensor& x);
// dy masked by (pre > 0).
Tensor relu_backward(const Tensor& pre, const Tensor& dy);

}  // namespace aanet
