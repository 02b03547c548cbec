#include "aanet/tensor.hpp"

#include <sstream>

#include "aanet/errors.hpp"

namespace aanet {

std::string Shape::str() const {
    std::ostringstream os;
    os << "[" << n << "x" << c << "x" << h << "x" << w << "]";
    return os.str();
}

Tensor conv2d(const Tensor& x, std::span<const double> weight,
              std::span<const double> bias, const ConvGeometry& g) {
    const Shape& in = x.shape();
    if (in.c != g.in_channels) {
        throw DimensionError("conv2d: input has " + std::to_string(in.c) +
                             " channels, layer expects " +
                             std::to_string(g.in_channels));
    }
    if (weight.size() != g.weight_count() ||
        bias.size() != static_cast<std::size_t>(g.out_channels)) {
        throw DimensionError("conv2d: parameter size does not match geometry");
    }
    const int oh = g.out_extent(in.h);
    const int ow = g.out_extent(in.w);
    const int k = g.kernel;
    const int pad = g.pad();
    Tensor y(Shape{in.n, g.out_channels, oh, ow});
    const std::size_t plane_in = static_cast<std::size_t>(in.h) * in.w;

    for (int n = 0; n < in.n; ++n) {
        for (int oc = 0; oc < g.out_channels; ++oc) {
            double* out = &y.at(n, oc, 0, 0);
            for (int i = 0; i < oh * ow; ++i) out[i] = bias[oc];
            for (int ic = 0; ic < g.in_channels; ++ic) {
                const double* src = x.sample(n).data() + ic * plane_in;
                const double* wk =
                    weight.data() + (static_cast<std::size_t>(oc) * g.in_channels + ic) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const double wv = wk[ky * k + kx];
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * g.stride + ky - pad;
                            if (iy < 0 || iy >= in.h) continue;
                            const double* row = src + iy * in.w;
                            double* orow = out + oy * ow;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * g.stride + kx - pad;
                                if (ix < 0 || ix >= in.w) continue;
                                orow[ox] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

void conv2d_backward(const Tensor& x, std::span<const double> weight,
                     const ConvGeometry& g, const Tensor& dy, Tensor* dx,
                     std::span<double> dweight, std::span<double> dbias) {
    const Shape& in = x.shape();
    const Shape& out = dy.shape();
    const int k = g.kernel;
    const int pad = g.pad();
    if (dx != nullptr && dx->shape() != in) *dx = Tensor(in);
    const std::size_t plane_in = static_cast<std::size_t>(in.h) * in.w;
    const std::size_t plane_out = static_cast<std::size_t>(out.h) * out.w;

    for (int n = 0; n < in.n; ++n) {
        for (int oc = 0; oc < g.out_channels; ++oc) {
            const double* grad = dy.sample(n).data() + oc * plane_out;
            if (!dbias.empty()) {
                double s = 0.0;
                for (int i = 0; i < out.h * out.w; ++i) s += grad[i];
                dbias[oc] += s;
            }
            for (int ic = 0; ic < g.in_channels; ++ic) {
                const std::size_t wbase =
                    (static_cast<std::size_t>(oc) * g.in_channels + ic) * k * k;
                const double* src = x.sample(n).data() + ic * plane_in;
                double* dsrc = dx != nullptr ? &dx->at(n, ic, 0, 0) : nullptr;
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const double wv = weight[wbase + ky * k + kx];
                        double acc = 0.0;
                        for (int oy = 0; oy < out.h; ++oy) {
                            const int iy = oy * g.stride + ky - pad;
                            if (iy < 0 || iy >= in.h) continue;
                            const double* row = src + iy * in.w;
                            const double* grow = grad + oy * out.w;
                            double* drow = dsrc != nullptr ? dsrc + iy * in.w : nullptr;
                            for (int ox = 0; ox < out.w; ++ox) {
                                const int ix = ox * g.stride + kx - pad;
                                if (ix < 0 || ix >= in.w) continue;
                                acc += grow[ox] * row[ix];
                                if (drow != nullptr) drow[ix] += grow[ox] * wv;
                            }
                        }
                        if (!dweight.empty()) dweight[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor relu_backward(const Tensor& pre, const Tensor& dy) {
    Tensor dx = dy;
    auto p = pre.values();
    auto d = dx.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!(p[i] > 0.0)) d[i] = 0.0;
    }
    return dx;
}

}  // namespace aanet
