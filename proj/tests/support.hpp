#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "aanet/backbone.hpp"
#include "aanet/data.hpp"
#include "aanet/rng.hpp"

namespace aanet::testing {

inline ArchConfig tiny_arch() {
    ArchConfig a;
    a.in_channels = 2;
    a.image_size = 6;
    a.stem_channels = 3;
    a.kernel = 3;
    a.levels = {{3, 1, 1}, {4, 2, 1}};
    return a;
}

inline Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(s);
    for (double& v : t.values()) v = scale * rng.normal();
    return t;
}

inline std::vector<Sample> random_samples(const ImageShape& shape, int n, int num_classes, Rng& rng) {
    std::vector<Sample> out;
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.label = i % num_classes;
        s.pixels.resize(shape.size());
        for (float& p : s.pixels) p = static_cast<float>(rng.normal());
        out.push_back(std::move(s));
    }
    return out;
}

// Perturbs biases and head so that forward outputs are generic.
inline void jitter(AANet& m, Rng& rng, double scale = 0.1) {
    for (double& b : m.stem.bias) b += scale * rng.normal();
    for (LevelSpec& l : m.levels) {
        for (ConvLayer& c : l.plastic.eta)
            for (double& b : c.bias) b += scale * rng.normal();
        if (l.stable)
            for (auto& phi : l.stable->phi)
                for (double& p : phi) p += scale * rng.normal();
    }
    for (double& w : m.head.weight) w += rng.normal();
}

// Single-branch network with `classes` outputs, frozen base, and a dual
// model derived from it with the given branch kinds.
struct Fixture {
    ArchConfig arch;
    AANet single;
    std::shared_ptr<const BaseBackbone> base;
    AANet dual;
};

inline Fixture make_fixture(std::uint64_t seed, BranchConfig kinds = {}, int classes = 3,
                            ArchConfig arch = tiny_arch()) {
    Rng rng(seed);
    Fixture f;
    f.arch = arch;
    f.single = make_single_branch(arch, rng);
    f.single.head = extend_head(f.single.head, classes);
    jitter(f.single, rng);
    f.base = freeze_as_base(f.single);
    const std::vector<BranchConfig> k(arch.levels.size(), kinds);
    f.dual = make_incremental(f.single, f.base, k);
    return f;
}

// Direct-loop convolution with explicit zero padding, written independently
// of the library kernel.
inline Tensor naive_conv(const Tensor& x, const std::vector<double>& w, const std::vector<double>& b,
                         int out_c, int k, int stride, const std::vector<double>* phi = nullptr) {
    const Shape in = x.shape();
    const int pad = k / 2;
    const int oh = (in.h + 2 * pad - k) / stride + 1;
    const int ow = (in.w + 2 * pad - k) / stride + 1;
    Tensor y(Shape{in.n, out_c, oh, ow});
    for (int n = 0; n < in.n; ++n)
        for (int o = 0; o < out_c; ++o)
            for (int yy = 0; yy < oh; ++yy)
                for (int xx = 0; xx < ow; ++xx) {
                    double acc = 0.0;
                    for (int c = 0; c < in.c; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = yy * stride + ky - pad;
                                const int ix = xx * stride + kx - pad;
                                if (iy < 0 || ix < 0 || iy >= in.h || ix >= in.w) continue;
                                const double wv = w[((o * in.c + c) * k + ky) * k + kx];
                                acc += (phi ? (*phi)[o] : 1.0) * wv * x.at(n, c, iy, ix);
                            }
                    y.at(n, o, yy, xx) = acc + b[o];
                }
    return y;
}

inline Tensor naive_relu(Tensor t) {
    for (double& v : t.values()) v = std::max(v, 0.0);
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b, double wa = 1.0, double wb = 1.0) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = wa * a.values()[i] + wb * b.values()[i];
    return out;
}

// One branch of one level: entry conv, then pre-activation residual blocks.
inline Tensor naive_level(const LevelParams& layers, const std::vector<std::vector<double>>* phi,
                          const Tensor& x) {
    auto conv = [&](std::size_t q, const Tensor& in) {
        const ConvLayer& c = layers[q];
        return naive_conv(in, c.weight, c.bias, c.geometry.out_channels, c.geometry.kernel,
                          c.geometry.stride, phi ? &(*phi)[q] : nullptr);
    };
    Tensor h = conv(0, naive_relu(x));
    for (std::size_t q = 1; q + 1 < layers.size(); q += 2) {
        const Tensor r = conv(q + 1, naive_relu(conv(q, naive_relu(h))));
        h = add(h, r);
    }
    return h;
}

// Reference forward pass returning logits [batch][classes].
inline std::vector<double> naive_forward(const AANet& m, const AggregationWeights& a, const Tensor& x) {
    Tensor h = naive_conv(x, m.stem.weight, m.stem.bias, m.stem.geometry.out_channels,
                          m.stem.geometry.kernel, m.stem.geometry.stride);
    for (std::size_t k = 0; k < m.levels.size(); ++k) {
        const LevelSpec& l = m.levels[k];
        auto eval = [&](const Branch& br) {
            if (br.kind == BranchKind::All) return naive_level(br.eta, nullptr, h);
            const LevelParams& base = m.base->levels[k];
            return naive_level(base, br.kind == BranchKind::Scaling ? &br.phi : nullptr, h);
        };
        if (!l.stable) {
            h = eval(l.plastic);
        } else {
            h = add(eval(*l.stable), eval(l.plastic), a.per_level[k].stable, a.per_level[k].plastic);
        }
    }
    h = naive_relu(h);
    const Shape s = h.shape();
    std::vector<double> logits(static_cast<std::size_t>(s.n) * m.head.num_classes);
    for (int n = 0; n < s.n; ++n) {
        std::vector<double> e(static_cast<std::size_t>(s.c), 0.0);
        for (int c = 0; c < s.c; ++c) {
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) e[c] += h.at(n, c, y, x);
            e[c] /= s.h * s.w;
        }
        for (int j = 0; j < m.head.num_classes; ++j) {
            double z = m.head.bias[j];
            for (int c = 0; c < s.c; ++c) z += m.head.weight[j * s.c + c] * e[c];
            logits[n * m.head.num_classes + j] = z;
        }
    }
    return logits;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace aanet::testing
