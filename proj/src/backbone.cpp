#include "aanet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "aanet/errors.hpp"

namespace aanet {

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

void ArchConfig::validate() const {
    if (in_channels <= 0 || image_size <= 0 || stem_channels <= 0) {
        throw ConfigError("arch: channels and image size must be positive");
    }
    if (kernel <= 0 || kernel % 2 == 0) {
        throw ConfigError("arch: kernel must be a positive odd integer");
    }
    if (levels.empty()) throw ConfigError("arch: at least one residual level is required");
    for (const LevelArch& l : levels) {
        if (l.out_channels <= 0 || l.stride <= 0 || l.blocks < 0) {
            throw ConfigError("arch: invalid level definition");
        }
    }
}

std::string ArchConfig::tag() const {
    std::ostringstream os;
    os << "toy-resnet-" << levels.size() << "level";
    return os.str();
}

ConvGeometry ArchConfig::stem_geometry() const {
    return ConvGeometry{in_channels, stem_channels, kernel, 1};
}

std::vector<ConvGeometry> ArchConfig::level_geometries(int level) const {
    const LevelArch& l = levels.at(static_cast<std::size_t>(level));
    const int in = level == 0 ? stem_channels : levels[level - 1].out_channels;
    std::vector<ConvGeometry> out;
    out.push_back(ConvGeometry{in, l.out_channels, kernel, l.stride});
    for (int b = 0; b < l.blocks; ++b) {
        out.push_back(ConvGeometry{l.out_channels, l.out_channels, kernel, 1});
        out.push_back(ConvGeometry{l.out_channels, l.out_channels, kernel, 1});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

ConvLayer ConvLayer::zeros(const ConvGeometry& g) {
    return ConvLayer{g, std::vector<double>(g.weight_count(), 0.0),
                     std::vector<double>(static_cast<std::size_t>(g.out_channels), 0.0)};
}

std::size_t BaseBackbone::level_param_count() const {
    std::size_t n = 0;
    for (const auto& level : levels)
        for (const auto& layer : level) n += layer.param_count();
    return n;
}

std::string_view to_string(BranchKind kind) {
    switch (kind) {
        case BranchKind::All: return "all";
        case BranchKind::Scaling: return "scaling";
        case BranchKind::Frozen: return "frozen";
    }
    return "?";
}

BranchKind parse_branch_kind(std::string_view text) {
    if (text == "all") return BranchKind::All;
    if (text == "scaling") return BranchKind::Scaling;
    if (text == "frozen") return BranchKind::Frozen;
    throw ConfigError("unknown branch kind '" + std::string(text) + "'");
}

Branch Branch::make(BranchKind kind, const LevelParams& base_level) {
    Branch b;
    b.kind = kind;
    if (kind == BranchKind::All) {
        b.eta = base_level;
    } else if (kind == BranchKind::Scaling) {
        for (const ConvLayer& layer : base_level) {
            b.phi.emplace_back(static_cast<std::size_t>(layer.geometry.out_channels), 1.0);
        }
    }
    return b;
}

std::size_t Branch::learnable_count() const {
    std::size_t n = 0;
    for (const auto& layer : eta) n += layer.param_count();
    for (const auto& p : phi) n += p.size();
    return n;
}

AggregationWeights AggregationWeights::uniform(std::size_t levels) {
    return AggregationWeights{std::vector<AlphaPair>(levels, AlphaPair{0.5, 0.5})};
}

void AggregationWeights::validate(double tol) const {
    for (std::size_t k = 0; k < per_level.size(); ++k) {
        const AlphaPair& a = per_level[k];
        const bool ok = std::isfinite(a.stable) && std::isfinite(a.plastic) &&
                        a.stable >= 0.0 && a.stable <= 1.0 && a.plastic >= 0.0 &&
                        a.plastic <= 1.0 && std::abs(a.stable + a.plastic - 1.0) <= tol;
        if (!ok) {
            throw NumericError("aggregation weights at level " + std::to_string(k + 1) +
                               " violate the sum-to-one simplex constraint");
        }
    }
}

ClassifierHead ClassifierHead::empty(int embed_dim) {
    ClassifierHead h;
    h.embed_dim = embed_dim;
    return h;
}

ClassifierHead extend_head(const ClassifierHead& head, int new_classes) {
    if (new_classes <= 0) {
        throw ArgumentError("extend_head: new_classes must be >= 1, got " +
                            std::to_string(new_classes));
    }
    ClassifierHead out = head;
    out.num_classes += new_classes;
    out.weight.resize(static_cast<std::size_t>(out.num_classes) * out.embed_dim, 0.0);
    out.bias.resize(static_cast<std::size_t>(out.num_classes), 0.0);
    return out;
}

bool AANet::dual() const {
    return !levels.empty() && levels.front().stable.has_value();
}

std::size_t AANet::learnable_count() const {
    std::size_t n = stem.param_count() + head.weight.size() + head.bias.size();
    for (const LevelSpec& l : levels) {
        n += l.plastic.learnable_count();
        if (l.stable) n += l.stable->learnable_count();
    }
    return n;
}

std::size_t AANet::stored_count() const {
    std::size_t n = learnable_count();
    if (!base) return n;
    for (std::size_t k = 0; k < levels.size(); ++k) {
        const LevelSpec& l = levels[k];
        const bool uses_base = l.plastic.kind != BranchKind::All ||
                               (l.stable && l.stable->kind != BranchKind::All);
        if (uses_base) {
            for (const ConvLayer& layer : base->levels[k]) n += layer.param_count();
        }
    }
    return n;
}

void AANet::validate() const {
    arch.validate();
    if (levels.size() != arch.levels.size()) {
        throw ConfigError("model has " + std::to_string(levels.size()) +
                          " levels, architecture declares " +
                          std::to_string(arch.levels.size()));
    }
    auto check_branch = [&](const Branch& b, std::size_t k, const char* slot) {
        const auto geoms = arch.level_geometries(static_cast<int>(k));
        const std::string where =
            "level " + std::to_string(k + 1) + " " + slot + " branch";
        if (b.kind != BranchKind::All && !base) {
            throw ConfigError(where + ": " + std::string(to_string(b.kind)) +
                              " branch requires a frozen base network");
        }
        if (b.kind == BranchKind::All) {
            if (b.eta.size() != geoms.size()) {
                throw ConfigError(where + ": missing convolution parameters");
            }
            for (std::size_t q = 0; q < geoms.size(); ++q) {
                if (!(b.eta[q].geometry == geoms[q]) ||
                    b.eta[q].weight.size() != geoms[q].weight_count() ||
                    b.eta[q].bias.size() != static_cast<std::size_t>(geoms[q].out_channels)) {
                    throw DimensionError(where + ": layer " + std::to_string(q) +
                                         " parameter shape mismatch");
                }
            }
        } else if (b.kind == BranchKind::Scaling) {
            if (b.phi.size() != geoms.size()) {
                throw ConfigError(where + ": missing scaling parameters");
            }
            for (std::size_t q = 0; q < geoms.size(); ++q) {
                if (b.phi[q].size() != static_cast<std::size_t>(geoms[q].out_channels)) {
                    throw DimensionError(where + ": layer " + std::to_string(q) +
                                         " needs one scale per output filter");
                }
            }
        }
    };
    for (std::size_t k = 0; k < levels.size(); ++k) {
        check_branch(levels[k].plastic, k, "plastic");
        if (levels[k].stable) check_branch(*levels[k].stable, k, "stable");
        if (levels[k].stable.has_value() != levels.front().stable.has_value()) {
            throw ConfigError("all levels must agree on single- vs dual-branch topology");
        }
    }
    if (head.embed_dim != arch.embed_dim()) {
        throw DimensionError("classifier head width does not match embedding size");
    }
}

namespace {

ConvLayer he_init(const ConvGeometry& g, Rng& rng, double gain) {
    ConvLayer layer = ConvLayer::zeros(g);
    const double sd = gain * std::sqrt(2.0 / static_cast<double>(g.filter_size()));
    for (double& w : layer.weight) w = sd * rng.normal();
    return layer;
}

}  // namespace

AANet make_single_branch(const ArchConfig& arch, Rng& rng) {
    arch.validate();
    AANet model;
    model.arch = arch;
    model.stem = he_init(arch.stem_geometry(), rng, 1.0);
    for (std::size_t k = 0; k < arch.levels.size(); ++k) {
        LevelSpec spec;
        spec.level_index = static_cast<int>(k) + 1;
        spec.plastic.kind = BranchKind::All;
        const auto geoms = arch.level_geometries(static_cast<int>(k));
        for (std::size_t q = 0; q < geoms.size(); ++q) {
            // Second convolution of each residual block starts small so the
            // block is close to identity.
            const double gain = (q > 0 && q % 2 == 0) ? 0.5 : 1.0;
            spec.plastic.eta.push_back(he_init(geoms[q], rng, gain));
        }
        model.levels.push_back(std::move(spec));
    }
    model.head = ClassifierHead::empty(arch.embed_dim());
    return model;
}

std::shared_ptr<const BaseBackbone> freeze_as_base(const AANet& model) {
    if (model.dual()) throw StateError("freeze_as_base: expected a single-branch network");
    auto base = std::make_shared<BaseBackbone>();
    base->arch_tag = model.arch.tag();
    base->stem = model.stem;
    base->embed_dim = model.arch.embed_dim();
    for (const LevelSpec& l : model.levels) {
        if (l.plastic.kind != BranchKind::All) {
            throw StateError("freeze_as_base: base network must own all of its weights");
        }
        base->levels.push_back(l.plastic.eta);
    }
    return base;
}

std::string BranchConfig::name() const {
    if (!stable) return "single-" + std::string(to_string(plastic));
    return std::string(to_string(plastic)) + "+" + std::string(to_string(*stable));
}

AANet make_incremental(const AANet& prev, std::shared_ptr<const BaseBackbone> base,
                       std::span<const BranchConfig> level_kinds) {
    if (!base) throw ConfigError("make_incremental: base network is required");
    if (level_kinds.size() != base->levels.size()) {
        throw ConfigError("expected " + std::to_string(base->levels.size()) +
                          " level branch settings, got " +
                          std::to_string(level_kinds.size()));
    }
    AANet model;
    model.arch = prev.arch;
    model.base = base;
    model.stem = prev.stem;
    model.head = prev.head;
    for (std::size_t k = 0; k < level_kinds.size(); ++k) {
        LevelSpec spec;
        spec.level_index = static_cast<int>(k) + 1;
        spec.plastic = Branch::make(level_kinds[k].plastic, base->levels[k]);
        if (level_kinds[k].stable) {
            spec.stable = Branch::make(*level_kinds[k].stable, base->levels[k]);
        }
        model.levels.push_back(std::move(spec));
    }
    model.validate();
    return model;
}

// ---------------------------------------------------------------------------
// Evaluation internals
// ---------------------------------------------------------------------------

namespace {

void check_phi(const ConvLayer& layer, std::span<const double> phi, LayerRef where) {
    if (phi.size() != static_cast<std::size_t>(layer.geometry.out_channels)) {
        throw DimensionError("scaling weights for level " + std::to_string(where.level) +
                             " layer " + std::to_string(where.layer) + ": expected " +
                             std::to_string(layer.geometry.out_channels) + " scalars, got " +
                             std::to_string(phi.size()));
    }
}

std::vector<double> scale_filters(const ConvLayer& layer, std::span<const double> phi) {
    std::vector<double> w = layer.weight;
    const std::size_t fs = layer.geometry.filter_size();
    for (std::size_t r = 0; r < phi.size(); ++r) {
        for (std::size_t j = 0; j < fs; ++j) w[r * fs + j] *= phi[r];
    }
    return w;
}

// Weights actually used by one layer of one branch.
struct EffectiveLayer {
    ConvGeometry geometry;
    std::vector<double> scaled;  // owns storage for Scaling branches
    std::span<const double> weight;
    std::span<const double> bias;
};

std::vector<EffectiveLayer> resolve(const Branch& b, const LevelParams* base_level,
                                    int level_index) {
    std::vector<EffectiveLayer> out;
    if (b.kind == BranchKind::All) {
        if (b.eta.empty()) {
            throw ConfigError("level " + std::to_string(level_index) +
                              ": all-kind branch has no convolution parameters");
        }
        out.resize(b.eta.size());
        for (std::size_t q = 0; q < b.eta.size(); ++q) {
            out[q].geometry = b.eta[q].geometry;
            out[q].weight = b.eta[q].weight;
            out[q].bias = b.eta[q].bias;
        }
        return out;
    }
    if (base_level == nullptr) {
        throw ConfigError("level " + std::to_string(level_index) + ": " +
                          std::string(to_string(b.kind)) +
                          " branch evaluated without base parameters");
    }
    if (b.kind == BranchKind::Scaling && b.phi.size() != base_level->size()) {
        throw ConfigError("level " + std::to_string(level_index) +
                          ": scaling branch has no scaling parameters for every layer");
    }
    out.resize(base_level->size());
    for (std::size_t q = 0; q < base_level->size(); ++q) {
        const ConvLayer& layer = (*base_level)[q];
        out[q].geometry = layer.geometry;
        out[q].bias = layer.bias;
        if (b.kind == BranchKind::Scaling) {
            check_phi(layer, b.phi[q], LayerRef{level_index, static_cast<int>(q)});
            out[q].scaled = scale_filters(layer, b.phi[q]);
            out[q].weight = out[q].scaled;
        } else {
            out[q].weight = layer.weight;
        }
    }
    return out;
}

void append_pattern(std::vector<std::uint8_t>* pattern, const Tensor& pre) {
    if (pattern == nullptr) return;
    for (double v : pre.values()) pattern->push_back(v > 0.0 ? 1 : 0);
}

struct BranchCache {
    std::vector<EffectiveLayer> layers;
    Tensor input;               // level input (pre-activation)
    Tensor entry_in;            // relu(input)
    std::vector<Tensor> h_in;   // residual stream entering each block
    std::vector<Tensor> a_in;   // relu(h_in)
    std::vector<Tensor> a_pre;  // conv_a output
    std::vector<Tensor> b_in;   // relu(a_pre)
    Tensor output;
};

BranchCache run_branch(const Branch& b, const LevelParams* base_level, const Tensor& x,
                       int level_index, std::vector<std::uint8_t>* pattern) {
    BranchCache c;
    c.layers = resolve(b, base_level, level_index);
    const std::size_t blocks = (c.layers.size() - 1) / 2;
    if (x.shape().c != c.layers[0].geometry.in_channels) {
        throw DimensionError("level " + std::to_string(level_index) + ": input has " +
                             std::to_string(x.shape().c) + " channels, expected " +
                             std::to_string(c.layers[0].geometry.in_channels));
    }
    c.input = x;
    append_pattern(pattern, x);
    c.entry_in = relu(x);
    Tensor h = conv2d(c.entry_in, c.layers[0].weight, c.layers[0].bias, c.layers[0].geometry);
    for (std::size_t j = 0; j < blocks; ++j) {
        const EffectiveLayer& la = c.layers[1 + 2 * j];
        const EffectiveLayer& lb = c.layers[2 + 2 * j];
        append_pattern(pattern, h);
        c.h_in.push_back(h);
        c.a_in.push_back(relu(h));
        c.a_pre.push_back(conv2d(c.a_in.back(), la.weight, la.bias, la.geometry));
        append_pattern(pattern, c.a_pre.back());
        c.b_in.push_back(relu(c.a_pre.back()));
        Tensor r = conv2d(c.b_in.back(), lb.weight, lb.bias, lb.geometry);
        auto hv = h.values();
        auto rv = r.values();
        for (std::size_t i = 0; i < hv.size(); ++i) hv[i] += rv[i];
    }
    c.output = std::move(h);
    return c;
}

// Backpropagates d(output) through one branch. Returns d(input); adds the
// parameter gradients into `grad` (a zero-initialized branch of the same kind).
Tensor backprop_branch(const BranchCache& c, const Branch& b, const LevelParams* base_level,
                       const Tensor& dout, Branch* grad) {
    const std::size_t nlayers = c.layers.size();
    const std::size_t blocks = (nlayers - 1) / 2;
    std::vector<std::vector<double>> dw(nlayers);
    std::vector<std::vector<double>> db(nlayers);
    for (std::size_t q = 0; q < nlayers; ++q) {
        dw[q].assign(c.layers[q].weight.size(), 0.0);
        db[q].assign(c.layers[q].bias.size(), 0.0);
    }

    Tensor dh = dout;
    for (std::size_t jj = blocks; jj-- > 0;) {
        const EffectiveLayer& la = c.layers[1 + 2 * jj];
        const EffectiveLayer& lb = c.layers[2 + 2 * jj];
        Tensor db_in;
        conv2d_backward(c.b_in[jj], lb.weight, lb.geometry, dh, &db_in, dw[2 + 2 * jj],
                        db[2 + 2 * jj]);
        Tensor da = relu_backward(c.a_pre[jj], db_in);
        Tensor da_in;
        conv2d_backward(c.a_in[jj], la.weight, la.geometry, da, &da_in, dw[1 + 2 * jj],
                        db[1 + 2 * jj]);
        Tensor back = relu_backward(c.h_in[jj], da_in);
        auto dv = dh.values();
        auto bv = back.values();
        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += bv[i];
    }
    Tensor dentry;
    conv2d_backward(c.entry_in, c.layers[0].weight, c.layers[0].geometry, dh, &dentry, dw[0],
                    db[0]);
    Tensor dx = relu_backward(c.input, dentry);

    if (grad != nullptr) {
        if (b.kind == BranchKind::All) {
            for (std::size_t q = 0; q < nlayers; ++q) {
                for (std::size_t i = 0; i < dw[q].size(); ++i) grad->eta[q].weight[i] += dw[q][i];
                for (std::size_t i = 0; i < db[q].size(); ++i) grad->eta[q].bias[i] += db[q][i];
            }
        } else if (b.kind == BranchKind::Scaling) {
            for (std::size_t q = 0; q < nlayers; ++q) {
                const ConvLayer& layer = (*base_level)[q];
                const std::size_t fs = layer.geometry.filter_size();
                for (std::size_t r = 0; r < grad->phi[q].size(); ++r) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < fs; ++j) {
                        s += dw[q][r * fs + j] * layer.weight[r * fs + j];
                    }
                    grad->phi[q][r] += s;
                }
            }
        }
    }
    return dx;
}

struct LevelCache {
    std::optional<BranchCache> stable;
    BranchCache plastic;
    Tensor output;
};

struct NetCache {
    Tensor stem_out;
    std::vector<LevelCache> levels;
    Tensor final_pre;
    ForwardOutput out;
};

const LevelParams* base_level_of(const AANet& m, std::size_t k) {
    return m.base ? &m.base->levels[k] : nullptr;
}

void check_alphas(const AANet& model, const AggregationWeights& alphas) {
    if (model.dual() && alphas.per_level.size() != model.levels.size()) {
        throw DimensionError("expected " + std::to_string(model.levels.size()) +
                             " aggregation weight pairs, got " +
                             std::to_string(alphas.per_level.size()));
    }
}

void run_network(const AANet& model, const AggregationWeights& alphas, const Tensor& batch,
                 NetCache& cache, std::vector<std::uint8_t>* pattern) {
    if (batch.shape().n <= 0) throw ArgumentError("network_forward: empty batch");
    if (model.levels.empty()) throw ConfigError("network_forward: model has no levels");
    const Shape& s = batch.shape();
    if (s.c != model.arch.in_channels || s.h != model.arch.image_size ||
        s.w != model.arch.image_size) {
        throw DimensionError("network_forward: batch " + s.str() +
                             " does not match the stem input");
    }
    check_alphas(model, alphas);

    cache.stem_out = conv2d(batch, model.stem.weight, model.stem.bias, model.stem.geometry);
    const Tensor* x = &cache.stem_out;
    cache.levels.resize(model.levels.size());
    for (std::size_t k = 0; k < model.levels.size(); ++k) {
        const LevelSpec& spec = model.levels[k];
        LevelCache& lc = cache.levels[k];
        const LevelParams* base_level = base_level_of(model, k);
        if (spec.stable) {
            lc.stable = run_branch(*spec.stable, base_level, *x, spec.level_index, pattern);
            lc.plastic = run_branch(spec.plastic, base_level, *x, spec.level_index, pattern);
            lc.output = aggregate(lc.stable->output, lc.plastic.output, alphas.per_level[k]);
        } else {
            lc.plastic = run_branch(spec.plastic, base_level, *x, spec.level_index, pattern);
            lc.output = lc.plastic.output;
        }
        x = &lc.output;
    }

    cache.final_pre = *x;
    append_pattern(pattern, cache.final_pre);
    const Shape fs = cache.final_pre.shape();
    const int n = fs.n;
    const int d = fs.c;
    const double inv_area = 1.0 / static_cast<double>(fs.h * fs.w);
    ForwardOutput& out = cache.out;
    out.batch = n;
    out.num_classes = model.head.num_classes;
    out.embeddings.assign(static_cast<std::size_t>(n) * d, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < d; ++ch) {
            double sum = 0.0;
            for (int y = 0; y < fs.h; ++y)
                for (int xx = 0; xx < fs.w; ++xx) sum += std::max(0.0, cache.final_pre.at(i, ch, y, xx));
            out.embeddings[static_cast<std::size_t>(i) * d + ch] = sum * inv_area;
        }
    }
    const int classes = model.head.num_classes;
    out.logits.assign(static_cast<std::size_t>(n) * classes, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < classes; ++c) {
            double z = model.head.bias[c];
            for (int j = 0; j < d; ++j) {
                z += model.head.weight[static_cast<std::size_t>(c) * d + j] *
                     out.embeddings[static_cast<std::size_t>(i) * d + j];
            }
            out.logits[static_cast<std::size_t>(i) * classes + c] = z;
        }
    }
}

}  // namespace

Tensor scaled_forward(const ConvLayer& layer, std::span<const double> phi, const Tensor& x,
                      LayerRef where) {
    check_phi(layer, phi, where);
    if (x.shape().c != layer.geometry.in_channels) {
        throw DimensionError("scaled_forward at level " + std::to_string(where.level) +
                             " layer " + std::to_string(where.layer) + ": input has " +
                             std::to_string(x.shape().c) + " channels, expected " +
                             std::to_string(layer.geometry.in_channels));
    }
    const std::vector<double> w = scale_filters(layer, phi);
    return conv2d(x, w, layer.bias, layer.geometry);
}

Tensor branch_forward(const Branch& branch, const LevelParams* base_level, const Tensor& x,
                      int level_index) {
    return run_branch(branch, base_level, x, level_index, nullptr).output;
}

LevelOutputs level_forward(const LevelSpec& spec, const LevelParams* base_level,
                           const Tensor& x) {
    if (!spec.stable) {
        throw ConfigError("level " + std::to_string(spec.level_index) +
                          ": level_forward requires a stable branch");
    }
    LevelOutputs out;
    out.stable = branch_forward(*spec.stable, base_level, x, spec.level_index);
    out.plastic = branch_forward(spec.plastic, base_level, x, spec.level_index);
    return out;
}

Tensor aggregate(const Tensor& stable, const Tensor& plastic, AlphaPair alphas) {
    if (stable.shape() != plastic.shape()) {
        throw DimensionError("aggregate: branch outputs " + stable.shape().str() + " and " +
                             plastic.shape().str() + " differ in shape");
    }
    Tensor out(stable.shape());
    auto o = out.values();
    auto s = stable.values();
    auto p = plastic.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = alphas.stable * s[i] + alphas.plastic * p[i];
    return out;
}

ForwardOutput network_forward(const AANet& model, const AggregationWeights& alphas,
                              const Tensor& batch) {
    NetCache cache;
    run_network(model, alphas, batch, cache, nullptr);
    return std::move(cache.out);
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

std::string_view to_string(ParamGroup group) {
    switch (group) {
        case ParamGroup::Stem: return "stem";
        case ParamGroup::Eta: return "eta";
        case ParamGroup::Phi: return "phi";
        case ParamGroup::Head: return "head";
    }
    return "?";
}

namespace {

template <typename Model, typename T>
std::vector<BasicParamView<T>> collect(Model& model) {
    std::vector<BasicParamView<T>> out;
    out.push_back({"stem/weight", ParamGroup::Stem, std::span<T>(model.stem.weight)});
    out.push_back({"stem/bias", ParamGroup::Stem, std::span<T>(model.stem.bias)});
    auto add_branch = [&](auto& b, const std::string& prefix) {
        for (std::size_t q = 0; q < b.eta.size(); ++q) {
            const std::string p = prefix + "/layer" + std::to_string(q);
            out.push_back({p + "/weight", ParamGroup::Eta, std::span<T>(b.eta[q].weight)});
            out.push_back({p + "/bias", ParamGroup::Eta, std::span<T>(b.eta[q].bias)});
        }
        for (std::size_t q = 0; q < b.phi.size(); ++q) {
            out.push_back({prefix + "/layer" + std::to_string(q) + "/phi", ParamGroup::Phi,
                           std::span<T>(b.phi[q])});
        }
    };
    for (auto& level : model.levels) {
        const std::string prefix = "level" + std::to_string(level.level_index);
        add_branch(level.plastic, prefix + "/plastic");
        if (level.stable) add_branch(*level.stable, prefix + "/stable");
    }
    out.push_back({"head/weight", ParamGroup::Head, std::span<T>(model.head.weight)});
    out.push_back({"head/bias", ParamGroup::Head, std::span<T>(model.head.bias)});
    return out;
}

void zero_fill(AANet& m) {
    for (ParamView& v : parameters(m)) std::fill(v.values.begin(), v.values.end(), 0.0);
}

}  // namespace

std::vector<ParamView> parameters(AANet& model) { return collect<AANet, double>(model); }

std::vector<ConstParamView> parameters(const AANet& model) {
    return collect<const AANet, const double>(model);
}

Gradients zero_gradients(const AANet& model) {
    Gradients g{model, std::vector<AlphaPair>(model.dual() ? model.levels.size() : 0,
                                              AlphaPair{0.0, 0.0})};
    zero_fill(g.params);
    return g;
}

double loss_and_gradients(const AANet& model, const AggregationWeights& alphas,
                          const Tensor& batch, std::span<const int> labels, Gradients* grads,
                          const LossOptions& opts) {
    if (labels.size() != static_cast<std::size_t>(batch.shape().n)) {
        throw DimensionError("loss: label count does not match batch size");
    }
    const int classes = model.head.num_classes;
    for (int y : labels) {
        if (y < 0 || y >= classes) {
            throw DataError("label " + std::to_string(y) + " is outside the " +
                            std::to_string(classes) + " seen classes");
        }
    }
    NetCache cache;
    run_network(model, alphas, batch, cache, opts.relu_pattern);
    const ForwardOutput& out = cache.out;
    const int n = out.batch;
    const int d = model.head.embed_dim;

    double loss = 0.0;
    std::vector<double> dlogits(out.logits.size(), 0.0);
    for (int i = 0; i < n; ++i) {
        const double* z = &out.logits[static_cast<std::size_t>(i) * classes];
        const double zmax = *std::max_element(z, z + classes);
        double sum = 0.0;
        for (int c = 0; c < classes; ++c) sum += std::exp(z[c] - zmax);
        const double log_sum = std::log(sum) + zmax;
        loss += log_sum - z[labels[i]];
        double* g = &dlogits[static_cast<std::size_t>(i) * classes];
        for (int c = 0; c < classes; ++c) g[c] = std::exp(z[c] - log_sum) / n;
        g[labels[i]] -= 1.0 / n;
    }
    loss /= n;
    if (!std::isfinite(loss)) throw NumericError("loss is not finite");
    if (grads == nullptr) return loss;

    *grads = zero_gradients(model);
    AANet& gm = grads->params;

    std::vector<double> demb(static_cast<std::size_t>(n) * d, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < classes; ++c) {
            const double g = dlogits[static_cast<std::size_t>(i) * classes + c];
            gm.head.bias[c] += g;
            for (int j = 0; j < d; ++j) {
                gm.head.weight[static_cast<std::size_t>(c) * d + j] +=
                    g * out.embeddings[static_cast<std::size_t>(i) * d + j];
                demb[static_cast<std::size_t>(i) * d + j] +=
                    g * model.head.weight[static_cast<std::size_t>(c) * d + j];
            }
        }
    }

    const Shape fs = cache.final_pre.shape();
    const double inv_area = 1.0 / static_cast<double>(fs.h * fs.w);
    Tensor dx(fs);
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < fs.c; ++ch)
            for (int y = 0; y < fs.h; ++y)
                for (int xx = 0; xx < fs.w; ++xx)
                    if (cache.final_pre.at(i, ch, y, xx) > 0.0)
                        dx.at(i, ch, y, xx) = demb[static_cast<std::size_t>(i) * d + ch] * inv_area;

    for (std::size_t k = model.levels.size(); k-- > 0;) {
        const LevelSpec& spec = model.levels[k];
        const LevelCache& lc = cache.levels[k];
        LevelSpec& gspec = gm.levels[k];
        const LevelParams* base_level = base_level_of(model, k);
        if (spec.stable) {
            const AlphaPair a = alphas.per_level[k];
            double ds = 0.0;
            double dp = 0.0;
            auto g = dx.values();
            auto sv = lc.stable->output.values();
            auto pv = lc.plastic.output.values();
            Tensor gs(dx.shape());
            Tensor gp(dx.shape());
            auto gsv = gs.values();
            auto gpv = gp.values();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ds += g[i] * sv[i];
                dp += g[i] * pv[i];
                gsv[i] = a.stable * g[i];
                gpv[i] = a.plastic * g[i];
            }
            grads->alpha[k] = AlphaPair{ds, dp};
            Tensor dxs = backprop_branch(*lc.stable, *spec.stable, base_level, gs, &*gspec.stable);
            Tensor dxp = backprop_branch(lc.plastic, spec.plastic, base_level, gp, &gspec.plastic);
            auto a1 = dxs.values();
            auto a2 = dxp.values();
            for (std::size_t i = 0; i < a1.size(); ++i) a1[i] += a2[i];
            dx = std::move(dxs);
        } else {
            dx = backprop_branch(lc.plastic, spec.plastic, base_level, dx, &gspec.plastic);
        }
    }
    // Stem input is the image batch; its gradient is not needed.
    conv2d_backward(batch, model.stem.weight, model.stem.geometry, dx, nullptr,
                    gm.stem.weight, gm.stem.bias);
    return loss;
}

}  // namespace aanet
