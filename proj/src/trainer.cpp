#include "aanet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aanet/errors.hpp"

namespace aanet {

void TrainerConfig::validate() const {
    if (!(gamma1 >= 0.0) || !(gamma2 >= 0.0)) {
        throw ConfigError("trainer: learning rates must be non-negative");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("trainer: momentum must be in [0,1)");
    if (batch_size <= 0) throw ConfigError("trainer: batch_size must be positive");
    if (epochs < 0) throw ConfigError("trainer: epochs must be non-negative");
    int last = -1;
    for (const LrStep& s : lr_schedule) {
        if (s.epoch <= last || s.epoch >= epochs || s.epoch < 0) {
            throw ConfigError("trainer: schedule epochs must be strictly increasing and < epochs");
        }
        if (!(s.divisor > 0.0)) throw ConfigError("trainer: schedule divisors must be positive");
        last = s.epoch;
    }
}

double TrainerConfig::schedule_factor(int epoch) const {
    double f = 1.0;
    for (const LrStep& s : lr_schedule) {
        if (epoch >= s.epoch) f /= s.divisor;
    }
    return f;
}

PhaseState initial_state(const ArchConfig& arch, std::uint64_t seed) {
    PhaseState s;
    s.rng = Rng(seed);
    s.model = make_single_branch(arch, s.rng);
    return s;
}

PhaseState init_phase(const PhaseState& prev, std::shared_ptr<const BaseBackbone> base,
                      std::span<const BranchConfig> level_kinds) {
    if (!base) throw ConfigError("init_phase: base network is required");
    if (level_kinds.size() != prev.model.levels.size()) {
        throw ConfigError("init_phase: " + std::to_string(level_kinds.size()) +
                          " level branch settings for a " +
                          std::to_string(prev.model.levels.size()) + "-level network");
    }
    PhaseState next;
    next.phase_index = prev.phase_index + 1;
    next.rng = prev.rng;
    if (prev.phase_index == 0) {
        next.model = make_incremental(prev.model, base, level_kinds);
        if (next.model.dual()) next.alphas = AggregationWeights::uniform(next.model.levels.size());
        return next;
    }
    for (std::size_t k = 0; k < level_kinds.size(); ++k) {
        const LevelSpec& l = prev.model.levels[k];
        const bool same = l.plastic.kind == level_kinds[k].plastic &&
                          l.stable.has_value() == level_kinds[k].stable.has_value() &&
                          (!l.stable || l.stable->kind == *level_kinds[k].stable);
        if (!same) {
            throw ConfigError("init_phase: branch kinds cannot change after the first "
                              "incremental phase (level " + std::to_string(k + 1) + ")");
        }
    }
    next.model = prev.model;
    next.model.base = std::move(base);
    next.alphas = prev.alphas;
    return next;
}

namespace {

bool same_layout(const AANet& a, const AANet& b) {
    const auto pa = parameters(a);
    const auto pb = parameters(b);
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].values.size() != pb[i].values.size()) return false;
    }
    return true;
}

}  // namespace

double lower_step(PhaseState& state, const Batch& batch, const TrainerConfig& cfg) {
    if (batch.size() == 0) throw StateError("lower_step: empty batch");
    Gradients g;
    const double loss =
        loss_and_gradients(state.model, state.alphas, batch.images, batch.labels, &g);
    if (!state.velocity || !same_layout(*state.velocity, state.model)) {
        state.velocity = zero_gradients(state.model).params;
    }
    const double lr = cfg.gamma1 * cfg.schedule_factor(state.epoch);
    auto params = parameters(state.model);
    auto grads = parameters(std::as_const(g.params));
    auto vel = parameters(*state.velocity);
    const bool stem_fixed = cfg.freeze_stem && state.phase_index > 0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (stem_fixed && params[t].group == ParamGroup::Stem) continue;
        auto p = params[t].values;
        auto d = grads[t].values;
        auto v = vel[t].values;
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = cfg.momentum * v[i] + d[i];
            p[i] -= lr * v[i];
        }
    }
    return loss;
}

double upper_step(PhaseState& state, const Batch& batch, const TrainerConfig& cfg) {
    if (batch.size() == 0) throw StateError("upper_step: empty balanced batch");
    if (!state.model.dual()) throw StateError("upper_step: model has no aggregation weights");
    for (Origin o : batch.origins) {
        if (o != Origin::Exemplar) {
            throw StateError("upper_step: batch contains non-exemplar samples");
        }
    }
    Gradients g;
    const double loss =
        loss_and_gradients(state.model, state.alphas, batch.images, batch.labels, &g);
    const double lr = cfg.gamma2 * cfg.schedule_factor(state.epoch);
    std::vector<AlphaPair> raw = state.alphas.per_level;
    for (std::size_t k = 0; k < raw.size(); ++k) {
        raw[k].stable -= lr * g.alpha[k].stable;
        raw[k].plastic -= lr * g.alpha[k].plastic;
    }
    state.alphas = project_alpha(raw);
    return loss;
}

AggregationWeights project_alpha(std::span<const AlphaPair> raw) {
    AggregationWeights out;
    out.per_level.reserve(raw.size());
    for (const AlphaPair& p : raw) {
        if (!std::isfinite(p.stable) || !std::isfinite(p.plastic)) {
            throw NumericError("project_alpha: non-finite aggregation weight");
        }
        const double a = std::clamp((p.stable - p.plastic + 1.0) / 2.0, 0.0, 1.0);
        out.per_level.push_back(AlphaPair{a, 1.0 - a});
    }
    return out;
}

AlphaTrajectory train_phase(PhaseState& state, const Pool& full_pool, const Pool& balanced_pool,
                            const TrainerConfig& cfg, const ImageShape& shape) {
    cfg.validate();
    if (full_pool.empty()) throw StateError("train_phase: full training pool is empty");
    const bool dual = state.model.dual();
    if (dual && balanced_pool.empty()) {
        throw StateError("train_phase: balanced exemplar pool is empty");
    }
    AlphaTrajectory trajectory;
    std::vector<std::size_t> full_idx(full_pool.size());
    std::vector<std::size_t> bal_idx(balanced_pool.size());
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    for (int e = 0; e < cfg.epochs; ++e) {
        state.epoch = e;
        std::iota(full_idx.begin(), full_idx.end(), std::size_t{0});
        state.rng.shuffle(std::span<std::size_t>(full_idx));
        for (std::size_t start = 0; start < full_idx.size(); start += bs) {
            const std::size_t len = std::min(bs, full_idx.size() - start);
            lower_step(state, make_batch(full_pool, std::span(full_idx).subspan(start, len), shape),
                       cfg);
        }
        if (!dual) continue;
        std::iota(bal_idx.begin(), bal_idx.end(), std::size_t{0});
        state.rng.shuffle(std::span<std::size_t>(bal_idx));
        for (std::size_t start = 0; start < bal_idx.size(); start += bs) {
            const std::size_t len = std::min(bs, bal_idx.size() - start);
            upper_step(state, make_batch(balanced_pool, std::span(bal_idx).subspan(start, len), shape),
                       cfg);
        }
        for (std::size_t k = 0; k < state.alphas.per_level.size(); ++k) {
            const AlphaPair& a = state.alphas.per_level[k];
            trajectory.push_back(AlphaRecord{state.phase_index, e, static_cast<int>(k) + 1,
                                             a.stable, a.plastic});
        }
    }
    return trajectory;
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const Objective& f, std::span<const double> x, double eps) {
    if (!(eps > 1e-8 && eps < 1e-2)) throw ArgumentError("grad_check: eps must be in (1e-8, 1e-2)");
    const Evaluation base = f(x, true);
    if (base.gradient.size() != x.size()) {
        throw DimensionError("grad_check: gradient size does not match the point");
    }
    GradCheckResult result;
    std::vector<double> probe(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + eps;
        const Evaluation up = f(probe, false);
        probe[i] = x[i] - eps;
        const Evaluation down = f(probe, false);
        probe[i] = x[i];
        if (up.piece != base.piece || down.piece != base.piece) {
            ++result.skipped;
            continue;
        }
        const double numeric = (up.value - down.value) / (2.0 * eps);
        const double analytic = base.gradient[i];
        if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
            throw NumericError("grad_check: non-finite derivative at coordinate " +
                               std::to_string(i));
        }
        const double denom = std::max({std::abs(numeric), std::abs(analytic), kGradCheckFloor});
        result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic - numeric) / denom);
        ++result.checked;
    }
    return result;
}

namespace {

// Flattened accessors for one parameter group of a model + alphas.
struct GroupAccess {
    GradGroup which;

    static ParamGroup param_group(GradGroup g) {
        return g == GradGroup::Phi ? ParamGroup::Phi : ParamGroup::Eta;
    }

    std::vector<double> read(const AANet& m, const AggregationWeights& a) const {
        std::vector<double> out;
        if (which == GradGroup::Alpha) {
            for (const AlphaPair& p : a.per_level) {
                out.push_back(p.stable);
                out.push_back(p.plastic);
            }
            return out;
        }
        for (const auto& v : parameters(m)) {
            if (v.group == param_group(which)) out.insert(out.end(), v.values.begin(), v.values.end());
        }
        return out;
    }

    void write(AANet& m, AggregationWeights& a, std::span<const double> x) const {
        std::size_t pos = 0;
        if (which == GradGroup::Alpha) {
            for (AlphaPair& p : a.per_level) {
                p.stable = x[pos++];
                p.plastic = x[pos++];
            }
            return;
        }
        for (auto& v : parameters(m)) {
            if (v.group != param_group(which)) continue;
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(pos), v.values.size(), v.values.begin());
            pos += v.values.size();
        }
    }

    std::vector<double> read_grad(const Gradients& g) const {
        std::vector<double> out;
        if (which == GradGroup::Alpha) {
            for (const AlphaPair& p : g.alpha) {
                out.push_back(p.stable);
                out.push_back(p.plastic);
            }
            return out;
        }
        for (const auto& v : parameters(g.params)) {
            if (v.group == param_group(which)) out.insert(out.end(), v.values.begin(), v.values.end());
        }
        return out;
    }
};

}  // namespace

GradCheckResult grad_check(const AANet& model, const AggregationWeights& alphas,
                           const Batch& batch, GradGroup which, double eps) {
    const GroupAccess access{which};
    AANet work = model;
    AggregationWeights work_alphas = alphas;
    const std::vector<double> x0 = access.read(model, alphas);
    if (x0.empty()) throw ArgumentError("grad_check: selected parameter group is empty");

    Objective f = [&](std::span<const double> x, bool want_gradient) {
        access.write(work, work_alphas, x);
        Evaluation e;
        LossOptions opts{&e.piece};
        Gradients g;
        e.value = loss_and_gradients(work, work_alphas, batch.images, batch.labels,
                                     want_gradient ? &g : nullptr, opts);
        if (want_gradient) e.gradient = access.read_grad(g);
        return e;
    };
    return grad_check(f, x0, eps);
}

}  // namespace aanet
