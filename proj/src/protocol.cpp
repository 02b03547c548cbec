#include "aanet/protocol.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "aanet/errors.hpp"

namespace aanet {

std::string_view to_string(SplitMode m) {
    switch (m) {
        case SplitMode::HalfThenEven: return "half-then-even";
        case SplitMode::SameEveryPhase: return "same-every-phase";
        case SplitMode::SameEveryPhaseTotal: return "same-every-phase-total";
    }
    return "?";
}

SplitMode parse_split_mode(std::string_view text) {
    if (text == "half-then-even") return SplitMode::HalfThenEven;
    if (text == "same-every-phase") return SplitMode::SameEveryPhase;
    if (text == "same-every-phase-total") return SplitMode::SameEveryPhaseTotal;
    throw ConfigError("unknown split mode '" + std::string(text) + "'");
}

void ProtocolConfig::validate() const {
    if (total_classes <= 0) throw ConfigError("protocol: total_classes must be positive");
    if (n_phases < 1) throw ConfigError("protocol: n_phases must be >= 1");
    if (runs < 1) throw ConfigError("protocol: runs must be >= 1");
    if (per_class_quota < 1) throw ConfigError("protocol: per_class_quota must be >= 1");
    if (budget_extra_params < 0) throw ConfigError("protocol: budget_extra_params must be >= 0");
    switch (split_mode) {
        case SplitMode::HalfThenEven:
            if (total_classes % 2 != 0 || (total_classes / 2) % n_phases != 0) {
                throw ConfigError("half-then-even needs total_classes even and total_classes/2 (" +
                                  std::to_string(total_classes / 2) + ") divisible by N (" +
                                  std::to_string(n_phases) + ")");
            }
            break;
        case SplitMode::SameEveryPhase:
            if (total_classes % (n_phases + 1) != 0) {
                throw ConfigError("same-every-phase needs total_classes (" +
                                  std::to_string(total_classes) + ") divisible by N+1 (" +
                                  std::to_string(n_phases + 1) + ")");
            }
            break;
        case SplitMode::SameEveryPhaseTotal:
            if (n_phases < 2 || total_classes % n_phases != 0) {
                throw ConfigError("same-every-phase-total needs N >= 2 and total_classes (" +
                                  std::to_string(total_classes) + ") divisible by N (" +
                                  std::to_string(n_phases) + ")");
            }
            break;
    }
}

int ProtocolConfig::phase_count() const {
    return split_mode == SplitMode::SameEveryPhaseTotal ? n_phases : n_phases + 1;
}

void RunSummary::finalize() {
    if (per_phase.empty()) {
        average_incremental_accuracy = 0.0;
        last_phase_accuracy = 0.0;
        return;
    }
    double sum = 0.0;
    for (const PhaseReport& r : per_phase) sum += r.test_accuracy;
    average_incremental_accuracy = sum / static_cast<double>(per_phase.size());
    last_phase_accuracy = per_phase.back().test_accuracy;
}

std::vector<std::vector<int>> make_splits(const ProtocolConfig& cfg, std::span<const int> class_ids) {
    cfg.validate();
    if (class_ids.size() != static_cast<std::size_t>(cfg.total_classes)) {
        throw ConfigError("make_splits: expected " + std::to_string(cfg.total_classes) +
                          " class ids, got " + std::to_string(class_ids.size()));
    }
    std::vector<int> order(class_ids.begin(), class_ids.end());
    Rng rng(cfg.class_order_seed);
    rng.shuffle(std::span<int>(order));

    std::vector<int> sizes;
    switch (cfg.split_mode) {
        case SplitMode::HalfThenEven:
            sizes.push_back(cfg.total_classes / 2);
            sizes.insert(sizes.end(), static_cast<std::size_t>(cfg.n_phases),
                         cfg.total_classes / 2 / cfg.n_phases);
            break;
        case SplitMode::SameEveryPhase:
            sizes.assign(static_cast<std::size_t>(cfg.n_phases + 1), cfg.total_classes / (cfg.n_phases + 1));
            break;
        case SplitMode::SameEveryPhaseTotal:
            sizes.assign(static_cast<std::size_t>(cfg.n_phases), cfg.total_classes / cfg.n_phases);
            break;
    }
    std::vector<std::vector<int>> splits;
    std::size_t pos = 0;
    for (int s : sizes) {
        splits.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                            order.begin() + static_cast<std::ptrdiff_t>(pos + s));
        pos += static_cast<std::size_t>(s);
    }
    return splits;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kEvalChunk = 64;

template <typename Fn>
void for_chunks(std::span<const Sample> samples, const ImageShape& shape, Fn&& fn) {
    for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
        const auto part = samples.subspan(start, std::min(kEvalChunk, samples.size() - start));
        fn(part, to_tensor(part, shape));
    }
}

}  // namespace

double accuracy(const AANet& model, const AggregationWeights& alphas,
                std::span<const Sample> samples, const ImageShape& shape) {
    if (samples.empty()) return 0.0;
    std::size_t correct = 0;
    for_chunks(samples, shape, [&](std::span<const Sample> part, const Tensor& images) {
        const ForwardOutput out = network_forward(model, alphas, images);
        for (int i = 0; i < out.batch; ++i) {
            const double* z = &out.logits[static_cast<std::size_t>(i) * out.num_classes];
            const auto pred = std::max_element(z, z + out.num_classes) - z;
            if (pred == part[static_cast<std::size_t>(i)].label) ++correct;
        }
    });
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

std::vector<std::vector<double>> embed(const AANet& model, const AggregationWeights& alphas,
                                       std::span<const Sample> samples, const ImageShape& shape) {
    std::vector<std::vector<double>> out;
    const int d = model.arch.embed_dim();
    for_chunks(samples, shape, [&](std::span<const Sample>, const Tensor& images) {
        const ForwardOutput f = network_forward(model, alphas, images);
        for (int i = 0; i < f.batch; ++i) {
            out.emplace_back(f.embeddings.begin() + static_cast<std::ptrdiff_t>(i) * d,
                             f.embeddings.begin() + static_cast<std::ptrdiff_t>(i + 1) * d);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Base training and base update
// ---------------------------------------------------------------------------

BaseTraining train_base(std::span<const Sample> phase0_data, int phase0_classes,
                        const ArchConfig& arch, const TrainerConfig& cfg, const ImageShape& shape) {
    if (phase0_data.empty()) throw ArgumentError("train_base: phase-0 split is empty");
    if (phase0_classes <= 0) throw ArgumentError("train_base: phase-0 class count must be positive");
    if (shape.channels != arch.in_channels || shape.height != arch.image_size ||
        shape.width != arch.image_size) {
        throw ConfigError("train_base: image shape does not match the architecture input");
    }
    BaseTraining out;
    out.state = initial_state(arch, cfg.seed);
    out.state.model.head = extend_head(out.state.model.head, phase0_classes);
    Pool pool;
    for (const Sample& s : phase0_data) pool.push_back({s, Origin::NewData});
    try {
        train_phase(out.state, pool, Pool{}, cfg, shape);
    } catch (const NumericError& e) {
        throw TrainingError("phase-0 training diverged at epoch " +
                            std::to_string(out.state.epoch) + " (" + e.what() +
                            "); consider lowering gamma1 (currently " + std::to_string(cfg.gamma1) + ")");
    }
    out.train_accuracy = accuracy(out.state.model, out.state.alphas, phase0_data, shape);
    out.base = freeze_as_base(out.state.model);
    return out;
}

BaseBackbone update_base_variant(const AANet& model, const BaseBackbone& base) {
    if (model.levels.size() != base.levels.size()) {
        throw ConfigError("update_base: model and base level counts differ");
    }
    BaseBackbone out = base;
    for (std::size_t k = 0; k < model.levels.size(); ++k) {
        const LevelSpec& l = model.levels[k];
        if (!l.stable || l.stable->kind != BranchKind::Scaling) {
            throw ConfigError("update_base requires a scaling stable branch (level " +
                              std::to_string(k + 1) + ")");
        }
        for (std::size_t q = 0; q < out.levels[k].size(); ++q) {
            ConvLayer& layer = out.levels[k][q];
            const auto& phi = l.stable->phi.at(q);
            const std::size_t fs = layer.geometry.filter_size();
            if (phi.size() != static_cast<std::size_t>(layer.geometry.out_channels)) {
                throw DimensionError("update_base: scaling weights do not match level " +
                                     std::to_string(k + 1) + " layer " + std::to_string(q));
            }
            for (std::size_t r = 0; r < phi.size(); ++r)
                for (std::size_t j = 0; j < fs; ++j) layer.weight[r * fs + j] *= phi[r];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Budget
// ---------------------------------------------------------------------------

BudgetLedger make_ledger(const ProtocolConfig& cfg, const ArchConfig& arch,
                         const BranchConfig& branches, const ImageShape& shape) {
    BudgetLedger ledger;
    ledger.image_bytes = static_cast<std::int64_t>(shape.size());
    ledger.num_classes = cfg.total_classes;
    ledger.baseline_quota = cfg.per_class_quota;
    if (cfg.budget_extra_params > 0) {
        ledger.extra_params = cfg.budget_extra_params;
        return ledger;
    }
    Rng rng(0);
    AANet single = make_single_branch(arch, rng);
    const auto base = freeze_as_base(single);
    const std::vector<BranchConfig> kinds(arch.levels.size(), branches);
    const AANet model = make_incremental(single, base, kinds);
    const std::vector<BranchConfig> baseline(arch.levels.size(), BranchConfig{BranchKind::All, std::nullopt});
    const AANet reference = make_incremental(single, base, baseline);
    const auto extra = static_cast<std::int64_t>(model.stored_count()) -
                       static_cast<std::int64_t>(reference.stored_count());
    ledger.extra_params = std::max<std::int64_t>(0, extra);
    return ledger;
}

int effective_quota(const ProtocolConfig& cfg, const BudgetLedger& ledger) {
    return cfg.strict_memory ? strict_quota(ledger) : cfg.per_class_quota;
}

// ---------------------------------------------------------------------------
// Protocol driver
// ---------------------------------------------------------------------------

namespace {

ClassExemplars select_exemplars(const Dataset& data, std::span<const int> classes, int quota,
                                SelectionMethod method, const AANet& model,
                                const AggregationWeights& alphas, Rng& rng) {
    ClassExemplars out;
    for (int cls : classes) {
        const auto& candidates = data.train[static_cast<std::size_t>(cls)];
        const int q = std::min<int>(quota, static_cast<int>(candidates.size()));
        if (method == SelectionMethod::Herding) {
            out[cls] = herding_select(candidates, q, [&](std::span<const Sample> s) {
                return embed(model, alphas, s, data.shape);
            });
        } else {
            out[cls] = random_select(candidates, q, rng);
        }
    }
    return out;
}

PhaseReport evaluate_phase(const PhaseState& state, const Dataset& data,
                           const std::vector<std::vector<int>>& splits, int phase,
                           const ExemplarStore& store) {
    PhaseReport r;
    r.phase_index = phase;
    std::vector<Sample> all;
    for (int p = 0; p <= phase; ++p) {
        std::vector<Sample> group;
        for (int cls : splits[static_cast<std::size_t>(p)]) {
            const auto& t = data.test[static_cast<std::size_t>(cls)];
            group.insert(group.end(), t.begin(), t.end());
        }
        r.seen_classes += static_cast<int>(splits[static_cast<std::size_t>(p)].size());
        r.per_group_accuracy[p] = accuracy(state.model, state.alphas, group, data.shape);
        all.insert(all.end(), group.begin(), group.end());
    }
    r.test_samples = static_cast<std::int64_t>(all.size());
    r.test_accuracy = accuracy(state.model, state.alphas, all, data.shape);
    r.alpha_snapshot = state.alphas;
    r.param_count = static_cast<std::int64_t>(state.model.learnable_count());
    r.exemplar_quota = store.per_class_quota;
    r.memory_bytes = static_cast<std::int64_t>(state.model.stored_count()) * 4 +
                     static_cast<std::int64_t>(store.total() * data.shape.size());
    return r;
}

}  // namespace

RunOutcome run_protocol(const ProtocolConfig& cfg, const Dataset& data,
                        const TrainerConfig& trainer_in, const ArchConfig& arch,
                        const BranchConfig& branches, const RunOptions& opts) {
    cfg.validate();
    arch.validate();
    trainer_in.validate();
    if (data.num_classes != cfg.total_classes) {
        throw ConfigError("dataset has " + std::to_string(data.num_classes) +
                          " classes, protocol expects " + std::to_string(cfg.total_classes));
    }
    if (cfg.update_base) {
        if (!branches.stable || *branches.stable != BranchKind::Scaling) {
            throw ConfigError("update_base requires a scaling stable branch");
        }
        if (branches.plastic == BranchKind::Scaling) {
            throw ConfigError("update_base cannot be combined with a scaling plastic branch");
        }
    }
    TrainerConfig trainer = trainer_in;
    trainer.seed = opts.seed;

    RunOutcome outcome;
    RunSummary& summary = outcome.summary;
    summary.config_name = opts.config_name.empty() ? branches.name() : opts.config_name;
    summary.n_phases = cfg.n_phases;
    summary.seed = opts.seed;

    std::vector<int> ids(static_cast<std::size_t>(cfg.total_classes));
    std::iota(ids.begin(), ids.end(), 0);
    outcome.splits = make_splits(cfg, ids);
    std::vector<int> order;
    for (const auto& s : outcome.splits) order.insert(order.end(), s.begin(), s.end());
    const Dataset ds = data.relabeled(order);
    // Class ids after relabeling: phase p owns a contiguous range.
    std::vector<std::vector<int>> splits;
    {
        int next = 0;
        for (const auto& s : outcome.splits) {
            std::vector<int> ids_p(s.size());
            std::iota(ids_p.begin(), ids_p.end(), next);
            next += static_cast<int>(s.size());
            splits.push_back(std::move(ids_p));
        }
    }

    const int quota = effective_quota(cfg, make_ledger(cfg, arch, branches, ds.shape));
    Rng select_rng(opts.seed ^ 0xE8E3B1A5ULL);
    const std::vector<BranchConfig> kinds(arch.levels.size(), branches);
    ExemplarStore store;
    store.per_class_quota = quota;
    store.method = cfg.selection;

    try {
        // Phase 0.
        auto t0 = std::chrono::steady_clock::now();
        std::vector<Sample> phase0;
        for (int cls : splits[0]) {
            const auto& t = ds.train[static_cast<std::size_t>(cls)];
            phase0.insert(phase0.end(), t.begin(), t.end());
        }
        BaseTraining base = train_base(phase0, static_cast<int>(splits[0].size()), arch, trainer, ds.shape);
        outcome.phase0_base = base.base;
        std::shared_ptr<const BaseBackbone> current_base = base.base;
        PhaseState state = std::move(base.state);
        store = update_store(store, select_exemplars(ds, splits[0], quota, cfg.selection, state.model,
                                                     state.alphas, select_rng));
        PhaseReport r0 = evaluate_phase(state, ds, splits, 0, store);
        r0.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        summary.per_phase.push_back(r0);
        if (opts.on_phase_end) opts.on_phase_end(state, store);

        for (int phase = 1; phase < static_cast<int>(splits.size()); ++phase) {
            t0 = std::chrono::steady_clock::now();
            const auto& new_classes = splits[static_cast<std::size_t>(phase)];
            state = init_phase(state, current_base, kinds);
            state.model.head = extend_head(state.model.head, static_cast<int>(new_classes.size()));

            std::vector<Sample> new_data;
            for (int cls : new_classes) {
                const auto& t = ds.train[static_cast<std::size_t>(cls)];
                new_data.insert(new_data.end(), t.begin(), t.end());
            }
            // Selection before training uses the model as it enters the phase.
            const ClassExemplars pre = select_exemplars(ds, new_classes, quota, cfg.selection,
                                                        state.model, state.alphas, select_rng);
            const Pools pools = assemble_pools(store, new_data, pre);
            AlphaTrajectory traj = train_phase(state, pools.full, pools.balanced, trainer, ds.shape);
            outcome.alphas.insert(outcome.alphas.end(), traj.begin(), traj.end());

            const ClassExemplars post = select_exemplars(ds, new_classes, quota, cfg.selection,
                                                         state.model, state.alphas, select_rng);
            store = update_store(store, post);

            PhaseReport r = evaluate_phase(state, ds, splits, phase, store);
            if (cfg.update_base) {
                current_base = std::make_shared<const BaseBackbone>(
                    update_base_variant(state.model, *current_base));
                state.model.base = current_base;
                for (LevelSpec& l : state.model.levels) {
                    for (auto& phi : l.stable->phi) std::fill(phi.begin(), phi.end(), 1.0);
                }
            }
            r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            summary.per_phase.push_back(r);
            if (opts.on_phase_end) opts.on_phase_end(state, store);
        }
        outcome.final_state = std::move(state);
        outcome.final_base = current_base;
    } catch (const Error& e) {
        summary.finalize();
        throw RunFailure(e, summary);
    }
    outcome.store = store;
    summary.finalize();
    return outcome;
}

// ---------------------------------------------------------------------------
// Aggregation over runs
// ---------------------------------------------------------------------------

MeanCI mean_ci(std::span<const double> values) {
    if (values.size() < 2) throw ArgumentError("mean_ci: need at least 2 values");
    MeanCI out;
    out.n = values.size();
    const double n = static_cast<double>(values.size());
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    const boost::math::students_t dist(n - 1.0);
    out.half_width = boost::math::quantile(dist, 0.975) * sd / std::sqrt(n);
    return out;
}

std::map<std::string, MeanCI> aggregate_runs(std::span<const RunSummary> summaries) {
    if (summaries.size() < 2) throw ArgumentError("aggregate_runs: need at least 2 runs");
    std::map<std::string, MeanCI> out;
    std::vector<double> avg;
    std::vector<double> last;
    for (const RunSummary& s : summaries) {
        avg.push_back(s.average_incremental_accuracy);
        last.push_back(s.last_phase_accuracy);
    }
    out["average_incremental_accuracy"] = mean_ci(avg);
    out["last_phase_accuracy"] = mean_ci(last);
    const std::size_t phases = summaries.front().per_phase.size();
    for (std::size_t p = 0; p < phases; ++p) {
        std::vector<double> v;
        for (const RunSummary& s : summaries) {
            if (s.per_phase.size() != phases) {
                throw ArgumentError("aggregate_runs: runs have different phase counts");
            }
            v.push_back(s.per_phase[p].test_accuracy);
        }
        out["phase" + std::to_string(p) + "_accuracy"] = mean_ci(v);
    }
    return out;
}

}  // namespace aanet
