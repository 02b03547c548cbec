#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "aanet/errors.hpp"
#include "aanet/protocol.hpp"
#include "support.hpp"

using namespace aanet;
using namespace aanet::testing;

namespace {

struct SmallSetup {
    ProtocolConfig protocol;
    Dataset data;
    TrainerConfig trainer;
    ArchConfig arch;
};

SmallSetup small_setup() {
    SmallSetup s;
    s.arch = tiny_arch();
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.train_per_class = 8;
    spec.test_per_class = 4;
    spec.image_size = s.arch.image_size;
    spec.channels = s.arch.in_channels;
    spec.noise = 0.5;
    s.data = gen_synthetic(spec);
    s.protocol.total_classes = 4;
    s.protocol.n_phases = 2;
    s.protocol.per_class_quota = 3;
    s.trainer.epochs = 3;
    s.trainer.lr_schedule = {{2, 10.0}};
    s.trainer.batch_size = 8;
    s.trainer.gamma1 = 0.01;
    s.trainer.gamma2 = 1e-2;
    return s;
}

RunOutcome run_small(const SmallSetup& s, BranchConfig b, std::uint64_t seed,
                     const RunOptions* custom = nullptr) {
    RunOptions opts;
    if (custom) opts = *custom;
    opts.seed = seed;
    return run_protocol(s.protocol, s.data, s.trainer, s.arch, b, opts);
}

RunSummary fake_summary(std::vector<double> accs) {
    RunSummary s;
    for (std::size_t i = 0; i < accs.size(); ++i) {
        PhaseReport r;
        r.phase_index = static_cast<int>(i);
        r.test_accuracy = accs[i];
        s.per_phase.push_back(r);
    }
    s.finalize();
    return s;
}

}  // namespace

TEST(Splits, HalfThenEven) {
    ProtocolConfig cfg;
    cfg.total_classes = 100;
    cfg.n_phases = 5;
    std::vector<int> ids(100);
    std::iota(ids.begin(), ids.end(), 0);
    const auto splits = make_splits(cfg, ids);
    ASSERT_EQ(splits.size(), 6u);
    EXPECT_EQ(splits[0].size(), 50u);
    for (std::size_t p = 1; p < 6; ++p) EXPECT_EQ(splits[p].size(), 10u);
    std::set<int> all;
    for (const auto& s : splits) all.insert(s.begin(), s.end());
    EXPECT_EQ(all.size(), 100u);
}

TEST(Splits, SameEveryPhaseConventions) {
    ProtocolConfig cfg;
    cfg.total_classes = 100;
    cfg.n_phases = 25;
    cfg.split_mode = SplitMode::SameEveryPhaseTotal;
    std::vector<int> ids(100);
    std::iota(ids.begin(), ids.end(), 0);
    const auto total = make_splits(cfg, ids);
    EXPECT_EQ(total.size(), 25u);
    EXPECT_EQ(total[0].size(), 4u);
    cfg.split_mode = SplitMode::SameEveryPhase;
    cfg.n_phases = 24;
    EXPECT_EQ(make_splits(cfg, ids).size(), 25u);
    cfg.n_phases = 25;
    EXPECT_THROW(make_splits(cfg, ids), ConfigError);
}

TEST(Splits, OrderDependsOnlyOnSeed) {
    ProtocolConfig cfg;
    std::vector<int> ids(10);
    std::iota(ids.begin(), ids.end(), 0);
    EXPECT_EQ(make_splits(cfg, ids), make_splits(cfg, ids));
    ProtocolConfig other = cfg;
    other.class_order_seed = 7;
    EXPECT_NE(make_splits(cfg, ids), make_splits(other, ids));
}

TEST(Splits, IndivisibleCountsAreConfigErrors) {
    ProtocolConfig cfg;
    cfg.total_classes = 10;
    cfg.n_phases = 2;
    std::vector<int> ids(10);
    std::iota(ids.begin(), ids.end(), 0);
    EXPECT_THROW(make_splits(cfg, ids), ConfigError);
}

TEST(SplitMode, ParseRoundTrip) {
    for (SplitMode m : {SplitMode::HalfThenEven, SplitMode::SameEveryPhase, SplitMode::SameEveryPhaseTotal}) {
        EXPECT_EQ(parse_split_mode(to_string(m)), m);
    }
    EXPECT_THROW(parse_split_mode("random"), ConfigError);
}

TEST(MeanCI, StudentTInterval) {
    const std::vector<double> v{0.5, 0.6, 0.7};
    const MeanCI ci = mean_ci(v);
    // t(0.975, 2) = 4.302652729911275
    EXPECT_NEAR(ci.mean, 0.6, 1e-15);
    EXPECT_NEAR(ci.half_width, 4.302652729911275 * 0.1 / std::sqrt(3.0), 1e-9);
    const std::vector<double> five{1, 2, 3, 4, 5};
    // t(0.975, 4) = 2.7764451051977987
    EXPECT_NEAR(mean_ci(five).half_width, 2.7764451051977987 * std::sqrt(2.5) / std::sqrt(5.0), 1e-9);
    const std::vector<double> one{0.5};
    EXPECT_THROW(mean_ci(one), ArgumentError);
}

TEST(RunSummary, AverageIsMeanOfPhases) {
    const RunSummary s = fake_summary({0.9, 0.7, 0.5});
    EXPECT_DOUBLE_EQ(s.average_incremental_accuracy, 0.7);
    EXPECT_DOUBLE_EQ(s.last_phase_accuracy, 0.5);
}

TEST(AggregateRuns, KeysAndValues) {
    const std::vector<RunSummary> runs{fake_summary({0.8, 0.4}), fake_summary({0.6, 0.6})};
    const auto agg = aggregate_runs(runs);
    EXPECT_DOUBLE_EQ(agg.at("average_incremental_accuracy").mean, 0.6);
    EXPECT_DOUBLE_EQ(agg.at("phase0_accuracy").mean, 0.7);
    EXPECT_DOUBLE_EQ(agg.at("last_phase_accuracy").mean, 0.5);
    const std::vector<RunSummary> ragged{fake_summary({0.8, 0.4}), fake_summary({0.6})};
    EXPECT_THROW(aggregate_runs(ragged), ArgumentError);
}

TEST(UpdateBase, CompositionEqualsProduct) {
    Fixture f = make_fixture(1);
    Rng rng(2);
    AANet m1 = f.dual, m2 = f.dual, prod = f.dual;
    for (std::size_t k = 0; k < m1.levels.size(); ++k) {
        for (std::size_t q = 0; q < m1.levels[k].stable->phi.size(); ++q) {
            for (std::size_t r = 0; r < m1.levels[k].stable->phi[q].size(); ++r) {
                const double a = rng.uniform(0.5, 1.5), b = rng.uniform(0.5, 1.5);
                m1.levels[k].stable->phi[q][r] = a;
                m2.levels[k].stable->phi[q][r] = b;
                prod.levels[k].stable->phi[q][r] = a * b;
            }
        }
    }
    const BaseBackbone twice = update_base_variant(m2, update_base_variant(m1, *f.base));
    const BaseBackbone once = update_base_variant(prod, *f.base);
    for (std::size_t k = 0; k < once.levels.size(); ++k)
        for (std::size_t q = 0; q < once.levels[k].size(); ++q) {
            EXPECT_LT(max_abs_diff(twice.levels[k][q].weight, once.levels[k][q].weight), 1e-12);
            EXPECT_EQ(twice.levels[k][q].bias, f.base->levels[k][q].bias);
        }
}

TEST(UpdateBase, RequiresScalingStableBranch) {
    const Fixture f = make_fixture(3, {BranchKind::All, BranchKind::Frozen});
    EXPECT_THROW(update_base_variant(f.dual, *f.base), ConfigError);
}

TEST(Ledger, ExtraParamsAreStoredDifferenceToBaseline) {
    ProtocolConfig cfg;
    const ArchConfig arch = tiny_arch();
    const ImageShape shape{2, 6, 6};
    const BudgetLedger l = make_ledger(cfg, arch, BranchConfig{}, shape);
    Rng rng(0);
    const AANet single = make_single_branch(arch, rng);
    std::size_t base_levels = 0;
    for (int k = 0; k < static_cast<int>(arch.levels.size()); ++k)
        for (const ConvGeometry& g : arch.level_geometries(k)) base_levels += g.weight_count() + g.out_channels;
    std::size_t phi = 0;
    for (int k = 0; k < static_cast<int>(arch.levels.size()); ++k)
        for (const ConvGeometry& g : arch.level_geometries(k)) phi += g.out_channels;
    EXPECT_EQ(l.extra_params, static_cast<std::int64_t>(base_levels + phi));
    EXPECT_EQ(make_ledger(cfg, arch, BranchConfig{BranchKind::All, std::nullopt}, shape).extra_params, 0);
    cfg.budget_extra_params = 530000;
    EXPECT_EQ(make_ledger(cfg, arch, BranchConfig{}, shape).extra_params, 530000);
}

TEST(RunProtocol, ReportsAndInvariants) {
    const SmallSetup s = small_setup();
    std::vector<BaseBackbone> bases_seen;
    RunOptions opts;
    opts.on_phase_end = [&](const PhaseState& st, const ExemplarStore& store) {
        if (st.model.base) bases_seen.push_back(*st.model.base);
        EXPECT_LE(store.per_class.size(), 4u);
    };
    const RunOutcome o = run_small(s, BranchConfig{}, 5, &opts);
    const RunSummary& sum = o.summary;
    ASSERT_EQ(sum.per_phase.size(), 3u);
    EXPECT_EQ(sum.per_phase[0].seen_classes, 2);
    EXPECT_EQ(sum.per_phase[2].seen_classes, 4);
    double mean = 0.0;
    for (const PhaseReport& r : sum.per_phase) mean += r.test_accuracy / 3.0;
    EXPECT_NEAR(sum.average_incremental_accuracy, mean, 1e-15);
    ASSERT_EQ(bases_seen.size(), 2u);
    for (const BaseBackbone& b : bases_seen) EXPECT_EQ(b, *o.phase0_base);
    EXPECT_EQ(o.alphas.size(), 2u * 2u * 3u);
    for (const AlphaRecord& a : o.alphas) {
        EXPECT_NEAR(a.alpha_stable + a.alpha_plastic, 1.0, 1e-9);
        EXPECT_GE(a.alpha_stable, 0.0);
        EXPECT_LE(a.alpha_stable, 1.0);
    }
    EXPECT_EQ(o.store.total(), 4u * 3u);
}

TEST(RunProtocol, DeterministicForSameSeed) {
    const SmallSetup s = small_setup();
    const RunOutcome a = run_small(s, BranchConfig{}, 9);
    const RunOutcome b = run_small(s, BranchConfig{}, 9);
    ASSERT_EQ(a.summary.per_phase.size(), b.summary.per_phase.size());
    for (std::size_t i = 0; i < a.summary.per_phase.size(); ++i) {
        EXPECT_EQ(a.summary.per_phase[i].test_accuracy, b.summary.per_phase[i].test_accuracy);
        EXPECT_EQ(a.summary.per_phase[i].alpha_snapshot, b.summary.per_phase[i].alpha_snapshot);
    }
    EXPECT_EQ(a.alphas, b.alphas);
    EXPECT_EQ(a.store, b.store);
}

TEST(RunProtocol, BaselineHasNoAlphaTrajectory) {
    const SmallSetup s = small_setup();
    const RunOutcome o = run_small(s, BranchConfig{BranchKind::All, std::nullopt}, 1);
    EXPECT_TRUE(o.alphas.empty());
    EXPECT_EQ(o.summary.per_phase.size(), 3u);
}

TEST(RunProtocol, UpdateBaseFoldsScalingIntoBase) {
    SmallSetup s = small_setup();
    s.protocol.update_base = true;
    const RunOutcome o = run_small(s, BranchConfig{}, 2);
    EXPECT_NE(*o.final_base, *o.phase0_base);
    for (const LevelSpec& l : o.final_state.model.levels)
        for (const auto& phi : l.stable->phi)
            for (double v : phi) EXPECT_EQ(v, 1.0);
    SmallSetup bad = small_setup();
    bad.protocol.update_base = true;
    EXPECT_THROW(run_small(bad, BranchConfig{BranchKind::All, BranchKind::Frozen}, 2), ConfigError);
}

TEST(RunProtocol, StrictMemoryInfeasibleOnToyArchitecture) {
    SmallSetup s = small_setup();
    s.protocol.strict_memory = true;
    EXPECT_THROW(run_small(s, BranchConfig{}, 1), ConfigError);
    s.protocol.budget_extra_params = 10;
    const RunOutcome o = run_small(s, BranchConfig{}, 1);
    EXPECT_LT(o.summary.per_phase.back().exemplar_quota, s.protocol.per_class_quota);
}

TEST(RunProtocol, ClassCountMismatchIsConfigError) {
    SmallSetup s = small_setup();
    s.protocol.total_classes = 6;
    s.protocol.n_phases = 3;
    EXPECT_THROW(run_small(s, BranchConfig{}, 1), ConfigError);
}

TEST(RunProtocol, FailureCarriesCompletedPhases) {
    const SmallSetup s = small_setup();
    RunOptions opts;
    opts.on_phase_end = [](const PhaseState& st, const ExemplarStore&) {
        if (st.phase_index == 1) throw StateError("injected");
    };
    try {
        run_small(s, BranchConfig{}, 1, &opts);
        FAIL() << "expected RunFailure";
    } catch (const RunFailure& e) {
        EXPECT_EQ(e.kind(), "state");
        ASSERT_EQ(e.partial().per_phase.size(), 2u);
        EXPECT_EQ(e.partial().per_phase[1].phase_index, 1);
    }
}
