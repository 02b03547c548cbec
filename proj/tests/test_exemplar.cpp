#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <limits>
#include <numeric>

#include "aanet/errors.hpp"
#include "aanet/exemplar.hpp"
#include "support.hpp"

using namespace aanet;
using namespace aanet::testing;

namespace {

// Greedy herding by exhaustive evaluation of every extension, computing the
// candidate mean from scratch each time.
std::vector<std::size_t> greedy_oracle(const std::vector<std::vector<double>>& e, std::size_t quota) {
    const std::size_t n = e.size(), d = e[0].size();
    std::vector<double> mu(d, 0.0);
    for (const auto& row : e)
        for (std::size_t j = 0; j < d; ++j) mu[j] += row[j] / static_cast<double>(n);
    std::vector<std::size_t> chosen;
    for (std::size_t t = 0; t < quota; ++t) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = n;
        for (std::size_t c = 0; c < n; ++c) {
            if (std::find(chosen.begin(), chosen.end(), c) != chosen.end()) continue;
            std::vector<std::size_t> trial = chosen;
            trial.push_back(c);
            double dist = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double m = 0.0;
                for (std::size_t i : trial) m += e[i][j];
                m /= static_cast<double>(trial.size());
                dist += (mu[j] - m) * (mu[j] - m);
            }
            if (dist < best - 1e-12) {
                best = dist;
                arg = c;
            }
        }
        chosen.push_back(arg);
    }
    return chosen;
}

Sample sample_of(int label, float v) { return Sample{{v, v}, label}; }

}  // namespace

TEST(Herding, MatchesExhaustiveGreedyOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        const std::size_t quota = 1 + rng.below(std::min<std::size_t>(4, n));
        const std::size_t d = 1 + rng.below(4);
        std::vector<std::vector<double>> e(n, std::vector<double>(d));
        for (auto& row : e)
            for (double& v : row) v = rng.normal();
        EXPECT_EQ(herding_order(e, quota), greedy_oracle(e, quota)) << "trial " << trial;
    }
}

TEST(Herding, PrefixProperty) {
    Rng rng(2);
    std::vector<std::vector<double>> e(12, std::vector<double>(3));
    for (auto& row : e)
        for (double& v : row) v = rng.normal();
    const auto full = herding_order(e, 12);
    for (std::size_t q = 1; q <= 12; ++q) {
        const auto part = herding_order(e, q);
        EXPECT_TRUE(std::equal(part.begin(), part.end(), full.begin()));
    }
}

TEST(Herding, TiesGoToLowestIndex) {
    const std::vector<std::vector<double>> e = {{1.0}, {-1.0}, {1.0}, {-1.0}};
    const auto order = herding_order(e, 4);
    EXPECT_EQ(order[0], 0u);
    EXPECT_EQ(order[1], 1u);
}

TEST(Herding, FullQuotaIsPermutation) {
    Rng rng(3);
    std::vector<std::vector<double>> e(7, std::vector<double>(2));
    for (auto& row : e)
        for (double& v : row) v = rng.normal();
    auto order = herding_order(e, 7);
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(order[i], i);
}

TEST(Herding, ArgumentErrors) {
    EXPECT_THROW(herding_order({}, 0), ArgumentError);
    const std::vector<std::vector<double>> e = {{1.0}, {2.0}};
    EXPECT_THROW(herding_order(e, 3), ArgumentError);
}

TEST(Herding, SelectUsesEmbeddingOrder) {
    std::vector<Sample> cands;
    for (int i = 0; i < 5; ++i) cands.push_back(sample_of(0, static_cast<float>(i)));
    const EmbedFn embed = [](std::span<const Sample> s) {
        std::vector<std::vector<double>> out;
        for (const Sample& x : s) out.push_back({static_cast<double>(x.pixels[0])});
        return out;
    };
    const auto picked = herding_select(cands, 2, embed);
    ASSERT_EQ(picked.size(), 2u);
    EXPECT_EQ(picked[0].pixels[0], 2.0f);  // closest to the mean 2
}

TEST(RandomSelect, DistinctAndDeterministic) {
    std::vector<Sample> cands;
    for (int i = 0; i < 10; ++i) cands.push_back(sample_of(0, static_cast<float>(i)));
    Rng a(4), b(4);
    const auto x = random_select(cands, 6, a);
    const auto y = random_select(cands, 6, b);
    EXPECT_EQ(x, y);
    std::vector<float> vals;
    for (const Sample& s : x) vals.push_back(s.pixels[0]);
    std::sort(vals.begin(), vals.end());
    EXPECT_EQ(std::unique(vals.begin(), vals.end()), vals.end());
}

TEST(StrictQuota, ReferenceValues) {
    BudgetLedger cifar;
    cifar.extra_params = 530'000;
    cifar.image_bytes = 32 * 32 * 3;
    cifar.num_classes = 100;
    EXPECT_EQ(strict_quota(cifar), 13);

    BudgetLedger imagenet_subset;
    imagenet_subset.extra_params = 12'600'000;
    imagenet_subset.image_bytes = 224 * 224 * 3;
    imagenet_subset.num_classes = 100;
    EXPECT_EQ(strict_quota(imagenet_subset), 16);

    BudgetLedger imagenet = imagenet_subset;
    imagenet.num_classes = 1000;
    EXPECT_EQ(strict_quota(imagenet), 19);
}

TEST(StrictQuota, ZeroExtraKeepsBaseline) {
    BudgetLedger l;
    EXPECT_EQ(strict_quota(l), 20);
}

TEST(StrictQuota, ReductionIsCeiling) {
    BudgetLedger l;
    l.image_bytes = 10;
    l.num_classes = 2;
    l.extra_params = 5;  // 20 bytes = exactly one image per class
    EXPECT_EQ(l.quota_reduction(), 1);
    l.extra_params = 6;
    EXPECT_EQ(l.quota_reduction(), 2);
}

TEST(StrictQuota, InfeasibleBudgetIsConfigError) {
    BudgetLedger l;
    l.extra_params = 10'000'000;
    EXPECT_THROW(strict_quota(l), ConfigError);
}

TEST(Pools, BalancedPoolHoldsOnlyExemplars) {
    ExemplarStore store;
    store.per_class[0] = {sample_of(0, 1), sample_of(0, 2)};
    store.per_class[1] = {sample_of(1, 3), sample_of(1, 4)};
    std::vector<Sample> fresh;
    for (int i = 0; i < 6; ++i) fresh.push_back(sample_of(2, static_cast<float>(10 + i)));
    ClassExemplars picked;
    picked[2] = {fresh[0], fresh[3]};
    const Pools p = assemble_pools(store, fresh, picked);
    EXPECT_EQ(p.full.size(), 4u + 6u);
    EXPECT_EQ(p.balanced.size(), 4u + 2u);
    for (const auto& t : p.balanced) EXPECT_EQ(t.origin, Origin::Exemplar);
    std::size_t new_count = 0;
    for (const auto& t : p.full) new_count += t.origin == Origin::NewData;
    EXPECT_EQ(new_count, 6u);
}

TEST(Pools, Errors) {
    ExemplarStore store;
    store.per_class_quota = 1;
    store.per_class[0] = {sample_of(0, 1)};
    EXPECT_THROW(assemble_pools(store, {}, {}), ProtocolError);
    const std::vector<Sample> clash{sample_of(0, 5)};
    EXPECT_THROW(assemble_pools(store, clash, {}), ProtocolError);
    const std::vector<Sample> fresh{sample_of(1, 5), sample_of(1, 6)};
    ClassExemplars too_many;
    too_many[1] = fresh;
    EXPECT_THROW(assemble_pools(store, fresh, too_many), ProtocolError);
}

TEST(UpdateStore, AddsClassesAndTruncatesTails) {
    ExemplarStore store;
    store.per_class_quota = 3;
    ClassExemplars first;
    first[0] = {sample_of(0, 1), sample_of(0, 2), sample_of(0, 3)};
    store = update_store(store, first);
    ClassExemplars second;
    second[1] = {sample_of(1, 4), sample_of(1, 5), sample_of(1, 6)};
    const ExemplarStore out = update_store(store, second, 2);
    EXPECT_EQ(out.per_class_quota, 2);
    ASSERT_EQ(out.per_class.at(0).size(), 2u);
    EXPECT_EQ(out.per_class.at(0)[1].pixels[0], 2.0f);
    EXPECT_EQ(out.per_class.at(1).size(), 2u);
    EXPECT_THROW(update_store(out, second), ProtocolError);
    EXPECT_THROW(update_store(out, {}), ProtocolError);
}

TEST(StoreFile, RoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "aanet_store_roundtrip.arc";
    ExemplarStore store;
    store.per_class_quota = 4;
    store.method = SelectionMethod::Random;
    store.per_class[3] = {sample_of(3, 0.25f), sample_of(3, -1.5f)};
    store.per_class[7] = {sample_of(7, 3.0f)};
    save_store(store, ImageShape{2, 1, 1}, path);
    ImageShape shape;
    const ExemplarStore back = load_store(path, &shape);
    EXPECT_EQ(back, store);
    EXPECT_EQ(shape, (ImageShape{2, 1, 1}));
    std::filesystem::remove(path);
}

TEST(SelectionMethod, Parse) {
    EXPECT_EQ(parse_selection_method("herding"), SelectionMethod::Herding);
    EXPECT_EQ(parse_selection_method("random"), SelectionMethod::Random);
    EXPECT_THROW(parse_selection_method("kmeans"), ConfigError);
}
