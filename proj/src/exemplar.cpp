#include "aanet/exemplar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "aanet/archive.hpp"
#include "aanet/errors.hpp"

namespace aanet {

std::string_view to_string(SelectionMethod m) {
    return m == SelectionMethod::Herding ? "herding" : "random";
}

SelectionMethod parse_selection_method(std::string_view text) {
    if (text == "herding") return SelectionMethod::Herding;
    if (text == "random") return SelectionMethod::Random;
    throw ConfigError("unknown selection method '" + std::string(text) + "'");
}

std::size_t ExemplarStore::total() const {
    std::size_t n = 0;
    for (const auto& [cls, list] : per_class) n += list.size();
    return n;
}

// ---------------------------------------------------------------------------
// Budget
// ---------------------------------------------------------------------------

void BudgetLedger::validate() const {
    if (bytes_per_float <= 0 || image_bytes <= 0 || num_classes <= 0 || baseline_quota <= 0 ||
        extra_params < 0) {
        throw ConfigError("budget ledger fields must be positive");
    }
}

std::int64_t BudgetLedger::quota_reduction() const {
    validate();
    const std::int64_t num = extra_params * bytes_per_float;
    const std::int64_t den = image_bytes * num_classes;
    return (num + den - 1) / den;
}

int strict_quota(const BudgetLedger& ledger) {
    const std::int64_t quota = ledger.baseline_quota - ledger.quota_reduction();
    if (quota <= 0) {
        throw ConfigError("strict memory budget is infeasible: " +
                          std::to_string(ledger.extra_params) + " extra parameters need " +
                          std::to_string(ledger.quota_reduction()) +
                          " images/class but the baseline quota is " +
                          std::to_string(ledger.baseline_quota));
    }
    return static_cast<int>(quota);
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

namespace {
constexpr double kTieTolerance = 1e-12;
}

std::vector<std::size_t> herding_order(std::span<const std::vector<double>> embeddings,
                                       std::size_t quota) {
    const std::size_t n = embeddings.size();
    if (n == 0) throw ArgumentError("herding: no candidates");
    if (quota > n) {
        throw ArgumentError("herding: quota " + std::to_string(quota) + " exceeds " +
                            std::to_string(n) + " candidates");
    }
    const std::size_t d = embeddings[0].size();
    std::vector<double> mean(d, 0.0);
    for (const auto& e : embeddings) {
        if (e.size() != d) throw DimensionError("herding: embeddings differ in length");
        for (std::size_t j = 0; j < d; ++j) mean[j] += e[j];
    }
    for (double& m : mean) m /= static_cast<double>(n);

    std::vector<double> running(d, 0.0);
    std::vector<bool> taken(n, false);
    std::vector<std::size_t> order;
    for (std::size_t t = 1; t <= quota; ++t) {
        std::size_t best = n;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < n; ++c) {
            if (taken[c]) continue;
            double dist = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = mean[j] - (running[j] + embeddings[c][j]) / static_cast<double>(t);
                dist += diff * diff;
            }
            // Distances equal up to rounding count as ties (lowest index wins).
            if (best == n || dist < best_dist - kTieTolerance * std::max(1.0, best_dist)) {
                best_dist = dist;
                best = c;
            }
        }
        taken[best] = true;
        order.push_back(best);
        for (std::size_t j = 0; j < d; ++j) running[j] += embeddings[best][j];
    }
    return order;
}

std::vector<Sample> herding_select(std::span<const Sample> candidates, int quota,
                                   const EmbedFn& embed) {
    if (candidates.empty()) throw ArgumentError("herding_select: zero candidates");
    if (quota < 0 || static_cast<std::size_t>(quota) > candidates.size()) {
        throw ArgumentError("herding_select: quota " + std::to_string(quota) + " exceeds " +
                            std::to_string(candidates.size()) + " candidates");
    }
    const auto emb = embed(candidates);
    if (emb.size() != candidates.size()) {
        throw DimensionError("herding_select: embedding count does not match candidates");
    }
    std::vector<Sample> out;
    for (std::size_t i : herding_order(emb, static_cast<std::size_t>(quota))) {
        out.push_back(candidates[i]);
    }
    return out;
}

std::vector<Sample> random_select(std::span<const Sample> candidates, int quota, Rng& rng) {
    if (candidates.empty()) throw ArgumentError("random_select: zero candidates");
    if (quota < 0 || static_cast<std::size_t>(quota) > candidates.size()) {
        throw ArgumentError("random_select: quota exceeds candidate count");
    }
    std::vector<std::size_t> idx(candidates.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(idx));
    std::vector<Sample> out;
    for (int i = 0; i < quota; ++i) out.push_back(candidates[idx[static_cast<std::size_t>(i)]]);
    return out;
}

// ---------------------------------------------------------------------------
// Pools and store maintenance
// ---------------------------------------------------------------------------

Pools assemble_pools(const ExemplarStore& store, std::span<const Sample> new_data,
                     const ClassExemplars& new_exemplars) {
    if (new_data.empty()) throw ProtocolError("assemble_pools: new class data is empty");
    std::set<int> new_classes;
    for (const Sample& s : new_data) {
        if (store.per_class.count(s.label) != 0) {
            throw ProtocolError("assemble_pools: class " + std::to_string(s.label) +
                                " is both stored and new");
        }
        new_classes.insert(s.label);
    }
    for (const auto& [cls, list] : new_exemplars) {
        if (new_classes.count(cls) == 0) {
            throw ProtocolError("assemble_pools: exemplars for class " + std::to_string(cls) +
                                " which has no new data");
        }
        if (list.size() > static_cast<std::size_t>(store.per_class_quota)) {
            throw ProtocolError("assemble_pools: class " + std::to_string(cls) +
                                " exceeds the per-class quota");
        }
    }

    Pools pools;
    for (const auto& [cls, list] : store.per_class) {
        for (const Sample& s : list) {
            pools.full.push_back({s, Origin::Exemplar});
            pools.balanced.push_back({s, Origin::Exemplar});
        }
    }
    for (const Sample& s : new_data) pools.full.push_back({s, Origin::NewData});
    for (const auto& [cls, list] : new_exemplars) {
        for (const Sample& s : list) pools.balanced.push_back({s, Origin::Exemplar});
    }
    return pools;
}

ExemplarStore update_store(const ExemplarStore& store, const ClassExemplars& new_exemplars,
                           std::optional<int> quota) {
    if (new_exemplars.empty()) throw ProtocolError("update_store: no new exemplars");
    ExemplarStore out = store;
    if (quota) {
        if (*quota <= 0) throw ConfigError("update_store: quota must be positive");
        out.per_class_quota = *quota;
        for (auto& [cls, list] : out.per_class) {
            if (list.size() > static_cast<std::size_t>(*quota)) list.resize(static_cast<std::size_t>(*quota));
        }
    }
    for (const auto& [cls, list] : new_exemplars) {
        if (out.per_class.count(cls) != 0) {
            throw ProtocolError("update_store: class " + std::to_string(cls) + " already stored");
        }
        if (list.empty()) throw ProtocolError("update_store: class " + std::to_string(cls) + " has no exemplars");
        std::vector<Sample> kept = list;
        if (kept.size() > static_cast<std::size_t>(out.per_class_quota)) {
            kept.resize(static_cast<std::size_t>(out.per_class_quota));
        }
        out.per_class.emplace(cls, std::move(kept));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void save_store(const ExemplarStore& store, const ImageShape& shape,
                const std::filesystem::path& path) {
    Archive a;
    a.meta["kind"] = "exemplar-store";
    a.meta["quota"] = store.per_class_quota;
    a.meta["method"] = std::string(to_string(store.method));
    a.meta["image_shape"] = {shape.channels, shape.height, shape.width};
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& [cls, list] : store.per_class) {
        classes.push_back({{"class_id", cls}, {"count", list.size()}});
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (list[i].pixels.size() != shape.size()) {
                throw DimensionError("save_store: image size does not match shape");
            }
            // Records are keyed (class, index); index is the selection order.
            a.tensors["class" + std::to_string(cls) + "/" + std::to_string(i)] =
                std::vector<double>(list[i].pixels.begin(), list[i].pixels.end());
        }
    }
    a.meta["classes"] = classes;
    write_archive(a, path);
}

ExemplarStore load_store(const std::filesystem::path& path, ImageShape* shape) {
    const Archive a = read_archive(path);
    if (a.meta.value("kind", "") != "exemplar-store") {
        throw FormatError(path.string() + ": not an exemplar store archive");
    }
    ExemplarStore store;
    store.per_class_quota = a.meta.at("quota").get<int>();
    store.method = parse_selection_method(a.meta.at("method").get<std::string>());
    if (shape != nullptr) {
        const auto& s = a.meta.at("image_shape");
        *shape = ImageShape{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
    }
    for (const auto& c : a.meta.at("classes")) {
        const int cls = c.at("class_id").get<int>();
        const auto count = c.at("count").get<std::size_t>();
        std::vector<Sample> list;
        for (std::size_t i = 0; i < count; ++i) {
            const auto& v = a.tensor("class" + std::to_string(cls) + "/" + std::to_string(i));
            list.push_back(Sample{std::vector<float>(v.begin(), v.end()), cls});
        }
        store.per_class.emplace(cls, std::move(list));
    }
    return store;
}

}  // namespace aanet
