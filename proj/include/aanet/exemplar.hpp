#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "aanet/data.hpp"
#include "aanet/rng.hpp"

namespace aanet {

enum class SelectionMethod { Herding, Random };

std::string_view to_string(SelectionMethod m);
SelectionMethod parse_selection_method(std::string_view text);

using ClassExemplars = std::map<int, std::vector<Sample>>;

// Replay memory: raw images of old classes, each list kept in selection order.
struct ExemplarStore {
    ClassExemplars per_class;
    int per_class_quota = 20;
    SelectionMethod method = SelectionMethod::Herding;

    std::size_t total() const;
    bool operator==(const ExemplarStore&) const = default;
};

// Memory accounting used to trade extra model parameters for exemplars.
struct BudgetLedger {
    std::int64_t bytes_per_float = 4;
    std::int64_t image_bytes = 32 * 32 * 3;
    std::int64_t extra_params = 0;
    std::int64_t num_classes = 100;
    std::int64_t baseline_quota = 20;

    void validate() const;
    // ceil(extra_params * bytes_per_float / image_bytes / num_classes)
    std::int64_t quota_reduction() const;
};

// Reduced per-class quota. Throws ConfigError when the budget cannot be met
// with at least one exemplar per class.
int strict_quota(const BudgetLedger& ledger);

// Greedy herding over precomputed embeddings (one row per candidate). Returns
// candidate indices in selection order; ties go to the lowest index.
std::vector<std::size_t> herding_order(std::span<const std::vector<double>> embeddings,
                                       std::size_t quota);

using EmbedFn = std::function<std::vector<std::vector<double>>(std::span<const Sample>)>;

std::vector<Sample> herding_select(std::span<const Sample> candidates, int quota,
                                   const EmbedFn& embed);
std::vector<Sample> random_select(std::span<const Sample> candidates, int quota, Rng& rng);

struct Pools {
    Pool full;      // E_{0:i-1} ∪ D_i
    Pool balanced;  // E_{0:i-1} ∪ E_i
};

// `new_data` holds every training sample of the new classes; `new_exemplars`
// the selected subset of it.
Pools assemble_pools(const ExemplarStore& store, std::span<const Sample> new_data,
                     const ClassExemplars& new_exemplars);

// Adds the new classes. When `quota` is given and smaller than the current
// one, existing lists are truncated from the tail first.
ExemplarStore update_store(const ExemplarStore& store, const ClassExemplars& new_exemplars,
                           std::optional<int> quota = std::nullopt);

void save_store(const ExemplarStore& store, const ImageShape& shape,
                const std::filesystem::path& path);
ExemplarStore load_store(const std::filesystem::path& path, ImageShape* shape = nullptr);

}  // namespace aanet
