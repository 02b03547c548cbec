#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aanet/backbone.hpp"
#include "aanet/dataset.hpp"
#include "aanet/errors.hpp"
#include "aanet/exemplar.hpp"
#include "aanet/trainer.hpp"

namespace aanet {

enum class SplitMode {
    // Half of the classes in phase 0, the rest evenly over N phases.
    HalfThenEven,
    // Equal share in each of the N + 1 phases.
    SameEveryPhase,
    // Equal share in each of N phases, phase 0 included.
    SameEveryPhaseTotal,
};

std::string_view to_string(SplitMode m);
SplitMode parse_split_mode(std::string_view text);

struct ProtocolConfig {
    int total_classes = 10;
    int n_phases = 5;
    SplitMode split_mode = SplitMode::HalfThenEven;
    int runs = 3;
    int per_class_quota = 20;
    bool strict_memory = false;
    bool update_base = false;
    std::uint64_t class_order_seed = 1993;
    SelectionMethod selection = SelectionMethod::Herding;
    // Overrides the extra-parameter count in the strict budget ledger
    // (0 = derive it from the architecture).
    std::int64_t budget_extra_params = 0;

    void validate() const;
    int phase_count() const;
    bool operator==(const ProtocolConfig&) const = default;
};

struct PhaseReport {
    int phase_index = 0;
    int seen_classes = 0;
    double test_accuracy = 0.0;
    std::map<int, double> per_group_accuracy;  // phase of origin -> accuracy
    AggregationWeights alpha_snapshot;
    std::int64_t param_count = 0;
    std::int64_t memory_bytes = 0;
    int exemplar_quota = 0;
    std::int64_t test_samples = 0;
    double wall_time_s = 0.0;
};

struct RunSummary {
    std::string config_name;
    int n_phases = 0;
    std::uint64_t seed = 0;
    std::vector<PhaseReport> per_phase;
    double average_incremental_accuracy = 0.0;
    double last_phase_accuracy = 0.0;

    // Recomputes the two aggregate fields from per_phase.
    void finalize();
};

// Shuffles `class_ids` with cfg.class_order_seed and partitions them.
std::vector<std::vector<int>> make_splits(const ProtocolConfig& cfg, std::span<const int> class_ids);

struct BaseTraining {
    std::shared_ptr<const BaseBackbone> base;
    PhaseState state;
    double train_accuracy = 0.0;
};

// Trains the single-branch network on the phase-0 classes and freezes it.
BaseTraining train_base(std::span<const Sample> phase0_data, int phase0_classes,
                        const ArchConfig& arch, const TrainerConfig& cfg, const ImageShape& shape);

// θ_base with every filter of every layer multiplied by the stable branch's
// scaling weight for that filter.
BaseBackbone update_base_variant(const AANet& model, const BaseBackbone& base);

// Fraction of `samples` whose argmax logit equals the label.
double accuracy(const AANet& model, const AggregationWeights& alphas,
                std::span<const Sample> samples, const ImageShape& shape);

std::vector<std::vector<double>> embed(const AANet& model, const AggregationWeights& alphas,
                                       std::span<const Sample> samples, const ImageShape& shape);

BudgetLedger make_ledger(const ProtocolConfig& cfg, const ArchConfig& arch,
                         const BranchConfig& branches, const ImageShape& shape);

// Per-class exemplar quota used by a run.
int effective_quota(const ProtocolConfig& cfg, const BudgetLedger& ledger);

struct RunOptions {
    std::string config_name;
    std::uint64_t seed = 0;
    // Called at the end of every phase (after the exemplar update).
    std::function<void(const PhaseState&, const ExemplarStore&)> on_phase_end;
};

struct RunOutcome {
    RunSummary summary;
    AlphaTrajectory alphas;
    PhaseState final_state;
    std::shared_ptr<const BaseBackbone> phase0_base;
    std::shared_ptr<const BaseBackbone> final_base;
    ExemplarStore store;
    std::vector<std::vector<int>> splits;  // original class ids per phase
};

// Raised when a phase fails; carries the reports of the completed phases.
class RunFailure : public Error {
public:
    RunFailure(const Error& cause, RunSummary partial)
        : Error(cause.kind(), cause.what()), partial_(std::move(partial)) {}
    const RunSummary& partial() const { return partial_; }

private:
    RunSummary partial_;
};

RunOutcome run_protocol(const ProtocolConfig& cfg, const Dataset& data,
                        const TrainerConfig& trainer, const ArchConfig& arch,
                        const BranchConfig& branches, const RunOptions& opts);

struct MeanCI {
    double mean = 0.0;
    double half_width = 0.0;  // 95% t-interval
    std::size_t n = 0;
};

MeanCI mean_ci(std::span<const double> values);

// Keys: "average_incremental_accuracy", "last_phase_accuracy", "phase<i>_accuracy".
std::map<std::string, MeanCI> aggregate_runs(std::span<const RunSummary> summaries);

}  // namespace aanet
