#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "aanet/backbone.hpp"
#include "aanet/data.hpp"
#include "aanet/rng.hpp"

namespace aanet {

struct LrStep {
    int epoch = 0;
    double divisor = 10.0;
    bool operator==(const LrStep&) const = default;
};

struct TrainerConfig {
    double gamma1 = 0.05;  // lower level: network parameters
    double gamma2 = 1e-3;  // upper level: aggregation weights
    double momentum = 0.9;
    int batch_size = 32;
    int epochs = 30;
    std::vector<LrStep> lr_schedule{{15, 10.0}, {23, 10.0}};
    std::uint64_t seed = 0;
    // Keep the stem at its phase-0 values in incremental phases, so the lower
    // level updates only [phi, eta] and the classifier.
    bool freeze_stem = true;

    void validate() const;
    // Product of the divisors whose epoch has been reached, inverted.
    double schedule_factor(int epoch) const;
    bool operator==(const TrainerConfig&) const = default;
};

struct PhaseState {
    int phase_index = 0;
    AANet model;
    AggregationWeights alphas;
    std::optional<AANet> velocity;  // momentum buffers for the lower level
    Rng rng;
    int epoch = 0;
};

// Phase-0 state: a freshly initialized single-branch network.
PhaseState initial_state(const ArchConfig& arch, std::uint64_t seed);

// Starts phase prev.phase_index + 1. Entering the first incremental phase
// builds the dual-branch model around `base` (phi = 1, eta = θ_base,
// alpha = 0.5); later phases carry every parameter over unchanged.
PhaseState init_phase(const PhaseState& prev, std::shared_ptr<const BaseBackbone> base,
                      std::span<const BranchConfig> level_kinds);

// One SGD-with-momentum step on [phi, eta] (plus stem and head) with alpha
// fixed. Returns the batch loss before the step.
double lower_step(PhaseState& state, const Batch& batch, const TrainerConfig& cfg);

// One projected gradient step on alpha with the network fixed. Every sample
// must come from the exemplar memory. Returns the batch loss before the step.
double upper_step(PhaseState& state, const Batch& batch, const TrainerConfig& cfg);

// Nearest point of each pair on {(a, 1 - a) : a in [0, 1]}.
AggregationWeights project_alpha(std::span<const AlphaPair> raw);

struct AlphaRecord {
    int phase = 0;
    int epoch = 0;
    int level = 0;  // 1-based
    double alpha_stable = 0.0;
    double alpha_plastic = 0.0;
    bool operator==(const AlphaRecord&) const = default;
};

using AlphaTrajectory = std::vector<AlphaRecord>;

// Per epoch: one lower_step sweep over full_pool, then one upper_step sweep
// over balanced_pool (dual-branch models only). Records alpha after each epoch.
AlphaTrajectory train_phase(PhaseState& state, const Pool& full_pool, const Pool& balanced_pool,
                            const TrainerConfig& cfg, const ImageShape& shape);

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

enum class GradGroup { Alpha, Phi, Eta };

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    // Coordinates whose +/- eps evaluations land on different ReLU pieces;
    // central differences are meaningless there.
    std::size_t skipped = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor).
inline constexpr double kGradCheckFloor = 1e-6;

// Value, gradient and (optional) piece signature of a scalar function.
struct Evaluation {
    double value = 0.0;
    std::vector<double> gradient;
    std::vector<std::uint8_t> piece;
};

using Objective = std::function<Evaluation(std::span<const double> x, bool want_gradient)>;

GradCheckResult grad_check(const Objective& f, std::span<const double> x, double eps);

GradCheckResult grad_check(const AANet& model, const AggregationWeights& alphas,
                           const Batch& batch, GradGroup which, double eps);

}  // namespace aanet
