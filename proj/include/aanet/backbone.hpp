#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aanet/rng.hpp"
#include "aanet/tensor.hpp"

namespace aanet {

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

// One residual level: an entry convolution (changes width / stride) followed
// by `blocks` pre-activation residual blocks of two convolutions each.
struct LevelArch {
    int out_channels = 8;
    int stride = 1;
    int blocks = 1;
    bool operator==(const LevelArch&) const = default;
};

struct ArchConfig {
    int in_channels = 3;
    int image_size = 8;
    int stem_channels = 8;
    int kernel = 3;
    std::vector<LevelArch> levels{{8, 1, 1}, {16, 2, 1}, {32, 2, 1}};

    void validate() const;
    std::string tag() const;
    int embed_dim() const { return levels.back().out_channels; }
    ConvGeometry stem_geometry() const;
    // Geometries of the convolutions of level `level` (0-based), in
    // evaluation order: entry, then (a, b) per block.
    std::vector<ConvGeometry> level_geometries(int level) const;
    bool operator==(const ArchConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ConvLayer {
    ConvGeometry geometry;
    std::vector<double> weight;  // [out][in][k][k]
    std::vector<double> bias;    // [out]

    static ConvLayer zeros(const ConvGeometry& g);
    std::size_t param_count() const { return weight.size() + bias.size(); }
    bool operator==(const ConvLayer&) const = default;
};

using LevelParams = std::vector<ConvLayer>;

// The phase-0 network, frozen as the substrate of Scaling and Frozen
// branches. Shared read-only between phases via shared_ptr<const>.
struct BaseBackbone {
    std::string arch_tag;
    ConvLayer stem;
    std::vector<LevelParams> levels;
    int embed_dim = 0;

    std::size_t level_param_count() const;
    bool operator==(const BaseBackbone&) const = default;
};

enum class BranchKind { All, Scaling, Frozen };

std::string_view to_string(BranchKind kind);
BranchKind parse_branch_kind(std::string_view text);

// Learnable state of one branch at one level.
//   All     -> eta: full copy of the level's convolutions
//   Scaling -> phi: one scalar per output filter per layer, applied to θ_base
//   Frozen  -> nothing; evaluates θ_base verbatim
struct Branch {
    BranchKind kind = BranchKind::Frozen;
    LevelParams eta;
    std::vector<std::vector<double>> phi;

    static Branch make(BranchKind kind, const LevelParams& base_level);
    std::size_t learnable_count() const;
    bool operator==(const Branch&) const = default;
};

// Single-branch models (the phase-0 network and the baseline) leave `stable`
// empty and use `plastic` as their only branch.
struct LevelSpec {
    int level_index = 1;  // 1-based
    Branch plastic;
    std::optional<Branch> stable;
    bool operator==(const LevelSpec&) const = default;
};

struct AlphaPair {
    double stable = 0.5;
    double plastic = 0.5;
    bool operator==(const AlphaPair&) const = default;
};

struct AggregationWeights {
    std::vector<AlphaPair> per_level;

    static AggregationWeights uniform(std::size_t levels);
    // Throws NumericError unless every pair is in [0,1]^2 and sums to 1
    // within `tol`.
    void validate(double tol = 1e-9) const;
    bool operator==(const AggregationWeights&) const = default;
};

struct ClassifierHead {
    int embed_dim = 0;
    int num_classes = 0;
    std::vector<double> weight;  // [num_classes][embed_dim]
    std::vector<double> bias;    // [num_classes]

    static ClassifierHead empty(int embed_dim);
    bool operator==(const ClassifierHead&) const = default;
};

// Appends `new_classes` zero-initialized rows; existing rows are copied.
ClassifierHead extend_head(const ClassifierHead& head, int new_classes);

struct AANet {
    ArchConfig arch;
    std::shared_ptr<const BaseBackbone> base;  // null before phase 0 ends
    ConvLayer stem;
    std::vector<LevelSpec> levels;
    ClassifierHead head;

    bool dual() const;
    std::size_t learnable_count() const;
    // Scalars that must be kept in memory to run the model: learnable
    // parameters plus the θ_base levels referenced by Scaling/Frozen branches.
    std::size_t stored_count() const;
    void validate() const;
};

// Fresh single-branch network (He-initialized convolutions, empty head).
AANet make_single_branch(const ArchConfig& arch, Rng& rng);

// Freezes the convolutional part of a single-branch All network.
std::shared_ptr<const BaseBackbone> freeze_as_base(const AANet& model);

// Per-level choice of branch kinds. `stable` empty means single-branch.
struct BranchConfig {
    BranchKind plastic = BranchKind::All;
    std::optional<BranchKind> stable = BranchKind::Scaling;
    bool operator==(const BranchConfig&) const = default;
    std::string name() const;
};

// Builds an incremental-phase model around θ_base: All branches copy it,
// Scaling branches start at ones. Stem and head are copied from `prev`.
AANet make_incremental(const AANet& prev,
                       std::shared_ptr<const BaseBackbone> base,
                       std::span<const BranchConfig> level_kinds);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct LayerRef {
    int level = 0;  // 1-based, 0 = stem
    int layer = 0;
};

// Convolution of `x` with every filter r of `layer` multiplied by phi[r];
// the bias is not scaled. Returns the pre-activation map.
Tensor scaled_forward(const ConvLayer& layer, std::span<const double> phi,
                      const Tensor& x, LayerRef where = {});

struct LevelOutputs {
    Tensor stable;
    Tensor plastic;
};

// Evaluates both branches of a dual level on the same input.
LevelOutputs level_forward(const LevelSpec& spec, const LevelParams* base_level,
                           const Tensor& x);

// Evaluates a single branch of a level.
Tensor branch_forward(const Branch& branch, const LevelParams* base_level,
                      const Tensor& x, int level_index);

Tensor aggregate(const Tensor& stable, const Tensor& plastic, AlphaPair alphas);

struct ForwardOutput {
    int batch = 0;
    int num_classes = 0;
    std::vector<double> logits;      // [batch][num_classes]
    std::vector<double> embeddings;  // [batch][embed_dim]
};

ForwardOutput network_forward(const AANet& model, const AggregationWeights& alphas,
                              const Tensor& batch);

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

enum class ParamGroup { Stem, Eta, Phi, Head };

std::string_view to_string(ParamGroup group);

template <typename T>
struct BasicParamView {
    std::string name;
    ParamGroup group;
    std::span<T> values;
};
using ParamView = BasicParamView<double>;
using ConstParamView = BasicParamView<const double>;

// Learnable tensors in a fixed order. Names follow
// "level<k>/<plastic|stable>/layer<q>/<weight|bias|phi>", "stem/...", "head/...".
std::vector<ParamView> parameters(AANet& model);
std::vector<ConstParamView> parameters(const AANet& model);

// Model-shaped container for d(loss)/d(parameters) plus d(loss)/d(alpha).
struct Gradients {
    AANet params;
    std::vector<AlphaPair> alpha;
};

Gradients zero_gradients(const AANet& model);

struct LossOptions {
    // When set, receives one byte per ReLU input (1 if positive); two
    // evaluations with equal patterns lie on the same linear piece.
    std::vector<std::uint8_t>* relu_pattern = nullptr;
};

// Mean softmax cross-entropy over the batch. When `grads` is non-null it is
// overwritten with the gradient of that loss.
double loss_and_gradients(const AANet& model, const AggregationWeights& alphas,
                          const Tensor& batch, std::span<const int> labels,
                          Gradients* grads, const LossOptions& opts = {});

}  // namespace aanet
