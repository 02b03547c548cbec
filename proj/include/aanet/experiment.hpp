#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aanet/backbone.hpp"
#include "aanet/dataset.hpp"
#include "aanet/protocol.hpp"
#include "aanet/trainer.hpp"

namespace aanet {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kRecordSchemaVersion = 1;

enum class DatasetKind { Cifar10File, Synthetic };

struct DatasetConfig {
    DatasetKind kind = DatasetKind::Synthetic;
    SyntheticSpec synthetic;
    std::string cifar_path;
    std::size_t max_train_per_class = 0;
    bool operator==(const DatasetConfig&) const = default;
};

struct ExperimentConfig {
    std::string name = "experiment";
    DatasetConfig dataset;
    ArchConfig arch;
    ProtocolConfig protocol;
    std::vector<int> phase_settings{5};  // N values, one comparison column each
    TrainerConfig trainer;
    std::vector<std::string> branch_matrix{"single-all", "all+scaling"};
    std::uint64_t base_seed = 0;
    std::string output_dir = "out";

    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

// Accepted names: all+all, all+scaling, all+frozen, scaling+frozen,
// scaling+scaling, single-all, single-scaling.
BranchConfig parse_branch_setting(const std::string& name);

ExperimentConfig parse_config(const std::string& text);
std::string serialize_config(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

Dataset load_dataset(const DatasetConfig& cfg);

struct Job {
    std::string config;  // branch_matrix entry
    int n_phases = 0;
    std::uint64_t seed = 0;
    std::string id() const;  // "<config>__N<n>__seed<s>"
};

std::vector<Job> plan_jobs(const ExperimentConfig& cfg, int seeds);

struct CliOptions {
    std::optional<int> seeds;
    int jobs = 1;
    bool dry_run = false;
    bool strict_memory = false;
    std::optional<std::string> out_dir;
};

// Applies CLI flags and the AANETS_SEED environment override.
ExperimentConfig apply_overrides(ExperimentConfig cfg, const CliOptions& opts);

// Runs every planned job and writes:
//   runs/<job>.jsonl         phase records + summary record (or runs/<job>.error.json)
//   checkpoints/<job>/phase<i>.ckpt
//   metrics.csv              one row per (config, N, seed, phase)
//   alpha_table.csv          one row per (config, N, seed, phase, epoch, level)
//   comparison.csv / .md     rows = configurations, columns = N settings
// Returns a process exit code.
int run_experiment(const std::filesystem::path& config_path, const CliOptions& opts,
                   std::ostream& log);

// Structured records.
nlohmann::json phase_record(const RunSummary& s, const PhaseReport& r);
nlohmann::json summary_record(const RunSummary& s);
std::string run_records_jsonl(const RunSummary& s);
RunSummary read_run_records(const std::filesystem::path& path);

struct RunRecord {
    std::string config;
    bool dual = false;
    RunSummary summary;
    AlphaTrajectory alphas;
};

std::string metrics_csv(const std::vector<RunRecord>& runs);

// Throws DataError when a dual-branch run has no trajectory.
std::string emit_alpha_table(const std::vector<RunRecord>& runs);

struct ComparisonCell {
    std::string config;
    int n_phases = 0;
    std::size_t runs = 0;
    double avg_mean = 0.0;
    double avg_half_width = 0.0;  // NaN with a single run
    double last_mean = 0.0;
    double last_half_width = 0.0;
};

std::vector<ComparisonCell> comparison_table(const std::vector<RunSummary>& summaries,
                                             const std::vector<std::string>& config_order);
std::string comparison_csv(const std::vector<ComparisonCell>& cells);
std::string comparison_markdown(const std::vector<ComparisonCell>& cells);

// Rebuilds the comparison table from runs/*.jsonl under `out_dir`.
std::vector<ComparisonCell> report(const std::filesystem::path& out_dir, std::ostream& log);

// A two-level toy network (< 10k scalars) in the all+scaling configuration,
// with perturbed parameters, random alphas, and a small random batch.
struct GradcheckSetup {
    AANet model;
    AggregationWeights alphas;
    Batch batch;
};

GradcheckSetup make_gradcheck_setup(std::uint64_t seed);

}  // namespace aanet
