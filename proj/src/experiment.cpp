#include "aanet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "aanet/archive.hpp"
#include "aanet/checkpoint.hpp"
#include "aanet/errors.hpp"

namespace aanet {

using nlohmann::json;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const std::set<std::string> kBranchSettings = {"all+all",         "all+scaling",     "all+frozen",
                                               "scaling+frozen",  "scaling+scaling", "single-all",
                                               "single-scaling"};

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (allowed.count(key) == 0) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

BranchConfig parse_branch_setting(const std::string& name) {
    if (name.find("4x") != std::string::npos || name.find("4×") != std::string::npos) {
        throw ConfigError("branch setting '" + name + "': 4x-width variants are not supported");
    }
    if (kBranchSettings.count(name) == 0) {
        throw ConfigError("branch setting '" + name +
                          "' is not one of all+all, all+scaling, all+frozen, scaling+frozen, "
                          "scaling+scaling, single-all, single-scaling");
    }
    if (name.rfind("single-", 0) == 0) {
        return BranchConfig{parse_branch_kind(name.substr(7)), std::nullopt};
    }
    const auto plus = name.find('+');
    return BranchConfig{parse_branch_kind(name.substr(0, plus)),
                        parse_branch_kind(name.substr(plus + 1))};
}

void ExperimentConfig::validate() const {
    if (name.empty()) throw ConfigError("config: name must not be empty");
    arch.validate();
    trainer.validate();
    if (trainer.epochs <= 0) throw ConfigError("trainer: epochs must be positive");
    // gamma2 = 0 keeps alpha at its 0.5 initialization (fixed-weight ablation).
    if (!(trainer.gamma1 > 0.0)) throw ConfigError("trainer: gamma1 must be strictly positive");
    if (phase_settings.empty()) throw ConfigError("protocol: at least one N setting is required");
    for (int n : phase_settings) {
        ProtocolConfig p = protocol;
        p.n_phases = n;
        p.validate();
    }
    if (branch_matrix.empty()) throw ConfigError("branch_matrix must not be empty");
    std::set<std::string> seen;
    for (const std::string& b : branch_matrix) {
        const BranchConfig bc = parse_branch_setting(b);
        if (!seen.insert(b).second) throw ConfigError("branch_matrix lists '" + b + "' twice");
        if (protocol.update_base && (!bc.stable || *bc.stable != BranchKind::Scaling)) {
            throw ConfigError("update_base requires scaling stable branches; '" + b + "' has none");
        }
    }
    if (dataset.kind == DatasetKind::Synthetic) {
        dataset.synthetic.validate();
        if (dataset.synthetic.num_classes != protocol.total_classes) {
            throw ConfigError("synthetic num_classes must equal protocol.total_classes");
        }
        if (dataset.synthetic.image_size != arch.image_size ||
            dataset.synthetic.channels != arch.in_channels) {
            throw ConfigError("synthetic image shape must match arch input");
        }
    } else {
        if (dataset.cifar_path.empty()) throw ConfigError("cifar10-file dataset needs a path");
        if (arch.image_size != 32 || arch.in_channels != 3) {
            throw ConfigError("CIFAR input is 3x32x32; set arch.image_size = 32");
        }
    }
}

ExperimentConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j, {"schema_version", "name", "dataset", "arch", "protocol", "trainer",
                   "branch_matrix", "base_seed", "output_dir"},
               "config");
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kConfigSchemaVersion) {
        throw ConfigError("config: schema_version must be " + std::to_string(kConfigSchemaVersion));
    }
    ExperimentConfig c;
    try {
        read_opt(j, "name", c.name);
        read_opt(j, "base_seed", c.base_seed);
        read_opt(j, "output_dir", c.output_dir);
        if (j.contains("branch_matrix")) c.branch_matrix = j.at("branch_matrix").get<std::vector<std::string>>();

        if (j.contains("dataset")) {
            const json& d = j.at("dataset");
            check_keys(d, {"kind", "synthetic", "path", "max_train_per_class"}, "dataset");
            const std::string kind = d.value("kind", "synthetic");
            if (kind == "synthetic") {
                c.dataset.kind = DatasetKind::Synthetic;
            } else if (kind == "cifar10-file") {
                c.dataset.kind = DatasetKind::Cifar10File;
            } else {
                throw ConfigError("dataset.kind must be 'synthetic' or 'cifar10-file'");
            }
            read_opt(d, "path", c.dataset.cifar_path);
            read_opt(d, "max_train_per_class", c.dataset.max_train_per_class);
            if (d.contains("synthetic")) {
                const json& s = d.at("synthetic");
                check_keys(s, {"num_classes", "train_per_class", "test_per_class", "image_size",
                               "channels", "separation", "noise", "seed"},
                           "dataset.synthetic");
                SyntheticSpec& sp = c.dataset.synthetic;
                read_opt(s, "num_classes", sp.num_classes);
                read_opt(s, "train_per_class", sp.train_per_class);
                read_opt(s, "test_per_class", sp.test_per_class);
                read_opt(s, "image_size", sp.image_size);
                read_opt(s, "channels", sp.channels);
                read_opt(s, "separation", sp.separation);
                read_opt(s, "noise", sp.noise);
                read_opt(s, "seed", sp.seed);
            }
        }
        if (j.contains("arch")) {
            const json& a = j.at("arch");
            check_keys(a, {"in_channels", "image_size", "stem_channels", "kernel", "levels"}, "arch");
            read_opt(a, "in_channels", c.arch.in_channels);
            read_opt(a, "image_size", c.arch.image_size);
            read_opt(a, "stem_channels", c.arch.stem_channels);
            read_opt(a, "kernel", c.arch.kernel);
            if (a.contains("levels")) {
                c.arch.levels.clear();
                for (const json& l : a.at("levels")) {
                    check_keys(l, {"out_channels", "stride", "blocks"}, "arch.levels[]");
                    LevelArch la;
                    read_opt(l, "out_channels", la.out_channels);
                    read_opt(l, "stride", la.stride);
                    read_opt(l, "blocks", la.blocks);
                    c.arch.levels.push_back(la);
                }
            }
        }
        if (j.contains("protocol")) {
            const json& p = j.at("protocol");
            check_keys(p, {"total_classes", "n_phases", "split_mode", "runs", "per_class_quota",
                           "strict_memory", "update_base", "class_order_seed", "selection",
                           "budget_extra_params"},
                       "protocol");
            ProtocolConfig& pc = c.protocol;
            read_opt(p, "total_classes", pc.total_classes);
            read_opt(p, "runs", pc.runs);
            read_opt(p, "per_class_quota", pc.per_class_quota);
            read_opt(p, "strict_memory", pc.strict_memory);
            read_opt(p, "update_base", pc.update_base);
            read_opt(p, "class_order_seed", pc.class_order_seed);
            read_opt(p, "budget_extra_params", pc.budget_extra_params);
            if (p.contains("split_mode")) pc.split_mode = parse_split_mode(p.at("split_mode").get<std::string>());
            if (p.contains("selection")) pc.selection = parse_selection_method(p.at("selection").get<std::string>());
            if (p.contains("n_phases")) {
                const json& n = p.at("n_phases");
                c.phase_settings = n.is_array() ? n.get<std::vector<int>>() : std::vector<int>{n.get<int>()};
            }
            if (!c.phase_settings.empty()) pc.n_phases = c.phase_settings.front();
        }
        if (j.contains("trainer")) {
            const json& t = j.at("trainer");
            check_keys(t, {"gamma1", "gamma2", "momentum", "batch_size", "epochs", "lr_schedule",
                              "freeze_stem"},
                       "trainer");
            TrainerConfig& tc = c.trainer;
            read_opt(t, "gamma1", tc.gamma1);
            read_opt(t, "gamma2", tc.gamma2);
            read_opt(t, "momentum", tc.momentum);
            read_opt(t, "batch_size", tc.batch_size);
            read_opt(t, "epochs", tc.epochs);
            read_opt(t, "freeze_stem", tc.freeze_stem);
            if (t.contains("lr_schedule")) {
                tc.lr_schedule.clear();
                for (const json& s : t.at("lr_schedule")) {
                    tc.lr_schedule.push_back(LrStep{s.at("epoch").get<int>(), s.at("divisor").get<double>()});
                }
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string serialize_config(const ExperimentConfig& c) {
    json levels = json::array();
    for (const LevelArch& l : c.arch.levels) {
        levels.push_back({{"out_channels", l.out_channels}, {"stride", l.stride}, {"blocks", l.blocks}});
    }
    json schedule = json::array();
    for (const LrStep& s : c.trainer.lr_schedule) {
        schedule.push_back({{"epoch", s.epoch}, {"divisor", s.divisor}});
    }
    const SyntheticSpec& sp = c.dataset.synthetic;
    json dataset = {{"kind", c.dataset.kind == DatasetKind::Synthetic ? "synthetic" : "cifar10-file"},
                    {"path", c.dataset.cifar_path},
                    {"max_train_per_class", c.dataset.max_train_per_class},
                    {"synthetic",
                     {{"num_classes", sp.num_classes},
                      {"train_per_class", sp.train_per_class},
                      {"test_per_class", sp.test_per_class},
                      {"image_size", sp.image_size},
                      {"channels", sp.channels},
                      {"separation", sp.separation},
                      {"noise", sp.noise},
                      {"seed", sp.seed}}}};
    const ProtocolConfig& p = c.protocol;
    json j = {{"schema_version", kConfigSchemaVersion},
              {"name", c.name},
              {"dataset", dataset},
              {"arch",
               {{"in_channels", c.arch.in_channels},
                {"image_size", c.arch.image_size},
                {"stem_channels", c.arch.stem_channels},
                {"kernel", c.arch.kernel},
                {"levels", levels}}},
              {"protocol",
               {{"total_classes", p.total_classes},
                {"n_phases", c.phase_settings},
                {"split_mode", std::string(to_string(p.split_mode))},
                {"runs", p.runs},
                {"per_class_quota", p.per_class_quota},
                {"strict_memory", p.strict_memory},
                {"update_base", p.update_base},
                {"class_order_seed", p.class_order_seed},
                {"selection", std::string(to_string(p.selection))},
                {"budget_extra_params", p.budget_extra_params}}},
              {"trainer",
               {{"gamma1", c.trainer.gamma1},
                {"gamma2", c.trainer.gamma2},
                {"momentum", c.trainer.momentum},
                {"batch_size", c.trainer.batch_size},
                {"epochs", c.trainer.epochs},
                {"freeze_stem", c.trainer.freeze_stem},
                {"lr_schedule", schedule}}},
              {"branch_matrix", c.branch_matrix},
              {"base_seed", c.base_seed},
              {"output_dir", c.output_dir}};
    return j.dump(2) + "\n";
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_file(path));
}

Dataset load_dataset(const DatasetConfig& cfg) {
    if (cfg.kind == DatasetKind::Synthetic) return gen_synthetic(cfg.synthetic);
    return load_cifar_binary(cfg.cifar_path, 10, cfg.max_train_per_class);
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

std::string Job::id() const {
    return config + "__N" + std::to_string(n_phases) + "__seed" + std::to_string(seed);
}

std::vector<Job> plan_jobs(const ExperimentConfig& cfg, int seeds) {
    if (seeds < 1) throw ArgumentError("--seeds must be >= 1");
    std::vector<Job> jobs;
    for (const std::string& b : cfg.branch_matrix)
        for (int n : cfg.phase_settings)
            for (int s = 0; s < seeds; ++s)
                jobs.push_back(Job{b, n, cfg.base_seed + static_cast<std::uint64_t>(s)});
    return jobs;
}

ExperimentConfig apply_overrides(ExperimentConfig cfg, const CliOptions& opts) {
    if (const char* env = std::getenv("AANETS_SEED"); env != nullptr && *env != '\0') {
        try {
            cfg.base_seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("AANETS_SEED must be a non-negative integer");
        }
    }
    if (opts.seeds) cfg.protocol.runs = *opts.seeds;
    if (opts.strict_memory) cfg.protocol.strict_memory = true;
    if (opts.out_dir) cfg.output_dir = *opts.out_dir;
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

json phase_record(const RunSummary& s, const PhaseReport& r) {
    json groups = json::object();
    for (const auto& [g, acc] : r.per_group_accuracy) groups[std::to_string(g)] = acc;
    json alphas = json::array();
    for (const AlphaPair& a : r.alpha_snapshot.per_level) alphas.push_back({a.stable, a.plastic});
    return {{"record", "phase"},
            {"schema", kRecordSchemaVersion},
            {"config", s.config_name},
            {"n_phases", s.n_phases},
            {"seed", s.seed},
            {"phase", r.phase_index},
            {"seen_classes", r.seen_classes},
            {"test_accuracy", r.test_accuracy},
            {"per_group_accuracy", groups},
            {"alpha", alphas},
            {"param_count", r.param_count},
            {"memory_bytes", r.memory_bytes},
            {"exemplar_quota", r.exemplar_quota},
            {"test_samples", r.test_samples},
            {"wall_time_s", r.wall_time_s}};
}

json summary_record(const RunSummary& s) {
    return {{"record", "summary"},
            {"schema", kRecordSchemaVersion},
            {"config", s.config_name},
            {"n_phases", s.n_phases},
            {"seed", s.seed},
            {"phases", s.per_phase.size()},
            {"average_incremental_accuracy", s.average_incremental_accuracy},
            {"last_phase_accuracy", s.last_phase_accuracy}};
}

std::string run_records_jsonl(const RunSummary& s) {
    std::string out;
    for (const PhaseReport& r : s.per_phase) out += phase_record(s, r).dump() + "\n";
    out += summary_record(s).dump() + "\n";
    return out;
}

RunSummary read_run_records(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    RunSummary s;
    std::string line;
    bool have_summary = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (j.value("schema", 0) != kRecordSchemaVersion) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": unsupported schema");
        }
        s.config_name = j.at("config").get<std::string>();
        s.n_phases = j.at("n_phases").get<int>();
        s.seed = j.at("seed").get<std::uint64_t>();
        if (j.at("record") == "phase") {
            PhaseReport r;
            r.phase_index = j.at("phase").get<int>();
            r.seen_classes = j.at("seen_classes").get<int>();
            r.test_accuracy = j.at("test_accuracy").get<double>();
            for (const auto& [g, acc] : j.at("per_group_accuracy").items()) {
                r.per_group_accuracy[std::stoi(g)] = acc.get<double>();
            }
            for (const json& a : j.at("alpha")) {
                r.alpha_snapshot.per_level.push_back(AlphaPair{a.at(0).get<double>(), a.at(1).get<double>()});
            }
            r.param_count = j.at("param_count").get<std::int64_t>();
            r.memory_bytes = j.at("memory_bytes").get<std::int64_t>();
            r.exemplar_quota = j.at("exemplar_quota").get<int>();
            r.test_samples = j.at("test_samples").get<std::int64_t>();
            r.wall_time_s = j.at("wall_time_s").get<double>();
            s.per_phase.push_back(std::move(r));
        } else if (j.at("record") == "summary") {
            have_summary = true;
            s.average_incremental_accuracy = j.at("average_incremental_accuracy").get<double>();
            s.last_phase_accuracy = j.at("last_phase_accuracy").get<double>();
        }
    }
    if (!have_summary) throw FormatError(path.string() + ": missing summary record");
    return s;
}

std::string metrics_csv(const std::vector<RunRecord>& runs) {
    std::ostringstream os;
    os << "config,n_phases,seed,phase,seen_classes,test_accuracy,old_class_accuracy,"
          "param_count,memory_bytes,exemplar_quota,average_incremental_accuracy\n";
    for (const RunRecord& run : runs) {
        const RunSummary& s = run.summary;
        for (const PhaseReport& r : s.per_phase) {
            const auto g0 = r.per_group_accuracy.find(0);
            os << run.config << ',' << s.n_phases << ',' << s.seed << ',' << r.phase_index << ','
               << r.seen_classes << ',' << fmt(r.test_accuracy) << ','
               << fmt(g0 == r.per_group_accuracy.end() ? 0.0 : g0->second) << ',' << r.param_count
               << ',' << r.memory_bytes << ',' << r.exemplar_quota << ','
               << fmt(s.average_incremental_accuracy) << '\n';
        }
    }
    return os.str();
}

std::string emit_alpha_table(const std::vector<RunRecord>& runs) {
    std::ostringstream os;
    os << "config,n_phases,seed,phase,epoch,level,alpha_stable,alpha_plastic\n";
    for (const RunRecord& run : runs) {
        if (!run.dual) continue;
        if (run.alphas.empty()) {
            throw DataError("emit_alpha_table: run " + run.config + " seed " +
                            std::to_string(run.summary.seed) + " has no alpha trajectory");
        }
        for (const AlphaRecord& a : run.alphas) {
            os << run.config << ',' << run.summary.n_phases << ',' << run.summary.seed << ','
               << a.phase << ',' << a.epoch << ',' << a.level << ',' << fmt(a.alpha_stable) << ','
               << fmt(a.alpha_plastic) << '\n';
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Comparison table
// ---------------------------------------------------------------------------

std::vector<ComparisonCell> comparison_table(const std::vector<RunSummary>& summaries,
                                             const std::vector<std::string>& config_order) {
    std::map<std::pair<std::string, int>, std::vector<RunSummary>> groups;
    for (const RunSummary& s : summaries) groups[{s.config_name, s.n_phases}].push_back(s);
    std::vector<std::string> order = config_order;
    for (const auto& [key, runs] : groups) {
        if (std::find(order.begin(), order.end(), key.first) == order.end()) order.push_back(key.first);
    }
    std::vector<ComparisonCell> cells;
    for (const std::string& cfg : order) {
        for (auto& [key, runs] : groups) {
            if (key.first != cfg) continue;
            std::sort(runs.begin(), runs.end(),
                      [](const RunSummary& a, const RunSummary& b) { return a.seed < b.seed; });
            ComparisonCell c;
            c.config = cfg;
            c.n_phases = key.second;
            c.runs = runs.size();
            if (runs.size() >= 2) {
                const auto agg = aggregate_runs(runs);
                c.avg_mean = agg.at("average_incremental_accuracy").mean;
                c.avg_half_width = agg.at("average_incremental_accuracy").half_width;
                c.last_mean = agg.at("last_phase_accuracy").mean;
                c.last_half_width = agg.at("last_phase_accuracy").half_width;
            } else {
                c.avg_mean = runs.front().average_incremental_accuracy;
                c.last_mean = runs.front().last_phase_accuracy;
                c.avg_half_width = std::nan("");
                c.last_half_width = std::nan("");
            }
            cells.push_back(c);
        }
    }
    return cells;
}

std::string comparison_csv(const std::vector<ComparisonCell>& cells) {
    std::ostringstream os;
    os << "config,n_phases,runs,avg_acc_mean,avg_acc_ci95,last_acc_mean,last_acc_ci95\n";
    for (const ComparisonCell& c : cells) {
        os << c.config << ',' << c.n_phases << ',' << c.runs << ',' << fmt(c.avg_mean) << ','
           << fmt(c.avg_half_width) << ',' << fmt(c.last_mean) << ',' << fmt(c.last_half_width) << '\n';
    }
    return os.str();
}

std::string comparison_markdown(const std::vector<ComparisonCell>& cells) {
    std::vector<int> ns;
    std::vector<std::string> configs;
    for (const ComparisonCell& c : cells) {
        if (std::find(ns.begin(), ns.end(), c.n_phases) == ns.end()) ns.push_back(c.n_phases);
        if (std::find(configs.begin(), configs.end(), c.config) == configs.end()) configs.push_back(c.config);
    }
    std::sort(ns.begin(), ns.end());
    std::ostringstream os;
    os << "| Setting |";
    for (int n : ns) os << " N=" << n << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < ns.size(); ++i) os << "---|";
    os << "\n";
    for (const std::string& cfg : configs) {
        os << "| " << cfg << " |";
        for (int n : ns) {
            auto it = std::find_if(cells.begin(), cells.end(), [&](const ComparisonCell& c) {
                return c.config == cfg && c.n_phases == n;
            });
            if (it == cells.end()) {
                os << " - |";
                continue;
            }
            char buf[64];
            if (std::isnan(it->avg_half_width)) {
                std::snprintf(buf, sizeof(buf), " %.2f |", 100.0 * it->avg_mean);
            } else {
                std::snprintf(buf, sizeof(buf), " %.2f ± %.2f |", 100.0 * it->avg_mean,
                              100.0 * it->avg_half_width);
            }
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

std::vector<ComparisonCell> report(const std::filesystem::path& out_dir, std::ostream& log) {
    const auto runs_dir = out_dir / "runs";
    if (!std::filesystem::is_directory(runs_dir)) {
        throw DataError("report: no runs directory under " + out_dir.string());
    }
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(runs_dir)) {
        if (e.path().extension() == ".jsonl") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<RunSummary> summaries;
    for (const auto& f : files) summaries.push_back(read_run_records(f));

    std::vector<std::string> order;
    const auto plan = out_dir / "plan.json";
    if (std::filesystem::exists(plan)) {
        const json p = json::parse(read_file(plan));
        order = p.at("branch_matrix").get<std::vector<std::string>>();
    }
    const auto cells = comparison_table(summaries, order);
    write_file_atomic(out_dir / "comparison.csv", comparison_csv(cells));
    write_file_atomic(out_dir / "comparison.md", comparison_markdown(cells));
    log << comparison_markdown(cells);
    return cells;
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

int run_experiment(const std::filesystem::path& config_path, const CliOptions& opts,
                   std::ostream& log) {
    const ExperimentConfig cfg = apply_overrides(load_config(config_path), opts);
    const std::vector<Job> jobs = plan_jobs(cfg, cfg.protocol.runs);

    log << "experiment " << cfg.name << ": " << cfg.branch_matrix.size() << " configurations x "
        << cfg.phase_settings.size() << " N settings x " << cfg.protocol.runs << " seeds = "
        << jobs.size() << " runs\n";
    for (const Job& j : jobs) log << "  " << j.id() << "\n";
    if (opts.dry_run) return 0;

    const std::filesystem::path out = cfg.output_dir;
    std::filesystem::create_directories(out / "runs");
    write_file_atomic(out / "config.json", serialize_config(cfg));
    {
        json plan = {{"schema", kRecordSchemaVersion},
                     {"branch_matrix", cfg.branch_matrix},
                     {"phase_settings", cfg.phase_settings},
                     {"jobs", json::array()}};
        for (const Job& j : jobs) plan["jobs"].push_back(j.id());
        write_file_atomic(out / "plan.json", plan.dump(2) + "\n");
    }

    const Dataset data = load_dataset(cfg.dataset);
    std::vector<std::optional<RunRecord>> results(jobs.size());
    std::vector<std::string> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;

    auto worker = [&]() {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            const Job& job = jobs[i];
            const BranchConfig branches = parse_branch_setting(job.config);
            ProtocolConfig pc = cfg.protocol;
            pc.n_phases = job.n_phases;
            RunOptions ro;
            ro.config_name = job.config;
            ro.seed = job.seed;
            const auto ckpt_dir = out / "checkpoints" / job.id();
            ro.on_phase_end = [&](const PhaseState& st, const ExemplarStore&) {
                save_checkpoint(Checkpoint{st.phase_index, st.model, st.alphas},
                                ckpt_dir / ("phase" + std::to_string(st.phase_index) + ".ckpt"));
            };
            try {
                RunOutcome o = run_protocol(pc, data, cfg.trainer, cfg.arch, branches, ro);
                write_file_atomic(out / "runs" / (job.id() + ".jsonl"), run_records_jsonl(o.summary));
                results[i] = RunRecord{job.config, branches.stable.has_value(), o.summary, o.alphas};
                std::lock_guard lock(log_mutex);
                log << "done " << job.id() << ": avg acc " << fmt(o.summary.average_incremental_accuracy)
                    << ", last " << fmt(o.summary.last_phase_accuracy) << "\n";
            } catch (const Error& e) {
                json rec = {{"record", "error"}, {"schema", kRecordSchemaVersion}, {"job", job.id()},
                            {"kind", e.kind()}, {"message", e.what()}, {"partial", json::array()}};
                if (const auto* rf = dynamic_cast<const RunFailure*>(&e)) {
                    for (const PhaseReport& r : rf->partial().per_phase) {
                        rec["partial"].push_back(phase_record(rf->partial(), r));
                    }
                }
                write_file_atomic(out / "runs" / (job.id() + ".error.json"), rec.dump(2) + "\n");
                errors[i] = e.what();
                std::lock_guard lock(log_mutex);
                log << "FAILED " << job.id() << ": " << e.what() << "\n";
            }
        }
    };
    const int nthreads = std::max(1, std::min<int>(opts.jobs, static_cast<int>(jobs.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();

    std::vector<RunRecord> done;
    for (auto& r : results)
        if (r) done.push_back(*r);
    write_file_atomic(out / "metrics.csv", metrics_csv(done));
    write_file_atomic(out / "alpha_table.csv", emit_alpha_table(done));
    std::vector<RunSummary> summaries;
    for (const RunRecord& r : done) summaries.push_back(r.summary);
    const auto cells = comparison_table(summaries, cfg.branch_matrix);
    write_file_atomic(out / "comparison.csv", comparison_csv(cells));
    write_file_atomic(out / "comparison.md", comparison_markdown(cells));
    log << comparison_markdown(cells);

    const bool failed = std::any_of(errors.begin(), errors.end(), [](const std::string& e) { return !e.empty(); });
    return failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Gradient-check toy
// ---------------------------------------------------------------------------

GradcheckSetup make_gradcheck_setup(std::uint64_t seed) {
    ArchConfig arch;
    arch.in_channels = 2;
    arch.image_size = 5;
    arch.stem_channels = 3;
    arch.kernel = 3;
    arch.levels = {{3, 1, 1}, {4, 2, 1}};
    Rng rng(seed);
    AANet single = make_single_branch(arch, rng);
    single.head = extend_head(single.head, 3);
    for (double& w : single.head.weight) w = rng.normal();
    for (double& b : single.head.bias) b = 0.1 * rng.normal();
    for (double& b : single.stem.bias) b = 0.1 * rng.normal();
    for (LevelSpec& l : single.levels)
        for (ConvLayer& layer : l.plastic.eta)
            for (double& b : layer.bias) b = 0.1 * rng.normal();
    const auto base = freeze_as_base(single);
    const std::vector<BranchConfig> kinds(arch.levels.size(), BranchConfig{BranchKind::All, BranchKind::Scaling});
    GradcheckSetup s;
    s.model = make_incremental(single, base, kinds);
    // Move away from the initialization so phi != 1 and eta != θ_base.
    for (LevelSpec& l : s.model.levels) {
        for (auto& phi : l.stable->phi)
            for (double& v : phi) v = rng.uniform(0.5, 1.5);
        for (ConvLayer& layer : l.plastic.eta)
            for (double& w : layer.weight) w += 0.2 * rng.normal();
    }
    for (std::size_t k = 0; k < arch.levels.size(); ++k) {
        const double a = rng.uniform(0.2, 0.8);
        s.alphas.per_level.push_back(AlphaPair{a, 1.0 - a});
    }
    std::vector<Sample> samples;
    const ImageShape shape{arch.in_channels, arch.image_size, arch.image_size};
    for (int i = 0; i < 4; ++i) {
        Sample smp;
        smp.label = i % 3;
        smp.pixels.resize(shape.size());
        for (float& p : smp.pixels) p = static_cast<float>(rng.normal());
        samples.push_back(std::move(smp));
    }
    s.batch = make_batch(samples, shape, Origin::Exemplar);
    return s;
}

}  // namespace aanet
