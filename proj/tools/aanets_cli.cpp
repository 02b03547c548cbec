// aanets: run class-incremental experiments with adaptive aggregation networks.
//
//   aanets run --config exp.json [--seeds K] [--jobs J] [--dry-run] [--strict-memory] [--out DIR]
//   aanets validate --config exp.json
//   aanets report --out DIR
//   aanets gradcheck [--seed S]

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "aanet/errors.hpp"
#include "aanet/experiment.hpp"

namespace {

int print_error(const std::string& kind, const std::string& message) {
    const nlohmann::json rec = {{"record", "error"}, {"kind", kind}, {"message", message}};
    std::cerr << rec.dump() << "\n";
    return 2;
}

int cmd_gradcheck(std::uint64_t seed, double eps) {
    using namespace aanet;
    GradcheckSetup s = make_gradcheck_setup(seed);
    std::cout << "toy net: " << s.model.learnable_count() << " learnable parameters\n";
    bool ok = true;
    const std::pair<GradGroup, const char*> groups[] = {
        {GradGroup::Alpha, "alpha"}, {GradGroup::Phi, "phi"}, {GradGroup::Eta, "eta"}};
    for (const auto& [g, name] : groups) {
        const GradCheckResult r = grad_check(s.model, s.alphas, s.batch, g, eps);
        const bool pass = r.max_rel_error <= 1e-4;
        ok = ok && pass;
        std::cout << name << ": max relative error " << r.max_rel_error << " over "
                  << r.checked << " coordinates (" << r.skipped << " skipped) "
                  << (pass ? "ok" : "FAIL") << "\n";
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive aggregation networks for class-incremental learning"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    aanet::CliOptions opts;
    int seeds = 0;

    auto* run = app.add_subcommand("run", "train every configuration in the matrix");
    run->add_option("--config", config_path, "experiment config (JSON)")->required();
    run->add_option("--seeds", seeds, "number of seeds per configuration")->check(CLI::PositiveNumber);
    run->add_option("--jobs", opts.jobs, "concurrent jobs")->check(CLI::PositiveNumber);
    run->add_flag("--dry-run", opts.dry_run, "validate and print the plan only");
    run->add_flag("--strict-memory", opts.strict_memory, "pay for extra parameters with exemplars");
    run->add_option("--out", out_dir, "output directory");

    auto* validate = app.add_subcommand("validate", "parse and validate a config");
    validate->add_option("--config", config_path, "experiment config (JSON)")->required();

    auto* report = app.add_subcommand("report", "rebuild the comparison table from stored runs");
    report->add_option("--out", out_dir, "output directory")->required();

    std::uint64_t gc_seed = 1;
    double gc_eps = 1e-5;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check on a toy network");
    gradcheck->add_option("--seed", gc_seed, "toy network seed");
    gradcheck->add_option("--eps", gc_eps, "finite-difference step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return print_error("argument", e.what());
    }

    try {
        if (*run) {
            if (seeds > 0) opts.seeds = seeds;
            if (!out_dir.empty()) opts.out_dir = out_dir;
            return aanet::run_experiment(config_path, opts, std::cout);
        }
        if (*validate) {
            const auto cfg = aanet::apply_overrides(aanet::load_config(config_path), opts);
            const auto jobs = aanet::plan_jobs(cfg, cfg.protocol.runs);
            std::cout << "config " << cfg.name << " is valid: " << jobs.size() << " planned runs\n";
            return 0;
        }
        if (*report) {
            aanet::report(out_dir, std::cout);
            return 0;
        }
        if (*gradcheck) return cmd_gradcheck(gc_seed, gc_eps);
    } catch (const aanet::Error& e) {
        return print_error(e.kind(), e.what());
    } catch (const std::exception& e) {
        return print_error("internal", e.what());
    }
    return 0;
}
