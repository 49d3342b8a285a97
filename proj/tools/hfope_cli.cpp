#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "hfope/pipeline.hpp"

// Command-line harness around the experiment pipeline.
//
// Exit codes: 0 full success, 1 configuration or I/O error, 2 partial
// failure (one or more estimator cells errored; see report.json).

namespace {

hfope::pipeline::ExperimentConfig load_with_overrides(const std::string& config_path,
                                                      const std::vector<uint64_t>& seeds,
                                                      const std::string& out_dir) {
    hfope::pipeline::ExperimentConfig cfg = hfope::pipeline::load_config(config_path);
    if (!seeds.empty()) cfg.seeds = seeds;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    hfope::pipeline::validate_config(cfg);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hfope: off-policy evaluation of human returns from episode-level feedback"};
    app.require_subcommand(1);

    std::string config_path, out_dir, model_file, data_file, out_file, csv_path;
    std::vector<uint64_t> seeds;

    const auto add_config_flags = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config file (JSON, comments allowed)")->required();
        sub->add_option("--seed", seeds, "override the config's seed list");
        sub->add_option("--out", out_dir, "override the config's output directory");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "write logged datasets and the manifest of exact values");
    add_config_flags(gen);
    CLI::App* run = app.add_subcommand("run", "full pipeline: train, reconstruct, estimate, report");
    add_config_flags(run);
    CLI::App* vs = app.add_subcommand("variance-study",
                                      "repeated-sampling variance comparison of the return-based and "
                                      "per-step importance-sampling estimators");
    add_config_flags(vs);

    CLI::App* exp = app.add_subcommand("export-encodings", "dump latent encodings of a dataset to CSV");
    exp->add_option("--model", model_file, "trained model file")->required();
    exp->add_option("--data", data_file, "dataset file")->required();
    exp->add_option("--out", out_file, "output CSV path")->required();

    CLI::App* rep = app.add_subcommand("report", "re-aggregate a report.csv and print the metric table");
    rep->add_option("--csv", csv_path, "report.csv path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return hfope::pipeline::cmd_gen_data(load_with_overrides(config_path, seeds, out_dir));
        if (run->parsed()) return hfope::pipeline::cmd_run(load_with_overrides(config_path, seeds, out_dir));
        if (vs->parsed())
            return hfope::pipeline::cmd_variance_study(load_with_overrides(config_path, seeds, out_dir));
        if (exp->parsed()) {
            hfope::pipeline::export_encodings(model_file, data_file, out_file);
            return 0;
        }
        if (rep->parsed()) return hfope::pipeline::cmd_report(csv_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
