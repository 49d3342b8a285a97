#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hfope/core.hpp"
#include "hfope/envs.hpp"
#include "hfope/estimators.hpp"
#include "hfope/metrics.hpp"
#include "hfope/rilr.hpp"
#include "hfope/vlmh.hpp"

// End-to-end experiment harness: generate logged datasets from a benchmark
// environment, train the latent model, reconstruct per-step rewards with
// each configured method, run each configured estimator against every
// target policy, and report metrics against the manifest's exact values.
//
// Every artifact write is deterministic: rerunning a command with the same
// configuration produces byte-identical files. Estimator cells are crash
// isolated — a failing (seed, method, estimator) combination becomes an
// error record in the report instead of aborting the run.

namespace hfope::pipeline {

using core::OfflineDataset;
using core::Policy;
using core::Vec;
using nlohmann::json;

// --------------------------------------------------------------------------
// Experiment configuration
// --------------------------------------------------------------------------

struct VarianceStudySettings {
    bool configured = false;
    int num_datasets = 500;
    int episodes = 200;
    std::string target_id;  // empty: first target of the benchmark case
};

struct ExperimentConfig {
    std::string env = "chain4";  // benchmark case name
    int episodes = 200;
    std::vector<uint64_t> seeds = {1, 2, 3};
    std::string output_dir = "out";
    std::vector<std::string> estimators = {"is", "pdis", "dr", "fqe", "dice"};
    std::vector<std::string> methods = {"rilr", "rescale", "fusion", "oracle-ihr"};
    std::string behavior_probs = "logged";  // logged | estimated | policy
    bool standard_dr = true;
    double ratio_cap = 100.0;
    bool run_ablation = true;      // model-based rollout estimate per target
    int ablation_rollouts = 200;
    uint64_t suite_seed = 99;      // benchmark construction seed
    int truth_rollouts = 20000;    // Monte Carlo precision of non-tabular truths
    std::vector<std::string> target_ids;  // empty: every target of the case
    vlmh::VlmhConfig vlmh_cfg;
    rilr::RilrConfig rilr_cfg;
    VarianceStudySettings variance;
};

inline const std::set<std::string>& known_estimators() {
    static const std::set<std::string> names = {"is", "pdis", "dr", "fqe", "dice"};
    return names;
}

inline const std::set<std::string>& known_methods() {
    static const std::set<std::string> names = {"rilr", "rescale", "fusion", "oracle-ihr"};
    return names;
}

inline void validate_config(const ExperimentConfig& cfg) {
    if (cfg.env.empty()) throw std::invalid_argument("config: env must be set");
    if (cfg.episodes < 1) throw std::invalid_argument("config: episodes must be >= 1");
    if (cfg.seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
    if (cfg.output_dir.empty()) throw std::invalid_argument("config: output_dir must be set");
    if (cfg.estimators.empty()) throw std::invalid_argument("config: need at least one estimator");
    if (cfg.methods.empty()) throw std::invalid_argument("config: need at least one method");
    for (const auto& e : cfg.estimators)
        if (!known_estimators().count(e)) throw std::invalid_argument("config: unknown estimator " + e);
    for (const auto& m : cfg.methods)
        if (!known_methods().count(m)) throw std::invalid_argument("config: unknown method " + m);
    if (cfg.behavior_probs != "logged" && cfg.behavior_probs != "estimated" && cfg.behavior_probs != "policy")
        throw std::invalid_argument("config: behavior_probs must be logged, estimated, or policy");
    if (cfg.ratio_cap <= 0.0) throw std::invalid_argument("config: ratio_cap must be positive");
    if (cfg.ablation_rollouts < 1) throw std::invalid_argument("config: ablation_rollouts must be >= 1");
    if (cfg.truth_rollouts < 1) throw std::invalid_argument("config: truth_rollouts must be >= 1");
    if (cfg.variance.configured && (cfg.variance.num_datasets < 2 || cfg.variance.episodes < 2))
        throw std::invalid_argument("config: variance study needs at least two datasets of two episodes");
    vlmh::validate_config(cfg.vlmh_cfg);
    rilr::validate_config(cfg.rilr_cfg);
}

inline json config_to_json(const ExperimentConfig& cfg) {
    json j{{"env", cfg.env},
           {"episodes", cfg.episodes},
           {"seeds", cfg.seeds},
           {"output_dir", cfg.output_dir},
           {"estimators", cfg.estimators},
           {"methods", cfg.methods},
           {"behavior_probs", cfg.behavior_probs},
           {"standard_dr", cfg.standard_dr},
           {"ratio_cap", cfg.ratio_cap},
           {"run_ablation", cfg.run_ablation},
           {"ablation_rollouts", cfg.ablation_rollouts},
           {"suite_seed", cfg.suite_seed},
           {"truth_rollouts", cfg.truth_rollouts},
           {"target_ids", cfg.target_ids},
           {"vlmh", vlmh::config_to_json(cfg.vlmh_cfg)},
           {"rilr", rilr::config_to_json(cfg.rilr_cfg)}};
    if (cfg.variance.configured)
        j["variance_study"] = json{{"num_datasets", cfg.variance.num_datasets},
                                   {"episodes", cfg.variance.episodes},
                                   {"target_id", cfg.variance.target_id}};
    return j;
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    static const std::set<std::string> keys = {
        "env",          "episodes",   "seeds",      "output_dir",        "estimators",     "methods",
        "behavior_probs", "standard_dr", "ratio_cap", "run_ablation",     "ablation_rollouts", "suite_seed",
        "truth_rollouts", "target_ids",  "vlmh",      "rilr",             "variance_study"};
    for (const auto& [key, value] : j.items())
        if (!keys.count(key)) throw std::invalid_argument("config: unknown key " + key);
    cfg.env = j.value("env", cfg.env);
    cfg.episodes = j.value("episodes", cfg.episodes);
    cfg.seeds = j.value("seeds", cfg.seeds);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    cfg.estimators = j.value("estimators", cfg.estimators);
    cfg.methods = j.value("methods", cfg.methods);
    cfg.behavior_probs = j.value("behavior_probs", cfg.behavior_probs);
    cfg.standard_dr = j.value("standard_dr", cfg.standard_dr);
    cfg.ratio_cap = j.value("ratio_cap", cfg.ratio_cap);
    cfg.run_ablation = j.value("run_ablation", cfg.run_ablation);
    cfg.ablation_rollouts = j.value("ablation_rollouts", cfg.ablation_rollouts);
    cfg.suite_seed = j.value("suite_seed", cfg.suite_seed);
    cfg.truth_rollouts = j.value("truth_rollouts", cfg.truth_rollouts);
    cfg.target_ids = j.value("target_ids", cfg.target_ids);
    if (j.contains("vlmh")) cfg.vlmh_cfg = vlmh::config_from_json(j.at("vlmh"), cfg.vlmh_cfg);
    if (j.contains("rilr")) cfg.rilr_cfg = rilr::config_from_json(j.at("rilr"), cfg.rilr_cfg);
    if (j.contains("variance_study")) {
        const json& v = j.at("variance_study");
        static const std::set<std::string> vkeys = {"num_datasets", "episodes", "target_id"};
        for (const auto& [key, value] : v.items())
            if (!vkeys.count(key)) throw std::invalid_argument("config: unknown variance_study key " + key);
        cfg.variance.configured = true;
        cfg.variance.num_datasets = v.value("num_datasets", cfg.variance.num_datasets);
        cfg.variance.episodes = v.value("episodes", cfg.variance.episodes);
        cfg.variance.target_id = v.value("target_id", cfg.variance.target_id);
    }
    validate_config(cfg);
    return cfg;
}

/// Reads a config document; // and /* */ comments are allowed in the file.
inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    json j = json::parse(in, nullptr, /*allow_exceptions=*/true, /*ignore_comments=*/true);
    return config_from_json(j);
}

// --------------------------------------------------------------------------
// Benchmark case resolution and manifest
// --------------------------------------------------------------------------

/// The benchmark case the config names, with targets filtered and reordered
/// by target_ids when given.
inline envs::BenchmarkCase resolve_case(const ExperimentConfig& cfg) {
    std::vector<envs::BenchmarkCase> suite = envs::make_benchmark_suite(cfg.suite_seed, cfg.truth_rollouts);
    for (auto& bench : suite) {
        if (bench.name != cfg.env) continue;
        if (cfg.target_ids.empty()) return bench;
        envs::BenchmarkCase filtered = bench;
        filtered.targets.clear();
        filtered.target_values.clear();
        filtered.target_value_ses.clear();
        for (const auto& id : cfg.target_ids) {
            bool found = false;
            for (size_t i = 0; i < bench.targets.size(); ++i)
                if (bench.targets[i].id == id) {
                    filtered.targets.push_back(bench.targets[i]);
                    filtered.target_values.push_back(bench.target_values[i]);
                    filtered.target_value_ses.push_back(bench.target_value_ses[i]);
                    found = true;
                    break;
                }
            if (!found) throw std::invalid_argument("config: unknown target id " + id);
        }
        return filtered;
    }
    throw std::invalid_argument("config: unknown env " + cfg.env);
}

inline std::string dataset_path(const ExperimentConfig& cfg, uint64_t seed) {
    return cfg.output_dir + "/dataset_seed" + std::to_string(seed) + ".jsonl";
}

inline std::string model_path(const ExperimentConfig& cfg, uint64_t seed) {
    return cfg.output_dir + "/vlmh_seed" + std::to_string(seed) + ".json";
}

inline std::string manifest_path(const ExperimentConfig& cfg) { return cfg.output_dir + "/manifest.json"; }

inline json build_manifest(const ExperimentConfig& cfg, const envs::BenchmarkCase& bench) {
    json targets = json::array();
    for (size_t i = 0; i < bench.targets.size(); ++i)
        targets.push_back(json{{"id", bench.targets[i].id},
                               {"value", bench.target_values[i]},
                               {"se", bench.target_value_ses[i]}});
    json datasets = json::array();
    for (uint64_t seed : cfg.seeds)
        datasets.push_back(json{{"seed", seed}, {"file", dataset_path(cfg, seed)}, {"n", cfg.episodes}});
    return json{{"format_version", 1},
                {"env", cfg.env},
                {"episodes", cfg.episodes},
                {"suite_seed", cfg.suite_seed},
                {"truth_rollouts", cfg.truth_rollouts},
                {"behavior", json{{"id", bench.behavior.id}, {"value", bench.behavior_value}}},
                {"targets", targets},
                {"datasets", datasets}};
}

inline json load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("manifest: cannot open " + path);
    json j;
    in >> j;
    if (j.value("format_version", -1) != 1) throw std::invalid_argument("manifest: unsupported format_version");
    return j;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

/// Generates every configured dataset plus the manifest of exact target
/// values. Rewriting with the same config produces byte-identical files.
inline void generate_data(const ExperimentConfig& cfg, const envs::BenchmarkCase& bench) {
    std::filesystem::create_directories(cfg.output_dir);
    for (uint64_t seed : cfg.seeds) {
        const OfflineDataset data = envs::sample_dataset(bench.env, bench.behavior, cfg.episodes,
                                                         rng::derive_seed(seed, "data"), bench.behavior.id);
        core::save_dataset(data, dataset_path(cfg, seed));
    }
    write_text(manifest_path(cfg), build_manifest(cfg, bench).dump(2) + "\n");
}

inline int cmd_gen_data(const ExperimentConfig& cfg) {
    generate_data(cfg, resolve_case(cfg));
    return 0;
}

// --------------------------------------------------------------------------
// Report rows and files
// --------------------------------------------------------------------------

struct CellError {
    uint64_t seed = 0;
    std::string method;
    std::string estimator;
    std::string policy_id;
    std::string message;
};

struct RunResult {
    std::vector<metrics::ReportRow> rows;
    std::vector<CellError> errors;
    std::vector<metrics::AggregateRow> aggregates;
    std::vector<std::string> aggregate_errors;  // groups whose metrics are undefined
};

inline std::string format_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline void check_csv_field(const std::string& s) {
    if (s.find(',') != std::string::npos || s.find('\n') != std::string::npos)
        throw std::invalid_argument("report: field contains a comma or newline: " + s);
}

inline std::string report_csv_text(const std::vector<metrics::ReportRow>& rows) {
    std::ostringstream out;
    out << "estimator,method,policy_id,estimate,truth,seed\n";
    for (const auto& row : rows) {
        check_csv_field(row.estimator);
        check_csv_field(row.method);
        check_csv_field(row.policy_id);
        out << row.estimator << ',' << row.method << ',' << row.policy_id << ',' << format_double(row.estimate)
            << ',' << format_double(row.truth) << ',' << row.seed << "\n";
    }
    return out.str();
}

inline std::vector<metrics::ReportRow> read_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("report: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "estimator,method,policy_id,estimate,truth,seed")
        throw std::invalid_argument("report: unexpected header in " + path);
    std::vector<metrics::ReportRow> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 6)
            throw std::invalid_argument("report: line " + std::to_string(line_no) + " has " +
                                        std::to_string(fields.size()) + " fields");
        metrics::ReportRow row;
        row.estimator = fields[0];
        row.method = fields[1];
        row.policy_id = fields[2];
        row.estimate = std::stod(fields[3]);
        row.truth = std::stod(fields[4]);
        row.seed = std::stoull(fields[5]);
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Aggregates rows per (estimator, method) group; groups whose metrics are
/// undefined (e.g. constant estimates) are reported as errors, not dropped
/// silently and not zeroed.
inline void aggregate_rows(RunResult& res) {
    std::map<std::pair<std::string, std::string>, std::vector<metrics::ReportRow>> groups;
    for (const auto& row : res.rows) groups[{row.estimator, row.method}].push_back(row);
    for (const auto& [key, group] : groups) {
        try {
            const auto agg = metrics::aggregate_report(group);
            res.aggregates.insert(res.aggregates.end(), agg.begin(), agg.end());
        } catch (const std::exception& e) {
            res.aggregate_errors.push_back(key.first + "/" + key.second + ": " + e.what());
        }
    }
}

inline json report_json(const ExperimentConfig& cfg, const json& manifest, const RunResult& res) {
    json aggregates = json::array();
    for (const auto& a : res.aggregates)
        aggregates.push_back(json{{"estimator", a.estimator},
                                  {"method", a.method},
                                  {"num_seeds", a.num_seeds},
                                  {"mae", a.mae_mean},
                                  {"mae_se", a.mae_se},
                                  {"rank_correlation", a.rank_mean},
                                  {"rank_correlation_se", a.rank_se},
                                  {"regret_at_1", a.regret_mean},
                                  {"regret_at_1_se", a.regret_se}});
    json errors = json::array();
    for (const auto& e : res.errors)
        errors.push_back(json{{"seed", e.seed},
                              {"method", e.method},
                              {"estimator", e.estimator},
                              {"policy_id", e.policy_id},
                              {"message", e.message}});
    return json{{"format_version", 1},
                {"config", config_to_json(cfg)},
                {"behavior_value", manifest.at("behavior").at("value")},
                {"targets", manifest.at("targets")},
                {"num_rows", res.rows.size()},
                {"aggregates", aggregates},
                {"errors", errors},
                {"aggregate_errors", res.aggregate_errors}};
}

// --------------------------------------------------------------------------
// Pipeline execution
// --------------------------------------------------------------------------

/// Runs every configured (method, estimator, target) cell for one seed.
/// The logged dataset is read back from its file so a later rerun that
/// loads the same file sees bit-identical inputs; the privileged copy with
/// true per-step rewards is regenerated in memory for the oracle method.
inline void run_seed(const ExperimentConfig& cfg, const envs::BenchmarkCase& bench, uint64_t seed,
                     const std::vector<double>& truths, RunResult& res) {
    const OfflineDataset data = core::load_dataset(dataset_path(cfg, seed));
    const core::HmdpSpec& spec = data.spec;
    const double discount = spec.discount;

    const auto record_method_failure = [&](const std::string& method, const std::string& what) {
        for (const auto& est : cfg.estimators) res.errors.push_back({seed, method, est, "*", what});
    };

    // Reconstructions. The oracle method needs the true per-step rewards,
    // which are never serialized; regenerating with the dataset's seed
    // yields the same episodes with the privileged fields present.
    const bool needs_model = cfg.run_ablation ||
        std::find(cfg.methods.begin(), cfg.methods.end(), "rilr") != cfg.methods.end();
    std::optional<vlmh::VlmhModel> model;
    if (needs_model) {
        auto trained = vlmh::train_vlmh(data, spec, cfg.vlmh_cfg, rng::derive_seed(seed, "vlmh"));
        model = std::move(trained.model);
        vlmh::save_model(model_path(cfg, seed), *model);
    }

    std::map<std::string, rilr::ReconstructedDataset> recons;
    for (const auto& method : cfg.methods) {
        try {
            if (method == "rescale") {
                recons[method] = rilr::reconstruct_rescale(data, discount);
            } else if (method == "fusion") {
                recons[method] = rilr::reconstruct_fusion(data, discount);
            } else if (method == "oracle-ihr") {
                const OfflineDataset privileged = envs::sample_dataset(
                    bench.env, bench.behavior, cfg.episodes, rng::derive_seed(seed, "data"), bench.behavior.id);
                for (size_t i = 0; i < data.trajectories.size(); ++i)
                    if (privileged.trajectories[i].human_return != data.trajectories[i].human_return)
                        throw std::runtime_error("oracle reconstruction: regenerated data disagrees with file");
                recons[method] = rilr::reconstruct_oracle(privileged, discount);
            } else {  // rilr
                const vlmh::EncodingPool pool =
                    vlmh::build_encoding_pool(*model, data, rng::derive_seed(seed, "pool"));
                auto fit = rilr::train_rilr(data, spec, pool, cfg.rilr_cfg, rng::derive_seed(seed, "rilr"));
                recons[method] = rilr::reconstruct_rilr(fit.model, data);
            }
        } catch (const std::exception& e) {
            record_method_failure(method, e.what());
        }
    }

    // Behavior probabilities for the importance-weighted estimators.
    std::optional<estimators::ProbTable> behavior_probs;
    try {
        if (cfg.behavior_probs == "logged") {
            behavior_probs = estimators::logged_behavior_probs(data);
        } else if (cfg.behavior_probs == "policy") {
            behavior_probs = estimators::policy_behavior_probs(data, bench.behavior);
        } else {
            const auto fitted = estimators::estimate_behavior(data, spec, rng::derive_seed(seed, "behavior"));
            behavior_probs = estimators::model_behavior_probs(data, fitted);
        }
    } catch (const std::exception& e) {
        // Weight-based estimators all fail; model-based cells can still run.
        for (const auto& method : cfg.methods)
            for (const auto& est : cfg.estimators)
                if (est == "is" || est == "pdis" || est == "dr")
                    res.errors.push_back({seed, method, est, "*", e.what()});
    }

    for (size_t j = 0; j < bench.targets.size(); ++j) {
        const Policy& target = bench.targets[j];
        std::optional<estimators::WeightTable> weights;
        if (behavior_probs) {
            try {
                weights = estimators::importance_weights(data, target, *behavior_probs);
            } catch (const std::exception& e) {
                for (const auto& method : cfg.methods)
                    for (const auto& est : cfg.estimators)
                        if (est == "is" || est == "pdis" || est == "dr")
                            res.errors.push_back({seed, method, est, target.id, e.what()});
            }
        }

        for (const auto& method : cfg.methods) {
            const auto rec = recons.find(method);
            if (rec == recons.end()) continue;  // failure already recorded
            std::optional<estimators::FqeFit> critic;
            const auto ensure_critic = [&]() -> const estimators::FqeFit& {
                if (!critic) critic = estimators::fqe(data, rec->second.ihrs, spec, target);
                return *critic;
            };
            for (const auto& est : cfg.estimators) {
                try {
                    double estimate = 0.0;
                    if (est == "is") {
                        if (!weights) continue;
                        estimate = estimators::mean(estimators::is_scores(data, *weights));
                    } else if (est == "pdis") {
                        if (!weights) continue;
                        estimate = estimators::mean(
                            estimators::pdis_scores(data, rec->second.ihrs, *weights, discount));
                    } else if (est == "dr") {
                        if (!weights) continue;
                        estimate = estimators::mean(
                            estimators::dr_scores(data, rec->second.ihrs, *weights, ensure_critic(),
                                                  cfg.standard_dr));
                    } else if (est == "fqe") {
                        estimate = ensure_critic().value;
                    } else {  // dice
                        estimate =
                            estimators::dice(data, rec->second.ihrs, spec, target, cfg.ratio_cap).estimate;
                    }
                    res.rows.push_back({est, method, target.id, estimate, truths[j], seed});
                } catch (const std::exception& e) {
                    res.errors.push_back({seed, method, est, target.id, e.what()});
                }
            }
        }
    }

    if (cfg.run_ablation) {
        std::vector<Vec> inits;
        for (const auto& traj : data.trajectories) inits.push_back(traj.states[0]);
        for (size_t j = 0; j < bench.targets.size(); ++j) {
            try {
                const double estimate = model->predict_human_return(
                    bench.targets[j], spec.horizon, cfg.ablation_rollouts,
                    rng::derive_seed(seed, "ablation", static_cast<uint64_t>(j)), inits);
                res.rows.push_back({"rollout", "ablation", bench.targets[j].id, estimate, truths[j], seed});
            } catch (const std::exception& e) {
                res.errors.push_back({seed, "ablation", "rollout", bench.targets[j].id, e.what()});
            }
        }
    }
}

/// Full pipeline over all configured seeds. Datasets and the manifest are
/// generated if missing; truths come from the manifest.
inline RunResult run_pipeline(const ExperimentConfig& cfg, const envs::BenchmarkCase& bench) {
    std::filesystem::create_directories(cfg.output_dir);
    bool missing = !std::filesystem::exists(manifest_path(cfg));
    for (uint64_t seed : cfg.seeds) missing = missing || !std::filesystem::exists(dataset_path(cfg, seed));
    if (missing) generate_data(cfg, bench);

    const json manifest = load_manifest(manifest_path(cfg));
    if (manifest.at("env").get<std::string>() != cfg.env)
        throw std::invalid_argument("manifest: env mismatch (manifest has " +
                                    manifest.at("env").get<std::string>() + ")");
    if (manifest.at("episodes").get<int>() != cfg.episodes)
        throw std::invalid_argument("manifest: episode count mismatch");
    std::map<std::string, double> truth_by_id;
    for (const auto& t : manifest.at("targets"))
        truth_by_id[t.at("id").get<std::string>()] = t.at("value").get<double>();
    std::vector<double> truths;
    for (const auto& target : bench.targets) {
        const auto it = truth_by_id.find(target.id);
        if (it == truth_by_id.end()) throw std::invalid_argument("manifest: no value for target " + target.id);
        truths.push_back(it->second);
    }

    RunResult res;
    for (uint64_t seed : cfg.seeds) run_seed(cfg, bench, seed, truths, res);
    aggregate_rows(res);
    return res;
}

// --------------------------------------------------------------------------
// Variance study command
// --------------------------------------------------------------------------

inline json variance_study_json(const estimators::VarianceStudyResult& res) {
    return json{{"format_version", 1},
                {"num_datasets", res.num_datasets},
                {"episodes_per_dataset", res.episodes_per_dataset},
                {"exact_value", res.exact_value},
                {"mean_is", res.mean_is},
                {"mean_pdis", res.mean_pdis},
                {"var_is", res.var_is},
                {"var_pdis", res.var_pdis},
                {"min_effective_reward_mean", res.min_effective_reward_mean},
                {"corr_min", res.corr_min},
                {"corr_mean", res.corr_mean},
                {"tv_distance", res.tv_distance},
                {"max_identity_gap", res.max_identity_gap}};
}

/// Runs the repeated-sampling variance comparison on a tabular benchmark
/// case and writes variance_study.json.
inline estimators::VarianceStudyResult run_variance_study(const ExperimentConfig& cfg,
                                                          const envs::BenchmarkCase& bench) {
    const auto* env = std::get_if<envs::TabularHmdp>(&bench.env);
    if (env == nullptr) throw std::invalid_argument("variance study: tabular environments only");
    const Policy* target = nullptr;
    if (cfg.variance.target_id.empty()) {
        if (bench.targets.empty()) throw std::invalid_argument("variance study: case has no targets");
        target = &bench.targets.front();
    } else {
        for (const auto& pol : bench.targets)
            if (pol.id == cfg.variance.target_id) target = &pol;
        if (target == nullptr)
            throw std::invalid_argument("variance study: unknown target id " + cfg.variance.target_id);
    }
    estimators::VarianceStudyConfig vs;
    vs.num_datasets = cfg.variance.num_datasets;
    vs.episodes_per_dataset = cfg.variance.episodes;
    vs.seed = rng::derive_seed(cfg.seeds.front(), "variance");
    const auto res = estimators::variance_study(*env, bench.behavior, *target, vs);
    std::filesystem::create_directories(cfg.output_dir);
    write_text(cfg.output_dir + "/variance_study.json", variance_study_json(res).dump(2) + "\n");
    return res;
}

inline int cmd_variance_study(const ExperimentConfig& cfg) {
    run_variance_study(cfg, resolve_case(cfg));
    return 0;
}

// --------------------------------------------------------------------------
// Run command
// --------------------------------------------------------------------------

inline int cmd_run(const ExperimentConfig& cfg) {
    const envs::BenchmarkCase bench = resolve_case(cfg);
    const RunResult res = run_pipeline(cfg, bench);
    write_text(cfg.output_dir + "/report.csv", report_csv_text(res.rows));
    const json manifest = load_manifest(manifest_path(cfg));
    write_text(cfg.output_dir + "/report.json", report_json(cfg, manifest, res).dump(2) + "\n");
    if (cfg.variance.configured) run_variance_study(cfg, bench);
    return res.errors.empty() ? 0 : 2;
}

// --------------------------------------------------------------------------
// Encoding export
// --------------------------------------------------------------------------

/// Writes one CSV row per (trajectory, step) with the posterior mean of the
/// latent state and the episode's human return: all inputs an external
/// embedding or clustering tool needs.
inline void export_encodings(const std::string& model_file, const std::string& data_file,
                             const std::string& out_file) {
    const vlmh::VlmhModel model = vlmh::load_model(model_file);
    if (!model.trained) throw std::invalid_argument("export: model file was never trained");
    const OfflineDataset data = core::load_dataset(data_file);
    std::ostringstream out;
    out << "trajectory_id,step";
    for (int d = 0; d < model.cfg.latent_dim; ++d) out << ",z" << d;
    out << ",human_return\n";
    for (size_t i = 0; i < data.trajectories.size(); ++i) {
        const std::vector<Vec> means = model.encode_means(data.trajectories[i]);
        for (size_t t = 0; t < means.size(); ++t) {
            out << i << ',' << t;
            for (int d = 0; d < model.cfg.latent_dim; ++d) out << ',' << format_double(means[t][d]);
            out << ',' << format_double(data.trajectories[i].human_return) << "\n";
        }
    }
    write_text(out_file, out.str());
}

// --------------------------------------------------------------------------
// Report re-aggregation
// --------------------------------------------------------------------------

/// Re-derives the aggregate table from a previously written report.csv and
/// renders it as fixed-width text.
inline std::string render_report(const std::vector<metrics::ReportRow>& rows) {
    RunResult res;
    res.rows = rows;
    aggregate_rows(res);
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof(line), "%-10s %-12s %5s %12s %12s %12s\n", "estimator", "method", "seeds", "mae",
                  "rank_corr", "regret@1");
    out << line;
    for (const auto& a : res.aggregates) {
        std::snprintf(line, sizeof(line), "%-10s %-12s %5d %12.6f %12.6f %12.6f\n", a.estimator.c_str(),
                      a.method.c_str(), a.num_seeds, a.mae_mean, a.rank_mean, a.regret_mean);
        out << line;
    }
    for (const auto& err : res.aggregate_errors) out << "undefined: " << err << "\n";
    return out.str();
}

inline int cmd_report(const std::string& csv_path) {
    std::fputs(render_report(read_report_csv(csv_path)).c_str(), stdout);
    return 0;
}

}  // namespace hfope::pipeline
