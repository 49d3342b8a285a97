#include <catch2/catch_amalgamated.hpp>

#include "hfope/rilr.hpp"

#include "hfope/envs.hpp"
#include "oracles.hpp"

using namespace hfope;
using core::OfflineDataset;
using core::Policy;
using core::Trajectory;
using diff::Mat;
using Catch::Approx;

namespace {
Policy uniform_policy(int num_actions) {
    Policy pol;
    pol.kind = core::PolicyKind::UniformRandom;
    pol.num_actions = num_actions;
    pol.id = "uniform";
    return pol;
}

OfflineDataset constant_dataset(int n, uint64_t seed) {
    const envs::TabularHmdp env = envs::make_constant_ihr_env(1.0);
    return envs::sample_dataset(env, uniform_policy(env.num_actions), n, seed, "uniform");
}

rilr::RilrConfig tiny_config() {
    rilr::RilrConfig cfg;
    cfg.hidden = 8;
    cfg.neighbors = 4;
    cfg.epochs = 15;
    cfg.minibatch = 16;
    cfg.lr = 3e-3;
    return cfg;
}

vlmh::EncodingPool untrained_pool(const OfflineDataset& data, const core::HmdpSpec& spec) {
    vlmh::VlmhConfig vcfg;
    vcfg.latent_dim = 4;
    vcfg.hidden = 8;
    vcfg.head_hidden = {8};
    const vlmh::VlmhModel model = vlmh::VlmhModel::for_spec(spec, vcfg, 12);
    return vlmh::build_encoding_pool(model, data, 34);
}
}  // namespace

TEST_CASE("reconstructor config serialization is strict", "[rilr]") {
    rilr::RilrConfig cfg = tiny_config();
    cfg.cell = "gru";
    cfg.finite_horizon_target = true;
    const rilr::RilrConfig back = rilr::config_from_json(rilr::config_to_json(cfg));
    CHECK(back.cell == "gru");
    CHECK(back.neighbors == cfg.neighbors);
    CHECK(back.finite_horizon_target);
    CHECK_THROWS_AS(rilr::config_from_json({{"cells", "gru"}}), std::invalid_argument);
    CHECK_THROWS_AS(rilr::config_from_json({{"cell", "elman"}}), std::invalid_argument);
}

TEST_CASE("per-step neighbor targets spread the return over steps", "[rilr]") {
    CHECK(rilr::neighbor_target(10.0, 0.9, 10, false) == Approx(1.0).margin(1e-12));
    // Scaled so a constant reward of this size discounts back to the return.
    const double c = rilr::neighbor_target(10.0, 0.9, 10, true);
    double sum = 0.0, w = 1.0;
    for (int t = 0; t < 10; ++t) {
        sum += w * c;
        w *= 0.9;
    }
    CHECK(sum == Approx(10.0).margin(1e-9));
}

TEST_CASE("closed-form reconstructions satisfy the return identity", "[rilr]") {
    const envs::TabularHmdp env = envs::make_constant_ihr_env(1.0);
    const OfflineDataset data = constant_dataset(12, 5);

    const rilr::ReconstructedDataset rescale = rilr::reconstruct_rescale(data, env.discount);
    const rilr::ReconstructedDataset fusion = rilr::reconstruct_fusion(data, env.discount);
    const rilr::ReconstructedDataset oracle = rilr::reconstruct_oracle(data, env.discount);
    for (size_t i = 0; i < data.trajectories.size(); ++i) {
        const Trajectory& traj = data.trajectories[i];
        const int T = static_cast<int>(traj.actions.size());
        CHECK(std::abs(rescale.sum_residuals[i]) <= 1e-9);
        CHECK(std::abs(fusion.sum_residuals[i]) <= 1e-9);
        CHECK(std::abs(oracle.sum_residuals[i]) <= 1e-9);  // simulator invariant
        for (int t = 0; t + 1 < T; ++t) {
            CHECK(rescale.ihrs[i][t] == 0.0);
            CHECK(fusion.ihrs[i][t] == traj.env_rewards[t]);
        }
        CHECK(rescale.ihrs[i][T - 1] == Approx(traj.human_return / std::pow(env.discount, T - 1)).margin(1e-12));
        CHECK(oracle.ihrs[i] == traj.true_ihrs);
    }

    // Serialization strips the ground truth, after which oracle reconstruction
    // must refuse to run.
    const OfflineDataset reloaded = core::dataset_from_jsonl(core::dataset_to_jsonl(data));
    CHECK_THROWS_AS(rilr::reconstruct_oracle(reloaded, env.discount), std::invalid_argument);
    CHECK_NOTHROW(rilr::reconstruct_rescale(reloaded, env.discount));
}

TEST_CASE("reconstruction refuses a vanishing final-step weight", "[rilr]") {
    OfflineDataset data;
    data.provenance = "synthetic";
    Trajectory traj;
    const int T = 15;
    traj.states.assign(T + 1, core::Vec::Zero(2));
    traj.actions.assign(T, 0);
    traj.env_rewards.assign(T, 0.0);
    traj.human_return = 1.0;
    data.trajectories.push_back(traj);
    // 0.1^14 = 1e-14 is below the 1e-12 carrier floor.
    CHECK_THROWS_AS(rilr::reconstruct_rescale(data, 0.1), std::invalid_argument);
}

TEST_CASE("reconstruction loss gradient matches finite differences", "[rilr]") {
    const envs::TabularHmdp env = envs::make_constant_ihr_env(0.7);
    for (const std::string cell : {"lstm", "gru"}) {
        rilr::RilrConfig cfg;
        cfg.hidden = 3;
        cfg.cell = cell;
        cfg.neighbors = 4;
        cfg.neighbor_weight = 0.3;
        rilr::RilrModel model = rilr::RilrModel::for_spec(env.spec(), cfg, 61);
        model.sigma_sum = 0.37;
        model.sigma_reg = 1.21;
        model.g_shift = 1.0;
        model.g_scale = 0.5;

        rng::Rng gen(8);
        Trajectory traj = envs::sample_episode(env, uniform_policy(env.num_actions), gen);
        traj.states.resize(4);  // T = 3
        traj.actions.resize(3);
        traj.env_rewards.resize(3);
        traj.true_ihrs.clear();
        traj.behavior_probs.clear();
        const std::vector<double> sum1 = {1.2, -0.4, 2.2};
        const std::vector<double> sum2 = {0.9, 0.8, 1.6};

        const double err = oracles::max_grad_rel_err(model.params, [&](diff::Tape& t, const diff::Binding& b) {
            return rilr::detail::episode_loss(t, b, model, traj, sum1, sum2);
        });
        INFO("cell " << cell);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("training tightens the return anchor on held-out episodes", "[rilr]") {
    const envs::TabularHmdp env = envs::make_constant_ihr_env(1.0);
    const OfflineDataset data = constant_dataset(60, 19);
    const vlmh::EncodingPool pool = untrained_pool(data, env.spec());

    const rilr::RilrTrainResult res = rilr::train_rilr(data, env.spec(), pool, tiny_config(), 7);
    CHECK_FALSE(res.diverged);
    CHECK(res.best_epoch >= 1);
    CHECK(res.best_val < res.val_curve.front());

    // Reconstruct a held-out set and look at the normalized sum residuals
    // and the error against the simulator's constant per-step reward.
    const OfflineDataset held_out = constant_dataset(20, 77);
    const rilr::ReconstructedDataset rec = rilr::reconstruct_rilr(res.model, held_out);
    std::vector<double> norm_res;
    double mae = 0.0;
    int steps = 0;
    for (size_t i = 0; i < held_out.trajectories.size(); ++i) {
        const Trajectory& traj = held_out.trajectories[i];
        norm_res.push_back(std::abs(rec.sum_residuals[i]) / (1.0 + std::abs(traj.human_return)));
        for (size_t t = 0; t < rec.ihrs[i].size(); ++t) {
            mae += std::abs(rec.ihrs[i][t] - traj.true_ihrs[t]);
            ++steps;
        }
    }
    std::nth_element(norm_res.begin(), norm_res.begin() + norm_res.size() / 2, norm_res.end());
    const double median = norm_res[norm_res.size() / 2];
    mae /= steps;
    INFO("median normalized residual " << median << " mae " << mae);
    CHECK(median <= 0.1);
    CHECK(mae <= 0.3);
}

TEST_CASE("reconstructor training is deterministic in the seed", "[rilr]") {
    const envs::TabularHmdp env = envs::make_constant_ihr_env(1.0);
    const OfflineDataset data = constant_dataset(24, 3);
    const vlmh::EncodingPool pool = untrained_pool(data, env.spec());
    rilr::RilrConfig cfg = tiny_config();
    cfg.epochs = 3;
    const auto a = rilr::train_rilr(data, env.spec(), pool, cfg, 99);
    const auto b = rilr::train_rilr(data, env.spec(), pool, cfg, 99);
    CHECK(a.val_curve == b.val_curve);
    CHECK(a.model.predict(data.trajectories[0]) == b.model.predict(data.trajectories[0]));
    const auto c = rilr::train_rilr(data, env.spec(), pool, cfg, 98);
    CHECK(a.model.predict(data.trajectories[0]) != c.model.predict(data.trajectories[0]));
}
