#include <catch2/catch_amalgamated.hpp>

#include "hfope/envs.hpp"
#include "oracles.hpp"

using namespace hfope;
using core::Mat;
using core::Policy;
using core::Vec;
using envs::TabularHmdp;
using Catch::Approx;

namespace {
Policy uniform_policy(int num_actions) {
    Policy pol;
    pol.kind = core::PolicyKind::UniformRandom;
    pol.num_actions = num_actions;
    pol.id = "uniform";
    return pol;
}

TabularHmdp random_tiny_env(rng::Rng& gen, int S, int A, int T) {
    TabularHmdp env;
    env.id = "tiny";
    env.num_states = S;
    env.num_actions = A;
    env.horizon = T;
    env.discount = gen.uniform(0.3, 0.95);
    env.transition.assign(A, Mat::Zero(S, S));
    for (int a = 0; a < A; ++a)
        for (int s = 0; s < S; ++s) {
            double total = 0.0;
            for (int ns = 0; ns < S; ++ns) {
                const double w = gen.uniform(0.05, 1.0);
                env.transition[a](s, ns) = w;
                total += w;
            }
            env.transition[a].row(s) /= total;
        }
    env.env_reward = Mat::Zero(S, A);
    env.ihr_mean.resize(S, A);
    env.ihr_std.resize(S, A);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a) {
            env.ihr_mean(s, a) = gen.uniform(0.0, 2.0);
            env.ihr_std(s, a) = gen.uniform(0.0, 0.8);
        }
    Vec init(S);
    double total = 0.0;
    for (int s = 0; s < S; ++s) {
        init[s] = gen.uniform(0.1, 1.0);
        total += init[s];
    }
    env.initial_dist = init / total;
    envs::validate_env(env);
    return env;
}
}  // namespace

TEST_CASE("environment validation rejects malformed inputs", "[envs]") {
    TabularHmdp env = envs::make_constant_ihr_env(1.0);
    SECTION("broken row sum") {
        env.transition[0](0, 0) += 0.1;
        CHECK_THROWS_AS(envs::validate_env(env), std::invalid_argument);
    }
    SECTION("negative human reward mean") {
        env.ihr_mean(1, 1) = -0.2;
        CHECK_THROWS_AS(envs::validate_env(env), std::invalid_argument);
    }
    SECTION("bad initial distribution") {
        env.initial_dist[0] += 0.5;
        CHECK_THROWS_AS(envs::validate_env(env), std::invalid_argument);
    }
}

TEST_CASE("truncated-Gaussian mean matches quadrature", "[envs]") {
    for (double mean : {0.0, 0.1, 0.7, 2.0, 5.0})
        for (double std : {0.0, 0.2, 1.0, 3.0}) {
            const double closed = rng::truncated_gaussian_lower0_mean(mean, std);
            const double numeric = oracles::truncated_mean_quadrature(mean, std);
            CHECK(closed == Approx(numeric).margin(1e-8));
        }
}

TEST_CASE("degenerate single-state environment has closed-form value", "[envs]") {
    TabularHmdp env;
    env.id = "point";
    env.num_states = 1;
    env.num_actions = 1;
    env.horizon = 5;
    env.discount = 0.8;
    env.transition = {Mat::Ones(1, 1)};
    env.env_reward = Mat::Zero(1, 1);
    env.ihr_mean = Mat::Constant(1, 1, 0.7);
    env.ihr_std = Mat::Zero(1, 1);
    env.initial_dist = Vec::Ones(1);
    const double expected = 0.7 * (1.0 - std::pow(0.8, 5)) / 0.2;  // 2.35312...
    CHECK(expected == Approx(2.35312).margin(1e-6));
    CHECK(envs::exact_policy_human_value(env, uniform_policy(1)) == Approx(expected).margin(1e-12));
    rng::Rng gen(5);
    const core::Trajectory traj = envs::sample_episode(env, uniform_policy(1), gen);
    CHECK(traj.human_return == Approx(expected).margin(1e-12));
    const Mat occ = envs::exact_visitation(env, uniform_policy(1));
    CHECK(occ(0, 0) == Approx(1.0).margin(1e-12));
}

TEST_CASE("symmetric random walk with constant reward mean", "[envs]") {
    TabularHmdp env;
    env.id = "walk";
    env.num_states = 2;
    env.num_actions = 2;
    env.horizon = 5;
    env.discount = 0.8;
    Mat flip(2, 2);
    flip << 0.5, 0.5, 0.5, 0.5;
    env.transition = {flip, flip};
    env.env_reward = Mat::Zero(2, 2);
    env.ihr_mean = Mat::Constant(2, 2, 0.7);
    env.ihr_std = Mat::Zero(2, 2);
    env.initial_dist = Vec::Constant(2, 0.5);
    const double expected = 0.7 * (1.0 - std::pow(0.8, 5)) / 0.2;
    for (double eps : {0.0, 0.5, 1.0}) {
        const Policy pol = envs::epsilon_greedy_policy({0, 1}, 2, eps, "p");
        CHECK(envs::exact_policy_human_value(env, pol) == Approx(expected).margin(1e-12));
    }
}

TEST_CASE("dynamic program matches path enumeration", "[envs]") {
    rng::Rng gen(31);
    for (int rep = 0; rep < 5; ++rep) {
        const TabularHmdp env = random_tiny_env(gen, 3, 2, 4);
        Policy pol;
        pol.kind = core::PolicyKind::TabularSoftmax;
        pol.num_actions = 2;
        pol.logits.resize(3, 2);
        for (Eigen::Index i = 0; i < pol.logits.size(); ++i) pol.logits.data()[i] = gen.uniform(-1.5, 1.5);

        CHECK(envs::exact_policy_human_value(env, pol) == Approx(oracles::enum_human_value(env, pol)).margin(1e-9));

        const Mat dp = envs::exact_visitation(env, pol);
        const Mat brute = oracles::enum_visitation(env, pol);
        CHECK((dp - brute).cwiseAbs().maxCoeff() <= 1e-9);
        CHECK(dp.sum() == Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("episode statistics agree with the exact oracle", "[envs]") {
    // 50,000-episode Monte Carlo mean of the human return vs dynamic
    // programming, within 3 standard errors, for both suite tabular envs.
    const auto suite = envs::make_benchmark_suite(17, 200);
    int tabular_checked = 0;
    for (const auto& bench : suite) {
        const TabularHmdp* env = std::get_if<TabularHmdp>(&bench.env);
        if (env == nullptr) continue;
        for (const Policy* pol : {&bench.behavior, &bench.targets[2]}) {
            const double exact = envs::exact_policy_human_value(*env, *pol);
            const int n = 50000;
            double sum = 0.0, sumsq = 0.0;
            for (int i = 0; i < n; ++i) {
                rng::Rng gen(rng::derive_seed(1234, "mc", static_cast<uint64_t>(i)));
                const double g = envs::sample_episode(*env, *pol, gen).human_return;
                sum += g;
                sumsq += g * g;
            }
            const double mean = sum / n;
            const double se = std::sqrt(std::max(0.0, sumsq / n - mean * mean) / n);
            INFO(env->id << " policy " << pol->id << " exact " << exact << " mc " << mean << " se " << se);
            CHECK(std::abs(mean - exact) <= 3.0 * se);
        }
        ++tabular_checked;
    }
    CHECK(tabular_checked == 2);
}

TEST_CASE("sampled trajectories validate and log behavior probabilities", "[envs]") {
    const TabularHmdp env = envs::make_constant_ihr_env(1.0);
    const Policy pol = uniform_policy(env.num_actions);
    rng::Rng gen(9);
    const core::Trajectory traj = envs::sample_episode(env, pol, gen);
    CHECK_NOTHROW(core::validate_trajectory(env.spec(), traj));
    REQUIRE(traj.behavior_probs.size() == static_cast<size_t>(env.horizon));
    for (double p : traj.behavior_probs) CHECK(p == Approx(0.5).margin(1e-12));
}

TEST_CASE("dataset generation is deterministic in the seed", "[envs]") {
    const TabularHmdp env = envs::make_constant_ihr_env(1.0);
    const Policy pol = uniform_policy(env.num_actions);
    const auto a = core::dataset_to_jsonl(envs::sample_dataset(env, pol, 20, 42, "p"));
    const auto b = core::dataset_to_jsonl(envs::sample_dataset(env, pol, 20, 42, "p"));
    const auto c = core::dataset_to_jsonl(envs::sample_dataset(env, pol, 20, 43, "p"));
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("hidden-factor environment keeps the confounder out of states", "[envs]") {
    const auto suite = envs::make_benchmark_suite(3, 200);
    const envs::LatentConfounderEnv* env = nullptr;
    const envs::BenchmarkCase* bench = nullptr;
    for (const auto& b : suite)
        if (const auto* e = std::get_if<envs::LatentConfounderEnv>(&b.env); e && e->correlation_knob == 0.0) {
            env = e;
            bench = &b;
        }
    REQUIRE(env != nullptr);
    CHECK(env->spec().state_dim == env->x_dim + env->y_dim);

    rng::Rng gen(8);
    const core::Trajectory traj = envs::sample_episode(*env, bench->behavior, gen);
    CHECK_NOTHROW(core::validate_trajectory(env->spec(), traj));
    for (const Vec& s : traj.states) CHECK(s.size() == env->x_dim + env->y_dim);
}

TEST_CASE("correlation knob controls env-vs-human return correlation", "[envs]") {
    SECTION("knob 0: decorrelated") {
        const envs::LatentConfounderEnv env = envs::detail::make_latent_env(0.0);
        const Policy behavior = envs::detail::score_softmax_policy(
            (Vec(4) << -0.68, -0.40, 0.18, 0.90).finished(), 0.8, env.state_dim(), "b");
        std::vector<double> genv, ghum;
        for (int i = 0; i < 1000; ++i) {
            rng::Rng gen(rng::derive_seed(555, "corr", static_cast<uint64_t>(i)));
            const core::Trajectory traj = envs::sample_episode(env, behavior, gen);
            genv.push_back(core::discounted_return(traj.env_rewards, env.discount));
            ghum.push_back(traj.human_return);
        }
        const double corr = oracles::pearson(genv, ghum);
        INFO("pearson " << corr);
        CHECK(corr > -0.3);
        CHECK(corr < 0.3);
    }
    SECTION("knob 1: human reward is env reward plus bounded noise") {
        const envs::LatentConfounderEnv env = envs::detail::make_latent_env(1.0);
        rng::Rng gen(66);
        const core::Trajectory traj = envs::sample_episode(env, uniform_policy(4), gen);
        for (size_t t = 0; t < traj.true_ihrs.size(); ++t)
            CHECK(std::abs(traj.true_ihrs[t] - traj.env_rewards[t]) <= env.human_noise + 1e-12);
    }
    SECTION("knob validation") {
        envs::LatentConfounderEnv env = envs::detail::make_latent_env(0.0);
        env.correlation_knob = 1.5;
        CHECK_THROWS_AS(envs::validate_env(env), std::invalid_argument);
    }
}

TEST_CASE("benchmark suite shape and value spread", "[envs]") {
    const auto suite = envs::make_benchmark_suite(7, 2000);
    REQUIRE(suite.size() == 4);

    int tabular = 0, latent = 0;
    for (const auto& bench : suite) {
        if (std::holds_alternative<TabularHmdp>(bench.env))
            ++tabular;
        else
            ++latent;
        REQUIRE(bench.targets.size() >= 6);
        REQUIRE(bench.targets.size() == bench.target_values.size());
        // A worst-case baseline policy is part of every target set.
        bool has_worst = false;
        for (const auto& pol : bench.targets) has_worst |= (pol.id == "worst");
        CHECK(has_worst);
        const double hi = *std::max_element(bench.target_values.begin(), bench.target_values.end());
        const double lo = *std::min_element(bench.target_values.begin(), bench.target_values.end());
        INFO(bench.name << " values span [" << lo << ", " << hi << "], behavior " << bench.behavior_value);
        CHECK(hi - lo > 0.1);  // two targets differ by at least 10% of the range
        // The logging policy is clearly mediocre.
        CHECK(bench.behavior_value <= 0.6 * hi);
    }
    CHECK(tabular == 2);
    CHECK(latent == 2);
}

TEST_CASE("mixture policy is the exact per-state probability average", "[envs]") {
    const TabularHmdp env = envs::detail::make_chain_env();
    const std::vector<int> best = envs::greedy_policy_map(env, envs::effective_ihr_mean_table(env));
    const Policy uni = envs::epsilon_greedy_policy(best, env.num_actions, 1.0, "u");
    const Policy mid = envs::epsilon_greedy_policy(best, env.num_actions, 0.5, "m");
    const Policy mix = envs::mixture_policy(env, {uni, mid}, {0.5, 0.5}, "mix");
    const Mat pu = envs::tabular_policy_matrix(env, uni);
    const Mat pm = envs::tabular_policy_matrix(env, mid);
    const Mat px = envs::tabular_policy_matrix(env, mix);
    CHECK((px - 0.5 * (pu + pm)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("total variation distance between tabular policies", "[envs]") {
    const TabularHmdp env = envs::detail::make_chain_env();
    const std::vector<int> best = envs::greedy_policy_map(env, envs::effective_ihr_mean_table(env));
    const Policy greedy = envs::epsilon_greedy_policy(best, 3, 0.0, "g");
    const Policy uni = envs::epsilon_greedy_policy(best, 3, 1.0, "u");
    CHECK(envs::policy_tv_distance(env, greedy, greedy) == 0.0);
    CHECK(envs::policy_tv_distance(env, greedy, uni) == Approx(2.0 / 3.0).margin(1e-12));
}
