#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "hfope/core.hpp"
#include "hfope/rng.hpp"

namespace hfope::envs {

using core::Mat;
using core::Policy;
using core::Trajectory;
using core::Vec;

// ---------------------------------------------------------------------------
// Tabular environment with stochastic per-step human rewards
// ---------------------------------------------------------------------------

/// Finite MDP whose per-step human reward is a Gaussian(ihr_mean, ihr_std^2)
/// truncated below at 0, sampled i.i.d. given (s, a). Environment rewards are
/// deterministic. States are emitted one-hot. Exact oracles below integrate
/// the truncated-Gaussian mean, so Monte Carlo and dynamic programming agree.
struct TabularHmdp {
    std::string id;
    int num_states = 0;
    int num_actions = 0;
    int horizon = 0;
    double discount = 0.0;
    std::vector<Mat> transition;  // one S x S row-stochastic matrix per action
    Mat env_reward;               // S x A
    Mat ihr_mean;                 // S x A, elementwise >= 0
    Mat ihr_std;                  // S x A, elementwise >= 0
    Vec initial_dist;             // S

    core::HmdpSpec spec() const {
        core::HmdpSpec s;
        s.env_id = id;
        s.num_states = num_states;
        s.actions.num_actions = num_actions;
        s.discount = discount;
        s.horizon = horizon;
        return s;
    }
};

inline void validate_env(const TabularHmdp& env) {
    if (env.num_states < 1 || env.num_actions < 1) throw std::invalid_argument("env: needs >=1 state and action");
    if (env.horizon < 1) throw std::invalid_argument("env: horizon must be >= 1");
    if (!(env.discount >= 0.0 && env.discount < 1.0)) throw std::invalid_argument("env: discount must lie in [0, 1)");
    if (static_cast<int>(env.transition.size()) != env.num_actions)
        throw std::invalid_argument("env: one transition matrix per action required");
    for (const Mat& P : env.transition) {
        if (P.rows() != env.num_states || P.cols() != env.num_states)
            throw std::invalid_argument("env: transition matrix must be S x S");
        for (int s = 0; s < env.num_states; ++s) {
            if (P.row(s).minCoeff() < -1e-12) throw std::invalid_argument("env: negative transition probability");
            if (std::abs(P.row(s).sum() - 1.0) > 1e-9) throw std::invalid_argument("env: transition row must sum to 1");
        }
    }
    auto check_table = [&](const Mat& m, const char* name) {
        if (m.rows() != env.num_states || m.cols() != env.num_actions)
            throw std::invalid_argument(std::string("env: ") + name + " must be S x A");
        if (!m.allFinite()) throw std::invalid_argument(std::string("env: non-finite ") + name);
    };
    check_table(env.env_reward, "env_reward");
    check_table(env.ihr_mean, "ihr_mean");
    check_table(env.ihr_std, "ihr_std");
    if (env.ihr_mean.minCoeff() < 0.0) throw std::invalid_argument("env: ihr_mean must be >= 0 elementwise");
    if (env.ihr_std.minCoeff() < 0.0) throw std::invalid_argument("env: ihr_std must be >= 0 elementwise");
    if (env.initial_dist.size() != env.num_states || env.initial_dist.minCoeff() < -1e-12 ||
        std::abs(env.initial_dist.sum() - 1.0) > 1e-9)
        throw std::invalid_argument("env: initial_dist must be a distribution over states");
}

inline Vec one_hot(int idx, int dim) {
    Vec v = Vec::Zero(dim);
    v[idx] = 1.0;
    return v;
}

/// E[r^H | s, a]: mean of the truncated Gaussian actually sampled.
inline double effective_ihr_mean(const TabularHmdp& env, int s, int a) {
    return rng::truncated_gaussian_lower0_mean(env.ihr_mean(s, a), env.ihr_std(s, a));
}

inline Mat effective_ihr_mean_table(const TabularHmdp& env) {
    Mat m(env.num_states, env.num_actions);
    for (int s = 0; s < env.num_states; ++s)
        for (int a = 0; a < env.num_actions; ++a) m(s, a) = effective_ihr_mean(env, s, a);
    return m;
}

/// Per-state action probabilities of a policy evaluated over all tabular states.
inline Mat tabular_policy_matrix(const TabularHmdp& env, const Policy& pol) {
    Mat pi(env.num_states, env.num_actions);
    for (int s = 0; s < env.num_states; ++s)
        pi.row(s) = core::policy_action_dist(pol, one_hot(s, env.num_states)).transpose();
    return pi;
}

/// Rolls out one episode. States are one-hot; behavior_probs and true_ihrs
/// are filled in (the latter only exists in-process; serialization strips it).
inline Trajectory sample_episode(const TabularHmdp& env, const Policy& pol, rng::Rng& gen) {
    validate_env(env);
    Trajectory traj;
    traj.states.reserve(env.horizon + 1);
    std::vector<double> initial(env.initial_dist.data(), env.initial_dist.data() + env.num_states);
    int s = gen.categorical(initial);
    traj.states.push_back(one_hot(s, env.num_states));
    for (int t = 0; t < env.horizon; ++t) {
        const Vec dist = core::policy_action_dist(pol, traj.states.back());
        std::vector<double> p(dist.data(), dist.data() + dist.size());
        const int a = gen.categorical(p);
        traj.actions.push_back(a);
        traj.behavior_probs.push_back(dist[a]);
        traj.env_rewards.push_back(env.env_reward(s, a));
        traj.true_ihrs.push_back(gen.truncated_gaussian_lower0(env.ihr_mean(s, a), env.ihr_std(s, a)));
        const Mat& P = env.transition[a];
        std::vector<double> next(env.num_states);
        for (int ns = 0; ns < env.num_states; ++ns) next[ns] = P(s, ns);
        s = gen.categorical(next);
        traj.states.push_back(one_hot(s, env.num_states));
    }
    traj.human_return = core::discounted_return(traj.true_ihrs, env.discount);
    return traj;
}

inline core::OfflineDataset sample_dataset(const TabularHmdp& env, const Policy& pol, int n, uint64_t seed,
                                           const std::string& provenance) {
    core::OfflineDataset data;
    data.spec = env.spec();
    data.seed = seed;
    data.provenance = provenance;
    data.trajectories.reserve(n);
    for (int i = 0; i < n; ++i) {
        rng::Rng gen(rng::derive_seed(seed, "episode", static_cast<uint64_t>(i)));
        data.trajectories.push_back(sample_episode(env, pol, gen));
    }
    return data;
}

/// Exact E[sum_t discount^t reward(s_t, a_t)] under pol, by propagating the
/// state-occupancy vector through the transition kernel for horizon steps.
inline double exact_policy_value(const TabularHmdp& env, const Policy& pol, const Mat& reward) {
    validate_env(env);
    const Mat pi = tabular_policy_matrix(env, pol);
    Vec d = env.initial_dist;
    double value = 0.0;
    double w = 1.0;
    for (int t = 0; t < env.horizon; ++t) {
        for (int s = 0; s < env.num_states; ++s) value += w * d[s] * pi.row(s).dot(reward.row(s));
        Vec next = Vec::Zero(env.num_states);
        for (int s = 0; s < env.num_states; ++s)
            for (int a = 0; a < env.num_actions; ++a) next += d[s] * pi(s, a) * env.transition[a].row(s).transpose();
        d = next;
        w *= env.discount;
    }
    return value;
}

/// Exact expected discounted human return of a policy.
inline double exact_policy_human_value(const TabularHmdp& env, const Policy& pol) {
    return exact_policy_value(env, pol, effective_ihr_mean_table(env));
}

/// Exact expected discounted environment return of a policy.
inline double exact_policy_env_value(const TabularHmdp& env, const Policy& pol) {
    return exact_policy_value(env, pol, env.env_reward);
}

/// Discount-weighted state-action visitation, normalized to sum to 1:
///   D(s, a) = sum_t discount^t P(s_t = s) pi(a | s) / sum_t discount^t.
inline Mat exact_visitation(const TabularHmdp& env, const Policy& pol) {
    validate_env(env);
    const Mat pi = tabular_policy_matrix(env, pol);
    Vec d = env.initial_dist;
    Mat occ = Mat::Zero(env.num_states, env.num_actions);
    double w = 1.0;
    double norm = 0.0;
    for (int t = 0; t < env.horizon; ++t) {
        for (int s = 0; s < env.num_states; ++s) occ.row(s) += w * d[s] * pi.row(s);
        norm += w;
        Vec next = Vec::Zero(env.num_states);
        for (int s = 0; s < env.num_states; ++s)
            for (int a = 0; a < env.num_actions; ++a) next += d[s] * pi(s, a) * env.transition[a].row(s).transpose();
        d = next;
        w *= env.discount;
    }
    return occ / norm;
}

// ---------------------------------------------------------------------------
// Policy constructors over tabular environments
// ---------------------------------------------------------------------------

/// Greedy stationary policy for the infinite-horizon discounted problem with
/// the given reward table (value iteration to 1e-12; argmax ties take the
/// lowest action index).
inline std::vector<int> greedy_policy_map(const TabularHmdp& env, const Mat& reward) {
    Vec v = Vec::Zero(env.num_states);
    for (int iter = 0; iter < 100000; ++iter) {
        Vec nv(env.num_states);
        for (int s = 0; s < env.num_states; ++s) {
            double best = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < env.num_actions; ++a)
                best = std::max(best, reward(s, a) + env.discount * env.transition[a].row(s).dot(v));
            nv[s] = best;
        }
        const double delta = (nv - v).cwiseAbs().maxCoeff();
        v = nv;
        if (delta < 1e-12) break;
    }
    std::vector<int> map(env.num_states);
    for (int s = 0; s < env.num_states; ++s) {
        double best = -std::numeric_limits<double>::infinity();
        int best_a = 0;
        for (int a = 0; a < env.num_actions; ++a) {
            const double q = reward(s, a) + env.discount * env.transition[a].row(s).dot(v);
            if (q > best + 1e-12) {
                best = q;
                best_a = a;
            }
        }
        map[s] = best_a;
    }
    return map;
}

/// Policy that explores uniformly with probability eps and otherwise follows
/// base. eps == 0 is a deterministic map; eps == 1 is uniform; anything in
/// between is encoded exactly as a tabular softmax over log-probabilities.
inline Policy epsilon_greedy_policy(const std::vector<int>& base, int num_actions, double eps, std::string id) {
    if (!(eps >= 0.0 && eps <= 1.0)) throw std::invalid_argument("epsilon_greedy_policy: eps must lie in [0, 1]");
    Policy pol;
    pol.id = std::move(id);
    pol.num_actions = num_actions;
    if (eps == 0.0) {
        pol.kind = core::PolicyKind::DeterministicMap;
        pol.action_map = base;
    } else if (eps == 1.0) {
        pol.kind = core::PolicyKind::UniformRandom;
    } else {
        pol.kind = core::PolicyKind::TabularSoftmax;
        pol.logits.resize(static_cast<Eigen::Index>(base.size()), num_actions);
        for (size_t s = 0; s < base.size(); ++s)
            for (int a = 0; a < num_actions; ++a)
                pol.logits(static_cast<Eigen::Index>(s), a) =
                    std::log((a == base[s] ? 1.0 - eps : 0.0) + eps / num_actions);
    }
    return pol;
}

/// Tabular policy with explicitly given strictly positive probabilities.
inline Policy tabular_policy_from_probs(const Mat& probs, std::string id) {
    if (probs.minCoeff() <= 0.0) throw std::invalid_argument("tabular_policy_from_probs: probabilities must be > 0");
    for (Eigen::Index s = 0; s < probs.rows(); ++s)
        if (std::abs(probs.row(s).sum() - 1.0) > 1e-9)
            throw std::invalid_argument("tabular_policy_from_probs: rows must sum to 1");
    Policy pol;
    pol.kind = core::PolicyKind::TabularSoftmax;
    pol.id = std::move(id);
    pol.num_actions = static_cast<int>(probs.cols());
    pol.logits = probs.array().log();
    return pol;
}

/// Per-step marginal of a policy mixture, encoded exactly as one tabular
/// policy (the trajectory likelihood then factorizes per step, which the
/// importance-sampling estimators rely on).
inline Policy mixture_policy(const TabularHmdp& env, const std::vector<Policy>& components,
                             const std::vector<double>& weights, std::string id) {
    if (components.empty() || components.size() != weights.size())
        throw std::invalid_argument("mixture_policy: components/weights mismatch");
    Mat probs = Mat::Zero(env.num_states, env.num_actions);
    double total = 0.0;
    for (size_t k = 0; k < components.size(); ++k) {
        if (weights[k] <= 0.0) throw std::invalid_argument("mixture_policy: weights must be positive");
        probs += weights[k] * tabular_policy_matrix(env, components[k]);
        total += weights[k];
    }
    probs /= total;
    return tabular_policy_from_probs(probs, std::move(id));
}

/// Largest per-state total-variation distance between two policies.
inline double policy_tv_distance(const TabularHmdp& env, const Policy& a, const Policy& b) {
    const Mat pa = tabular_policy_matrix(env, a);
    const Mat pb = tabular_policy_matrix(env, b);
    double tv = 0.0;
    for (int s = 0; s < env.num_states; ++s) tv = std::max(tv, 0.5 * (pa.row(s) - pb.row(s)).cwiseAbs().sum());
    return tv;
}

// ---------------------------------------------------------------------------
// Continuous-state environment with an episode-level hidden factor
// ---------------------------------------------------------------------------

/// Linear-Gaussian dynamics over a state split into an "environment" block x
/// and a "human" block y. A hidden factor h ~ N(0, I) is drawn once per
/// episode, drives the y block and the human reward, and is never emitted.
///
/// correlation_knob kappa in [-1, 1] interpolates the human reward mean:
///   mu^H = kappa * r_env + (1 - |kappa|) * (offset + wy y + u_hum[a] + wh h)
/// so kappa = 1 makes the human reward the environment reward plus bounded
/// uniform noise, kappa = -1 makes it anti-correlated, and kappa = 0 draws the
/// two signals from disjoint weight supports (wx/u_env touch only x and
/// actions 0..1; wy/u_hum touch only y and actions 2..3).
struct LatentConfounderEnv {
    std::string id;
    int x_dim = 0, y_dim = 0, hidden_dim = 0;
    int num_actions = 0;
    int horizon = 0;
    double discount = 0.0;
    double correlation_knob = 0.0;
    Mat Ax, Ay;          // block transition maps
    Mat Bx, By;          // action pushes, dim x A
    Mat Gh;              // hidden-factor drive on y, y_dim x hidden_dim
    Vec wx, wy;          // reward read-outs per block
    Vec u_env, u_hum;    // per-action reward weights
    Vec wh;              // direct hidden-factor weight in the human reward
    double offset = 0.0; // human reward baseline
    double noise_x = 0.0, noise_y = 0.0;
    double human_noise = 0.0;  // half-width of the bounded uniform noise
    double init_scale = 0.5;

    int state_dim() const { return x_dim + y_dim; }

    core::HmdpSpec spec() const {
        core::HmdpSpec s;
        s.env_id = id;
        s.state_dim = state_dim();
        s.actions.num_actions = num_actions;
        s.discount = discount;
        s.horizon = horizon;
        return s;
    }
};

inline void validate_env(const LatentConfounderEnv& env) {
    if (env.x_dim < 1 || env.y_dim < 1 || env.hidden_dim < 1)
        throw std::invalid_argument("env: block dimensions must be positive");
    if (env.num_actions < 1 || env.horizon < 1) throw std::invalid_argument("env: actions/horizon must be positive");
    if (!(env.discount >= 0.0 && env.discount < 1.0)) throw std::invalid_argument("env: discount must lie in [0, 1)");
    if (!(env.correlation_knob >= -1.0 && env.correlation_knob <= 1.0))
        throw std::invalid_argument("env: correlation_knob must lie in [-1, 1]");
    if (env.Ax.rows() != env.x_dim || env.Ax.cols() != env.x_dim) throw std::invalid_argument("env: Ax must be x_dim^2");
    if (env.Ay.rows() != env.y_dim || env.Ay.cols() != env.y_dim) throw std::invalid_argument("env: Ay must be y_dim^2");
    if (env.Bx.rows() != env.x_dim || env.Bx.cols() != env.num_actions)
        throw std::invalid_argument("env: Bx must be x_dim x A");
    if (env.By.rows() != env.y_dim || env.By.cols() != env.num_actions)
        throw std::invalid_argument("env: By must be y_dim x A");
    if (env.Gh.rows() != env.y_dim || env.Gh.cols() != env.hidden_dim)
        throw std::invalid_argument("env: Gh must be y_dim x hidden_dim");
    if (env.wx.size() != env.x_dim || env.wy.size() != env.y_dim) throw std::invalid_argument("env: reward read-out size");
    if (env.u_env.size() != env.num_actions || env.u_hum.size() != env.num_actions)
        throw std::invalid_argument("env: per-action reward weight size");
    if (env.wh.size() != env.hidden_dim) throw std::invalid_argument("env: wh must be hidden_dim");
    if (env.noise_x < 0 || env.noise_y < 0 || env.human_noise < 0)
        throw std::invalid_argument("env: noise scales must be >= 0");
}

inline double env_reward(const LatentConfounderEnv& env, const Vec& state, int action) {
    return env.wx.dot(state.head(env.x_dim)) + env.u_env[action];
}

inline Trajectory sample_episode(const LatentConfounderEnv& env, const Policy& pol, rng::Rng& gen) {
    validate_env(env);
    Vec h(env.hidden_dim);
    for (int i = 0; i < env.hidden_dim; ++i) h[i] = gen.gaussian();
    Vec x(env.x_dim), y(env.y_dim);
    for (int i = 0; i < env.x_dim; ++i) x[i] = gen.gaussian(0.0, env.init_scale);
    for (int i = 0; i < env.y_dim; ++i) y[i] = gen.gaussian(0.0, env.init_scale);

    Trajectory traj;
    auto emit = [&]() {
        Vec s(env.state_dim());
        s << x, y;
        traj.states.push_back(std::move(s));
    };
    emit();
    const double k = env.correlation_knob;
    for (int t = 0; t < env.horizon; ++t) {
        const Vec dist = core::policy_action_dist(pol, traj.states.back());
        std::vector<double> p(dist.data(), dist.data() + dist.size());
        const int a = gen.categorical(p);
        traj.actions.push_back(a);
        traj.behavior_probs.push_back(dist[a]);
        const double r = env_reward(env, traj.states.back(), a);
        traj.env_rewards.push_back(r);
        const double base = env.offset + env.wy.dot(y) + env.u_hum[a] + env.wh.dot(h);
        const double mean_h = k * r + (1.0 - std::abs(k)) * base;
        traj.true_ihrs.push_back(mean_h + env.human_noise * gen.uniform(-1.0, 1.0));
        Vec nx = env.Ax * x + env.Bx.col(a);
        for (int i = 0; i < env.x_dim; ++i) nx[i] += env.noise_x * gen.gaussian();
        Vec ny = env.Ay * y + env.By.col(a) + env.Gh * h;
        for (int i = 0; i < env.y_dim; ++i) ny[i] += env.noise_y * gen.gaussian();
        x = std::move(nx);
        y = std::move(ny);
        emit();
    }
    traj.human_return = core::discounted_return(traj.true_ihrs, env.discount);
    return traj;
}

inline core::OfflineDataset sample_dataset(const LatentConfounderEnv& env, const Policy& pol, int n, uint64_t seed,
                                           const std::string& provenance) {
    core::OfflineDataset data;
    data.spec = env.spec();
    data.seed = seed;
    data.provenance = provenance;
    data.trajectories.reserve(n);
    for (int i = 0; i < n; ++i) {
        rng::Rng gen(rng::derive_seed(seed, "episode", static_cast<uint64_t>(i)));
        data.trajectories.push_back(sample_episode(env, pol, gen));
    }
    return data;
}

struct McValue {
    double mean = 0.0;
    double se = 0.0;
};

/// Monte Carlo human value of a policy; ground truth for continuous-state
/// environments, where no exact dynamic program exists.
inline McValue mc_policy_human_value(const LatentConfounderEnv& env, const Policy& pol, int n, uint64_t seed) {
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        rng::Rng gen(rng::derive_seed(seed, "mc-episode", static_cast<uint64_t>(i)));
        const double g = sample_episode(env, pol, gen).human_return;
        sum += g;
        sumsq += g * g;
    }
    McValue out;
    out.mean = sum / n;
    const double var = std::max(0.0, sumsq / n - out.mean * out.mean);
    out.se = std::sqrt(var / n);
    return out;
}

// ---------------------------------------------------------------------------
// Benchmark suite
// ---------------------------------------------------------------------------

using BenchmarkEnv = std::variant<TabularHmdp, LatentConfounderEnv>;

inline core::HmdpSpec env_spec(const BenchmarkEnv& env) {
    return std::visit([](const auto& e) { return e.spec(); }, env);
}

inline Trajectory sample_episode(const BenchmarkEnv& env, const Policy& pol, rng::Rng& gen) {
    return std::visit([&](const auto& e) { return sample_episode(e, pol, gen); }, env);
}

inline core::OfflineDataset sample_dataset(const BenchmarkEnv& env, const Policy& pol, int n, uint64_t seed,
                                           const std::string& provenance) {
    return std::visit([&](const auto& e) { return sample_dataset(e, pol, n, seed, provenance); }, env);
}

/// One ready-to-run evaluation problem: an environment, a logging (behavior)
/// policy, a spread of target policies, and their ground-truth human values
/// (exact for tabular environments, high-precision Monte Carlo otherwise).
struct BenchmarkCase {
    std::string name;
    BenchmarkEnv env;
    Policy behavior;
    std::vector<Policy> targets;
    std::vector<double> target_values;
    std::vector<double> target_value_ses;  // 0 where the value is exact
    double behavior_value = 0.0;
};

namespace detail {

inline TabularHmdp make_chain_env() {
    TabularHmdp env;
    env.id = "chain4";
    env.num_states = 4;
    env.num_actions = 3;  // 0 = left, 1 = stay, 2 = right
    env.horizon = 10;
    env.discount = 0.9;
    const int S = env.num_states;
    env.transition.assign(3, Mat::Zero(S, S));
    for (int s = 0; s < S; ++s) {
        const int left = std::max(0, s - 1);
        const int right = std::min(S - 1, s + 1);
        env.transition[0](s, left) += 0.85;
        env.transition[0](s, s) += 0.15;
        env.transition[1](s, s) += 0.90;
        env.transition[1](s, left) += 0.05;
        env.transition[1](s, right) += 0.05;
        env.transition[2](s, right) += 0.85;
        env.transition[2](s, s) += 0.15;
    }
    const Vec pos = (Vec(4) << 0.05, 0.3, 0.8, 2.0).finished();
    const Vec act = (Vec(3) << 0.25, 0.5, 1.0).finished();
    env.ihr_mean = pos * act.transpose();
    env.ihr_std = (0.2 + 0.05 * env.ihr_mean.array()).matrix();
    env.env_reward.resize(4, 3);
    env.env_reward << 0.1, 0.1, 0.1, 0.6, 0.6, 0.6, 0.3, 0.3, 0.3, 0.9, 0.9, 0.9;
    env.initial_dist = (Vec(4) << 0.7, 0.3, 0.0, 0.0).finished();
    validate_env(env);
    return env;
}

inline TabularHmdp make_loopy_env() {
    TabularHmdp env;
    env.id = "loopy3";
    env.num_states = 3;
    env.num_actions = 4;
    env.horizon = 6;
    env.discount = 0.8;
    const int S = env.num_states;
    env.transition.assign(4, Mat::Zero(S, S));
    for (int s = 0; s < S; ++s) {
        for (int a = 0; a < 3; ++a) {
            // Action a < 3 mostly jumps to state a.
            for (int ns = 0; ns < S; ++ns) env.transition[a](s, ns) = (ns == a) ? 0.75 : 0.125;
        }
        for (int ns = 0; ns < S; ++ns) env.transition[3](s, ns) = (ns == s) ? 0.5 : 0.25;
    }
    env.ihr_mean.resize(3, 4);
    env.ihr_mean << 0.2, 0.1, 0.4, 0.3,
                    0.1, 0.3, 0.6, 0.4,
                    0.3, 0.4, 1.6, 1.2;
    env.ihr_std = Mat::Constant(3, 4, 0.3) + 0.1 * env.ihr_mean;
    env.env_reward.resize(3, 4);
    env.env_reward << 0.5, 0.0, 0.2, 0.1,
                      0.0, 0.4, 0.1, 0.0,
                      0.2, 0.1, 0.3, 0.8;
    env.initial_dist = Vec::Constant(3, 1.0 / 3.0);
    validate_env(env);
    return env;
}

inline LatentConfounderEnv make_latent_env(double knob) {
    LatentConfounderEnv env;
    env.id = knob >= 0.999 ? "latent-aligned" : "latent-confounder";
    env.x_dim = 3;
    env.y_dim = 3;
    env.hidden_dim = 2;
    env.num_actions = 4;
    env.horizon = 10;
    env.discount = 0.9;
    env.correlation_knob = knob;
    env.Ax.resize(3, 3);
    env.Ax << 0.55, 0.10, 0.00,
              -0.10, 0.50, 0.05,
              0.00, 0.05, 0.45;
    env.Ay.resize(3, 3);
    env.Ay << 0.50, 0.05, 0.00,
              0.05, 0.55, -0.10,
              0.00, 0.10, 0.50;
    env.Bx.resize(3, 4);
    env.Bx << 0.5, -0.5, 0.2, -0.2,
              0.0, 0.0, 0.3, -0.3,
              0.1, -0.1, 0.0, 0.0;
    env.By.resize(3, 4);
    env.By << -0.30, -0.10, 0.20, 0.50,
              0.00, 0.10, 0.30, 0.40,
              0.10, 0.00, -0.10, 0.20;
    env.Gh.resize(3, 2);
    env.Gh << 0.5, 0.2,
              0.2, 0.4,
              0.1, 0.1;
    env.wx = (Vec(3) << 0.7, 0.3, 0.1).finished();
    env.wy = (Vec(3) << 0.8, 0.4, 0.2).finished();
    env.u_env = (Vec(4) << 0.6, -0.6, 0.0, 0.0).finished();
    env.u_hum = (Vec(4) << 0.0, 0.0, 0.4, 1.6).finished();
    env.wh = (Vec(2) << 0.6, 0.4).finished();
    env.offset = 0.2;
    env.noise_x = 0.15;
    env.noise_y = 0.15;
    env.human_noise = 0.2;
    validate_env(env);
    return env;
}

/// State-independent softmax over per-action scores, encoded as a featurized
/// policy with a zero state block (only the bias column is active).
inline Policy score_softmax_policy(const Vec& scores, double scale, int state_dim, std::string id) {
    Policy pol;
    pol.kind = core::PolicyKind::FeaturizedSoftmax;
    pol.id = std::move(id);
    pol.num_actions = static_cast<int>(scores.size());
    pol.weights = Mat::Zero(scores.size(), state_dim + 1);
    pol.weights.col(state_dim) = scale * scores;
    return pol;
}

inline void add_tabular_case(std::vector<BenchmarkCase>& out, const TabularHmdp& env) {
    BenchmarkCase c;
    c.name = env.id;
    const std::vector<int> best = greedy_policy_map(env, effective_ihr_mean_table(env));
    const std::vector<int> worst = greedy_policy_map(env, -effective_ihr_mean_table(env));
    for (double eps : {0.0, 0.1, 0.25, 0.5, 0.75, 1.0}) {
        std::ostringstream id;
        id << "eps" << eps;
        c.targets.push_back(epsilon_greedy_policy(best, env.num_actions, eps, id.str()));
    }
    c.targets.push_back(epsilon_greedy_policy(worst, env.num_actions, 0.0, "worst"));
    const Policy uniform = epsilon_greedy_policy(best, env.num_actions, 1.0, "uniform");
    const Policy mid = epsilon_greedy_policy(best, env.num_actions, 0.5, "mid");
    c.behavior = mixture_policy(env, {uniform, mid}, {0.5, 0.5},
                                "behavior: per-step mixture 0.5 uniform + 0.5 eps0.5-greedy");
    for (const Policy& pol : c.targets) {
        c.target_values.push_back(exact_policy_human_value(env, pol));
        c.target_value_ses.push_back(0.0);
    }
    c.behavior_value = exact_policy_human_value(env, c.behavior);
    c.env = env;
    out.push_back(std::move(c));
}

inline void add_latent_case(std::vector<BenchmarkCase>& out, const LatentConfounderEnv& env, uint64_t seed,
                            int truth_rollouts) {
    BenchmarkCase c;
    c.name = env.id;
    // Per-action quality scores: immediate action weight plus the discounted
    // drift each action push contributes through the relevant reward read-out.
    Vec score(env.num_actions);
    const double drift = env.discount / (1.0 - 0.55 * env.discount);
    if (env.correlation_knob >= 0.999) {
        for (int a = 0; a < env.num_actions; ++a) score[a] = env.u_env[a] + drift * env.wx.dot(env.Bx.col(a));
    } else {
        for (int a = 0; a < env.num_actions; ++a) score[a] = env.u_hum[a] + drift * env.wy.dot(env.By.col(a));
    }
    const double spread = score.maxCoeff() - score.minCoeff();
    const Vec norm_score = score / (spread > 0 ? spread : 1.0);
    const int D = env.state_dim();
    for (double q : {0.0, 0.75, 1.5, 3.0, 5.0}) {
        std::ostringstream id;
        id << "q" << q;
        c.targets.push_back(score_softmax_policy(norm_score, q, D, id.str()));
    }
    c.targets.push_back(score_softmax_policy(norm_score, -3.0, D, "worst"));
    c.behavior = score_softmax_policy(norm_score, 0.8, D, "behavior");
    for (size_t i = 0; i < c.targets.size(); ++i) {
        const McValue v = mc_policy_human_value(env, c.targets[i], truth_rollouts,
                                                rng::derive_seed(seed, "truth-" + env.id, i));
        c.target_values.push_back(v.mean);
        c.target_value_ses.push_back(v.se);
    }
    c.behavior_value =
        mc_policy_human_value(env, c.behavior, truth_rollouts, rng::derive_seed(seed, "truth-" + env.id, 999)).mean;
    c.env = env;
    out.push_back(std::move(c));
}

}  // namespace detail

/// Standard evaluation problems: two tabular environments with exact oracles
/// and the hidden-factor environment at correlation knob 0 and 1. Target sets
/// span near-optimal to adversarially bad policies; the behavior policy is a
/// deliberately mediocre mixture.
inline std::vector<BenchmarkCase> make_benchmark_suite(uint64_t seed, int truth_rollouts = 20000) {
    std::vector<BenchmarkCase> suite;
    detail::add_tabular_case(suite, detail::make_chain_env());
    detail::add_tabular_case(suite, detail::make_loopy_env());
    detail::add_latent_case(suite, detail::make_latent_env(0.0), seed, truth_rollouts);
    detail::add_latent_case(suite, detail::make_latent_env(1.0), seed, truth_rollouts);
    return suite;
}

/// Small environment whose per-step human reward is the constant c: every
/// episode's human return equals c (1 - discount^horizon) / (1 - discount).
inline TabularHmdp make_constant_ihr_env(double c) {
    if (c <= 0.0) throw std::invalid_argument("make_constant_ihr_env: c must be positive");
    TabularHmdp env;
    env.id = "constant-ihr";
    env.num_states = 3;
    env.num_actions = 2;
    env.horizon = 8;
    env.discount = 0.6;
    env.transition.assign(2, Mat::Zero(3, 3));
    for (int s = 0; s < 3; ++s) {
        env.transition[0](s, (s + 1) % 3) = 0.7;
        env.transition[0](s, s) = 0.3;
        env.transition[1](s, s) = 0.8;
        env.transition[1](s, (s + 2) % 3) = 0.2;
    }
    env.ihr_mean = Mat::Constant(3, 2, c);
    env.ihr_std = Mat::Zero(3, 2);
    env.env_reward.resize(3, 2);
    env.env_reward << 0.2, 0.15, 0.3, 0.25, 0.4, 0.35;
    env.initial_dist = Vec::Constant(3, 1.0 / 3.0);
    validate_env(env);
    return env;
}

}  // namespace hfope::envs
