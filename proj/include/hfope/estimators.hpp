#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hfope/autodiff.hpp"
#include "hfope/core.hpp"
#include "hfope/envs.hpp"

// Off-policy estimators of a target policy's expected human return from
// logged episodes. Everything that averages over episodes is exposed as a
// per-episode score vector; the estimate is the mean of the scores and a
// bootstrap over them gives its standard error. Estimators that consume
// per-step rewards take a reconstruction (one reward vector per episode);
// the plain importance-sampling estimator consumes only episode returns.

namespace hfope::estimators {

using core::Mat;
using core::OfflineDataset;
using core::Policy;
using core::Trajectory;
using core::Vec;

using Reconstruction = std::vector<std::vector<double>>;  // [episode][step]

inline double mean(const std::vector<double>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean: empty");
    double total = 0.0;
    for (double x : xs) total += x;
    return total / xs.size();
}

inline double sample_variance(const std::vector<double>& xs) {
    const double m = mean(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - m) * (x - m);
    return xs.size() > 1 ? acc / (xs.size() - 1) : 0.0;
}

/// Standard error of the mean of scores by nonparametric bootstrap.
inline double bootstrap_se(const std::vector<double>& scores, int reps, uint64_t seed) {
    if (scores.empty()) throw std::invalid_argument("bootstrap: empty scores");
    if (reps < 2) throw std::invalid_argument("bootstrap: need at least two replicates");
    rng::Rng gen(rng::derive_seed(seed, "bootstrap"));
    std::vector<double> means;
    means.reserve(reps);
    const int n = static_cast<int>(scores.size());
    for (int r = 0; r < reps; ++r) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += scores[gen.uniform_int(n)];
        means.push_back(total / n);
    }
    return std::sqrt(sample_variance(means));
}

inline void check_reconstruction(const OfflineDataset& data, const Reconstruction& ihrs) {
    if (ihrs.size() != data.trajectories.size())
        throw std::invalid_argument("estimator: reconstruction episode count mismatch");
    for (size_t i = 0; i < ihrs.size(); ++i)
        if (ihrs[i].size() != data.trajectories[i].actions.size())
            throw std::invalid_argument("estimator: reconstruction step count mismatch");
}

// --------------------------------------------------------------------------
// Behavior policy: logged, estimated from data, or a known policy
// --------------------------------------------------------------------------

struct BehaviorFitConfig {
    int iters = 300;       // full-batch optimizer steps (featurized fit)
    double lr = 0.1;
    double audit_frac = 0.1;  // share of steps used for the likelihood audit
};

/// Action distribution of the logging policy estimated from the data:
/// Laplace-smoothed counts on tabular state spaces, multinomial logistic
/// regression on feature state spaces. heldout_ll is a mean log-likelihood
/// on a seeded subsample, reported as a fit audit.
struct BehaviorModel {
    bool tabular = true;
    Mat probs;        // tabular: num_states x num_actions
    Mat weights;      // featurized: num_actions x (state_dim + 1)
    int num_actions = 0;
    double heldout_ll = 0.0;
    int unvisited_states = 0;

    Vec action_dist(const Vec& state) const {
        if (tabular) return probs.row(core::state_index(state)).transpose();
        Vec phi(state.size() + 1);
        phi << state, 1.0;
        Vec logits = weights * phi;
        logits.array() -= logits.maxCoeff();
        Vec p = logits.array().exp();
        return p / p.sum();
    }
    double prob(const Vec& state, int action) const { return action_dist(state)[action]; }
};

inline BehaviorModel estimate_behavior(const OfflineDataset& data, const core::HmdpSpec& spec, uint64_t seed,
                                       const BehaviorFitConfig& cfg = {}) {
    if (data.trajectories.empty()) throw std::invalid_argument("behavior fit: empty dataset");
    const int A = spec.actions.num_actions;
    if (A <= 0) throw std::invalid_argument("behavior fit: discrete actions only");

    BehaviorModel model;
    model.num_actions = A;
    model.tabular = spec.num_states > 0;

    if (model.tabular) {
        const int S = spec.num_states;
        Mat counts = Mat::Zero(S, A);
        for (const auto& traj : data.trajectories)
            for (size_t t = 0; t < traj.actions.size(); ++t)
                counts(core::state_index(traj.states[t]), traj.actions[t]) += 1.0;
        model.probs.resize(S, A);
        for (int s = 0; s < S; ++s) {
            const double total = counts.row(s).sum();
            if (total == 0.0) ++model.unvisited_states;
            // Add-one smoothing; a never-visited state falls back to uniform.
            model.probs.row(s) = (counts.row(s).array() + 1.0) / (total + A);
        }
    } else {
        const int d = spec.state_dim;
        std::vector<std::pair<const Vec*, int>> steps;
        for (const auto& traj : data.trajectories)
            for (size_t t = 0; t < traj.actions.size(); ++t) steps.emplace_back(&traj.states[t], traj.actions[t]);
        const int m = static_cast<int>(steps.size());
        Mat phi(d + 1, m);
        Mat onehot = Mat::Zero(A, m);
        for (int j = 0; j < m; ++j) {
            phi.col(j).topRows(d) = *steps[j].first;
            phi(d, j) = 1.0;
            onehot(steps[j].second, j) = 1.0;
        }
        diff::ParameterSet params;
        params.add("w", Mat::Zero(A, d + 1), false);
        diff::AdamConfig opt;
        opt.lr = cfg.lr;
        for (int it = 0; it < cfg.iters; ++it) {
            Mat logits = params.value(0) * phi;
            logits.rowwise() -= logits.colwise().maxCoeff();
            Mat p = logits.array().exp();
            p.array().rowwise() /= p.colwise().sum().array();
            const Mat grad = (p - onehot) * phi.transpose() / m;
            params.adam_step({grad}, opt);
        }
        model.weights = params.value(0);
    }

    // Likelihood audit on a seeded subsample of logged steps.
    rng::Rng gen(rng::derive_seed(seed, "behavior-audit"));
    double ll = 0.0;
    int used = 0;
    for (const auto& traj : data.trajectories)
        for (size_t t = 0; t < traj.actions.size(); ++t)
            if (gen.uniform() < cfg.audit_frac) {
                ll += std::log(std::max(model.prob(traj.states[t], traj.actions[t]), 1e-300));
                ++used;
            }
    model.heldout_ll = used > 0 ? ll / used : 0.0;
    return model;
}

// --------------------------------------------------------------------------
// Importance weights
// --------------------------------------------------------------------------

/// Per-step behavior probabilities beta(a_t | s_t), one row per episode.
using ProbTable = std::vector<std::vector<double>>;

inline ProbTable logged_behavior_probs(const OfflineDataset& data) {
    ProbTable probs;
    for (const auto& traj : data.trajectories) {
        if (traj.behavior_probs.size() != traj.actions.size())
            throw std::invalid_argument("weights: dataset carries no logged behavior probabilities");
        probs.push_back(traj.behavior_probs);
    }
    return probs;
}

inline ProbTable policy_behavior_probs(const OfflineDataset& data, const Policy& behavior) {
    ProbTable probs;
    for (const auto& traj : data.trajectories) {
        std::vector<double> row;
        for (size_t t = 0; t < traj.actions.size(); ++t)
            row.push_back(core::policy_action_prob(behavior, traj.states[t], traj.actions[t]));
        probs.push_back(std::move(row));
    }
    return probs;
}

inline ProbTable model_behavior_probs(const OfflineDataset& data, const BehaviorModel& model) {
    ProbTable probs;
    for (const auto& traj : data.trajectories) {
        std::vector<double> row;
        for (size_t t = 0; t < traj.actions.size(); ++t) row.push_back(model.prob(traj.states[t], traj.actions[t]));
        probs.push_back(std::move(row));
    }
    return probs;
}

struct WeightTable {
    std::vector<std::vector<double>> step;  // pi/beta at each step
    std::vector<std::vector<double>> cum;   // running product through step t
    std::vector<double> full;               // product over the whole episode
    double ess = 0.0;                       // effective sample size of full
    double max_weight = 0.0;
};

inline WeightTable importance_weights(const OfflineDataset& data, const Policy& target,
                                      const ProbTable& behavior_probs) {
    if (behavior_probs.size() != data.trajectories.size())
        throw std::invalid_argument("weights: behavior probability row count mismatch");
    WeightTable w;
    double sum = 0.0, sumsq = 0.0;
    for (size_t i = 0; i < data.trajectories.size(); ++i) {
        const Trajectory& traj = data.trajectories[i];
        if (behavior_probs[i].size() != traj.actions.size())
            throw std::invalid_argument("weights: behavior probability step count mismatch");
        std::vector<double> step, cum;
        double run = 1.0;
        for (size_t t = 0; t < traj.actions.size(); ++t) {
            const double beta = behavior_probs[i][t];
            if (!(beta > 0.0) || beta > 1.0 + 1e-9)
                throw std::invalid_argument("weights: behavior probability outside (0, 1]");
            const double pi = core::policy_action_prob(target, traj.states[t], traj.actions[t]);
            const double ratio = pi / beta;
            step.push_back(ratio);
            run *= ratio;
            cum.push_back(run);
            w.max_weight = std::max(w.max_weight, run);
        }
        w.step.push_back(std::move(step));
        w.cum.push_back(std::move(cum));
        w.full.push_back(run);
        sum += run;
        sumsq += run * run;
    }
    w.ess = sumsq > 0.0 ? sum * sum / sumsq : 0.0;
    return w;
}

// --------------------------------------------------------------------------
// Importance-sampling estimators
// --------------------------------------------------------------------------

/// Whole-episode importance sampling on observed returns: w_{0:T-1} G.
inline std::vector<double> is_scores(const OfflineDataset& data, const WeightTable& w) {
    std::vector<double> scores;
    for (size_t i = 0; i < data.trajectories.size(); ++i)
        scores.push_back(w.full[i] * data.trajectories[i].human_return);
    return scores;
}

/// Per-decision importance sampling on reconstructed per-step rewards:
/// sum_t g^t w_{0:t} r_t.
inline std::vector<double> pdis_scores(const OfflineDataset& data, const Reconstruction& ihrs, const WeightTable& w,
                                       double discount) {
    check_reconstruction(data, ihrs);
    std::vector<double> scores;
    for (size_t i = 0; i < data.trajectories.size(); ++i) {
        double total = 0.0, g = 1.0;
        for (size_t t = 0; t < ihrs[i].size(); ++t) {
            total += g * w.cum[i][t] * ihrs[i][t];
            g *= discount;
        }
        scores.push_back(total);
    }
    return scores;
}

// --------------------------------------------------------------------------
// Fitted Q evaluation
// --------------------------------------------------------------------------

struct FqeConfig {
    double ridge = 1e-3;  // featurized regression regularizer
};

/// Horizon-indexed action values fit backward from the data: Q_t is the
/// regression of r_t + g V_{t+1}(s_{t+1}) on (s_t, a_t), with V_T = 0.
/// Tabular state spaces use per-cell means; feature spaces use one ridge
/// regression per (step, action). The estimator value is the mean of
/// V_0 over the logged initial states.
struct FqeFit {
    bool tabular = true;
    int horizon = 0;
    int num_actions = 0;
    double discount = 0.0;
    Policy target;
    std::vector<Mat> q;                     // tabular: per step, S x A
    std::vector<std::vector<Vec>> w;        // featurized: per step, per action
    int unvisited_cells = 0;
    double value = 0.0;

    double qhat(int t, const Vec& state, int action) const {
        if (t >= horizon) return 0.0;
        if (tabular) return q[t](core::state_index(state), action);
        Vec phi(state.size() + 1);
        phi << state, 1.0;
        return w[t][action].dot(phi);
    }

    double vhat(int t, const Vec& state) const {
        if (t >= horizon) return 0.0;
        const Vec pi = core::policy_action_dist(target, state);
        double v = 0.0;
        for (int a = 0; a < num_actions; ++a) v += pi[a] * qhat(t, state, a);
        return v;
    }
};

inline FqeFit fqe(const OfflineDataset& data, const Reconstruction& ihrs, const core::HmdpSpec& spec,
                  const Policy& target, const FqeConfig& cfg = {}) {
    check_reconstruction(data, ihrs);
    const int A = spec.actions.num_actions;
    if (A <= 0) throw std::invalid_argument("fqe: discrete actions only");

    FqeFit fit;
    fit.tabular = spec.num_states > 0;
    fit.horizon = spec.horizon;
    fit.num_actions = A;
    fit.discount = spec.discount;
    fit.target = target;

    // next_v[i] carries V_{t+1}(s_{i,t+1}) while sweeping t backward.
    std::vector<double> next_v(data.trajectories.size(), 0.0);

    if (fit.tabular) {
        const int S = spec.num_states;
        fit.q.assign(fit.horizon, Mat::Zero(S, A));
        for (int t = fit.horizon - 1; t >= 0; --t) {
            Mat sums = Mat::Zero(S, A), counts = Mat::Zero(S, A);
            for (size_t i = 0; i < data.trajectories.size(); ++i) {
                const Trajectory& traj = data.trajectories[i];
                if (static_cast<int>(traj.actions.size()) <= t) continue;
                const int s = core::state_index(traj.states[t]);
                const double y = ihrs[i][t] + spec.discount * next_v[i];
                sums(s, traj.actions[t]) += y;
                counts(s, traj.actions[t]) += 1.0;
            }
            for (int s = 0; s < S; ++s)
                for (int a = 0; a < A; ++a) {
                    if (counts(s, a) > 0.0)
                        fit.q[t](s, a) = sums(s, a) / counts(s, a);
                    else
                        ++fit.unvisited_cells;  // Q stays 0
                }
            for (size_t i = 0; i < data.trajectories.size(); ++i) {
                const Trajectory& traj = data.trajectories[i];
                next_v[i] = static_cast<int>(traj.actions.size()) > t ? fit.vhat(t, traj.states[t]) : 0.0;
            }
        }
    } else {
        const int d = spec.state_dim + 1;
        fit.w.assign(fit.horizon, std::vector<Vec>(A, Vec::Zero(d)));
        for (int t = fit.horizon - 1; t >= 0; --t) {
            std::vector<Mat> xtx(A, Mat::Zero(d, d));
            std::vector<Vec> xty(A, Vec::Zero(d));
            std::vector<int> rows(A, 0);
            for (size_t i = 0; i < data.trajectories.size(); ++i) {
                const Trajectory& traj = data.trajectories[i];
                if (static_cast<int>(traj.actions.size()) <= t) continue;
                Vec phi(d);
                phi << traj.states[t], 1.0;
                const double y = ihrs[i][t] + spec.discount * next_v[i];
                const int a = traj.actions[t];
                xtx[a].noalias() += phi * phi.transpose();
                xty[a].noalias() += phi * y;
                ++rows[a];
            }
            for (int a = 0; a < A; ++a) {
                if (rows[a] == 0) {
                    ++fit.unvisited_cells;  // weights stay 0
                    continue;
                }
                fit.w[t][a] = (xtx[a] + cfg.ridge * Mat::Identity(d, d)).ldlt().solve(xty[a]);
            }
            for (size_t i = 0; i < data.trajectories.size(); ++i) {
                const Trajectory& traj = data.trajectories[i];
                next_v[i] = static_cast<int>(traj.actions.size()) > t ? fit.vhat(t, traj.states[t]) : 0.0;
            }
        }
    }

    std::vector<double> v0;
    for (const auto& traj : data.trajectories) v0.push_back(fit.vhat(0, traj.states[0]));
    fit.value = mean(v0);
    return fit;
}

inline std::vector<double> fqe_scores(const OfflineDataset& data, const FqeFit& fit) {
    std::vector<double> scores;
    for (const auto& traj : data.trajectories) scores.push_back(fit.vhat(0, traj.states[0]));
    return scores;
}

// --------------------------------------------------------------------------
// Doubly robust
// --------------------------------------------------------------------------

/// Doubly robust score of one episode on top of a fitted critic:
///   sum_t g^t [ w_{0:t} (r_t - Q_t(s_t, a_t)) + w_{0:t-1} V_t(s_t) ]
/// with w_{0:-1} = 1. With a zero critic this reduces to per-decision
/// importance sampling. standard_form=false switches to the variant that
/// leaves the discount factor off the V correction term.
inline std::vector<double> dr_scores(const OfflineDataset& data, const Reconstruction& ihrs, const WeightTable& w,
                                     const FqeFit& fit, bool standard_form = true) {
    check_reconstruction(data, ihrs);
    std::vector<double> scores;
    for (size_t i = 0; i < data.trajectories.size(); ++i) {
        const Trajectory& traj = data.trajectories[i];
        const int T = static_cast<int>(traj.actions.size());
        if (T > fit.horizon) throw std::invalid_argument("dr: episode longer than the critic's horizon");
        double total = 0.0, g = 1.0;
        for (int t = 0; t < T; ++t) {
            const double w_prev = t == 0 ? 1.0 : w.cum[i][t - 1];
            const double corr = ihrs[i][t] - fit.qhat(t, traj.states[t], traj.actions[t]);
            const double v = fit.vhat(t, traj.states[t]);
            total += g * w.cum[i][t] * corr + (standard_form ? g : 1.0) * w_prev * v;
            g *= fit.discount;
        }
        scores.push_back(total);
    }
    return scores;
}

// --------------------------------------------------------------------------
// Stationary-ratio estimator
// --------------------------------------------------------------------------

struct DiceResult {
    Mat ratio;                   // per (s, a): normalized target-vs-behavior visitation ratio
    double max_ratio = 0.0;      // before capping
    int coverage_violations = 0; // target visits a cell the data never shows
    std::vector<double> scores;  // per-episode sum_t g^t ratio(s_t, a_t) r_t
    double estimate = 0.0;
};

/// Distribution-correction estimator on tabular state spaces: the target's
/// discount-weighted state-action visitation is computed by propagating the
/// empirical transition model and divided by the empirical behavior
/// visitation; each logged reward is reweighted by that capped ratio.
inline DiceResult dice(const OfflineDataset& data, const Reconstruction& ihrs, const core::HmdpSpec& spec,
                       const Policy& target, double ratio_cap = 100.0) {
    check_reconstruction(data, ihrs);
    if (spec.num_states <= 0)
        throw std::invalid_argument("dice: tabular state spaces only");
    const int S = spec.num_states;
    const int A = spec.actions.num_actions;
    const int T = spec.horizon;
    const int n = static_cast<int>(data.trajectories.size());
    if (n == 0) throw std::invalid_argument("dice: empty dataset");

    // Empirical ingredients: initial distribution, transitions, behavior
    // visitation. Transition rows the data never visits become self-loops.
    Vec init = Vec::Zero(S);
    std::vector<Mat> trans(A, Mat::Zero(S, S));
    Mat behavior_vis = Mat::Zero(S, A);
    double z = 0.0, g = 1.0;
    for (int t = 0; t < T; ++t) {
        z += g;
        g *= spec.discount;
    }
    for (const auto& traj : data.trajectories) {
        init[core::state_index(traj.states[0])] += 1.0;
        double gt = 1.0;
        for (size_t t = 0; t < traj.actions.size(); ++t) {
            const int s = core::state_index(traj.states[t]);
            const int a = traj.actions[t];
            trans[a](s, core::state_index(traj.states[t + 1])) += 1.0;
            behavior_vis(s, a) += gt;
            gt *= spec.discount;
        }
    }
    init /= init.sum();
    behavior_vis /= n * z;
    for (int a = 0; a < A; ++a)
        for (int s = 0; s < S; ++s) {
            const double total = trans[a].row(s).sum();
            if (total > 0.0)
                trans[a].row(s) /= total;
            else
                trans[a](s, s) = 1.0;
        }

    // Target visitation under the empirical model.
    Mat pi(S, A);
    for (int s = 0; s < S; ++s) {
        Vec e = Vec::Zero(S);
        e[s] = 1.0;
        pi.row(s) = core::policy_action_dist(target, e).transpose();
    }
    Mat target_vis = Mat::Zero(S, A);
    Vec mu = init;
    g = 1.0;
    for (int t = 0; t < T; ++t) {
        target_vis += g * (mu.asDiagonal() * pi);
        Vec next = Vec::Zero(S);
        for (int a = 0; a < A; ++a) next += trans[a].transpose() * (mu.cwiseProduct(pi.col(a)));
        mu = next;
        g *= spec.discount;
    }
    target_vis /= z;

    DiceResult res;
    res.ratio = Mat::Zero(S, A);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a) {
            if (behavior_vis(s, a) > 0.0) {
                const double r = target_vis(s, a) / behavior_vis(s, a);
                res.max_ratio = std::max(res.max_ratio, r);
                res.ratio(s, a) = std::min(r, ratio_cap);
            } else if (target_vis(s, a) > 1e-12) {
                ++res.coverage_violations;
                res.ratio(s, a) = ratio_cap;
                res.max_ratio = std::max(res.max_ratio, ratio_cap);
            }
        }

    for (size_t i = 0; i < data.trajectories.size(); ++i) {
        const Trajectory& traj = data.trajectories[i];
        double total = 0.0, gt = 1.0;
        for (size_t t = 0; t < traj.actions.size(); ++t) {
            total += gt * res.ratio(core::state_index(traj.states[t]), traj.actions[t]) * ihrs[i][t];
            gt *= spec.discount;
        }
        res.scores.push_back(total);
    }
    res.estimate = mean(res.scores);
    return res;
}

// --------------------------------------------------------------------------
// Variance comparison study
// --------------------------------------------------------------------------

struct VarianceStudyConfig {
    int num_datasets = 500;
    int episodes_per_dataset = 200;
    uint64_t seed = 0;
};

/// Repeated-sampling comparison of two unbiased estimators of the same
/// value: whole-episode importance sampling on returns versus per-decision
/// importance sampling on the true per-step rewards. Also audits the
/// sufficient conditions under which the per-decision variance is no larger:
/// nonnegative mean step rewards and nonnegative correlation between the
/// episode tail weight and the weighted step reward.
struct VarianceStudyResult {
    double var_is = 0.0, var_pdis = 0.0;
    double mean_is = 0.0, mean_pdis = 0.0;
    double exact_value = 0.0;
    double min_effective_reward_mean = 0.0;
    double corr_min = 1.0, corr_mean = 0.0;
    double tv_distance = 0.0;
    double max_identity_gap = 0.0;  // | IS - PDIS on the rescale reconstruction |
    int num_datasets = 0, episodes_per_dataset = 0;
};

inline VarianceStudyResult variance_study(const envs::TabularHmdp& env, const Policy& behavior, const Policy& target,
                                          const VarianceStudyConfig& cfg) {
    if (cfg.num_datasets < 2 || cfg.episodes_per_dataset < 2)
        throw std::invalid_argument("variance study: need at least two datasets of two episodes");
    VarianceStudyResult res;
    res.num_datasets = cfg.num_datasets;
    res.episodes_per_dataset = cfg.episodes_per_dataset;
    res.exact_value = envs::exact_policy_human_value(env, target);
    res.min_effective_reward_mean = envs::effective_ihr_mean_table(env).minCoeff();
    res.tv_distance = envs::policy_tv_distance(env, target, behavior);

    const int T = env.horizon;
    std::vector<double> is_estimates, pdis_estimates;
    // Pooled per-episode tail weights and true rewards for the correlation audit.
    std::vector<std::vector<double>> pool_cum, pool_r;

    for (int m = 0; m < cfg.num_datasets; ++m) {
        const OfflineDataset data =
            envs::sample_dataset(env, behavior, cfg.episodes_per_dataset,
                                 rng::derive_seed(cfg.seed, "vs-data", static_cast<uint64_t>(m)), behavior.id);
        const WeightTable w = importance_weights(data, target, logged_behavior_probs(data));

        Reconstruction truth;
        for (const auto& traj : data.trajectories) truth.push_back(traj.true_ihrs);
        const std::vector<double> is_s = is_scores(data, w);
        const std::vector<double> pdis_s = pdis_scores(data, truth, w, env.discount);
        is_estimates.push_back(mean(is_s));
        pdis_estimates.push_back(mean(pdis_s));

        // On the rescale reconstruction, per-decision importance sampling
        // collapses to whole-episode importance sampling exactly.
        const auto rescale = [&]() {
            Reconstruction rec;
            for (const auto& traj : data.trajectories) {
                std::vector<double> r(traj.actions.size(), 0.0);
                r.back() = traj.human_return / std::pow(env.discount, static_cast<int>(r.size()) - 1);
                rec.push_back(std::move(r));
            }
            return rec;
        }();
        const std::vector<double> collapsed = pdis_scores(data, rescale, w, env.discount);
        for (size_t i = 0; i < is_s.size(); ++i)
            res.max_identity_gap = std::max(res.max_identity_gap, std::abs(collapsed[i] - is_s[i]));

        for (size_t i = 0; i < data.trajectories.size(); ++i) {
            pool_cum.push_back(w.cum[i]);
            pool_r.push_back(data.trajectories[i].true_ihrs);
        }
    }

    res.mean_is = mean(is_estimates);
    res.mean_pdis = mean(pdis_estimates);
    res.var_is = sample_variance(is_estimates);
    res.var_pdis = sample_variance(pdis_estimates);

    // corr(w_{0:k}, r_t w_{0:k}) over episodes, for every t < k <= T-1.
    double corr_total = 0.0;
    int corr_count = 0;
    for (int t = 0; t + 1 < T; ++t)
        for (int k = t + 1; k < T; ++k) {
            std::vector<double> xs, ys;
            xs.reserve(pool_cum.size());
            for (size_t i = 0; i < pool_cum.size(); ++i) {
                xs.push_back(pool_cum[i][k]);
                ys.push_back(pool_r[i][t] * pool_cum[i][k]);
            }
            const double mx = mean(xs), my = mean(ys);
            double sxy = 0.0, sxx = 0.0, syy = 0.0;
            for (size_t i = 0; i < xs.size(); ++i) {
                sxy += (xs[i] - mx) * (ys[i] - my);
                sxx += (xs[i] - mx) * (xs[i] - mx);
                syy += (ys[i] - my) * (ys[i] - my);
            }
            const double denom = std::sqrt(sxx * syy);
            const double corr = denom > 0.0 ? sxy / denom : 0.0;
            res.corr_min = std::min(res.corr_min, corr);
            corr_total += corr;
            ++corr_count;
        }
    res.corr_mean = corr_count > 0 ? corr_total / corr_count : 0.0;
    return res;
}

}  // namespace hfope::estimators
