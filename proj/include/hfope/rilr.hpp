#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hfope/core.hpp"
#include "hfope/nn.hpp"
#include "hfope/vlmh.hpp"

// Reconstruction of per-step human rewards from episode-end human returns.
//
// The learned reconstructor reads the whole episode (state, action, env
// reward, return) through a bidirectional recurrent network and emits one
// reward per step. Its loss has two parts:
//   * a sum anchor: the discounted sum of the predicted rewards must match
//     the observed return, as a Gaussian negative log likelihood, and
//   * a neighbor regularizer: each step's prediction is pulled toward the
//     per-step scaled returns of the K most similar logged steps, where
//     similarity is Euclidean distance between latent-model step embeddings.
//
// Two closed-form baselines reconstruct without learning: "rescale" puts the
// whole return on the final step, "fusion" keeps the env rewards and puts the
// return surplus on the final step. "oracle" copies the simulator's hidden
// per-step rewards and exists only for synthetic-data diagnostics.

namespace hfope::rilr {

using core::Mat;
using core::OfflineDataset;
using core::Trajectory;
using core::Vec;
using diff::Binding;
using diff::Tape;
using diff::Var;
using json = nlohmann::json;

struct RilrConfig {
    int hidden = 32;
    std::string cell = "lstm";      // "lstm" or "gru"
    int neighbors = 8;              // K most similar steps
    double neighbor_weight = 0.1;   // C, weight of the neighbor regularizer
    double sigma_sum_frac = 0.05;   // sum-anchor noise scale, fraction of std(G)
    double sigma_reg_frac = 1.0;    // regularizer noise scale, fraction of std(G)
    int epochs = 20;
    int minibatch = 64;
    double lr = 1e-3;
    double lr_decay = 0.997;        // per optimizer step
    double weight_decay = 1e-3;     // mixing layer weights only
    double val_frac = 0.1;
    bool finite_horizon_target = false;  // scale neighbor returns by (1-g)/(1-g^T) instead of (1-g)
};

inline void validate_config(const RilrConfig& cfg) {
    if (cfg.hidden < 1) throw std::invalid_argument("rilr config: hidden must be positive");
    if (cfg.cell != "lstm" && cfg.cell != "gru") throw std::invalid_argument("rilr config: cell must be lstm or gru");
    if (cfg.neighbors < 1) throw std::invalid_argument("rilr config: neighbors must be positive");
    if (cfg.neighbor_weight < 0.0 || cfg.sigma_sum_frac < 0.0 || cfg.sigma_reg_frac < 0.0)
        throw std::invalid_argument("rilr config: negative loss weight");
    if (cfg.epochs < 0 || cfg.minibatch < 1) throw std::invalid_argument("rilr config: bad training schedule");
    if (!(cfg.lr > 0.0) || !(cfg.lr_decay > 0.0) || cfg.lr_decay > 1.0)
        throw std::invalid_argument("rilr config: bad learning rate schedule");
    if (cfg.weight_decay < 0.0) throw std::invalid_argument("rilr config: bad penalty");
    if (cfg.val_frac < 0.0 || cfg.val_frac >= 1.0) throw std::invalid_argument("rilr config: val_frac in [0, 1)");
}

inline json config_to_json(const RilrConfig& cfg) {
    return json{{"hidden", cfg.hidden},
                {"cell", cfg.cell},
                {"neighbors", cfg.neighbors},
                {"neighbor_weight", cfg.neighbor_weight},
                {"sigma_sum_frac", cfg.sigma_sum_frac},
                {"sigma_reg_frac", cfg.sigma_reg_frac},
                {"epochs", cfg.epochs},
                {"minibatch", cfg.minibatch},
                {"lr", cfg.lr},
                {"lr_decay", cfg.lr_decay},
                {"weight_decay", cfg.weight_decay},
                {"val_frac", cfg.val_frac},
                {"finite_horizon_target", cfg.finite_horizon_target}};
}

inline RilrConfig config_from_json(const json& j, RilrConfig base = {}) {
    for (const auto& [key, value] : j.items()) {
        if (key == "hidden") base.hidden = value.get<int>();
        else if (key == "cell") base.cell = value.get<std::string>();
        else if (key == "neighbors") base.neighbors = value.get<int>();
        else if (key == "neighbor_weight") base.neighbor_weight = value.get<double>();
        else if (key == "sigma_sum_frac") base.sigma_sum_frac = value.get<double>();
        else if (key == "sigma_reg_frac") base.sigma_reg_frac = value.get<double>();
        else if (key == "epochs") base.epochs = value.get<int>();
        else if (key == "minibatch") base.minibatch = value.get<int>();
        else if (key == "lr") base.lr = value.get<double>();
        else if (key == "lr_decay") base.lr_decay = value.get<double>();
        else if (key == "weight_decay") base.weight_decay = value.get<double>();
        else if (key == "val_frac") base.val_frac = value.get<double>();
        else if (key == "finite_horizon_target") base.finite_horizon_target = value.get<bool>();
        else throw std::invalid_argument("rilr config: unknown key " + key);
    }
    validate_config(base);
    return base;
}

class RilrModel {
  public:
    RilrConfig cfg;
    int state_dim = 0;
    int num_actions = 0;
    double discount = 0.0;
    double g_shift = 0.0, g_scale = 1.0;  // standardization of the return input feature
    double sigma_sum = 1.0, sigma_reg = 1.0;
    diff::ParameterSet params;

    RilrModel() = default;

    RilrModel(int state_dim_, int num_actions_, double discount_, RilrConfig config, uint64_t seed)
        : cfg(std::move(config)), state_dim(state_dim_), num_actions(num_actions_), discount(discount_) {
        validate_config(cfg);
        if (state_dim < 1 || num_actions < 1) throw std::invalid_argument("rilr model: bad input dimensions");
        if (discount < 0.0 || discount >= 1.0) throw std::invalid_argument("rilr model: discount in [0, 1)");
        rng::Rng gen(rng::derive_seed(seed, "rilr-init"));
        const int in = state_dim + num_actions + 2;  // state, action one-hot, env reward, return
        auto make_cell = [&](const std::string& prefix) {
            if (cfg.cell == "gru") return diff::RecurrentCell{diff::GruCell::create(params, prefix, in, cfg.hidden, gen)};
            return diff::RecurrentCell{diff::LstmCell::create(params, prefix, in, cfg.hidden, gen)};
        };
        fwd_ = make_cell("fwd");
        bwd_ = make_cell("bwd");
        mix_ = diff::Linear::create(params, "mix", 2 * cfg.hidden, cfg.hidden, true, gen);
        out_ = diff::Linear::create(params, "out", cfg.hidden, 1, false, gen);
    }

    static RilrModel for_spec(const core::HmdpSpec& spec, RilrConfig config, uint64_t seed) {
        if (spec.actions.num_actions <= 0)
            throw std::invalid_argument("rilr model: logged episodes carry discrete actions only");
        return RilrModel(spec.obs_dim(), spec.actions.num_actions, spec.discount, std::move(config), seed);
    }

    /// Per-step reward predictions of one episode as graph nodes.
    std::vector<Var> predict_vars(Tape& tape, const Binding& bind, const Trajectory& traj) const {
        const int T = static_cast<int>(traj.actions.size());
        const double g_std = (traj.human_return - g_shift) / g_scale;
        std::vector<Var> inputs;
        inputs.reserve(T);
        for (int t = 0; t < T; ++t) {
            Mat x(state_dim + num_actions + 2, 1);
            x.setZero();
            if (traj.states[t].size() != state_dim) throw std::invalid_argument("rilr: state width mismatch");
            x.topRows(state_dim) = traj.states[t];
            const int a = traj.actions[t];
            if (a < 0 || a >= num_actions) throw std::invalid_argument("rilr: action out of range");
            x(state_dim + a, 0) = 1.0;
            x(state_dim + num_actions, 0) = traj.env_rewards[t];
            x(state_dim + num_actions + 1, 0) = g_std;
            inputs.push_back(tape.leaf(std::move(x)));
        }
        const std::vector<Var> hs = diff::bidirectional_forward(tape, bind, fwd_, bwd_, inputs);
        std::vector<Var> rhat;
        rhat.reserve(T);
        for (Var h : hs) rhat.push_back(out_(tape, bind, diff::tanh_(mix_(tape, bind, h))));
        return rhat;
    }

    std::vector<double> predict(const Trajectory& traj) const {
        Tape tape;
        const Binding b = diff::bind(tape, params);
        std::vector<double> out;
        for (Var r : predict_vars(tape, b, traj)) out.push_back(tape.val(r)(0, 0));
        return out;
    }

  private:
    diff::RecurrentCell fwd_, bwd_;
    diff::Linear mix_, out_;
};

// --------------------------------------------------------------------------
// Neighbor targets
// --------------------------------------------------------------------------

/// Precomputed regularizer targets: for episode i, step t, the first two
/// power sums of the K neighbor targets c_k, so the squared-error sum
/// sum_k (x - c_k)^2 evaluates as K x^2 - 2 x sum1 + sum2 without touching
/// the neighbors again.
struct NeighborTargets {
    int k = 0;
    std::vector<std::vector<double>> sum1, sum2;  // [episode][step]
};

/// The per-step target a neighbor contributes: its return spread evenly over
/// steps, (1-g) G for the running-sum convention or (1-g)/(1-g^T) G to make
/// a constant reward of that size reproduce G exactly over horizon T.
inline double neighbor_target(double human_return, double discount, int horizon, bool finite_horizon) {
    if (!finite_horizon) return (1.0 - discount) * human_return;
    const double denom = 1.0 - std::pow(discount, horizon);
    if (denom < 1e-12) throw std::invalid_argument("neighbor target: degenerate horizon scaling");
    return (1.0 - discount) / denom * human_return;
}

inline NeighborTargets build_neighbor_targets(const vlmh::EncodingPool& pool, const OfflineDataset& data,
                                              double discount, const RilrConfig& cfg) {
    NeighborTargets targets;
    targets.k = cfg.neighbors;
    targets.sum1.resize(data.trajectories.size());
    targets.sum2.resize(data.trajectories.size());
    for (size_t i = 0; i < data.trajectories.size(); ++i) {
        const size_t T = data.trajectories[i].actions.size();
        targets.sum1[i].assign(T, 0.0);
        targets.sum2[i].assign(T, 0.0);
    }
    for (const vlmh::LatentEncoding& entry : pool.entries) {
        const std::vector<int> near = vlmh::latent_neighbors(pool, entry.z, cfg.neighbors, entry.traj);
        double s1 = 0.0, s2 = 0.0;
        for (int n : near) {
            const vlmh::LatentEncoding& other = pool.entries[n];
            const int horizon = static_cast<int>(data.trajectories[other.traj].actions.size());
            const double c = neighbor_target(other.human_return, discount, horizon, cfg.finite_horizon_target);
            s1 += c;
            s2 += c * c;
        }
        targets.sum1.at(entry.traj).at(entry.step) = s1;
        targets.sum2.at(entry.traj).at(entry.step) = s2;
    }
    return targets;
}

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

struct RilrTrainResult {
    RilrModel model;
    std::vector<double> val_curve;  // mean per-episode loss, entry 0 untrained
    int best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::string> log;
    bool diverged = false;
};

namespace detail {
/// Loss of one episode given its neighbor power sums. Both parts are
/// Gaussian negative log likelihoods with fixed scales (constants included,
/// so reported losses are comparable across scale settings).
inline Var episode_loss(Tape& tape, const Binding& bind, const RilrModel& model, const Trajectory& traj,
                        const std::vector<double>& sum1, const std::vector<double>& sum2) {
    const int T = static_cast<int>(traj.actions.size());
    const std::vector<Var> rhat = model.predict_vars(tape, bind, traj);

    Var discounted{nullptr, -1};
    double w = 1.0;
    for (int t = 0; t < T; ++t) {
        Var term = diff::scale(rhat[t], w);
        discounted = (t == 0) ? term : diff::add(discounted, term);
        w *= model.discount;
    }
    Var gap = diff::add_scalar(discounted, -traj.human_return);
    const double sum_const =
        std::log(model.sigma_sum) + 0.5 * std::log(2.0 * M_PI);
    Var loss = diff::add_scalar(diff::scale(diff::square(gap), 0.5 / (model.sigma_sum * model.sigma_sum)), sum_const);

    const RilrConfig& cfg = model.cfg;
    if (cfg.neighbor_weight > 0.0) {
        const double k = static_cast<double>(cfg.neighbors);
        const double reg_const = k * (std::log(model.sigma_reg) + 0.5 * std::log(2.0 * M_PI));
        Var reg{nullptr, -1};
        for (int t = 0; t < T; ++t) {
            // sum_k (x - c_k)^2 = K x^2 - 2 x sum1 + sum2
            Var sq = diff::sub(diff::scale(diff::square(rhat[t]), k), diff::scale(rhat[t], 2.0 * sum1[t]));
            Var nll = diff::add_scalar(diff::scale(diff::add_scalar(sq, sum2[t]),
                                                   0.5 / (model.sigma_reg * model.sigma_reg)),
                                       reg_const);
            reg = (t == 0) ? nll : diff::add(reg, nll);
        }
        loss = diff::add(loss, diff::scale(reg, cfg.neighbor_weight));
    }
    return loss;
}
}  // namespace detail

/// Trains the reconstructor against the sum anchor and the frozen neighbor
/// targets; tracks a held-out split and returns the best epoch's parameters.
inline RilrTrainResult train_rilr(const OfflineDataset& data, const core::HmdpSpec& spec,
                                  const vlmh::EncodingPool& pool, const RilrConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    const int n = static_cast<int>(data.trajectories.size());
    if (n == 0) throw std::invalid_argument("rilr train: empty dataset");

    RilrTrainResult res;
    res.model = RilrModel::for_spec(spec, cfg, seed);
    RilrModel& model = res.model;

    // Return statistics over the whole logged set drive the input feature
    // standardization, the loss scales, and the output bias start value.
    double g_mean = 0.0;
    for (const auto& traj : data.trajectories) g_mean += traj.human_return;
    g_mean /= n;
    double g_var = 0.0;
    for (const auto& traj : data.trajectories) {
        const double d = traj.human_return - g_mean;
        g_var += d * d;
    }
    const double g_stddev = std::sqrt(g_var / n);
    model.g_shift = g_mean;
    model.g_scale = std::max(g_stddev, 1e-6);
    const double scale_floor = 1e-3 * (1.0 + std::abs(g_mean));
    model.sigma_sum = std::max(cfg.sigma_sum_frac * g_stddev, scale_floor);
    model.sigma_reg = std::max(cfg.sigma_reg_frac * g_stddev, scale_floor);

    double mean_step = 0.0;
    for (const auto& traj : data.trajectories)
        mean_step += neighbor_target(traj.human_return, model.discount,
                                     static_cast<int>(traj.actions.size()), true);
    model.params.value(model.params.index_of("out.b")).setConstant(mean_step / n);

    const NeighborTargets targets = build_neighbor_targets(pool, data, model.discount, cfg);

    rng::Rng split_gen(rng::derive_seed(seed, "split"));
    const std::vector<int> perm = split_gen.permutation(n);
    const int n_val = n >= 2 ? std::clamp(static_cast<int>(std::lround(cfg.val_frac * n)), 1, n - 1) : 0;
    std::vector<int> val_idx(perm.begin(), perm.begin() + n_val);
    std::vector<int> train_idx(perm.begin() + n_val, perm.end());
    if (val_idx.empty()) val_idx = train_idx;

    auto eval_val = [&]() {
        double total = 0.0;
        for (int i : val_idx) {
            Tape tape;
            const Binding b = diff::bind(tape, model.params);
            total += tape.val(detail::episode_loss(tape, b, model, data.trajectories[i], targets.sum1[i],
                                                   targets.sum2[i]))(0, 0);
        }
        return total / val_idx.size();
    };

    std::vector<Mat> best = model.params.snapshot_values();
    res.val_curve.push_back(eval_val());
    res.best_val = res.val_curve[0];
    res.best_epoch = 0;
    res.log.push_back("epoch 0 (untrained) val_loss " + std::to_string(res.val_curve[0]));

    double lr = cfg.lr;
    uint64_t iter = 0;
    for (int epoch = 1; epoch <= cfg.epochs && !res.diverged; ++epoch) {
        rng::Rng shuffle(rng::derive_seed(seed, "shuffle", static_cast<uint64_t>(epoch)));
        const std::vector<int> order = shuffle.permutation(static_cast<int>(train_idx.size()));
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size() && !res.diverged; start += cfg.minibatch) {
            const size_t stop = std::min(order.size(), start + cfg.minibatch);
            Tape tape;
            const Binding b = diff::bind(tape, model.params);
            Var acc{nullptr, -1};
            for (size_t j = start; j < stop; ++j) {
                const int i = train_idx[order[j]];
                Var e = detail::episode_loss(tape, b, model, data.trajectories[i], targets.sum1[i], targets.sum2[i]);
                acc = (j == start) ? e : diff::add(acc, e);
            }
            Var loss = diff::scale(acc, 1.0 / static_cast<double>(stop - start));
            const double loss_val = tape.val(loss)(0, 0);
            if (!std::isfinite(loss_val)) {
                res.diverged = true;
                res.log.push_back("stopped: non-finite loss at epoch " + std::to_string(epoch));
                break;
            }
            tape.backward(loss);
            diff::AdamConfig opt;
            opt.lr = lr;
            opt.weight_decay = cfg.weight_decay;
            try {
                model.params.adam_step(diff::parameter_grads(tape, b), opt);
            } catch (const std::runtime_error& err) {
                res.diverged = true;
                res.log.push_back(std::string("stopped: ") + err.what());
                break;
            }
            lr *= cfg.lr_decay;
            ++iter;
            epoch_loss += loss_val;
            ++batches;
        }
        if (res.diverged) break;
        const double v = eval_val();
        res.val_curve.push_back(v);
        std::ostringstream line;
        line << "epoch " << epoch << " train_loss " << (batches ? epoch_loss / batches : 0.0) << " val_loss " << v
             << " lr " << lr;
        res.log.push_back(line.str());
        if (v < res.best_val) {
            res.best_val = v;
            res.best_epoch = epoch;
            best = model.params.snapshot_values();
        }
    }
    model.params.restore_values(best);
    return res;
}

// --------------------------------------------------------------------------
// Reconstruction methods
// --------------------------------------------------------------------------

struct ReconstructedDataset {
    std::string method;
    std::vector<std::vector<double>> ihrs;  // [episode][step]
    std::vector<double> sum_residuals;      // discounted sum minus observed return
};

namespace detail {
inline double tail_weight(double discount, int horizon) {
    const double w = std::pow(discount, horizon - 1);
    if (w < 1e-12)
        throw std::invalid_argument("reconstruct: discount^(T-1) too small to carry the return on the last step");
    return w;
}

inline void fill_residuals(ReconstructedDataset& rec, const OfflineDataset& data, double discount) {
    rec.sum_residuals.clear();
    for (size_t i = 0; i < data.trajectories.size(); ++i)
        rec.sum_residuals.push_back(core::discounted_return(rec.ihrs[i], discount) -
                                    data.trajectories[i].human_return);
}
}  // namespace detail

/// Learned reconstruction on any dataset (typically held-out episodes).
inline ReconstructedDataset reconstruct_rilr(const RilrModel& model, const OfflineDataset& data) {
    ReconstructedDataset rec;
    rec.method = "rilr";
    for (const auto& traj : data.trajectories) rec.ihrs.push_back(model.predict(traj));
    detail::fill_residuals(rec, data, model.discount);
    return rec;
}

/// The observed return, discount-corrected, as a single final-step reward.
inline ReconstructedDataset reconstruct_rescale(const OfflineDataset& data, double discount) {
    ReconstructedDataset rec;
    rec.method = "rescale";
    for (const auto& traj : data.trajectories) {
        const int T = static_cast<int>(traj.actions.size());
        std::vector<double> r(T, 0.0);
        r[T - 1] = traj.human_return / detail::tail_weight(discount, T);
        rec.ihrs.push_back(std::move(r));
    }
    detail::fill_residuals(rec, data, discount);
    return rec;
}

/// Env rewards plus the return surplus on the final step, so the discounted
/// sum is the observed human return exactly.
inline ReconstructedDataset reconstruct_fusion(const OfflineDataset& data, double discount) {
    ReconstructedDataset rec;
    rec.method = "fusion";
    for (const auto& traj : data.trajectories) {
        const int T = static_cast<int>(traj.actions.size());
        std::vector<double> r = traj.env_rewards;
        const double env_return = core::discounted_return(r, discount);
        r[T - 1] += (traj.human_return - env_return) / detail::tail_weight(discount, T);
        rec.ihrs.push_back(std::move(r));
    }
    detail::fill_residuals(rec, data, discount);
    return rec;
}

/// Simulator ground truth; available only on freshly generated data.
inline ReconstructedDataset reconstruct_oracle(const OfflineDataset& data, double discount) {
    ReconstructedDataset rec;
    rec.method = "oracle-ihr";
    for (const auto& traj : data.trajectories) {
        if (traj.true_ihrs.size() != traj.actions.size())
            throw std::invalid_argument("reconstruct: dataset carries no per-step ground truth");
        rec.ihrs.push_back(traj.true_ihrs);
    }
    detail::fill_residuals(rec, data, discount);
    return rec;
}

}  // namespace hfope::rilr
