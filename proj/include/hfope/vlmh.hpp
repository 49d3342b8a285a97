#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hfope/core.hpp"
#include "hfope/nn.hpp"

// Sequential latent-variable model of logged episodes. The model is trained
// on (states, actions, env rewards, episode-end human return) and learns a
// latent state z_t with
//
//   posterior  q(z_0 | s_0),  q(z_t | z_{t-1}, a_{t-1}, s_t)   (gated RNN)
//   prior      p(z_0) = N(0, I),  p(z_t | z_{t-1}, a_{t-1})    (gated RNN)
//   decoders   p(s_t | z_t), p(r_{t-1} | z_t), p(G | z_T)
//
// with every distribution a diagonal Gaussian. The evidence lower bound sums
// the decoder log densities and subtracts the posterior-to-prior divergences.
// Downstream consumers use the posterior means as step embeddings (reward
// reconstruction regularizes toward latent neighbors) and the prior plus the
// return decoder as a purely model-based return estimate.

namespace hfope::vlmh {

using core::Mat;
using core::OfflineDataset;
using core::Trajectory;
using core::Vec;
using diff::Binding;
using diff::Tape;
using diff::Var;
using json = nlohmann::json;

struct VlmhConfig {
    int latent_dim = 16;
    int hidden = 64;                        // recurrent state width
    std::vector<int> head_hidden = {128, 64};
    int epochs = 20;
    int minibatch = 64;
    double lr = 1e-3;
    double lr_decay = 0.997;                // per optimizer step
    double weight_decay = 1e-3;             // hidden stack weights only
    double kl_weight = 1.0;
    double val_frac = 0.1;
    bool standardize_returns = true;
};

inline void validate_config(const VlmhConfig& cfg) {
    if (cfg.latent_dim < 1 || cfg.hidden < 1) throw std::invalid_argument("vlmh config: dims must be positive");
    if (cfg.epochs < 0 || cfg.minibatch < 1) throw std::invalid_argument("vlmh config: bad training schedule");
    if (!(cfg.lr > 0.0) || !(cfg.lr_decay > 0.0) || cfg.lr_decay > 1.0)
        throw std::invalid_argument("vlmh config: bad learning rate schedule");
    if (cfg.kl_weight < 0.0 || cfg.weight_decay < 0.0) throw std::invalid_argument("vlmh config: bad penalty");
    if (cfg.val_frac < 0.0 || cfg.val_frac >= 1.0) throw std::invalid_argument("vlmh config: val_frac in [0, 1)");
    for (int h : cfg.head_hidden)
        if (h < 1) throw std::invalid_argument("vlmh config: head sizes must be positive");
}

inline json config_to_json(const VlmhConfig& cfg) {
    return json{{"latent_dim", cfg.latent_dim},
                {"hidden", cfg.hidden},
                {"head_hidden", cfg.head_hidden},
                {"epochs", cfg.epochs},
                {"minibatch", cfg.minibatch},
                {"lr", cfg.lr},
                {"lr_decay", cfg.lr_decay},
                {"weight_decay", cfg.weight_decay},
                {"kl_weight", cfg.kl_weight},
                {"val_frac", cfg.val_frac},
                {"standardize_returns", cfg.standardize_returns}};
}

/// Applies the keys present in j on top of base; unknown keys are an error.
inline VlmhConfig config_from_json(const json& j, VlmhConfig base = {}) {
    for (const auto& [key, value] : j.items()) {
        if (key == "latent_dim") base.latent_dim = value.get<int>();
        else if (key == "hidden") base.hidden = value.get<int>();
        else if (key == "head_hidden") base.head_hidden = value.get<std::vector<int>>();
        else if (key == "epochs") base.epochs = value.get<int>();
        else if (key == "minibatch") base.minibatch = value.get<int>();
        else if (key == "lr") base.lr = value.get<double>();
        else if (key == "lr_decay") base.lr_decay = value.get<double>();
        else if (key == "weight_decay") base.weight_decay = value.get<double>();
        else if (key == "kl_weight") base.kl_weight = value.get<double>();
        else if (key == "val_frac") base.val_frac = value.get<double>();
        else if (key == "standardize_returns") base.standardize_returns = value.get<bool>();
        else throw std::invalid_argument("vlmh config: unknown key " + key);
    }
    validate_config(base);
    return base;
}

class VlmhModel {
  public:
    VlmhConfig cfg;
    int state_dim = 0;
    bool discrete_actions = true;
    int act_dim = 0;  // one-hot width for discrete actions, raw width otherwise
    double g_shift = 0.0, g_scale = 1.0;
    bool trained = false;  // set once a training run has finished
    diff::ParameterSet params;

    VlmhModel() = default;

    VlmhModel(int state_dim_, bool discrete, int act_dim_, VlmhConfig config, uint64_t seed)
        : cfg(std::move(config)), state_dim(state_dim_), discrete_actions(discrete), act_dim(act_dim_) {
        validate_config(cfg);
        if (state_dim < 1 || act_dim < 1) throw std::invalid_argument("vlmh model: bad input dimensions");
        rng::Rng gen(rng::derive_seed(seed, "vlmh-init"));
        const int L = cfg.latent_dim;
        enc0_ = diff::GaussianMlp::create(params, "enc0", state_dim, cfg.head_hidden, L, gen);
        enc_cell_ = diff::GruCell::create(params, "enc", L + act_dim + state_dim, cfg.hidden, gen);
        enc_head_ = diff::GaussianMlp::create(params, "enc_head", cfg.hidden, cfg.head_hidden, L, gen);
        dec_cell_ = diff::GruCell::create(params, "dec", L + act_dim, cfg.hidden, gen);
        dec_head_ = diff::GaussianMlp::create(params, "dec_head", cfg.hidden, cfg.head_hidden, L, gen);
        sdec_ = diff::GaussianMlp::create(params, "sdec", L, cfg.head_hidden, state_dim, gen);
        rdec_ = diff::GaussianMlp::create(params, "rdec", L, cfg.head_hidden, 1, gen);
        gdec_ = diff::GaussianMlp::create(params, "gdec", L, cfg.head_hidden, 1, gen);
    }

    static VlmhModel for_spec(const core::HmdpSpec& spec, VlmhConfig config, uint64_t seed) {
        if (spec.actions.num_actions <= 0)
            throw std::invalid_argument("vlmh model: logged episodes carry discrete actions only");
        return VlmhModel(spec.obs_dim(), true, spec.actions.num_actions, std::move(config), seed);
    }

    double standardize(double g) const { return (g - g_shift) / g_scale; }
    double unstandardize(double g) const { return g * g_scale + g_shift; }

    Mat action_encoding(int action) const {
        if (action < 0 || action >= act_dim) throw std::invalid_argument("vlmh: action out of range");
        Mat enc = Mat::Zero(act_dim, 1);
        enc(action, 0) = 1.0;
        return enc;
    }

    /// Evidence lower bound of one episode. eps supplies the reparameterized
    /// noise for z_0..z_T (all zeros evaluates at the posterior means).
    Var trajectory_elbo(Tape& tape, const Binding& bind, const Trajectory& traj,
                        const std::vector<Mat>& eps) const {
        const int T = static_cast<int>(traj.actions.size());
        if (static_cast<int>(eps.size()) != T + 1)
            throw std::invalid_argument("vlmh: need one noise vector per latent step");

        Var s0 = tape.leaf(state_col(traj.states.at(0)));
        const auto q0 = enc0_(tape, bind, s0);
        Var z = diff::sample_reparam(q0.mean, q0.std, eps[0]);

        Var zero = tape.leaf(Mat::Zero(cfg.latent_dim, 1));
        Var unit = tape.leaf(Mat::Ones(cfg.latent_dim, 1));
        Var kl = diff::kl_diag_gauss(q0.mean, q0.std, zero, unit);

        const auto s0_out = sdec_(tape, bind, z);
        Var recon = diff::gauss_log_prob(s0, s0_out.mean, s0_out.std);

        Var eh = enc_cell_.initial_state(tape);
        Var dh = dec_cell_.initial_state(tape);
        for (int t = 1; t <= T; ++t) {
            Var a = tape.leaf(action_encoding(traj.actions[t - 1]));
            Var st = tape.leaf(state_col(traj.states[t]));
            eh = enc_cell_.step(tape, bind, diff::concat_rows({z, a, st}), eh);
            dh = dec_cell_.step(tape, bind, diff::concat_rows({z, a}), dh);
            const auto qt = enc_head_(tape, bind, eh);
            const auto pt = dec_head_(tape, bind, dh);
            kl = diff::add(kl, diff::kl_diag_gauss(qt.mean, qt.std, pt.mean, pt.std));
            z = diff::sample_reparam(qt.mean, qt.std, eps[t]);

            const auto st_out = sdec_(tape, bind, z);
            recon = diff::add(recon, diff::gauss_log_prob(st, st_out.mean, st_out.std));
            const auto rt_out = rdec_(tape, bind, z);
            Var r_obs = tape.leaf(traj.env_rewards.at(t - 1));
            recon = diff::add(recon, diff::gauss_log_prob(r_obs, rt_out.mean, rt_out.std));
        }

        const auto g_out = gdec_(tape, bind, z);
        Var g_obs = tape.leaf(standardize(traj.human_return));
        recon = diff::add(recon, diff::gauss_log_prob(g_obs, g_out.mean, g_out.std));
        return diff::sub(recon, diff::scale(kl, cfg.kl_weight));
    }

    /// Posterior mean embedding of every latent step, z_0..z_T.
    std::vector<Vec> encode_means(const Trajectory& traj) const {
        Tape tape;
        const Binding bind_ = diff::bind(tape, params);
        const int T = static_cast<int>(traj.actions.size());
        std::vector<Vec> out;
        out.reserve(T + 1);

        Var s0 = tape.leaf(state_col(traj.states.at(0)));
        Var z = enc0_(tape, bind_, s0).mean;
        out.push_back(tape.val(z).col(0));
        Var eh = enc_cell_.initial_state(tape);
        for (int t = 1; t <= T; ++t) {
            Var a = tape.leaf(action_encoding(traj.actions[t - 1]));
            Var st = tape.leaf(state_col(traj.states[t]));
            eh = enc_cell_.step(tape, bind_, diff::concat_rows({z, a, st}), eh);
            z = enc_head_(tape, bind_, eh).mean;
            out.push_back(tape.val(z).col(0));
        }
        return out;
    }

    /// Model-based estimate of the expected human return of a policy: roll
    /// the latent prior forward, decode states to pick actions, decode the
    /// return at the final latent step. Initial latent states come from the
    /// posterior over provided start states, or from the N(0, I) prior when
    /// none are given.
    double predict_human_return(const core::Policy& policy, int horizon, int num_rollouts, uint64_t seed,
                                const std::vector<Vec>& init_states) const {
        if (horizon < 1 || num_rollouts < 1) throw std::invalid_argument("vlmh rollout: bad horizon or count");
        rng::Rng gen(rng::derive_seed(seed, "vlmh-rollout"));
        double total = 0.0;
        for (int k = 0; k < num_rollouts; ++k) {
            Tape tape;
            const Binding bind_ = diff::bind(tape, params);
            Var z{nullptr, -1};
            Vec s_cur;
            if (init_states.empty()) {
                Mat z0(cfg.latent_dim, 1);
                for (int d = 0; d < cfg.latent_dim; ++d) z0(d, 0) = gen.gaussian();
                z = tape.leaf(z0);
                s_cur = tape.val(sdec_(tape, bind_, z).mean).col(0);
            } else {
                s_cur = init_states[gen.uniform_int(init_states.size())];
                const auto q0 = enc0_(tape, bind_, tape.leaf(Mat(s_cur)));
                z = sample_gauss(tape, q0, gen);
            }
            Var dh = dec_cell_.initial_state(tape);
            for (int t = 0; t < horizon; ++t) {
                const int action = core::sample_action(policy, s_cur, gen);
                Var a = tape.leaf(action_encoding(action));
                dh = dec_cell_.step(tape, bind_, diff::concat_rows({z, a}), dh);
                z = sample_gauss(tape, dec_head_(tape, bind_, dh), gen);
                s_cur = tape.val(sdec_(tape, bind_, z).mean).col(0);
            }
            total += unstandardize(tape.val(gdec_(tape, bind_, z).mean)(0, 0));
        }
        return total / num_rollouts;
    }

  private:
    static Mat state_col(const Vec& s) { return Mat(s); }

    static Var sample_gauss(Tape& tape, const diff::DiagGaussianHead::Out& out, rng::Rng& gen) {
        Mat eps(tape.val(out.mean).rows(), 1);
        for (Eigen::Index d = 0; d < eps.rows(); ++d) eps(d, 0) = gen.gaussian();
        return diff::sample_reparam(out.mean, out.std, eps);
    }

    diff::GaussianMlp enc0_, enc_head_, dec_head_, sdec_, rdec_, gdec_;
    diff::GruCell enc_cell_, dec_cell_;
};

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

struct VlmhTrainResult {
    VlmhModel model;
    std::vector<double> val_curve;  // entry 0 is the untrained model
    int best_epoch = 0;
    double best_val = -std::numeric_limits<double>::infinity();
    std::vector<std::pair<int, double>> top_checkpoints;  // (epoch, val elbo), best first, at most 10
    std::vector<std::string> log;
    bool diverged = false;
};

namespace detail {
inline std::vector<Mat> draw_noise(rng::Rng& gen, int count, int dim) {
    std::vector<Mat> eps(count, Mat::Zero(dim, 1));
    for (int t = 0; t < count; ++t)
        for (int d = 0; d < dim; ++d) eps[t](d, 0) = gen.gaussian();
    return eps;
}
}  // namespace detail

/// Trains on a shuffled split, tracks mean held-out ELBO after every epoch
/// (with noise draws that are identical across epochs, so the curve is
/// comparable), and returns the parameters of the best epoch. A non-finite
/// loss or gradient stops training at the best checkpoint seen so far.
inline VlmhTrainResult train_vlmh(const OfflineDataset& data, const core::HmdpSpec& spec, const VlmhConfig& cfg,
                                  uint64_t seed) {
    validate_config(cfg);
    const int n = static_cast<int>(data.trajectories.size());
    if (n == 0) throw std::invalid_argument("vlmh train: empty dataset");

    VlmhTrainResult res;
    res.model = VlmhModel::for_spec(spec, cfg, seed);
    VlmhModel& model = res.model;

    rng::Rng split_gen(rng::derive_seed(seed, "split"));
    const std::vector<int> perm = split_gen.permutation(n);
    int n_val = n >= 2 ? std::clamp(static_cast<int>(std::lround(cfg.val_frac * n)), 1, n - 1) : 0;
    std::vector<int> val_idx(perm.begin(), perm.begin() + n_val);
    std::vector<int> train_idx(perm.begin() + n_val, perm.end());
    if (val_idx.empty()) val_idx = train_idx;  // single-episode corner: validate on the training episode

    if (cfg.standardize_returns) {
        double mean = 0.0;
        for (int i : train_idx) mean += data.trajectories[i].human_return;
        mean /= train_idx.size();
        double var = 0.0;
        for (int i : train_idx) {
            const double d = data.trajectories[i].human_return - mean;
            var += d * d;
        }
        model.g_shift = mean;
        model.g_scale = std::max(std::sqrt(var / train_idx.size()), 1e-6);
    }

    auto eval_val = [&]() {
        double total = 0.0;
        for (int i : val_idx) {
            const Trajectory& traj = data.trajectories[i];
            rng::Rng noise(rng::derive_seed(seed, "val-noise", static_cast<uint64_t>(i)));
            const auto eps = detail::draw_noise(noise, static_cast<int>(traj.actions.size()) + 1, cfg.latent_dim);
            Tape tape;
            const Binding b = diff::bind(tape, model.params);
            total += tape.val(model.trajectory_elbo(tape, b, traj, eps))(0, 0);
        }
        return total / val_idx.size();
    };

    std::vector<Mat> best = model.params.snapshot_values();
    res.val_curve.push_back(eval_val());
    res.best_val = res.val_curve[0];
    res.best_epoch = 0;
    res.log.push_back("epoch 0 (untrained) val_elbo " + std::to_string(res.val_curve[0]));

    double lr = cfg.lr;
    uint64_t iter = 0;
    for (int epoch = 1; epoch <= cfg.epochs && !res.diverged; ++epoch) {
        rng::Rng shuffle(rng::derive_seed(seed, "shuffle", static_cast<uint64_t>(epoch)));
        const std::vector<int> order = shuffle.permutation(static_cast<int>(train_idx.size()));
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size() && !res.diverged; start += cfg.minibatch) {
            const size_t stop = std::min(order.size(), start + cfg.minibatch);
            rng::Rng noise(rng::derive_seed(seed, "noise", iter));
            Tape tape;
            const Binding b = diff::bind(tape, model.params);
            Var acc{nullptr, -1};
            for (size_t k = start; k < stop; ++k) {
                const Trajectory& traj = data.trajectories[train_idx[order[k]]];
                const auto eps = detail::draw_noise(noise, static_cast<int>(traj.actions.size()) + 1, cfg.latent_dim);
                Var e = model.trajectory_elbo(tape, b, traj, eps);
                acc = (k == start) ? e : diff::add(acc, e);
            }
            Var loss = diff::scale(acc, -1.0 / static_cast<double>(stop - start));
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
        line << "epoch " << epoch << " train_loss " << (batches ? epoch_loss / batches : 0.0) << " val_elbo " << v
             << " lr " << lr;
        res.log.push_back(line.str());
        if (v > res.best_val) {
            res.best_val = v;
            res.best_epoch = epoch;
            best = model.params.snapshot_values();
        }
    }
    model.params.restore_values(best);

    std::vector<std::pair<int, double>> ranked;
    for (size_t e = 0; e < res.val_curve.size(); ++e) ranked.emplace_back(static_cast<int>(e), res.val_curve[e]);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (ranked.size() > 10) ranked.resize(10);
    res.top_checkpoints = std::move(ranked);
    model.trained = true;
    return res;
}

// --------------------------------------------------------------------------
// Checkpoint serialization
// --------------------------------------------------------------------------

inline json model_to_json(const VlmhModel& model) {
    return json{{"format_version", 1},
                {"kind", "vlmh"},
                {"config", config_to_json(model.cfg)},
                {"state_dim", model.state_dim},
                {"discrete_actions", model.discrete_actions},
                {"act_dim", model.act_dim},
                {"g_shift", model.g_shift},
                {"g_scale", model.g_scale},
                {"trained", model.trained},
                {"tensors", model.params.tensors_to_json()}};
}

inline VlmhModel model_from_json(const json& j) {
    if (j.value("format_version", -1) != 1 || j.value("kind", "") != "vlmh")
        throw std::runtime_error("vlmh checkpoint: not a supported model file");
    VlmhModel model(j.at("state_dim").get<int>(), j.at("discrete_actions").get<bool>(), j.at("act_dim").get<int>(),
                    config_from_json(j.at("config")), 0);
    model.g_shift = j.at("g_shift").get<double>();
    model.g_scale = j.at("g_scale").get<double>();
    model.trained = j.value("trained", false);
    model.params.tensors_from_json(j.at("tensors"));
    return model;
}

inline void save_model(const std::string& path, const VlmhModel& model) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("vlmh checkpoint: cannot open " + path + " for writing");
    out << model_to_json(model).dump(2) << "\n";
}

inline VlmhModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("vlmh checkpoint: cannot open " + path);
    json j;
    in >> j;
    return model_from_json(j);
}

// --------------------------------------------------------------------------
// Step embeddings and latent neighbors
// --------------------------------------------------------------------------

/// One logged step embedded in latent space. The embedding for step t is the
/// posterior mean of z_{t+1}, the latent that decodes reward r_t.
struct LatentEncoding {
    int traj = 0;
    int step = 0;
    Vec z;
    double human_return = 0.0;
};

struct EncodingPool {
    std::vector<LatentEncoding> entries;
    Mat z_block;             // entries x latent_dim, row i is entries[i].z
    double bandwidth = 1.0;  // median pairwise distance of a fixed subsample
};

inline EncodingPool build_encoding_pool(const VlmhModel& model, const OfflineDataset& data, uint64_t seed) {
    EncodingPool pool;
    for (size_t i = 0; i < data.trajectories.size(); ++i) {
        const Trajectory& traj = data.trajectories[i];
        const std::vector<Vec> means = model.encode_means(traj);
        for (size_t t = 0; t + 1 < means.size(); ++t)
            pool.entries.push_back(LatentEncoding{static_cast<int>(i), static_cast<int>(t), means[t + 1],
                                                  traj.human_return});
    }
    if (pool.entries.empty()) throw std::invalid_argument("encoding pool: no steps");

    pool.z_block.resize(static_cast<Eigen::Index>(pool.entries.size()), model.cfg.latent_dim);
    for (size_t i = 0; i < pool.entries.size(); ++i) pool.z_block.row(static_cast<Eigen::Index>(i)) =
        pool.entries[i].z.transpose();

    // Bandwidth of the neighbor similarity kernel: median pairwise distance
    // over a bounded, seeded subsample.
    rng::Rng gen(rng::derive_seed(seed, "bandwidth"));
    const int m = std::min<int>(static_cast<int>(pool.entries.size()), 2048);
    std::vector<int> pick = gen.permutation(static_cast<int>(pool.entries.size()));
    pick.resize(m);
    std::vector<double> dists;
    dists.reserve(static_cast<size_t>(m) * std::min(m, 64));
    for (int i = 0; i < m; ++i)
        for (int jdx = i + 1; jdx < std::min(m, i + 65); ++jdx)
            dists.push_back((pool.entries[pick[i]].z - pool.entries[pick[jdx]].z).norm());
    if (!dists.empty()) {
        std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
        pool.bandwidth = std::max(dists[dists.size() / 2], 1e-12);
    }
    return pool;
}

/// Indices of the k entries closest to z in Euclidean distance (equivalently
/// most similar under any monotone Gaussian kernel), never drawing from
/// trajectory exclude_traj. Ties break on (distance, trajectory, step).
inline std::vector<int> latent_neighbors(const EncodingPool& pool, const Vec& z, int k, int exclude_traj) {
    if (k < 1) throw std::invalid_argument("latent neighbors: k must be positive");
    const Vec d2 = (pool.z_block.rowwise() - z.transpose()).rowwise().squaredNorm();
    std::vector<int> idx;
    idx.reserve(pool.entries.size());
    for (int i = 0; i < static_cast<int>(pool.entries.size()); ++i)
        if (pool.entries[i].traj != exclude_traj) idx.push_back(i);
    if (static_cast<int>(idx.size()) < k)
        throw std::invalid_argument("latent neighbors: fewer than k eligible steps");
    auto better = [&](int a, int b) {
        if (d2[a] != d2[b]) return d2[a] < d2[b];
        if (pool.entries[a].traj != pool.entries[b].traj) return pool.entries[a].traj < pool.entries[b].traj;
        return pool.entries[a].step < pool.entries[b].step;
    };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
    idx.resize(k);
    return idx;
}

}  // namespace hfope::vlmh
