#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfope/rng.hpp"

namespace hfope::core {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Problem description
// ---------------------------------------------------------------------------

/// Discrete action set (num_actions > 0) or a box (action_dim > 0). Samplers
/// and policies in this library only operate on the discrete case; the box
/// variant exists so problem descriptions round-trip faithfully.
struct ActionSpace {
    int num_actions = 0;
    int action_dim = 0;
    Vec low, high;

    bool discrete() const { return num_actions > 0; }
};

/// Static description of an episodic decision process with human feedback:
/// per-step states and environment rewards, plus a single scalar human return
/// revealed at episode end. Exactly one of state_dim/num_states is set;
/// tabular processes emit one-hot state vectors of length num_states.
struct HmdpSpec {
    std::string env_id;
    int state_dim = 0;
    int num_states = 0;
    ActionSpace actions;
    double discount = 0.0;
    int horizon = 0;

    int obs_dim() const { return num_states > 0 ? num_states : state_dim; }
    bool tabular() const { return num_states > 0; }
};

inline void validate_spec(const HmdpSpec& spec) {
    if (spec.env_id.empty()) throw std::invalid_argument("spec: env_id must be non-empty");
    if ((spec.state_dim > 0) == (spec.num_states > 0))
        throw std::invalid_argument("spec: exactly one of state_dim/num_states must be positive");
    if (spec.actions.discrete()) {
        if (spec.actions.action_dim != 0) throw std::invalid_argument("spec: action space must be discrete xor box");
    } else {
        if (spec.actions.action_dim <= 0) throw std::invalid_argument("spec: action space missing");
        if (spec.actions.low.size() != spec.actions.action_dim || spec.actions.high.size() != spec.actions.action_dim)
            throw std::invalid_argument("spec: box bounds must match action_dim");
    }
    if (!(spec.discount >= 0.0 && spec.discount < 1.0))
        throw std::invalid_argument("spec: discount must lie in [0, 1)");
    if (spec.horizon < 1) throw std::invalid_argument("spec: horizon must be >= 1");
}

// ---------------------------------------------------------------------------
// Trajectories and datasets
// ---------------------------------------------------------------------------

/// One logged episode. states has horizon+1 entries, the per-step vectors all
/// of length obs_dim; actions/env_rewards have horizon entries. human_return
/// is the discounted sum of the per-step human rewards, which are themselves
/// unobservable outside simulation: true_ihrs is only ever populated by
/// oracle environments in-process and is never serialized.
struct Trajectory {
    std::vector<Vec> states;
    std::vector<int> actions;
    std::vector<double> env_rewards;
    double human_return = 0.0;
    std::vector<double> behavior_probs;  // empty = not logged
    std::vector<double> true_ihrs;       // empty = not available (never on disk)
};

/// Discounted sum of a reward sequence, sum_t discount^t rewards[t].
inline double discounted_return(const std::vector<double>& rewards, double discount) {
    if (rewards.empty()) throw std::invalid_argument("discounted_return: empty reward sequence");
    if (!(discount >= 0.0 && discount < 1.0)) throw std::invalid_argument("discounted_return: discount must lie in [0, 1)");
    double acc = 0.0;
    double w = 1.0;
    for (double r : rewards) {
        acc += w * r;
        w *= discount;
    }
    return acc;
}

inline void validate_trajectory(const HmdpSpec& spec, const Trajectory& traj) {
    const size_t T = static_cast<size_t>(spec.horizon);
    if (traj.states.size() != T + 1) throw std::invalid_argument("trajectory: expected horizon+1 states");
    for (const Vec& s : traj.states) {
        if (s.size() != spec.obs_dim()) throw std::invalid_argument("trajectory: state dimension mismatch");
        if (!s.allFinite()) throw std::invalid_argument("trajectory: non-finite state");
    }
    if (traj.actions.size() != T) throw std::invalid_argument("trajectory: expected horizon actions");
    if (spec.actions.discrete()) {
        for (int a : traj.actions)
            if (a < 0 || a >= spec.actions.num_actions) throw std::invalid_argument("trajectory: action out of range");
    }
    if (traj.env_rewards.size() != T) throw std::invalid_argument("trajectory: expected horizon env rewards");
    for (double r : traj.env_rewards)
        if (!std::isfinite(r)) throw std::invalid_argument("trajectory: non-finite env reward");
    if (!std::isfinite(traj.human_return)) throw std::invalid_argument("trajectory: non-finite human return");
    if (!traj.behavior_probs.empty()) {
        if (traj.behavior_probs.size() != T) throw std::invalid_argument("trajectory: expected horizon behavior probs");
        for (double p : traj.behavior_probs)
            if (!(p > 0.0 && p <= 1.0 + 1e-9)) throw std::invalid_argument("trajectory: behavior prob outside (0, 1]");
    }
    if (!traj.true_ihrs.empty()) {
        if (traj.true_ihrs.size() != T) throw std::invalid_argument("trajectory: expected horizon per-step human rewards");
        for (double r : traj.true_ihrs)
            if (!std::isfinite(r)) throw std::invalid_argument("trajectory: non-finite per-step human reward");
        // The terminal return must equal the discounted sum of its parts.
        if (std::abs(discounted_return(traj.true_ihrs, spec.discount) - traj.human_return) > 1e-9)
            throw std::invalid_argument("trajectory: human_return does not match discounted per-step human rewards");
    }
}

/// A batch of logged episodes under one behavior policy, plus bookkeeping.
struct OfflineDataset {
    HmdpSpec spec;
    std::vector<Trajectory> trajectories;
    std::string provenance;
    uint64_t seed = 0;
};

inline void validate_dataset(const OfflineDataset& data) {
    validate_spec(data.spec);
    for (const Trajectory& traj : data.trajectories) validate_trajectory(data.spec, traj);
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

enum class PolicyKind { TabularSoftmax, FeaturizedSoftmax, DeterministicMap, UniformRandom };

inline std::string to_string(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::TabularSoftmax: return "tabular-softmax";
        case PolicyKind::FeaturizedSoftmax: return "featurized-softmax";
        case PolicyKind::DeterministicMap: return "deterministic-map";
        case PolicyKind::UniformRandom: return "uniform-random";
    }
    throw std::logic_error("unknown policy kind");
}

inline PolicyKind policy_kind_from_string(const std::string& s) {
    if (s == "tabular-softmax") return PolicyKind::TabularSoftmax;
    if (s == "featurized-softmax") return PolicyKind::FeaturizedSoftmax;
    if (s == "deterministic-map") return PolicyKind::DeterministicMap;
    if (s == "uniform-random") return PolicyKind::UniformRandom;
    throw std::invalid_argument("unknown policy kind: " + s);
}

/// Stochastic discrete-action policy.
///   tabular-softmax     softmax(logits[s] / temperature), logits is S x A
///   featurized-softmax  softmax(weights [s;1] / temperature), weights is A x (D+1)
///   deterministic-map   action_map[s], tabular states only
///   uniform-random      1 / num_actions
struct Policy {
    PolicyKind kind = PolicyKind::UniformRandom;
    std::string id;
    int num_actions = 0;
    double temperature = 1.0;
    Mat logits;                   // tabular-softmax
    Mat weights;                  // featurized-softmax
    std::vector<int> action_map;  // deterministic-map
};

inline void validate_policy(const Policy& pol) {
    if (pol.num_actions <= 0) throw std::invalid_argument("policy: num_actions must be positive");
    if (!(pol.temperature > 0.0)) throw std::invalid_argument("policy: temperature must be positive");
    switch (pol.kind) {
        case PolicyKind::TabularSoftmax:
            if (pol.logits.rows() < 1 || pol.logits.cols() != pol.num_actions)
                throw std::invalid_argument("policy: logits must be num_states x num_actions");
            if (!pol.logits.allFinite()) throw std::invalid_argument("policy: non-finite logits");
            break;
        case PolicyKind::FeaturizedSoftmax:
            if (pol.weights.rows() != pol.num_actions || pol.weights.cols() < 2)
                throw std::invalid_argument("policy: weights must be num_actions x (state_dim+1)");
            if (!pol.weights.allFinite()) throw std::invalid_argument("policy: non-finite weights");
            break;
        case PolicyKind::DeterministicMap:
            if (pol.action_map.empty()) throw std::invalid_argument("policy: empty action map");
            for (int a : pol.action_map)
                if (a < 0 || a >= pol.num_actions) throw std::invalid_argument("policy: action map entry out of range");
            break;
        case PolicyKind::UniformRandom: break;
    }
}

/// Index of a tabular state encoded as a (possibly soft) one-hot vector.
inline int state_index(const Vec& state) {
    if (state.size() == 0) throw std::invalid_argument("state_index: empty state");
    int idx = 0;
    state.maxCoeff(&idx);
    return idx;
}

namespace detail {
inline Vec softmax(const Vec& logits) {
    const Vec shifted = logits.array() - logits.maxCoeff();
    Vec e = shifted.array().exp();
    return e / e.sum();
}
}  // namespace detail

/// Full action distribution of a policy at a state.
inline Vec policy_action_dist(const Policy& pol, const Vec& state) {
    validate_policy(pol);
    switch (pol.kind) {
        case PolicyKind::TabularSoftmax: {
            const int s = state_index(state);
            if (s >= pol.logits.rows()) throw std::invalid_argument("policy: state index outside logits table");
            return detail::softmax(pol.logits.row(s).transpose() / pol.temperature);
        }
        case PolicyKind::FeaturizedSoftmax: {
            if (state.size() + 1 != pol.weights.cols())
                throw std::invalid_argument("policy: state dimension mismatch with weights");
            Vec feat(state.size() + 1);
            feat << state, 1.0;
            return detail::softmax((pol.weights * feat) / pol.temperature);
        }
        case PolicyKind::DeterministicMap: {
            const int s = state_index(state);
            if (s >= static_cast<int>(pol.action_map.size()))
                throw std::invalid_argument("policy: state index outside action map");
            Vec dist = Vec::Zero(pol.num_actions);
            dist[pol.action_map[s]] = 1.0;
            return dist;
        }
        case PolicyKind::UniformRandom:
            return Vec::Constant(pol.num_actions, 1.0 / pol.num_actions);
    }
    throw std::logic_error("unknown policy kind");
}

/// pi(action | state). Discrete-action policies only; querying a policy over
/// a box action space is unsupported by construction (num_actions == 0).
inline double policy_action_prob(const Policy& pol, const Vec& state, int action) {
    if (action < 0 || action >= pol.num_actions)
        throw std::invalid_argument("policy_action_prob: action out of range");
    return policy_action_dist(pol, state)[action];
}

inline int sample_action(const Policy& pol, const Vec& state, rng::Rng& gen) {
    const Vec dist = policy_action_dist(pol, state);
    std::vector<double> p(dist.data(), dist.data() + dist.size());
    return gen.categorical(p);
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

inline json vec_to_json(const Vec& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

inline Vec vec_from_json(const json& arr) {
    if (!arr.is_array()) throw std::invalid_argument("expected a JSON array of numbers");
    Vec v(arr.size());
    for (size_t i = 0; i < arr.size(); ++i) {
        if (!arr[i].is_number()) throw std::invalid_argument("expected a JSON array of numbers");
        v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
    }
    return v;
}

inline json mat_to_json(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vec_to_json(m.row(r).transpose()));
    return rows;
}

inline Mat mat_from_json(const json& arr) {
    if (!arr.is_array() || arr.empty()) throw std::invalid_argument("expected a JSON array of rows");
    const Vec first = vec_from_json(arr[0]);
    Mat m(arr.size(), first.size());
    m.row(0) = first.transpose();
    for (size_t r = 1; r < arr.size(); ++r) {
        const Vec row = vec_from_json(arr[r]);
        if (row.size() != m.cols()) throw std::invalid_argument("ragged JSON matrix");
        m.row(static_cast<Eigen::Index>(r)) = row.transpose();
    }
    return m;
}

inline json spec_to_json(const HmdpSpec& spec) {
    json j;
    j["env_id"] = spec.env_id;
    if (spec.num_states > 0)
        j["num_states"] = spec.num_states;
    else
        j["state_dim"] = spec.state_dim;
    if (spec.actions.discrete()) {
        j["action_space"] = json{{"num_actions", spec.actions.num_actions}};
    } else {
        j["action_space"] = json{{"action_dim", spec.actions.action_dim},
                                 {"low", vec_to_json(spec.actions.low)},
                                 {"high", vec_to_json(spec.actions.high)}};
    }
    j["discount"] = spec.discount;
    j["horizon"] = spec.horizon;
    return j;
}

inline HmdpSpec spec_from_json(const json& j) {
    HmdpSpec spec;
    spec.env_id = j.at("env_id").get<std::string>();
    if (j.contains("num_states")) spec.num_states = j.at("num_states").get<int>();
    if (j.contains("state_dim")) spec.state_dim = j.at("state_dim").get<int>();
    const json& as = j.at("action_space");
    if (as.contains("num_actions")) {
        spec.actions.num_actions = as.at("num_actions").get<int>();
    } else {
        spec.actions.action_dim = as.at("action_dim").get<int>();
        spec.actions.low = vec_from_json(as.at("low"));
        spec.actions.high = vec_from_json(as.at("high"));
    }
    spec.discount = j.at("discount").get<double>();
    spec.horizon = j.at("horizon").get<int>();
    validate_spec(spec);
    return spec;
}

inline json policy_to_json(const Policy& pol) {
    validate_policy(pol);
    json j;
    j["kind"] = to_string(pol.kind);
    j["id"] = pol.id;
    j["num_actions"] = pol.num_actions;
    j["temperature"] = pol.temperature;
    switch (pol.kind) {
        case PolicyKind::TabularSoftmax: j["logits"] = mat_to_json(pol.logits); break;
        case PolicyKind::FeaturizedSoftmax: j["weights"] = mat_to_json(pol.weights); break;
        case PolicyKind::DeterministicMap: j["action_map"] = pol.action_map; break;
        case PolicyKind::UniformRandom: break;
    }
    return j;
}

inline Policy policy_from_json(const json& j) {
    Policy pol;
    pol.kind = policy_kind_from_string(j.at("kind").get<std::string>());
    pol.id = j.value("id", std::string{});
    pol.num_actions = j.at("num_actions").get<int>();
    pol.temperature = j.at("temperature").get<double>();
    switch (pol.kind) {
        case PolicyKind::TabularSoftmax: pol.logits = mat_from_json(j.at("logits")); break;
        case PolicyKind::FeaturizedSoftmax: pol.weights = mat_from_json(j.at("weights")); break;
        case PolicyKind::DeterministicMap: pol.action_map = j.at("action_map").get<std::vector<int>>(); break;
        case PolicyKind::UniformRandom: break;
    }
    validate_policy(pol);
    return pol;
}

inline void save_policy(const Policy& pol, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_policy: cannot open " + path);
    out << policy_to_json(pol).dump(2) << "\n";
}

inline Policy load_policy(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_policy: cannot open " + path);
    json j;
    in >> j;
    return policy_from_json(j);
}

// ---------------------------------------------------------------------------
// Dataset serialization (JSON lines)
// ---------------------------------------------------------------------------
//
// Line 1 is a header {"n", "provenance", "seed", "spec"}; each following line
// is one trajectory {"states", "actions", "env_rewards", "human_return",
// "behavior_probs"}. Floats are written with round-trip precision. Per-step
// human rewards are an oracle quantity: they are stripped on save, and their
// presence in a file is rejected on load.

inline std::string dataset_to_jsonl(const OfflineDataset& data) {
    validate_dataset(data);
    std::ostringstream out;
    json header;
    header["n"] = data.trajectories.size();
    header["provenance"] = data.provenance;
    header["seed"] = data.seed;
    header["spec"] = spec_to_json(data.spec);
    out << header.dump() << "\n";
    for (const Trajectory& traj : data.trajectories) {
        json j;
        json states = json::array();
        for (const Vec& s : traj.states) states.push_back(vec_to_json(s));
        j["states"] = std::move(states);
        j["actions"] = traj.actions;
        j["env_rewards"] = traj.env_rewards;
        j["human_return"] = traj.human_return;
        if (traj.behavior_probs.empty())
            j["behavior_probs"] = nullptr;
        else
            j["behavior_probs"] = traj.behavior_probs;
        out << j.dump() << "\n";
    }
    return out.str();
}

inline OfflineDataset dataset_from_jsonl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    size_t line_no = 0;

    auto fail = [&](const std::string& what) -> std::runtime_error {
        return std::runtime_error("dataset line " + std::to_string(line_no) + ": " + what);
    };

    OfflineDataset data;
    size_t expected_n = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw fail(std::string("JSON parse error: ") + e.what());
        }
        if (!have_header) {
            try {
                expected_n = j.at("n").get<size_t>();
                data.provenance = j.at("provenance").get<std::string>();
                data.seed = j.at("seed").get<uint64_t>();
                data.spec = spec_from_json(j.at("spec"));
            } catch (const std::exception& e) {
                throw fail(std::string("bad header: ") + e.what());
            }
            have_header = true;
            data.trajectories.reserve(expected_n);
            continue;
        }
        if (j.contains("true_ihrs"))
            throw fail("contains per-step human rewards, an oracle-only quantity that must never be serialized");
        static const std::vector<std::string> allowed = {"states", "actions", "env_rewards", "human_return",
                                                         "behavior_probs"};
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
                throw fail("unexpected field '" + it.key() + "'");
        }
        Trajectory traj;
        try {
            const json& states = j.at("states");
            if (!states.is_array()) throw std::invalid_argument("states must be an array");
            for (const json& s : states) traj.states.push_back(vec_from_json(s));
            traj.actions = j.at("actions").get<std::vector<int>>();
            traj.env_rewards = j.at("env_rewards").get<std::vector<double>>();
            traj.human_return = j.at("human_return").get<double>();
            const json& bp = j.at("behavior_probs");
            if (!bp.is_null()) traj.behavior_probs = bp.get<std::vector<double>>();
        } catch (const std::exception& e) {
            throw fail(std::string("bad trajectory: ") + e.what());
        }
        try {
            validate_trajectory(data.spec, traj);
        } catch (const std::exception& e) {
            throw fail(e.what());
        }
        data.trajectories.push_back(std::move(traj));
    }
    if (!have_header) throw std::runtime_error("dataset: empty file");
    if (data.trajectories.size() != expected_n)
        throw std::runtime_error("dataset: header announces " + std::to_string(expected_n) + " trajectories but " +
                                 std::to_string(data.trajectories.size()) + " were found");
    return data;
}

inline void save_dataset(const OfflineDataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
    out << dataset_to_jsonl(data);
}

inline OfflineDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return dataset_from_jsonl(buf.str());
}

}  // namespace hfope::core
