#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfope/rng.hpp"

namespace hfope::diff {

using Mat = Eigen::MatrixXd;
using json = nlohmann::json;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid until Tape::clear().
struct Var {
    Tape* tape = nullptr;
    int id = -1;
};

/// Reverse-mode tape over dense real tensors. Each operation appends a node
/// holding its value, a zeroed gradient buffer, and a pull closure that adds
/// the node's contribution into its parents' gradients. Creation order is a
/// topological order, so backward() is a single reverse sweep. A tape may be
/// reused for a second backward pass only after reset_grads().
class Tape {
  public:
    struct Node {
        Mat value;
        Mat grad;
        std::function<void(Tape&)> pull;  // empty for leaves
    };

    Var leaf(Mat value) {
        nodes_.push_back(Node{std::move(value), {}, {}});
        nodes_.back().grad = Mat::Zero(nodes_.back().value.rows(), nodes_.back().value.cols());
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var leaf(double scalar) { return leaf(Mat::Constant(1, 1, scalar)); }

    Var make(Mat value, std::function<void(Tape&)> pull) {
        nodes_.push_back(Node{std::move(value), {}, std::move(pull)});
        nodes_.back().grad = Mat::Zero(nodes_.back().value.rows(), nodes_.back().value.cols());
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Mat& val(Var v) const { return nodes_[check(v)].value; }
    Mat& grad(Var v) { return nodes_[check(v)].grad; }
    const Mat& grad(Var v) const { return nodes_[check(v)].grad; }

    /// Backpropagates from a scalar root. Gradients accumulate; call
    /// reset_grads() before reusing the same graph for another root.
    void backward(Var root) {
        const int r = check(root);
        if (nodes_[r].value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
        nodes_[r].grad(0, 0) += 1.0;
        for (int i = r; i >= 0; --i)
            if (nodes_[i].pull) nodes_[i].pull(*this);
    }

    void reset_grads() {
        for (Node& n : nodes_) n.grad.setZero();
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }
    void reserve(size_t n) { nodes_.reserve(n); }

  private:
    int check(Var v) const {
        if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("tape: foreign or stale node handle");
        return v.id;
    }
    std::vector<Node> nodes_;
};

namespace detail {
inline Tape& same_tape(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument("op: operands live on different tapes");
    return *a.tape;
}
inline void same_shape(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("op: shape mismatch");
}
}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise and linear-algebra operations
// --------------------------------------------------------------------------

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::same_shape(t.val(a), t.val(b));
    return t.make(t.val(a) + t.val(b), [a, b, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& g = t.grad(Var{&t, out});
        t.grad(a) += g;
        t.grad(b) += g;
    });
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::same_shape(t.val(a), t.val(b));
    return t.make(t.val(a) - t.val(b), [a, b, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& g = t.grad(Var{&t, out});
        t.grad(a) += g;
        t.grad(b) -= g;
    });
}

inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::same_shape(t.val(a), t.val(b));
    return t.make(t.val(a).cwiseProduct(t.val(b)), [a, b, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& g = t.grad(Var{&t, out});
        t.grad(a) += g.cwiseProduct(t.val(b));
        t.grad(b) += g.cwiseProduct(t.val(a));
    });
}

inline Var div(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::same_shape(t.val(a), t.val(b));
    return t.make(t.val(a).cwiseQuotient(t.val(b)), [a, b, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& g = t.grad(Var{&t, out});
        const Mat gb = g.cwiseQuotient(t.val(b));
        t.grad(a) += gb;
        t.grad(b) -= gb.cwiseProduct(t.val(Var{&t, out}));
    });
}

inline Var neg(Var a) {
    Tape& t = *a.tape;
    return t.make(-t.val(a), [a, out = static_cast<int>(t.size())](Tape& t) { t.grad(a) -= t.grad(Var{&t, out}); });
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    return t.make(c * t.val(a),
                  [a, c, out = static_cast<int>(t.size())](Tape& t) { t.grad(a) += c * t.grad(Var{&t, out}); });
}

inline Var add_scalar(Var a, double c) {
    Tape& t = *a.tape;
    return t.make(t.val(a).array() + c,
                  [a, out = static_cast<int>(t.size())](Tape& t) { t.grad(a) += t.grad(Var{&t, out}); });
}

inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    if (t.val(a).cols() != t.val(b).rows()) throw std::invalid_argument("matmul: inner dimensions differ");
    return t.make(t.val(a) * t.val(b), [a, b, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& g = t.grad(Var{&t, out});
        t.grad(a).noalias() += g * t.val(b).transpose();
        t.grad(b).noalias() += t.val(a).transpose() * g;
    });
}

inline Var tanh_(Var a) {
    Tape& t = *a.tape;
    return t.make(t.val(a).array().tanh(), [a, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& y = t.val(Var{&t, out});
        t.grad(a).array() += t.grad(Var{&t, out}).array() * (1.0 - y.array().square());
    });
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape;
    Mat y = t.val(a);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double x = y.data()[i];
        y.data()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return t.make(std::move(y), [a, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& s = t.val(Var{&t, out});
        t.grad(a).array() += t.grad(Var{&t, out}).array() * s.array() * (1.0 - s.array());
    });
}

inline Var relu(Var a) {
    Tape& t = *a.tape;
    return t.make(t.val(a).cwiseMax(0.0), [a, out = static_cast<int>(t.size())](Tape& t) {
        t.grad(a).array() +=
            t.grad(Var{&t, out}).array() * (t.val(a).array() > 0.0).template cast<double>();
    });
}

/// Numerically stable log(1 + exp(x)); derivative is the logistic function.
inline Var softplus(Var a) {
    Tape& t = *a.tape;
    Mat y = t.val(a);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double x = y.data()[i];
        y.data()[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    return t.make(std::move(y), [a, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& x = t.val(a);
        Mat s = x;
        for (Eigen::Index i = 0; i < s.size(); ++i) {
            const double v = x.data()[i];
            s.data()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        }
        t.grad(a).array() += t.grad(Var{&t, out}).array() * s.array();
    });
}

inline Var exp_(Var a) {
    Tape& t = *a.tape;
    return t.make(t.val(a).array().exp(), [a, out = static_cast<int>(t.size())](Tape& t) {
        t.grad(a).array() += t.grad(Var{&t, out}).array() * t.val(Var{&t, out}).array();
    });
}

inline Var log_(Var a) {
    Tape& t = *a.tape;
    if (t.val(a).minCoeff() <= 0.0) throw std::invalid_argument("log: requires strictly positive input");
    return t.make(t.val(a).array().log(), [a, out = static_cast<int>(t.size())](Tape& t) {
        t.grad(a).array() += t.grad(Var{&t, out}).array() / t.val(a).array();
    });
}

inline Var square(Var a) {
    Tape& t = *a.tape;
    return t.make(t.val(a).array().square(), [a, out = static_cast<int>(t.size())](Tape& t) {
        t.grad(a).array() += 2.0 * t.grad(Var{&t, out}).array() * t.val(a).array();
    });
}

inline Var sum(Var a) {
    Tape& t = *a.tape;
    return t.make(Mat::Constant(1, 1, t.val(a).sum()), [a, out = static_cast<int>(t.size())](Tape& t) {
        t.grad(a).array() += t.grad(Var{&t, out})(0, 0);
    });
}

inline Var dot(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::same_shape(t.val(a), t.val(b));
    return t.make(Mat::Constant(1, 1, t.val(a).cwiseProduct(t.val(b)).sum()),
                  [a, b, out = static_cast<int>(t.size())](Tape& t) {
                      const double g = t.grad(Var{&t, out})(0, 0);
                      t.grad(a) += g * t.val(b);
                      t.grad(b) += g * t.val(a);
                  });
}

/// Vertical concatenation of column vectors.
inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    Tape& t = *parts.front().tape;
    Eigen::Index rows = 0;
    for (Var p : parts) {
        if (p.tape != &t) throw std::invalid_argument("concat_rows: operands live on different tapes");
        if (t.val(p).cols() != 1) throw std::invalid_argument("concat_rows: column vectors only");
        rows += t.val(p).rows();
    }
    Mat value(rows, 1);
    Eigen::Index at = 0;
    for (Var p : parts) {
        value.middleRows(at, t.val(p).rows()) = t.val(p);
        at += t.val(p).rows();
    }
    return t.make(std::move(value), [parts, out = static_cast<int>(t.size())](Tape& t) {
        const Mat& g = t.grad(Var{&t, out});
        Eigen::Index at = 0;
        for (Var p : parts) {
            t.grad(p) += g.middleRows(at, t.val(p).rows());
            at += t.val(p).rows();
        }
    });
}

// --------------------------------------------------------------------------
// Distribution blocks
// --------------------------------------------------------------------------

/// Sum over dimensions of the diagonal-Gaussian log density of x:
///   sum_d -log std_d - (x_d - mean_d)^2 / (2 std_d^2) - 0.5 log(2 pi).
inline Var gauss_log_prob(Var x, Var mean, Var std_) {
    Tape& t = detail::same_tape(x, mean);
    const double n = static_cast<double>(t.val(x).size());
    Var z = div(sub(x, mean), std_);
    Var quad = scale(sum(square(z)), -0.5);
    Var logdet = neg(sum(log_(std_)));
    return add_scalar(add(quad, logdet), -0.5 * n * std::log(2.0 * M_PI));
}

/// Reparameterized sample mean + std * eps with eps a constant leaf.
inline Var sample_reparam(Var mean, Var std_, const Mat& eps) {
    Tape& t = detail::same_tape(mean, std_);
    return add(mean, mul(std_, t.leaf(eps)));
}

/// KL(N(m1, diag s1^2) || N(m2, diag s2^2)), summed over dimensions:
///   sum_d log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2.
inline Var kl_diag_gauss(Var m1, Var s1, Var m2, Var s2) {
    Tape& t = detail::same_tape(m1, s1);
    const double n = static_cast<double>(t.val(m1).size());
    Var ratio = sub(log_(s2), log_(s1));
    Var num = add(square(s1), square(sub(m1, m2)));
    Var quad = div(num, scale(square(s2), 2.0));
    return add_scalar(sum(add(ratio, quad)), -0.5 * n);
}

// --------------------------------------------------------------------------
// Parameters and the optimizer
// --------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // applied only to tensors flagged decay
};

/// Named tensor store with Adam moment buffers. Tensor order is creation
/// order and is what adam_step and bindings index by.
class ParameterSet {
  public:
    int add(const std::string& name, Mat init, bool decay) {
        if (index_.count(name)) throw std::invalid_argument("parameters: duplicate name " + name);
        index_[name] = static_cast<int>(entries_.size());
        entries_.push_back(Entry{name, std::move(init), {}, {}, decay});
        Entry& e = entries_.back();
        e.m = Mat::Zero(e.value.rows(), e.value.cols());
        e.v = Mat::Zero(e.value.rows(), e.value.cols());
        return static_cast<int>(entries_.size()) - 1;
    }

    int size() const { return static_cast<int>(entries_.size()); }
    int64_t steps() const { return step_; }

    Mat& value(int i) { return entries_.at(i).value; }
    const Mat& value(int i) const { return entries_.at(i).value; }
    const std::string& name(int i) const { return entries_.at(i).name; }
    bool decay(int i) const { return entries_.at(i).decay; }

    int index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("parameters: unknown name " + name);
        return it->second;
    }

    /// One Adam update with bias correction. Rejects non-finite gradients
    /// before touching any state, so a poisoned step cannot corrupt weights.
    void adam_step(const std::vector<Mat>& grads, const AdamConfig& cfg) {
        if (static_cast<int>(grads.size()) != size()) throw std::invalid_argument("adam_step: gradient count mismatch");
        for (int i = 0; i < size(); ++i) {
            const Entry& e = entries_[i];
            if (grads[i].rows() != e.value.rows() || grads[i].cols() != e.value.cols())
                throw std::invalid_argument("adam_step: gradient shape mismatch for " + e.name);
            if (!grads[i].allFinite()) throw std::runtime_error("adam_step: non-finite gradient for " + e.name);
        }
        const int64_t t = step_ + 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (int i = 0; i < size(); ++i) {
            Entry& e = entries_[i];
            Mat g = grads[i];
            if (e.decay && cfg.weight_decay != 0.0) g += cfg.weight_decay * e.value;
            e.m = cfg.beta1 * e.m + (1.0 - cfg.beta1) * g;
            e.v = cfg.beta2 * e.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
            const Mat mhat = e.m / bc1;
            const Mat vhat = e.v / bc2;
            e.value.array() -= cfg.lr * mhat.array() / (vhat.array().sqrt() + cfg.eps);
        }
        step_ = t;
    }

    json tensors_to_json() const {
        json tensors = json::object();
        for (const Entry& e : entries_) {
            json flat = json::array();
            for (Eigen::Index r = 0; r < e.value.rows(); ++r)
                for (Eigen::Index c = 0; c < e.value.cols(); ++c) flat.push_back(e.value(r, c));
            tensors[e.name] = json{{"rows", e.value.rows()}, {"cols", e.value.cols()}, {"data", std::move(flat)}};
        }
        return json{{"format_version", 1}, {"tensors", std::move(tensors)}};
    }

    /// Loads tensor values into an already-constructed parameter set; every
    /// stored tensor must match an existing name and shape.
    void tensors_from_json(const json& j) {
        if (j.value("format_version", -1) != 1) throw std::runtime_error("checkpoint: unsupported format_version");
        const json& tensors = j.at("tensors");
        if (tensors.size() != static_cast<size_t>(size()))
            throw std::runtime_error("checkpoint: tensor count mismatch");
        for (Entry& e : entries_) {
            if (!tensors.contains(e.name)) throw std::runtime_error("checkpoint: missing tensor " + e.name);
            const json& tj = tensors.at(e.name);
            const Eigen::Index rows = tj.at("rows").get<Eigen::Index>();
            const Eigen::Index cols = tj.at("cols").get<Eigen::Index>();
            if (rows != e.value.rows() || cols != e.value.cols())
                throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
            const json& data = tj.at("data");
            if (static_cast<Eigen::Index>(data.size()) != rows * cols)
                throw std::runtime_error("checkpoint: data length mismatch for " + e.name);
            Eigen::Index k = 0;
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) e.value(r, c) = data[k++].get<double>();
        }
    }

    /// Deep snapshot/restore of tensor values (Adam moments excluded), used
    /// for best-checkpoint selection during training.
    std::vector<Mat> snapshot_values() const {
        std::vector<Mat> out;
        out.reserve(entries_.size());
        for (const Entry& e : entries_) out.push_back(e.value);
        return out;
    }
    void restore_values(const std::vector<Mat>& values) {
        if (values.size() != entries_.size()) throw std::invalid_argument("restore_values: count mismatch");
        for (size_t i = 0; i < entries_.size(); ++i) entries_[i].value = values[i];
    }

  private:
    struct Entry {
        std::string name;
        Mat value, m, v;
        bool decay = false;
    };
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
    int64_t step_ = 0;
};

/// Leaf nodes for every parameter tensor, in parameter order. Forward passes
/// read these; after backward the parameter gradients sit on them.
struct Binding {
    std::vector<Var> vars;
};

inline Binding bind(Tape& tape, const ParameterSet& params) {
    Binding b;
    b.vars.reserve(params.size());
    for (int i = 0; i < params.size(); ++i) b.vars.push_back(tape.leaf(params.value(i)));
    return b;
}

inline std::vector<Mat> parameter_grads(const Tape& tape, const Binding& binding) {
    std::vector<Mat> grads;
    grads.reserve(binding.vars.size());
    for (Var v : binding.vars) grads.push_back(tape.grad(v));
    return grads;
}

/// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)) for a (out x in) map.
inline Mat xavier_uniform(int rows, int cols, rng::Rng& gen) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gen.uniform(-bound, bound);
    return m;
}

}  // namespace hfope::diff
