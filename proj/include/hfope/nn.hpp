#pragma once

#include <string>
#include <variant>
#include <vector>

#include "hfope/autodiff.hpp"

namespace hfope::diff {

/// Affine map y = W x + b with W initialized Xavier-uniform and b at zero.
struct Linear {
    int w = -1, b = -1;
    int in = 0, out = 0;

    static Linear create(ParameterSet& params, const std::string& prefix, int in, int out, bool decay, rng::Rng& gen) {
        Linear lin;
        lin.in = in;
        lin.out = out;
        lin.w = params.add(prefix + ".w", xavier_uniform(out, in, gen), decay);
        lin.b = params.add(prefix + ".b", Mat::Zero(out, 1), false);
        return lin;
    }

    Var operator()(Tape& tape, const Binding& bind, Var x) const {
        return add(matmul(bind.vars.at(w), x), bind.vars.at(b));
    }
};

/// Fully connected stack with tanh between layers and a linear output layer.
/// Hidden-layer weights carry the weight-decay flag; the output layer and all
/// biases do not.
struct Mlp {
    std::vector<Linear> layers;

    static Mlp create(ParameterSet& params, const std::string& prefix, const std::vector<int>& sizes, rng::Rng& gen) {
        if (sizes.size() < 2) throw std::invalid_argument("mlp: need at least input and output sizes");
        Mlp mlp;
        for (size_t i = 0; i + 1 < sizes.size(); ++i) {
            const bool hidden = i + 2 < sizes.size();
            mlp.layers.push_back(
                Linear::create(params, prefix + ".fc" + std::to_string(i), sizes[i], sizes[i + 1], hidden, gen));
        }
        return mlp;
    }

    Var operator()(Tape& tape, const Binding& bind, Var x) const {
        Var h = x;
        for (size_t i = 0; i < layers.size(); ++i) {
            h = layers[i](tape, bind, h);
            if (i + 1 < layers.size()) h = tanh_(h);
        }
        return h;
    }
};

/// Mean/std head of a diagonal Gaussian. The std path is softplus plus a
/// fixed positive floor, so densities and KL terms never degenerate.
struct DiagGaussianHead {
    Linear mean_lin, std_lin;
    double floor = 1e-3;

    struct Out {
        Var mean, std;
    };

    static DiagGaussianHead create(ParameterSet& params, const std::string& prefix, int in, int out, rng::Rng& gen) {
        DiagGaussianHead head;
        head.mean_lin = Linear::create(params, prefix + ".mean", in, out, false, gen);
        head.std_lin = Linear::create(params, prefix + ".std", in, out, false, gen);
        return head;
    }

    Out operator()(Tape& tape, const Binding& bind, Var x) const {
        return Out{mean_lin(tape, bind, x), add_scalar(softplus(std_lin(tape, bind, x)), floor)};
    }
};

/// Feature stack with tanh after every layer, feeding a diagonal-Gaussian
/// head. All stack weights carry the weight-decay flag; the head does not.
/// With no hidden sizes the head reads the input directly.
struct GaussianMlp {
    std::vector<Linear> stack;
    DiagGaussianHead head;

    static GaussianMlp create(ParameterSet& params, const std::string& prefix, int in, const std::vector<int>& hidden,
                              int out, rng::Rng& gen) {
        GaussianMlp g;
        int feat = in;
        for (size_t i = 0; i < hidden.size(); ++i) {
            g.stack.push_back(Linear::create(params, prefix + ".fc" + std::to_string(i), feat, hidden[i], true, gen));
            feat = hidden[i];
        }
        g.head = DiagGaussianHead::create(params, prefix + ".head", feat, out, gen);
        return g;
    }

    DiagGaussianHead::Out operator()(Tape& tape, const Binding& bind, Var x) const {
        Var h = x;
        for (const Linear& lin : stack) h = tanh_(lin(tape, bind, h));
        return head(tape, bind, h);
    }
};

/// Gated recurrent cell:
///   r = sig(Wr x + Ur h + br)         reset
///   u = sig(Wu x + Uu h + bu)         retention, bias started at +1
///   c = tanh(Wc x + Uc (r h) + bc)
///   h' = u h + (1 - u) c
struct GruCell {
    int wr, ur, br, wu, uu, bu, wc, uc, bc;
    int in = 0, hidden = 0;

    static GruCell create(ParameterSet& params, const std::string& prefix, int in, int hidden, rng::Rng& gen) {
        GruCell cell;
        cell.in = in;
        cell.hidden = hidden;
        auto gate = [&](const char* g, int& w, int& u, int& b, double bias_init) {
            w = params.add(prefix + "." + g + ".w", xavier_uniform(hidden, in, gen), false);
            u = params.add(prefix + "." + g + ".u", xavier_uniform(hidden, hidden, gen), false);
            b = params.add(prefix + "." + g + ".b", Mat::Constant(hidden, 1, bias_init), false);
        };
        gate("reset", cell.wr, cell.ur, cell.br, 0.0);
        gate("retain", cell.wu, cell.uu, cell.bu, 1.0);
        gate("cand", cell.wc, cell.uc, cell.bc, 0.0);
        return cell;
    }

    Var initial_state(Tape& tape) const { return tape.leaf(Mat::Zero(hidden, 1)); }

    Var step(Tape& tape, const Binding& bind, Var x, Var h) const {
        auto affine = [&](int w, int u, int b, Var hin) {
            return add(add(matmul(bind.vars.at(w), x), matmul(bind.vars.at(u), hin)), bind.vars.at(b));
        };
        Var r = sigmoid(affine(wr, ur, br, h));
        Var u = sigmoid(affine(wu, uu, bu, h));
        Var c = tanh_(add(add(matmul(bind.vars.at(wc), x), matmul(bind.vars.at(uc), mul(r, h))), bind.vars.at(bc)));
        return add(mul(u, h), mul(add_scalar(neg(u), 1.0), c));
    }
};

/// Long short-term memory cell with the forget gate biased open (+1).
struct LstmCell {
    int wi, ui, bi, wf, uf, bf, wo, uo, bo, wg, ug, bg;
    int in = 0, hidden = 0;

    struct State {
        Var h, c;
    };

    static LstmCell create(ParameterSet& params, const std::string& prefix, int in, int hidden, rng::Rng& gen) {
        LstmCell cell;
        cell.in = in;
        cell.hidden = hidden;
        auto gate = [&](const char* g, int& w, int& u, int& b, double bias_init) {
            w = params.add(prefix + "." + g + ".w", xavier_uniform(hidden, in, gen), false);
            u = params.add(prefix + "." + g + ".u", xavier_uniform(hidden, hidden, gen), false);
            b = params.add(prefix + "." + g + ".b", Mat::Constant(hidden, 1, bias_init), false);
        };
        gate("in", cell.wi, cell.ui, cell.bi, 0.0);
        gate("forget", cell.wf, cell.uf, cell.bf, 1.0);
        gate("out", cell.wo, cell.uo, cell.bo, 0.0);
        gate("cand", cell.wg, cell.ug, cell.bg, 0.0);
        return cell;
    }

    State initial_state(Tape& tape) const {
        return State{tape.leaf(Mat::Zero(hidden, 1)), tape.leaf(Mat::Zero(hidden, 1))};
    }

    State step(Tape& tape, const Binding& bind, Var x, State s) const {
        auto affine = [&](int w, int u, int b) {
            return add(add(matmul(bind.vars.at(w), x), matmul(bind.vars.at(u), s.h)), bind.vars.at(b));
        };
        Var i = sigmoid(affine(wi, ui, bi));
        Var f = sigmoid(affine(wf, uf, bf));
        Var o = sigmoid(affine(wo, uo, bo));
        Var g = tanh_(affine(wg, ug, bg));
        Var c = add(mul(f, s.c), mul(i, g));
        return State{mul(o, tanh_(c)), c};
    }
};

/// Either recurrent cell behind one stepping interface.
struct RecurrentCell {
    std::variant<GruCell, LstmCell> cell;

    int hidden() const {
        return std::visit([](const auto& c) { return c.hidden; }, cell);
    }

    struct State {
        Var h;
        Var c;  // unused for the gated cell
        bool has_c = false;
    };

    State initial_state(Tape& tape) const {
        if (const GruCell* g = std::get_if<GruCell>(&cell)) return State{g->initial_state(tape), {}, false};
        const LstmCell& l = std::get<LstmCell>(cell);
        auto s = l.initial_state(tape);
        return State{s.h, s.c, true};
    }

    State step(Tape& tape, const Binding& bind, Var x, const State& s) const {
        if (const GruCell* g = std::get_if<GruCell>(&cell)) return State{g->step(tape, bind, x, s.h), {}, false};
        const LstmCell& l = std::get<LstmCell>(cell);
        auto ns = l.step(tape, bind, x, LstmCell::State{s.h, s.c});
        return State{ns.h, ns.c, true};
    }
};

/// Runs a cell left to right; returns the hidden state after each input.
inline std::vector<Var> recurrent_forward(Tape& tape, const Binding& bind, const RecurrentCell& cell,
                                          const std::vector<Var>& inputs) {
    std::vector<Var> hs;
    hs.reserve(inputs.size());
    RecurrentCell::State s = cell.initial_state(tape);
    for (Var x : inputs) {
        s = cell.step(tape, bind, x, s);
        hs.push_back(s.h);
    }
    return hs;
}

/// Runs one cell forward and another over the reversed sequence; output t is
/// the concatenation of the two hidden states aligned at t.
inline std::vector<Var> bidirectional_forward(Tape& tape, const Binding& bind, const RecurrentCell& fwd,
                                              const RecurrentCell& bwd, const std::vector<Var>& inputs) {
    const std::vector<Var> hf = recurrent_forward(tape, bind, fwd, inputs);
    std::vector<Var> rev(inputs.rbegin(), inputs.rend());
    std::vector<Var> hb = recurrent_forward(tape, bind, bwd, rev);
    std::vector<Var> out;
    out.reserve(inputs.size());
    for (size_t t = 0; t < inputs.size(); ++t)
        out.push_back(concat_rows({hf[t], hb[inputs.size() - 1 - t]}));
    return out;
}

}  // namespace hfope::diff
