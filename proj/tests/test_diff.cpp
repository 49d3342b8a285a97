#include <catch2/catch_amalgamated.hpp>

#include "hfope/nn.hpp"
#include "oracles.hpp"

using namespace hfope;
using namespace hfope::diff;
using Catch::Approx;

namespace {
Mat random_mat(rng::Rng& gen, int rows, int cols, double lo, double hi) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gen.uniform(lo, hi);
    return m;
}

std::vector<Mat> random_inputs(rng::Rng& gen, int count, int dim) {
    std::vector<Mat> xs;
    for (int i = 0; i < count; ++i) xs.push_back(random_mat(gen, dim, 1, -1.0, 1.0));
    return xs;
}

Var sum_squares(Tape& tape, const std::vector<Var>& hs) {
    Var acc = sum(square(hs.front()));
    for (size_t t = 1; t < hs.size(); ++t) acc = add(acc, sum(square(hs[t])));
    return acc;
}
}  // namespace

TEST_CASE("backward requires a scalar root and fresh handles", "[diff]") {
    Tape tape;
    Var v = tape.leaf(Mat::Zero(2, 1));
    CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);

    Tape other;
    Var w = other.leaf(1.0);
    CHECK_THROWS_AS(add(v, w), std::invalid_argument);
}

TEST_CASE("gradients accumulate until reset", "[diff]") {
    Tape tape;
    Var x = tape.leaf(3.0);
    Var y = mul(x, x);
    tape.backward(y);
    CHECK(tape.grad(x)(0, 0) == Approx(6.0).margin(1e-12));
    // A second sweep without reset re-seeds the root on top of the stale
    // gradients: 6 already there, plus a pull with root gradient 2.
    tape.backward(y);
    CHECK(tape.grad(x)(0, 0) == Approx(18.0).margin(1e-12));
    tape.reset_grads();
    tape.backward(y);
    CHECK(tape.grad(x)(0, 0) == Approx(6.0).margin(1e-12));
}

TEST_CASE("rectifier forward and backward at points away from the kink", "[diff]") {
    Tape tape;
    Mat x(3, 1);
    x << -1.0, 2.0, 0.5;
    Var v = tape.leaf(x);
    Var y = relu(v);
    CHECK(tape.val(y)(0, 0) == 0.0);
    CHECK(tape.val(y)(1, 0) == 2.0);
    tape.backward(sum(y));
    CHECK(tape.grad(v)(0, 0) == 0.0);
    CHECK(tape.grad(v)(1, 0) == 1.0);
    CHECK(tape.grad(v)(2, 0) == 1.0);
}

TEST_CASE("elementwise operation soup matches finite differences", "[diff]") {
    for (int rep = 0; rep < 10; ++rep) {
        rng::Rng gen(100 + rep);
        ParameterSet params;
        params.add("w", random_mat(gen, 3, 1, 0.2, 1.5), false);
        const double err = oracles::max_grad_rel_err(params, [](Tape& t, const Binding& b) {
            Var w = b.vars[0];
            Var a = sum(mul(sigmoid(w), tanh_(w)));
            Var bq = sum(div(square(w), add_scalar(softplus(w), 0.5)));
            Var c = sum(log_(add_scalar(exp_(scale(w, 0.5)), 1.0)));
            Var d = dot(w, neg(w));
            Var e = sum(concat_rows({w, sub(w, square(w))}));
            return add(add(add(a, bq), add(c, d)), e);
        });
        INFO("rep " << rep);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("affine and fully connected blocks match finite differences", "[diff]") {
    for (int rep = 0; rep < 10; ++rep) {
        rng::Rng gen(200 + rep);
        SECTION("affine " + std::to_string(rep)) {
            ParameterSet params;
            const Linear lin = Linear::create(params, "lin", 3, 2, true, gen);
            const Mat x = random_mat(gen, 3, 1, -1.0, 1.0);
            const double err = oracles::max_grad_rel_err(params, [&](Tape& t, const Binding& b) {
                return sum(square(lin(t, b, t.leaf(x))));
            });
            CHECK(err < 1e-3);
        }
        SECTION("stack " + std::to_string(rep)) {
            ParameterSet params;
            const Mlp mlp = Mlp::create(params, "mlp", {3, 5, 4, 1}, gen);
            const Mat x = random_mat(gen, 3, 1, -1.0, 1.0);
            const double err = oracles::max_grad_rel_err(params, [&](Tape& t, const Binding& b) {
                return sum(square(mlp(t, b, t.leaf(x))));
            });
            CHECK(err < 1e-3);
        }
    }
}

TEST_CASE("recurrent cells match finite differences through unrolled steps", "[diff]") {
    for (int rep = 0; rep < 10; ++rep) {
        rng::Rng gen(300 + rep);
        SECTION("gated cell " + std::to_string(rep)) {
            ParameterSet params;
            const RecurrentCell cell{GruCell::create(params, "g", 3, 4, gen)};
            const std::vector<Mat> xs = random_inputs(gen, 3, 3);
            const double err = oracles::max_grad_rel_err(params, [&](Tape& t, const Binding& b) {
                std::vector<Var> in;
                for (const Mat& x : xs) in.push_back(t.leaf(x));
                return sum_squares(t, recurrent_forward(t, b, cell, in));
            });
            CHECK(err < 1e-3);
        }
        SECTION("memory cell " + std::to_string(rep)) {
            ParameterSet params;
            const RecurrentCell cell{LstmCell::create(params, "l", 3, 4, gen)};
            const std::vector<Mat> xs = random_inputs(gen, 3, 3);
            const double err = oracles::max_grad_rel_err(params, [&](Tape& t, const Binding& b) {
                std::vector<Var> in;
                for (const Mat& x : xs) in.push_back(t.leaf(x));
                return sum_squares(t, recurrent_forward(t, b, cell, in));
            });
            CHECK(err < 1e-3);
        }
    }
}

TEST_CASE("two-direction encoder matches finite differences", "[diff]") {
    for (int rep = 0; rep < 10; ++rep) {
        rng::Rng gen(400 + rep);
        ParameterSet params;
        const RecurrentCell fwd{GruCell::create(params, "f", 2, 3, gen)};
        const RecurrentCell bwd{GruCell::create(params, "b", 2, 3, gen)};
        const Linear top = Linear::create(params, "top", 6, 1, false, gen);
        const std::vector<Mat> xs = random_inputs(gen, 4, 2);
        const double err = oracles::max_grad_rel_err(params, [&](Tape& t, const Binding& b) {
            std::vector<Var> in;
            for (const Mat& x : xs) in.push_back(t.leaf(x));
            const std::vector<Var> hs = bidirectional_forward(t, b, fwd, bwd, in);
            Var acc = top(t, b, hs[0]);
            for (size_t k = 1; k < hs.size(); ++k) acc = add(acc, top(t, b, hs[k]));
            return sum(square(acc));
        });
        INFO("rep " << rep);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("density head and log densities match finite differences", "[diff]") {
    for (int rep = 0; rep < 10; ++rep) {
        rng::Rng gen(500 + rep);
        SECTION("negative log density " + std::to_string(rep)) {
            ParameterSet params;
            const DiagGaussianHead head = DiagGaussianHead::create(params, "h", 3, 2, gen);
            const Mat x = random_mat(gen, 3, 1, -1.0, 1.0);
            const Mat target = random_mat(gen, 2, 1, -1.0, 1.0);
            const double err = oracles::max_grad_rel_err(params, [&](Tape& t, const Binding& b) {
                const auto out = head(t, b, t.leaf(x));
                return neg(gauss_log_prob(t.leaf(target), out.mean, out.std));
            });
            CHECK(err < 1e-3);
        }
        SECTION("divergence between heads " + std::to_string(rep)) {
            ParameterSet params;
            const DiagGaussianHead q = DiagGaussianHead::create(params, "q", 3, 2, gen);
            const DiagGaussianHead p = DiagGaussianHead::create(params, "p", 3, 2, gen);
            const Mat x = random_mat(gen, 3, 1, -1.0, 1.0);
            const double err = oracles::max_grad_rel_err(params, [&](Tape& t, const Binding& b) {
                const auto qo = q(t, b, t.leaf(x));
                const auto po = p(t, b, t.leaf(x));
                return kl_diag_gauss(qo.mean, qo.std, po.mean, po.std);
            });
            CHECK(err < 1e-3);
        }
        SECTION("reparameterized sample " + std::to_string(rep)) {
            ParameterSet params;
            const DiagGaussianHead head = DiagGaussianHead::create(params, "h", 3, 2, gen);
            const Mat x = random_mat(gen, 3, 1, -1.0, 1.0);
            const Mat eps = random_mat(gen, 2, 1, -2.0, 2.0);
            const double err = oracles::max_grad_rel_err(params, [&](Tape& t, const Binding& b) {
                const auto out = head(t, b, t.leaf(x));
                return sum(square(sample_reparam(out.mean, out.std, eps)));
            });
            CHECK(err < 1e-3);
        }
    }
}

TEST_CASE("log density has the textbook value", "[diff]") {
    Tape tape;
    Var lp = gauss_log_prob(tape.leaf(1.0), tape.leaf(0.0), tape.leaf(2.0));
    const double expected = -0.5 * std::log(2.0 * M_PI) - std::log(2.0) - 0.125;
    CHECK(tape.val(lp)(0, 0) == Approx(expected).margin(1e-12));
}

TEST_CASE("divergence is nonnegative and zero only at equality", "[diff]") {
    rng::Rng gen(77);
    for (int rep = 0; rep < 10000; ++rep) {
        Tape tape;
        const Mat m1 = random_mat(gen, 3, 1, -2.0, 2.0);
        const Mat s1 = random_mat(gen, 3, 1, 0.05, 2.0);
        const Mat m2 = random_mat(gen, 3, 1, -2.0, 2.0);
        const Mat s2 = random_mat(gen, 3, 1, 0.05, 2.0);
        Var kl = kl_diag_gauss(tape.leaf(m1), tape.leaf(s1), tape.leaf(m2), tape.leaf(s2));
        CHECK(tape.val(kl)(0, 0) >= -1e-12);
    }
    Tape tape;
    const Mat m = random_mat(gen, 3, 1, -2.0, 2.0);
    const Mat s = random_mat(gen, 3, 1, 0.05, 2.0);
    Var same = kl_diag_gauss(tape.leaf(m), tape.leaf(s), tape.leaf(m), tape.leaf(s));
    CHECK(tape.val(same)(0, 0) == Approx(0.0).margin(1e-12));
    Mat m2 = m;
    m2(0, 0) += 1.0;
    Var apart = kl_diag_gauss(tape.leaf(m), tape.leaf(s), tape.leaf(m2), tape.leaf(s));
    CHECK(tape.val(apart)(0, 0) > 0.01);
}

TEST_CASE("divergence agrees with a Monte Carlo estimate", "[diff]") {
    const Mat m1 = (Mat(2, 1) << 0.3, -0.5).finished();
    const Mat s1 = (Mat(2, 1) << 0.8, 1.2).finished();
    const Mat m2 = (Mat(2, 1) << 0.0, 0.4).finished();
    const Mat s2 = (Mat(2, 1) << 1.0, 0.7).finished();
    Tape tape;
    const double closed =
        tape.val(kl_diag_gauss(tape.leaf(m1), tape.leaf(s1), tape.leaf(m2), tape.leaf(s2)))(0, 0);

    auto logp = [](double x, double mean, double std) {
        const double z = (x - mean) / std;
        return -0.5 * z * z - std::log(std) - 0.5 * std::log(2.0 * M_PI);
    };
    rng::Rng gen(424242);
    const int n = 1000000;
    double acc = 0.0, accsq = 0.0;
    for (int i = 0; i < n; ++i) {
        double term = 0.0;
        for (int d = 0; d < 2; ++d) {
            const double x = m1(d, 0) + s1(d, 0) * gen.gaussian();
            term += logp(x, m1(d, 0), s1(d, 0)) - logp(x, m2(d, 0), s2(d, 0));
        }
        acc += term;
        accsq += term * term;
    }
    const double mc = acc / n;
    const double se = std::sqrt(std::max(0.0, accsq / n - mc * mc) / n);
    INFO("closed " << closed << " mc " << mc << " se " << se);
    CHECK(std::abs(closed - mc) <= 3.0 * se);
}

TEST_CASE("density head keeps the scale strictly positive", "[diff]") {
    rng::Rng gen(5);
    ParameterSet params;
    const DiagGaussianHead head = DiagGaussianHead::create(params, "h", 2, 2, gen);
    params.value(params.index_of("h.std.w")).setZero();
    params.value(params.index_of("h.std.b")).setConstant(-100.0);
    Tape tape;
    Binding binding = bind(tape, params);
    const auto out = head(tape, binding, tape.leaf(Mat::Zero(2, 1)));
    CHECK(tape.val(out.std).minCoeff() >= 1e-3);
    CHECK(tape.val(out.std).maxCoeff() == Approx(1e-3).margin(1e-15));
}

TEST_CASE("optimizer first step has the expected size and direction", "[diff]") {
    ParameterSet params;
    params.add("w", Mat::Zero(1, 1), false);
    AdamConfig cfg;
    cfg.lr = 0.5;
    params.adam_step({Mat::Constant(1, 1, 2.0)}, cfg);
    CHECK(params.value(0)(0, 0) == Approx(-0.5).margin(1e-7));
    CHECK(params.steps() == 1);
}

TEST_CASE("optimizer rejects poisoned gradients without corrupting state", "[diff]") {
    ParameterSet params;
    params.add("w", Mat::Constant(1, 1, 1.5), false);
    AdamConfig cfg;
    const Mat bad = Mat::Constant(1, 1, std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(params.adam_step({bad}, cfg), std::runtime_error);
    CHECK(params.value(0)(0, 0) == 1.5);
    CHECK(params.steps() == 0);
    CHECK_THROWS_AS(params.adam_step({Mat::Zero(2, 1)}, cfg), std::invalid_argument);
    CHECK_THROWS_AS(params.adam_step({}, cfg), std::invalid_argument);
    params.adam_step({Mat::Constant(1, 1, 0.1)}, cfg);
    CHECK(params.steps() == 1);
    CHECK(std::isfinite(params.value(0)(0, 0)));
}

TEST_CASE("optimizer minimizes a quadratic", "[diff]") {
    ParameterSet params;
    params.add("w", Mat::Zero(1, 1), false);
    AdamConfig cfg;
    cfg.lr = 0.1;
    for (int it = 0; it < 500; ++it) {
        Tape tape;
        Binding binding = bind(tape, params);
        Var loss = square(add_scalar(binding.vars[0], -3.0));
        tape.backward(loss);
        params.adam_step(parameter_grads(tape, binding), cfg);
    }
    CHECK(params.value(0)(0, 0) == Approx(3.0).margin(1e-3));
}

TEST_CASE("weight decay touches only flagged tensors", "[diff]") {
    ParameterSet params;
    params.add("decayed", Mat::Constant(1, 1, 2.0), true);
    params.add("plain", Mat::Constant(1, 1, 2.0), false);
    AdamConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.01;
    for (int it = 0; it < 20; ++it) params.adam_step({Mat::Zero(1, 1), Mat::Zero(1, 1)}, cfg);
    CHECK(params.value(0)(0, 0) < 2.0);
    CHECK(params.value(1)(0, 0) == 2.0);
}

TEST_CASE("initialization is deterministic and respects the fan bound", "[diff]") {
    rng::Rng g1(11), g2(11);
    const Mat a = xavier_uniform(5, 7, g1);
    const Mat b = xavier_uniform(5, 7, g2);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 12.0));

    ParameterSet params;
    rng::Rng gen(3);
    GruCell::create(params, "g", 2, 3, gen);
    CHECK(params.value(params.index_of("g.retain.b")).minCoeff() == 1.0);
    LstmCell::create(params, "l", 2, 3, gen);
    CHECK(params.value(params.index_of("l.forget.b")).minCoeff() == 1.0);
}

TEST_CASE("parameter snapshots round trip through serialization", "[diff]") {
    rng::Rng gen(21);
    ParameterSet params;
    Mlp::create(params, "m", {2, 3, 1}, gen);
    const json j = params.tensors_to_json();
    const std::vector<Mat> saved = params.snapshot_values();

    ParameterSet other;
    rng::Rng gen2(99);
    Mlp::create(other, "m", {2, 3, 1}, gen2);
    other.tensors_from_json(j);
    for (int i = 0; i < params.size(); ++i) CHECK((other.value(i) - saved[i]).cwiseAbs().maxCoeff() == 0.0);

    json broken = j;
    broken["tensors"]["m.fc0.w"]["rows"] = 7;
    CHECK_THROWS_AS(other.tensors_from_json(broken), std::runtime_error);
}
