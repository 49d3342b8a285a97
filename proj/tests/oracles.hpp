#pragma once

// Independent reference implementations used only by tests. Everything here
// recomputes expected values by brute force (path enumeration, quadrature,
// Monte Carlo, finite differences) without touching the library's own
// dynamic-programming or backpropagation code paths.

#include <cmath>
#include <functional>
#include <vector>

#include "hfope/autodiff.hpp"
#include "hfope/core.hpp"
#include "hfope/envs.hpp"

namespace oracles {

using hfope::core::Mat;
using hfope::core::Policy;
using hfope::core::Vec;
using hfope::envs::TabularHmdp;

// Mean of a Gaussian truncated below at 0, by Simpson quadrature on
// [0, mean + 12 std]. Independent of the closed form used in the library.
inline double truncated_mean_quadrature(double mean, double std) {
    if (std == 0.0) return mean;
    const double lo = 0.0;
    const double hi = mean + 12.0 * std;
    const int n = 40000;  // even
    const double h = (hi - lo) / n;
    auto density = [&](double x) {
        const double z = (x - mean) / std;
        return std::exp(-0.5 * z * z) / (std * std::sqrt(2.0 * M_PI));
    };
    double mass = 0.0, moment = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = lo + i * h;
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        mass += w * density(x);
        moment += w * x * density(x);
    }
    return moment / mass;
}

// Expected discounted human return by full path enumeration. Exponential in
// the horizon; only for tiny instances.
inline double enum_human_value(const TabularHmdp& env, const Policy& pol) {
    const Mat pi = hfope::envs::tabular_policy_matrix(env, pol);
    Mat mean_table(env.num_states, env.num_actions);
    for (int s = 0; s < env.num_states; ++s)
        for (int a = 0; a < env.num_actions; ++a)
            mean_table(s, a) = truncated_mean_quadrature(env.ihr_mean(s, a), env.ihr_std(s, a));

    double total = 0.0;
    std::function<void(int, int, double, double)> walk = [&](int s, int t, double prob, double ret) {
        if (t == env.horizon) {
            total += prob * ret;
            return;
        }
        for (int a = 0; a < env.num_actions; ++a) {
            if (pi(s, a) == 0.0) continue;
            const double step = std::pow(env.discount, t) * mean_table(s, a);
            for (int ns = 0; ns < env.num_states; ++ns) {
                const double p = env.transition[a](s, ns);
                if (p == 0.0) continue;
                walk(ns, t + 1, prob * pi(s, a) * p, ret + step);
            }
        }
    };
    for (int s0 = 0; s0 < env.num_states; ++s0)
        if (env.initial_dist[s0] > 0.0) walk(s0, 0, env.initial_dist[s0], 0.0);
    return total;
}

// Normalized discount-weighted visitation by path enumeration.
inline Mat enum_visitation(const TabularHmdp& env, const Policy& pol) {
    const Mat pi = hfope::envs::tabular_policy_matrix(env, pol);
    Mat occ = Mat::Zero(env.num_states, env.num_actions);
    std::function<void(int, int, double)> walk = [&](int s, int t, double prob) {
        if (t == env.horizon) return;
        for (int a = 0; a < env.num_actions; ++a) {
            if (pi(s, a) == 0.0) continue;
            occ(s, a) += prob * pi(s, a) * std::pow(env.discount, t);
            for (int ns = 0; ns < env.num_states; ++ns) {
                const double p = env.transition[a](s, ns);
                if (p > 0.0) walk(ns, t + 1, prob * pi(s, a) * p);
            }
        }
    };
    for (int s0 = 0; s0 < env.num_states; ++s0)
        if (env.initial_dist[s0] > 0.0) walk(s0, 0, env.initial_dist[s0]);
    double norm = 0.0;
    double w = 1.0;
    for (int t = 0; t < env.horizon; ++t) {
        norm += w;
        w *= env.discount;
    }
    return occ / norm;
}

// Central finite differences over every parameter coordinate against one
// backward pass. make_loss must rebuild the same deterministic scalar loss
// from scratch on each call. Returns the largest relative error, with
// rel = |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double max_grad_rel_err(hfope::diff::ParameterSet& params,
                               const std::function<hfope::diff::Var(hfope::diff::Tape&, const hfope::diff::Binding&)>&
                                   make_loss,
                               double h = 1e-5) {
    using namespace hfope::diff;
    Tape tape;
    Binding binding = bind(tape, params);
    Var root = make_loss(tape, binding);
    tape.backward(root);
    const std::vector<Mat> grads = parameter_grads(tape, binding);

    auto eval = [&]() {
        Tape fresh;
        Binding b = bind(fresh, params);
        return fresh.val(make_loss(fresh, b))(0, 0);
    };

    double worst = 0.0;
    for (int i = 0; i < params.size(); ++i) {
        Mat& value = params.value(i);
        for (Eigen::Index k = 0; k < value.size(); ++k) {
            const double keep = value.data()[k];
            value.data()[k] = keep + h;
            const double up = eval();
            value.data()[k] = keep - h;
            const double down = eval();
            value.data()[k] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = grads[i].data()[k];
            const double rel = std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// Sample Pearson correlation.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace oracles
