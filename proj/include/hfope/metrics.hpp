#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

// Metrics comparing estimated against true policy values across a set of
// target policies, and the report structures the experiment harness fills.

namespace hfope::metrics {

inline void check_paired(const std::vector<double>& a, const std::vector<double>& b, size_t min_len) {
    if (a.size() != b.size()) throw std::invalid_argument("metrics: length mismatch");
    if (a.size() < min_len) throw std::invalid_argument("metrics: too few entries");
}

/// Mean absolute error between estimated and true values.
inline double mae(const std::vector<double>& estimates, const std::vector<double>& truths) {
    check_paired(estimates, truths, 1);
    double total = 0.0;
    for (size_t i = 0; i < estimates.size(); ++i) total += std::abs(estimates[i] - truths[i]);
    return total / estimates.size();
}

/// Ranks 1..n with ties mapped to the average of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& xs) {
    const size_t n = xs.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    check_paired(xs, ys, 2);
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / ys.size();
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) throw std::invalid_argument("correlation: constant input");
    return sxy / std::sqrt(sxx * syy);
}

/// Spearman rank correlation with average-rank tie handling. Constant
/// input has no defined ordering and is reported as an error, never as 0.
inline double rank_correlation(const std::vector<double>& estimates, const std::vector<double>& truths) {
    check_paired(estimates, truths, 2);
    return pearson(average_ranks(estimates), average_ranks(truths));
}

/// Normalized value gap of the policy the estimator would deploy:
/// (max_i V_i - V_chosen) / max_i V_i, where chosen maximizes the estimate
/// and argmax ties break toward the lowest policy index.
inline double regret_at_1(const std::vector<double>& estimates, const std::vector<double>& truths) {
    check_paired(estimates, truths, 1);
    size_t chosen = 0;
    for (size_t i = 1; i < estimates.size(); ++i)
        if (estimates[i] > estimates[chosen]) chosen = i;
    const double best = *std::max_element(truths.begin(), truths.end());
    if (best == 0.0) throw std::invalid_argument("regret: max true value is zero");
    return (best - truths[chosen]) / best;
}

struct Correlations {
    double pearson = 0.0;
    double spearman = 0.0;
};

/// Pearson and Spearman coefficients between two paired series, e.g.
/// environmental versus human returns of the same episodes.
inline Correlations return_correlations(const std::vector<double>& xs, const std::vector<double>& ys) {
    Correlations c;
    c.pearson = pearson(xs, ys);
    c.spearman = rank_correlation(xs, ys);
    return c;
}

// --------------------------------------------------------------------------
// Evaluation report
// --------------------------------------------------------------------------

/// One estimate: an estimator, fed one reconstruction method's rewards,
/// applied to one target policy, under one seed.
struct ReportRow {
    std::string estimator;
    std::string method;
    std::string policy_id;
    double estimate = 0.0;
    double truth = 0.0;
    uint64_t seed = 0;
};

/// Per (estimator, method): metrics computed across target policies within
/// each seed, then averaged over seeds with a standard error.
struct AggregateRow {
    std::string estimator;
    std::string method;
    int num_seeds = 0;
    double mae_mean = 0.0, mae_se = 0.0;
    double rank_mean = 0.0, rank_se = 0.0;
    double regret_mean = 0.0, regret_se = 0.0;
};

namespace detail {
inline void mean_se(const std::vector<double>& xs, double& mean_out, double& se_out) {
    mean_out = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    if (xs.size() < 2) {
        se_out = 0.0;
        return;
    }
    double acc = 0.0;
    for (double x : xs) acc += (x - mean_out) * (x - mean_out);
    se_out = std::sqrt(acc / (xs.size() - 1) / xs.size());
}
}  // namespace detail

/// Groups rows by (estimator, method), computes mae / rank correlation /
/// regret across the policies of each seed, and averages over seeds.
/// Every group must contain at least two policies per seed so the rank
/// correlation is defined.
inline std::vector<AggregateRow> aggregate_report(const std::vector<ReportRow>& rows) {
    std::map<std::pair<std::string, std::string>, std::map<uint64_t, std::vector<const ReportRow*>>> groups;
    for (const auto& row : rows) groups[{row.estimator, row.method}][row.seed].push_back(&row);

    std::vector<AggregateRow> out;
    for (const auto& [key, by_seed] : groups) {
        AggregateRow agg;
        agg.estimator = key.first;
        agg.method = key.second;
        std::vector<double> maes, ranks, regrets;
        for (const auto& [seed, cells] : by_seed) {
            std::vector<double> est, truth;
            for (const ReportRow* r : cells) {
                est.push_back(r->estimate);
                truth.push_back(r->truth);
            }
            maes.push_back(mae(est, truth));
            ranks.push_back(rank_correlation(est, truth));
            regrets.push_back(regret_at_1(est, truth));
        }
        agg.num_seeds = static_cast<int>(by_seed.size());
        detail::mean_se(maes, agg.mae_mean, agg.mae_se);
        detail::mean_se(ranks, agg.rank_mean, agg.rank_se);
        detail::mean_se(regrets, agg.regret_mean, agg.regret_se);
        out.push_back(std::move(agg));
    }
    return out;
}

}  // namespace hfope::metrics
