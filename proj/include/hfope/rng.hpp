#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace hfope::rng {

/// SplitMix64 finalizer. Bijective on 64-bit words, used to whiten seeds.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// FNV-1a over the bytes of a stage label.
inline uint64_t hash_label(std::string_view label) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hierarchical seed derivation: every randomized stage draws from its own
/// stream, keyed by (master seed, stage label, index). Changing any component
/// decorrelates the stream; repeating the triple reproduces it exactly.
inline uint64_t derive_seed(uint64_t master, std::string_view stage, uint64_t index = 0) {
    return splitmix64(splitmix64(master ^ hash_label(stage)) ^ splitmix64(index + 0x9e3779b97f4a7c15ULL));
}

/// Deterministic RNG stream. Distribution transforms are implemented here
/// (not via std:: distributions, whose output is implementation-defined), so
/// identical seeds give identical draws on any platform.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(splitmix64(seed)) {}

    /// Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; the spare draw is cached.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double ang = 2.0 * M_PI * u2;
        spare_ = mag * std::sin(ang);
        have_spare_ = true;
        return mag * std::cos(ang);
    }

    double gaussian(double mean, double std) { return mean + std * gaussian(); }

    /// Gaussian truncated below at 0 (rejection; acceptance >= 1/2 whenever
    /// mean >= 0). std == 0 degenerates to the point mass at mean.
    double truncated_gaussian_lower0(double mean, double std) {
        if (std < 0.0) throw std::invalid_argument("truncated_gaussian_lower0: std must be >= 0");
        if (std == 0.0) {
            if (mean < 0.0) throw std::invalid_argument("truncated_gaussian_lower0: degenerate mass below 0");
            return mean;
        }
        for (int attempt = 0; attempt < 100000; ++attempt) {
            const double x = gaussian(mean, std);
            if (x >= 0.0) return x;
        }
        throw std::runtime_error("truncated_gaussian_lower0: rejection sampling failed to accept");
    }

    /// Index draw from an explicit probability vector (need not be exactly
    /// normalized; a trailing-renormalization guard absorbs rounding).
    int categorical(const std::vector<double>& probs) {
        if (probs.empty()) throw std::invalid_argument("categorical: empty probability vector");
        const double u = uniform();
        double acc = 0.0;
        int last_positive = -1;
        for (size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] < 0.0) throw std::invalid_argument("categorical: negative probability");
            if (probs[i] > 0.0) last_positive = static_cast<int>(i);
            acc += probs[i];
            if (u < acc) return static_cast<int>(i);
        }
        if (last_positive < 0) throw std::invalid_argument("categorical: all-zero probability vector");
        return last_positive;
    }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        return static_cast<int>(engine_() % static_cast<uint64_t>(n));
    }

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            const int j = uniform_int(i + 1);
            std::swap(p[i], p[j]);
        }
        return p;
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// Standard normal pdf.
inline double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

/// Standard normal cdf.
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Mean of a Gaussian(mean, std^2) truncated below at 0:
///   E[X | X >= 0] = mean + std * pdf(mean/std) / cdf(mean/std).
inline double truncated_gaussian_lower0_mean(double mean, double std) {
    if (std < 0.0) throw std::invalid_argument("truncated_gaussian_lower0_mean: std must be >= 0");
    if (std == 0.0) {
        if (mean < 0.0) throw std::invalid_argument("truncated_gaussian_lower0_mean: degenerate mass below 0");
        return mean;
    }
    const double a = mean / std;
    const double z = norm_cdf(a);
    if (z <= 0.0) throw std::runtime_error("truncated_gaussian_lower0_mean: vanishing acceptance region");
    return mean + std * norm_pdf(a) / z;
}

}  // namespace hfope::rng
