#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "erudiff/corpus.hpp"
#include "erudiff/flowcore.hpp"

namespace erudiff::testing {

/// Exact posterior-mean velocity of x0 ~ N(mu_c, sigma^2 I) under x_t = (1 - t) x0 + t eps.
struct GaussianField {
    std::map<TokenId, Vec2> mu;
    double sigma = 1.0;

    double marginal_var(double t) const { return (1 - t) * (1 - t) * sigma * sigma + t * t; }

    Points operator()(const Points& x, double t, TokenId c) const {
        const Vec2 m = mu.at(c);
        const double var = marginal_var(t);
        Points out(2, x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const Vec2 r = x.col(j) - (1 - t) * m;
            const Vec2 e_x0 = m + ((1 - t) * sigma * sigma / var) * r;
            const Vec2 e_eps = (t / var) * r;
            out.col(j) = e_eps - e_x0;
        }
        return out;
    }

    Points score(const Points& x, double t, TokenId c) const {
        const Vec2 m = mu.at(c);
        return -(x.colwise() - (1 - t) * m) / marginal_var(t);
    }
};

/// Below 100 trainable parameters on a vocabulary of `vocab` tokens.
inline NetworkHyper tiny_hyper(std::uint32_t vocab) {
    NetworkHyper h;
    h.d_embed = 2;
    h.widths = {6};
    h.time_freqs = 1;
    h.vocab = vocab;
    h.activation = Activation::tanh;
    return h;
}

/// Central differences of f along every coordinate of p.
inline VectorX<double> numeric_gradient(const ModelParams& p, const std::function<double(const ModelParams&)>& f,
                                        double h = 1e-6) {
    VectorX<double> g(p.size());
    ModelParams q = p;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double orig = q.values()(i);
        q.values()(i) = orig + h;
        const double fp = f(q);
        q.values()(i) = orig - h;
        const double fm = f(q);
        q.values()(i) = orig;
        g(i) = (fp - fm) / (2 * h);
    }
    return g;
}

inline double relative_error(const VectorX<double>& a, const VectorX<double>& b) {
    return (a - b).norm() / std::max(b.norm(), 1e-300);
}

/// Pearson statistic of observed counts against expected probabilities.
inline double chi_square(const std::vector<long>& counts, const std::vector<double>& probs) {
    long n = 0;
    for (long c : counts) n += c;
    double stat = 0.0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
        const double e = probs[k] * static_cast<double>(n);
        stat += (counts[k] - e) * (counts[k] - e) / e;
    }
    return stat;
}

/// Surrogate whose gradient equals the pseudo-MSE gradient: only the last Euler step depends on p.
inline double frozen_prefix_objective(const ModelParams& p, const FinalStep<double>& last, const Points& weights) {
    const auto field = field_of(p, last.guidance, last.null_id);
    const Points x = last.x_prev + (last.t_next - last.t_prev) * field(last.x_prev, last.t_prev, last.condition);
    return (weights.array() * x.array()).sum();
}

}  // namespace erudiff::testing
