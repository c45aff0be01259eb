#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "erudiff/corpus.hpp"
#include "erudiff/flowcore.hpp"

namespace erudiff {

enum class Utility { sigmoid };

std::string_view to_string(Utility u);
Utility parse_utility(std::string_view text);

/// Monotone value function applied to (negated) implicit rewards.
double utility(Utility u, double z);
double utility_derivative(Utility u, double z);

struct NorlConfig {
    double beta = 0.1;
    int m = 16;
    int n_filter = 1000;
    Utility utility = Utility::sigmoid;
    double t_lo = 0.02;
    double t_hi = 0.98;
    /// Off by default: adds the desirable-sample KTO term over above-threshold samples.
    bool positive_enabled = false;

    void validate() const;
};

struct ScoredSample {
    Vec2 x0 = Vec2::Zero();
    TokenId condition = 0;
    double reward = 0.0;
};

/// Below-threshold generations.
struct FailureSet {
    std::vector<ScoredSample> items;
    double threshold = 0.0;
};

struct FilterResult {
    FailureSet failures;
    std::vector<ScoredSample> successes;  // at or above the threshold
};

/// Mean-score threshold partition of an already scored sample set.
FilterResult partition_by_mean(std::vector<ScoredSample> scored);

/// Generates `n_filter` full samples from `ref` over uniformly drawn explicit conditions and
/// splits them at the mean reward.
FilterResult filter_samples(const ModelParams& ref, const WorldSpec& world, const Schedule& schedule,
                            const NorlConfig& config, std::uint64_t rng_seed, double guidance = 1.0);

FailureSet filter_failures(const ModelParams& ref, const WorldSpec& world, const Schedule& schedule,
                           const NorlConfig& config, std::uint64_t rng_seed, double guidance = 1.0);

/// beta (||v_ref - v*||^2 - ||v_theta - v*||^2) with v* = noise - x0 at x_t = (1 - t) x0 + t noise.
double log_ratio_surrogate(const ModelParams& theta, const ModelParams& ref, const Vec2& x0, TokenId condition,
                           double t, const Vec2& noise, double beta);

/// `m` ground-truth (x0, condition, t, noise) tuples used to estimate Q_ref.
struct UnrelatedBatch {
    Points x0;
    std::vector<TokenId> conditions;
    std::vector<double> t;
    Points noise;
};

/// Fresh explicit-condition ground truth, avoiding `exclude` conditions when any other exists.
UnrelatedBatch draw_unrelated(const WorldSpec& world, std::span<const TokenId> exclude, int m, double t_lo,
                              double t_hi, std::uint64_t rng_seed);

/// Per-sample log-ratio surrogates for a batch; `v_theta` / `v_target` are returned when requested.
VectorX<double> log_ratio_batch(const ModelParams& theta, const ModelParams& ref, const Points& x0,
                                std::span<const TokenId> conds, std::span<const double> t, const Points& noise,
                                double beta, ForwardCache<double>* theta_cache = nullptr, Points* v_theta = nullptr,
                                Points* v_target = nullptr);

/// max(0, mean log-ratio) over the unrelated batch.
double estimate_qref(const ModelParams& theta, const ModelParams& ref, const UnrelatedBatch& batch, double beta);

/// -U(-(log_ratio - q_ref)); minimised.
double kto_loss(double log_ratio, double q_ref, Utility u = Utility::sigmoid);

double kto_loss(const ModelParams& theta, const ModelParams& ref, const ScoredSample& item, double t,
                const Vec2& noise, double q_ref, const NorlConfig& config);

struct NorlStep {
    double loss = 0.0;
    ModelParams grad;
    double q_ref = 0.0;
    std::vector<std::size_t> items;
    std::vector<double> t;
    Points noise;
    VectorX<double> log_ratios;
    // Desirable-sample term, only populated when positive learning is enabled.
    std::vector<std::size_t> positive_items;
    std::vector<double> positive_t;
    Points positive_noise;
};

/// One Phase-II iteration over `batch` failure items drawn with replacement.
NorlStep norl_iteration(const ModelParams& theta, const ModelParams& ref, const WorldSpec& world,
                        const FailureSet& failures, const NorlConfig& config, std::uint64_t rng_seed,
                        Eigen::Index batch, std::span<const ScoredSample> successes = {});

/// CSV: "# threshold=<value>", header "x0,x1,condition_id,reward", one row per failure.
std::string failures_to_csv(const FailureSet& failures);
FailureSet failures_from_csv(const std::string& text);
void save_failures(const FailureSet& failures, const std::filesystem::path& path);
FailureSet load_failures(const std::filesystem::path& path);

}  // namespace erudiff
