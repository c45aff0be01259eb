#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "erudiff/corpus.hpp"
#include "erudiff/flowcore.hpp"

namespace erudiff {

struct MmdResult {
    double value = 0.0;
    double bandwidth = 1.0;
    /// Set when the median heuristic hit zero and the bandwidth fell back to 1.
    bool bandwidth_fallback = false;
};

/// Median of all pairwise Euclidean distances (i < j), exact.
double median_pairwise_distance(const Points& pts);

/// Biased (V-statistic) squared MMD with an RBF kernel exp(-|a - b|^2 / (2 h^2)). Without an
/// explicit bandwidth h, the median pairwise distance of the pooled set is used.
MmdResult mmd2(const Points& a, const Points& b, std::optional<double> bandwidth = std::nullopt);

/// Fraction of samples whose nearest component mean (over every mixture in the world) belongs to
/// the token's fact mixture.
double knowledge_score(const WorldSpec& world, TokenId condition, const Points& samples);

/// Mean over foundational tokens of max(0, mmd2(after, target) - mmd2(before, target)).
double forgetting_score(const WorldSpec& world, const ModelParams& before, const ModelParams& after,
                        const Schedule& schedule, Eigen::Index n, std::uint64_t rng_seed);

struct ConditionMetrics {
    TokenId condition = 0;
    TokenKind kind = TokenKind::explicit_token;
    double knowledge_score = 0.0;
    double mmd2 = 0.0;
    double mean_reward = 0.0;
};

struct MetricsReport {
    std::vector<ConditionMetrics> rows;
    double implicit_mean = 0.0;
    double explicit_mean = 0.0;
    double foundational_mean = 0.0;
    double implicit_mmd2_mean = 0.0;
    std::optional<double> forgetting;

    std::string checkpoint;
    std::uint64_t world_seed = 0;
    Eigen::Index samples = 0;
    std::uint64_t metric_seed = 0;

    /// Generated samples per condition, used for plotting only.
    std::map<TokenId, Points> generated;
};

/// Evaluates every non-null condition. Conditions are independent, so `threads` > 1 only changes
/// wall-clock time, never the numbers.
MetricsReport evaluate_model(const WorldSpec& world, const ModelParams& model, const Schedule& schedule,
                             Eigen::Index samples, std::uint64_t rng_seed, int threads = 1,
                             std::optional<TokenKind> only_kind = std::nullopt);

/// Mean knowledge score over the world's implicit conditions.
double implicit_knowledge(const WorldSpec& world, const ModelParams& model, const Schedule& schedule,
                          Eigen::Index samples, std::uint64_t rng_seed);

double mean_knowledge(const WorldSpec& world, const ModelParams& model, const Schedule& schedule,
                      TokenKind kind, Eigen::Index samples, std::uint64_t rng_seed);

/// Iteration vs implicit knowledge score curve for the convergence panel.
struct ConvergenceCurve {
    std::string label;
    std::vector<std::pair<long, double>> points;
};

/// CSV columns: condition_id,kind,knowledge_score,mmd2,mean_reward.
std::string report_csv(const MetricsReport& report);

/// 1000 x 1000 SVG. Layer order: background, grid, mixture contours (1 and 2 sigma ellipses),
/// generated samples per condition, legend, convergence panel.
std::string report_svg(const WorldSpec& world, const MetricsReport& report,
                       const std::vector<ConvergenceCurve>& curves);

void export_report(const WorldSpec& world, const MetricsReport& report, const std::filesystem::path& csv_path,
                   const std::filesystem::path& svg_path, const std::vector<ConvergenceCurve>& curves = {});

}  // namespace erudiff
