#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "erudiff/corpus.hpp"
#include "erudiff/flowcore.hpp"

namespace erudiff {

enum class MatchCategory { impl, expl, found };

std::string_view to_string(MatchCategory c);

/// How the truncated rollout length n is drawn.
enum class Curriculum {
    taware,   ///< p(n) proportional to exp(-lambda (n - 1))
    uniform,  ///< p(n) = 1 / t_inference
};

std::string_view to_string(Curriculum c);
Curriculum parse_curriculum(std::string_view text);

struct DkdmConfig {
    double p_impl = 0.8;
    double p_expl = 0.1;
    double p_found = 0.1;
    double lambda = 0.1;
    Curriculum curriculum = Curriculum::taware;
    double clamp_lo = 0.02;
    double clamp_hi = 0.98;
    double normalizer_eps = 1e-3;
    double guidance = 1.0;

    void validate() const;
    /// Naive refactoring: every draw is an (implicit, explicit) pair.
    DkdmConfig without_consolidation() const;
};

/// One training draw: which pair of conditions to match, how far to roll out, and where to match.
struct MatchingDraw {
    MatchCategory category = MatchCategory::impl;
    std::size_t entry = 0;
    TokenId gen_condition = 0;
    TokenId target_condition = 0;
    int n_steps = 1;
    double tau = 0.0;
    double t_match = 0.0;
};

MatchCategory sample_category(const DkdmConfig& config, Rng& rng);

/// Closed-form p(n) for n = 1..t_inference (index 0 holds p(1)).
std::vector<double> step_count_probabilities(const DkdmConfig& config, int t_inference);

int sample_num_steps(const DkdmConfig& config, const Schedule& schedule, Rng& rng);

/// Uniform draw on [tau_i + lo (tau_next - tau_i), tau_i + hi (tau_next - tau_i)].
double sample_matching_time(double tau_i, double tau_next, double clamp_lo, double clamp_hi, Rng& rng);

/// Category, entry, (found token), step count and matching time for one iteration.
MatchingDraw draw_matching(const WorldSpec& world, const DkdmConfig& config, const Schedule& schedule, Rng& rng);

template <typename Scalar>
struct PseudoMseResult {
    Scalar loss = Scalar(0);
    /// Normalised direction g per sample; d loss / d x_gen equals g / batch.
    Matrix2X<Scalar> direction;
    Matrix2X<Scalar> grad_x;
    Scalar normalizer = Scalar(1);
    LatentBatch<Scalar> renoised;
};

/// Stop-gradient pseudo-MSE whose gradient w.r.t. the generated batch follows the difference of
/// denoised estimates between the live model (generation condition) and the frozen reference
/// (target condition). Every quantity except `x_gen.x` is treated as a constant.
///
/// When `normalize` is false the normaliser is fixed to 1 so the raw x0-estimate gap is exposed.
template <typename Scalar, VelocityField<Scalar> ThetaField, VelocityField<Scalar> RefField>
PseudoMseResult<Scalar> pseudo_mse_loss(const ThetaField& theta, const RefField& ref, const MatchingDraw& draw,
                                        const LatentBatch<Scalar>& x_gen, std::uint64_t rng_seed,
                                        Scalar normalizer_eps, bool normalize = true) {
    const Scalar t = static_cast<Scalar>(draw.t_match);
    if (!(t > Scalar(0))) throw InvalidArgument("pseudo_mse_loss: matching time must be > 0");
    if (t < x_gen.t) throw InvalidArgument("pseudo_mse_loss: matching time below the generated level");

    PseudoMseResult<Scalar> out;
    out.renoised = renoise<Scalar>(theta, x_gen, t, rng_seed);
    const Matrix2X<Scalar>& xt = out.renoised.x;
    const Matrix2X<Scalar> x_expl = predicted_clean(xt, t, ref(xt, t, draw.target_condition));
    const Matrix2X<Scalar> x_impl = predicted_clean(xt, t, theta(xt, t, draw.gen_condition));

    const Eigen::Index batch = x_gen.x.cols();
    out.normalizer = Scalar(1);
    if (normalize)
        out.normalizer = (x_gen.x - x_expl).cwiseAbs().sum() / Scalar(2 * batch) + normalizer_eps;
    out.direction = (x_impl - x_expl) / out.normalizer;
    out.grad_x = out.direction / Scalar(batch);
    out.loss = Scalar(0.5) * out.direction.colwise().squaredNorm().sum() / Scalar(batch);
    return out;
}

struct DkdmStep {
    double loss = 0.0;
    ModelParams grad;
    MatchingDraw draw;
    FinalStep<double> last;
    Matrix2X<double> grad_x;
    double normalizer = 1.0;
};

/// One Phase-I iteration: draw, truncated rollout of `batch` samples, pseudo-MSE, and the
/// parameter gradient through the final denoising step.
DkdmStep dkdm_iteration(const ModelParams& theta, const ModelParams& ref, const WorldSpec& world,
                        const DkdmConfig& config, const Schedule& schedule, std::uint64_t rng_seed,
                        Eigen::Index batch);

}  // namespace erudiff
