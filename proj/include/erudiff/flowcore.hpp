#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "erudiff/core.hpp"
#include "erudiff/network.hpp"

namespace erudiff {

// Rectified-flow conventions: time runs over [0, 1], x_t = (1 - t) x0 + t eps, and the network
// predicts the velocity v = eps - x0.

/// Inference grid plus the clamp fractions used when drawing matching times.
///
/// `taus` is stored from noise to data: taus.front() == 1, taus.back() == 0. `tau(i)` uses the
/// conventional index where tau(0) == 0 and tau(t_inference) == 1.
struct Schedule {
    int t_inference = 16;
    std::vector<double> taus;
    double clamp_lo = 0.02;
    double clamp_hi = 0.98;

    static Schedule uniform(int t_inference, double clamp_lo = 0.02, double clamp_hi = 0.98);

    double tau(int i) const { return taus[static_cast<std::size_t>(t_inference - i)]; }
    /// Time reached after running the first `n_steps` denoising steps from t = 1.
    double time_after(int n_steps) const { return taus[static_cast<std::size_t>(n_steps)]; }
    void validate() const;
};

/// A batch of latents sharing one noise level and one condition.
template <typename Scalar>
struct LatentBatch {
    Matrix2X<Scalar> x;
    Scalar t = Scalar(1);
    TokenId condition = 0;
};

template <typename Derived0, typename Derived1, typename Scalar>
auto forward_diffuse(const Eigen::MatrixBase<Derived0>& x0, Scalar t, const Eigen::MatrixBase<Derived1>& noise) {
    if (!(t >= Scalar(0) && t <= Scalar(1))) throw InvalidArgument("forward_diffuse: t outside [0, 1]");
    using Plain = typename Derived0::PlainObject;
    return Plain((Scalar(1) - t) * x0 + t * noise);
}

/// x0_hat = x - t v.
template <typename Derived0, typename Derived1, typename Scalar>
auto predicted_clean(const Eigen::MatrixBase<Derived0>& x, Scalar t, const Eigen::MatrixBase<Derived1>& v) {
    if (!(t >= Scalar(0) && t <= Scalar(1))) throw InvalidArgument("predicted_clean: t outside [0, 1]");
    using Plain = typename Derived0::PlainObject;
    return Plain(x - t * v);
}

/// Marginal score implied by a posterior-mean velocity: -(x + (1 - t) v) / t.
template <typename Derived0, typename Derived1, typename Scalar>
auto velocity_to_score(const Eigen::MatrixBase<Derived0>& x, Scalar t, const Eigen::MatrixBase<Derived1>& v) {
    if (!(t > Scalar(0) && t <= Scalar(1))) throw InvalidArgument("velocity_to_score: t must lie in (0, 1]");
    using Plain = typename Derived0::PlainObject;
    return Plain(-(x + (Scalar(1) - t) * v) / t);
}

/// Anything that maps (x batch, t, condition) to a velocity batch.
template <typename F, typename Scalar>
concept VelocityField = requires(const F& f, const Matrix2X<Scalar>& x, Scalar t, TokenId c) {
    { f(x, t, c) } -> std::convertible_to<Matrix2X<Scalar>>;
};

/// Velocity network, optionally with classifier-free guidance v_null + w (v_cond - v_null).
template <typename Scalar>
struct NetworkField {
    const BasicModelParams<Scalar>* params = nullptr;
    Scalar guidance = Scalar(1);
    TokenId null_id = 0;

    Matrix2X<Scalar> operator()(const Matrix2X<Scalar>& x, Scalar t, TokenId c) const {
        const Scalar ts[1] = {t};
        const TokenId cs[1] = {c};
        Matrix2X<Scalar> v = network_forward<Scalar>(*params, x, ts, cs);
        if (guidance == Scalar(1)) return v;
        const TokenId ns[1] = {null_id};
        const Matrix2X<Scalar> vn = network_forward<Scalar>(*params, x, ts, ns);
        return vn + guidance * (v - vn);
    }
};

template <typename Scalar>
NetworkField<Scalar> field_of(const BasicModelParams<Scalar>& params, Scalar guidance = Scalar(1),
                              TokenId null_id = 0) {
    return NetworkField<Scalar>{&params, guidance, null_id};
}

template <typename Scalar>
Matrix2X<Scalar> predict_velocity(const BasicModelParams<Scalar>& params, const LatentBatch<Scalar>& p) {
    return field_of(params)(p.x, p.t, p.condition);
}

template <typename Scalar, VelocityField<Scalar> Field>
LatentBatch<Scalar> euler_step(const Field& field, const LatentBatch<Scalar>& p, Scalar t_next) {
    if (!(t_next >= Scalar(0) && t_next < p.t)) throw InvalidArgument("euler_step: need 0 <= t_next < t");
    LatentBatch<Scalar> out;
    out.x = p.x + (t_next - p.t) * field(p.x, p.t, p.condition);
    out.t = t_next;
    out.condition = p.condition;
    return out;
}

/// Runs `n_steps` Euler steps along the schedule starting from `z` at t = 1.
template <typename Scalar, VelocityField<Scalar> Field>
LatentBatch<Scalar> rollout(const Field& field, const Matrix2X<Scalar>& z, TokenId condition,
                            const Schedule& schedule, int n_steps) {
    if (n_steps < 0 || n_steps > schedule.t_inference) throw InvalidArgument("rollout: n_steps out of range");
    LatentBatch<Scalar> p{z, Scalar(1), condition};
    for (int k = 0; k < n_steps; ++k) p = euler_step(field, p, static_cast<Scalar>(schedule.taus[k + 1]));
    return p;
}

/// Everything needed to push a gradient through the last Euler step of a truncated rollout.
template <typename Scalar>
struct FinalStep {
    Matrix2X<Scalar> x_prev;  // input of the last step; treated as a constant
    Scalar t_prev = Scalar(1);
    Scalar t_next = Scalar(0);
    TokenId condition = 0;
    Scalar guidance = Scalar(1);
    TokenId null_id = 0;
    ForwardCache<Scalar> cond_cache;
    ForwardCache<Scalar> null_cache;
};

template <typename Scalar>
struct TruncatedSample {
    LatentBatch<Scalar> latent;
    FinalStep<Scalar> last;
};

/// Samples z ~ N(0, I) and denoises for `n_steps` steps. Parameter gradients flow through the final
/// step only; see `final_step_backward`.
template <typename Scalar>
TruncatedSample<Scalar> sample_truncated(const BasicModelParams<Scalar>& params, TokenId condition, int n_steps,
                                         const Schedule& schedule, std::uint64_t rng_seed, Eigen::Index batch,
                                         Scalar guidance = Scalar(1), TokenId null_id = 0) {
    if (n_steps < 1 || n_steps > schedule.t_inference)
        throw InvalidArgument("sample_truncated: n_steps must be in [1, t_inference]");
    require(batch >= 1, "sample_truncated: batch must be >= 1");
    Rng rng = make_rng(rng_seed, 0x5a);
    const Matrix2X<Scalar> z = standard_normal<Scalar>(batch, rng);
    const auto field = field_of(params, guidance, null_id);
    LatentBatch<Scalar> prefix = rollout<Scalar>(field, z, condition, schedule, n_steps - 1);

    TruncatedSample<Scalar> out;
    FinalStep<Scalar>& last = out.last;
    last.x_prev = prefix.x;
    last.t_prev = prefix.t;
    last.t_next = static_cast<Scalar>(schedule.taus[n_steps]);
    last.condition = condition;
    last.guidance = guidance;
    last.null_id = null_id;

    const Scalar ts[1] = {last.t_prev};
    const TokenId cs[1] = {condition};
    Matrix2X<Scalar> v = network_forward<Scalar>(params, last.x_prev, ts, cs, &last.cond_cache);
    if (guidance != Scalar(1)) {
        const TokenId ns[1] = {null_id};
        const Matrix2X<Scalar> vn = network_forward<Scalar>(params, last.x_prev, ts, ns, &last.null_cache);
        v = vn + guidance * (v - vn);
    }
    out.latent.x = last.x_prev + (last.t_next - last.t_prev) * v;
    out.latent.t = last.t_next;
    out.latent.condition = condition;
    return out;
}

/// Accumulates dL/dtheta through x_out = x_prev + (t_next - t_prev) v_theta(x_prev), x_prev constant.
template <typename Scalar>
void final_step_backward(const BasicModelParams<Scalar>& params, const FinalStep<Scalar>& last,
                         const Matrix2X<Scalar>& grad_x_out, BasicModelParams<Scalar>& grad) {
    const Scalar dt = last.t_next - last.t_prev;
    if (last.guidance == Scalar(1)) {
        network_backward<Scalar>(params, last.cond_cache, Matrix2X<Scalar>(dt * grad_x_out), grad);
        return;
    }
    network_backward<Scalar>(params, last.cond_cache, Matrix2X<Scalar>(dt * last.guidance * grad_x_out), grad);
    network_backward<Scalar>(params, last.null_cache,
                             Matrix2X<Scalar>(dt * (Scalar(1) - last.guidance) * grad_x_out), grad);
}

/// Full-chain samples (no gradient bookkeeping).
template <typename Scalar, VelocityField<Scalar> Field>
Matrix2X<Scalar> generate(const Field& field, TokenId condition, const Schedule& schedule, Eigen::Index n,
                          std::uint64_t rng_seed) {
    require(n >= 1, "generate: n must be >= 1");
    Rng rng = make_rng(rng_seed, 0x5a);
    return rollout<Scalar>(field, standard_normal<Scalar>(n, rng), condition, schedule, schedule.t_inference).x;
}

/// Re-noises a partially denoised batch to level t >= p.t by projecting to x0_hat with the
/// (gradient-stopped) prediction and diffusing it with fresh noise.
template <typename Scalar, VelocityField<Scalar> Field>
LatentBatch<Scalar> renoise(const Field& field, const LatentBatch<Scalar>& p, Scalar t, std::uint64_t rng_seed) {
    if (!(t >= p.t && t <= Scalar(1))) throw InvalidArgument("renoise: need p.t <= t <= 1");
    Rng rng = make_rng(rng_seed, 0x7e);
    const Matrix2X<Scalar> noise = standard_normal<Scalar>(p.x.cols(), rng);
    Matrix2X<Scalar> x0_hat = p.x;
    if (p.t > Scalar(0)) x0_hat = predicted_clean(p.x, p.t, field(p.x, p.t, p.condition));
    return LatentBatch<Scalar>{forward_diffuse(x0_hat, t, noise), t, p.condition};
}

/// Conditional flow-matching loss ||v_theta(x_t) - (noise - x0)||^2 for one sample.
template <typename Scalar>
Scalar fm_loss(const BasicModelParams<Scalar>& params, const Vector2<Scalar>& x0, TokenId condition, Scalar t,
               const Vector2<Scalar>& noise) {
    const Matrix2X<Scalar> xt = forward_diffuse(x0, t, noise);
    const Scalar ts[1] = {t};
    const TokenId cs[1] = {condition};
    const Matrix2X<Scalar> v = network_forward<Scalar>(params, xt, ts, cs);
    return (v.col(0) - (noise - x0)).squaredNorm();
}

/// Batch mean of the flow-matching loss; adds its parameter gradient into `grad` when given.
template <typename Scalar>
Scalar fm_loss_batch(const BasicModelParams<Scalar>& params, const Matrix2X<Scalar>& x0,
                     std::span<const TokenId> conds, std::span<const Scalar> t, const Matrix2X<Scalar>& noise,
                     BasicModelParams<Scalar>* grad = nullptr) {
    const Eigen::Index n = x0.cols();
    require(static_cast<Eigen::Index>(t.size()) == n, "fm_loss_batch: one time per sample required");
    Matrix2X<Scalar> xt(2, n);
    for (Eigen::Index j = 0; j < n; ++j) xt.col(j) = forward_diffuse(x0.col(j), t[j], noise.col(j));
    ForwardCache<Scalar> cache;
    const Matrix2X<Scalar> v = network_forward<Scalar>(params, xt, t, conds, grad ? &cache : nullptr);
    const Matrix2X<Scalar> resid = v - (noise - x0);
    if (grad) network_backward<Scalar>(params, cache, Matrix2X<Scalar>((Scalar(2) / Scalar(n)) * resid), *grad);
    return resid.colwise().squaredNorm().sum() / Scalar(n);
}

// Checkpoint file (little-endian):
//   "ERUD" | u32 version | u32 d_embed | u32 n_hidden | u32 width x n_hidden | u32 vocab
//   | u32 time_freqs | u32 activation | f32 x n_params (flat order of BasicModelParams)
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string checkpoint_bytes(const ModelParams& params);
ModelParams checkpoint_from_bytes(const std::string& bytes);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace erudiff
