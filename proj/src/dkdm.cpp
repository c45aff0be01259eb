#include "erudiff/dkdm.hpp"

#include <cmath>

namespace erudiff {

std::string_view to_string(MatchCategory c) {
    switch (c) {
        case MatchCategory::impl: return "impl";
        case MatchCategory::expl: return "expl";
        case MatchCategory::found: return "found";
    }
    return "?";
}

std::string_view to_string(Curriculum c) { return c == Curriculum::uniform ? "uniform" : "taware"; }

Curriculum parse_curriculum(std::string_view text) {
    if (text == "taware") return Curriculum::taware;
    if (text == "uniform") return Curriculum::uniform;
    throw InvalidArgument("unknown curriculum '" + std::string(text) + "'");
}

void DkdmConfig::validate() const {
    for (double p : {p_impl, p_expl, p_found}) require(p >= 0.0 && p <= 1.0, "category probabilities must lie in [0, 1]");
    require(std::abs(p_impl + p_expl + p_found - 1.0) <= 1e-9, "category probabilities must sum to 1");
    require(lambda > 0.0 && lambda <= 1.0, "lambda must lie in (0, 1]");
    require(clamp_lo > 0.0 && clamp_lo <= clamp_hi && clamp_hi < 1.0, "clamps must satisfy 0 < lo <= hi < 1");
    require(normalizer_eps > 0.0, "normalizer_eps must be positive");
}

DkdmConfig DkdmConfig::without_consolidation() const {
    DkdmConfig c = *this;
    c.p_impl = 1.0;
    c.p_expl = 0.0;
    c.p_found = 0.0;
    return c;
}

MatchCategory sample_category(const DkdmConfig& config, Rng& rng) {
    const double u = uniform01(rng);
    if (u < config.p_impl) return MatchCategory::impl;
    if (u < config.p_impl + config.p_expl) return MatchCategory::expl;
    if (config.p_found > 0.0) return MatchCategory::found;
    // Rounding slack when p_found == 0.
    return config.p_expl > 0.0 ? MatchCategory::expl : MatchCategory::impl;
}

std::vector<double> step_count_probabilities(const DkdmConfig& config, int t_inference) {
    require(t_inference >= 1, "t_inference must be >= 1");
    std::vector<double> p(static_cast<std::size_t>(t_inference));
    double total = 0.0;
    for (int n = 1; n <= t_inference; ++n) {
        const double w = config.curriculum == Curriculum::uniform ? 1.0 : std::exp(-config.lambda * (n - 1));
        p[static_cast<std::size_t>(n - 1)] = w;
        total += w;
    }
    for (double& v : p) v /= total;
    return p;
}

int sample_num_steps(const DkdmConfig& config, const Schedule& schedule, Rng& rng) {
    const auto p = step_count_probabilities(config, schedule.t_inference);
    const double u = uniform01(rng);
    double acc = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        acc += p[k];
        if (u < acc) return static_cast<int>(k) + 1;
    }
    return schedule.t_inference;
}

double sample_matching_time(double tau_i, double tau_next, double clamp_lo, double clamp_hi, Rng& rng) {
    if (!(tau_next > tau_i)) throw InvalidArgument("sample_matching_time: need tau_next > tau_i");
    require(clamp_lo <= clamp_hi, "sample_matching_time: clamp_lo must not exceed clamp_hi");
    const double delta = tau_next - tau_i;
    const double lo = tau_i + clamp_lo * delta;
    const double hi = tau_i + clamp_hi * delta;
    if (lo == hi) return lo;
    return lo + (hi - lo) * uniform01(rng);
}

MatchingDraw draw_matching(const WorldSpec& world, const DkdmConfig& config, const Schedule& schedule, Rng& rng) {
    if (world.entries.empty()) throw InvalidArgument("draw_matching: empty world");
    MatchingDraw d;
    d.category = sample_category(config, rng);
    d.entry = std::uniform_int_distribution<std::size_t>(0, world.entries.size() - 1)(rng);
    const KnowledgeEntry& e = world.entries[d.entry];
    switch (d.category) {
        case MatchCategory::impl:
            d.gen_condition = e.implicit_id;
            d.target_condition = e.explicit_id;
            break;
        case MatchCategory::expl:
            d.gen_condition = d.target_condition = e.explicit_id;
            break;
        case MatchCategory::found: {
            const std::size_t k = std::uniform_int_distribution<std::size_t>(0, e.found.size() - 1)(rng);
            d.gen_condition = d.target_condition = e.found[k];
            break;
        }
    }
    d.n_steps = sample_num_steps(config, schedule, rng);
    const int i = schedule.t_inference - d.n_steps;
    d.tau = schedule.tau(i);
    d.t_match = sample_matching_time(d.tau, schedule.tau(i + 1), config.clamp_lo, config.clamp_hi, rng);
    return d;
}

DkdmStep dkdm_iteration(const ModelParams& theta, const ModelParams& ref, const WorldSpec& world,
                        const DkdmConfig& config, const Schedule& schedule, std::uint64_t rng_seed,
                        Eigen::Index batch) {
    if (!theta.compatible(ref)) throw InvalidArgument("dkdm_iteration: theta and ref are incompatible");
    if (world.entries.empty()) throw InvalidArgument("dkdm_iteration: empty world");
    config.validate();

    Rng rng = make_rng(rng_seed, 1);
    DkdmStep step;
    step.draw = draw_matching(world, config, schedule, rng);

    const TokenId null_id = world.null_id();
    TruncatedSample<double> gen = sample_truncated<double>(theta, step.draw.gen_condition, step.draw.n_steps, schedule,
                                                           derive_seed(rng_seed, 2), batch, config.guidance, null_id);

    // Both score sources are evaluated without guidance: they estimate conditional marginals.
    const auto theta_field = field_of(theta);
    const auto ref_field = field_of(ref);
    const auto pm = pseudo_mse_loss<double>(theta_field, ref_field, step.draw, gen.latent, derive_seed(rng_seed, 3),
                                            config.normalizer_eps);

    step.loss = pm.loss;
    step.grad_x = pm.grad_x;
    step.normalizer = pm.normalizer;
    step.grad = ModelParams(theta.hyper());
    final_step_backward<double>(theta, gen.last, pm.grad_x, step.grad);
    step.last = std::move(gen.last);
    return step;
}

}  // namespace erudiff
