#include <doctest.h>

#include <cmath>

#include "erudiff/dkdm.hpp"
#include "support.hpp"

using namespace erudiff;
using erudiff::testing::GaussianField;

namespace {

// Upper 1% point of chi-square with 15 degrees of freedom.
constexpr double kChi2Df15 = 30.578;

std::vector<long> step_histogram(const DkdmConfig& cfg, const Schedule& s, int draws, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    std::vector<long> counts(static_cast<std::size_t>(s.t_inference), 0);
    for (int k = 0; k < draws; ++k) ++counts[static_cast<std::size_t>(sample_num_steps(cfg, s, rng) - 1)];
    return counts;
}

/// Stop-gradient pseudo-MSE as a function of the final-step parameters, prefix frozen.
double frozen_pseudo_mse(const ModelParams& q, const DkdmStep& step, const Points& target) {
    const auto f = field_of(q, step.last.guidance, step.last.null_id);
    const Points x = step.last.x_prev + (step.last.t_next - step.last.t_prev) *
                                            f(step.last.x_prev, step.last.t_prev, step.last.condition);
    return 0.5 * (x - target).colwise().squaredNorm().sum() / static_cast<double>(x.cols());
}

}  // namespace

TEST_CASE("category sampler") {
    DkdmConfig cfg;
    Rng rng = make_rng(1);
    long counts[3] = {0, 0, 0};
    for (int k = 0; k < 100000; ++k) ++counts[static_cast<int>(sample_category(cfg, rng))];
    CHECK(std::abs(counts[0] / 1e5 - 0.8) <= 0.01);
    CHECK(std::abs(counts[1] / 1e5 - 0.1) <= 0.01);
    CHECK(std::abs(counts[2] / 1e5 - 0.1) <= 0.01);

    const DkdmConfig naive = cfg.without_consolidation();
    CHECK(naive.p_impl == 1.0);
    CHECK(naive.p_expl == 0.0);
    CHECK(naive.p_found == 0.0);
    for (int k = 0; k < 1000; ++k) CHECK(sample_category(naive, rng) == MatchCategory::impl);

    Rng a = make_rng(5), b = make_rng(5);
    for (int k = 0; k < 100; ++k) CHECK(sample_category(cfg, a) == sample_category(cfg, b));
}

TEST_CASE("config validation") {
    DkdmConfig cfg;
    cfg.p_impl = 0.9;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.lambda = 0.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.clamp_lo = 0.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    CHECK_NOTHROW(DkdmConfig{}.validate());
    CHECK(parse_curriculum("uniform") == Curriculum::uniform);
    CHECK_THROWS_AS(parse_curriculum("cosine"), InvalidArgument);
}

TEST_CASE("step-count probabilities have the geometric closed form") {
    DkdmConfig cfg;
    cfg.lambda = 0.1;
    const auto p4 = step_count_probabilities(cfg, 4);
    const double z = 1 + std::exp(-0.1) + std::exp(-0.2) + std::exp(-0.3);
    CHECK(p4[0] == doctest::Approx(1 / z).epsilon(1e-12));
    CHECK(p4[0] == doctest::Approx(0.2887).epsilon(1e-3));

    for (double lambda : {0.05, 0.1, 0.2, 1.0}) {
        cfg.lambda = lambda;
        const auto p = step_count_probabilities(cfg, 16);
        double total = 0;
        for (double v : p) total += v;
        CHECK(std::abs(total - 1.0) <= 1e-9);
        for (std::size_t n = 0; n + 1 < p.size(); ++n) CHECK(p[n] / p[n + 1] == doctest::Approx(std::exp(lambda)));
    }

    cfg.curriculum = Curriculum::uniform;
    for (double v : step_count_probabilities(cfg, 10)) CHECK(v == doctest::Approx(0.1));
}

TEST_CASE("step-count draws pass chi-square at 1e5 draws") {
    const Schedule s = Schedule::uniform(16);
    for (double lambda : {1e-12, 0.05, 0.1, 0.2}) {
        DkdmConfig cfg;
        cfg.lambda = lambda;
        const auto counts = step_histogram(cfg, s, 100000, 40 + static_cast<std::uint64_t>(lambda * 100));
        CHECK(testing::chi_square(counts, step_count_probabilities(cfg, 16)) < kChi2Df15);
    }
    DkdmConfig uni;
    uni.curriculum = Curriculum::uniform;
    CHECK(testing::chi_square(step_histogram(uni, s, 100000, 3), std::vector<double>(16, 1.0 / 16)) < kChi2Df15);
}

TEST_CASE("matching time stays inside the clamped interval") {
    Rng rng = make_rng(7);
    double lo = 1, hi = 0;
    for (int k = 0; k < 100000; ++k) {
        const double t = sample_matching_time(0.3, 0.5, 0.02, 0.98, rng);
        lo = std::min(lo, t);
        hi = std::max(hi, t);
    }
    CHECK(lo >= 0.304);
    CHECK(hi <= 0.496);
    CHECK(lo - 0.304 < 1e-3);
    CHECK(0.496 - hi < 1e-3);
    CHECK(sample_matching_time(0.3, 0.5, 0.5, 0.5, rng) == 0.4);
    CHECK_THROWS_AS(sample_matching_time(0.5, 0.3, 0.02, 0.98, rng), InvalidArgument);
}

TEST_CASE("draw_matching pairs conditions by category and matches one level above the rollout") {
    const WorldSpec w = build_world(4, 2, 3);
    const Schedule s = Schedule::uniform(8);
    DkdmConfig cfg;
    cfg.p_impl = cfg.p_expl = cfg.p_found = 1.0 / 3.0;
    cfg.p_found = 1.0 - cfg.p_impl - cfg.p_expl;
    Rng rng = make_rng(11);
    int seen[3] = {0, 0, 0};
    for (int k = 0; k < 3000; ++k) {
        const MatchingDraw d = draw_matching(w, cfg, s, rng);
        const KnowledgeEntry& e = w.entries[d.entry];
        ++seen[static_cast<int>(d.category)];
        switch (d.category) {
            case MatchCategory::impl:
                CHECK(d.gen_condition == e.implicit_id);
                CHECK(d.target_condition == e.explicit_id);
                break;
            case MatchCategory::expl:
                CHECK(d.gen_condition == e.explicit_id);
                CHECK(d.target_condition == e.explicit_id);
                break;
            case MatchCategory::found:
                CHECK(d.gen_condition == d.target_condition);
                CHECK(std::find(e.found.begin(), e.found.end(), d.gen_condition) != e.found.end());
                break;
        }
        const int i = s.t_inference - d.n_steps;
        CHECK(d.tau == s.time_after(d.n_steps));
        CHECK(d.tau == s.tau(i));
        const double delta = s.tau(i + 1) - s.tau(i);
        CHECK(d.t_match >= s.tau(i) + 0.02 * delta);
        CHECK(d.t_match <= s.tau(i) + 0.98 * delta);
    }
    for (int c : seen) CHECK(c > 800);
}

TEST_CASE("pseudo-MSE on matched fields is a fixed point") {
    GaussianField f{{{1, Vec2(0.5, 0.5)}}, 0.2};
    Rng rng = make_rng(3);
    const LatentBatch<double> x{standard_normal<double>(32, rng), 0.25, 1};
    MatchingDraw d;
    d.gen_condition = d.target_condition = 1;
    d.t_match = 0.3;
    const auto r = pseudo_mse_loss<double>(f, f, d, x, 4, 1e-3);
    CHECK(r.loss == 0.0);
    CHECK(r.grad_x.isZero());

    d.t_match = 0.0;
    CHECK_THROWS_AS(pseudo_mse_loss<double>(f, f, d, x, 4, 1e-3), InvalidArgument);
    d.t_match = 0.2;
    CHECK_THROWS_AS(pseudo_mse_loss<double>(f, f, d, x, 4, 1e-3), InvalidArgument);
}

TEST_CASE("pseudo-MSE on analytic Gaussians points from the implicit mean to the explicit mean") {
    const Vec2 mu_impl(-1.0, 0.5), mu_expl(1.5, -0.25);
    GaussianField f{{{1, mu_impl}, {2, mu_expl}}, 0.3};
    Rng rng = make_rng(8);
    for (double t : {0.05, 0.2, 0.5, 0.8}) {
        const Points x0 = (0.3 * standard_normal<double>(64, rng)).colwise() + mu_impl;
        const LatentBatch<double> gen{x0, 0.0, 1};
        MatchingDraw d;
        d.gen_condition = 1;
        d.target_condition = 2;
        d.t_match = t;
        const auto raw = pseudo_mse_loss<double>(f, f, d, gen, 5, 1e-3, false);
        CHECK(raw.normalizer == 1.0);

        // Identity with the converted scores at the renoised points.
        const Points& xt = raw.renoised.x;
        const Points s_impl = velocity_to_score(xt, t, f(xt, t, 1));
        const Points s_expl = velocity_to_score(xt, t, f(xt, t, 2));
        const Points descent = t * t / (1 - t) * (s_expl - s_impl);
        CHECK((-raw.direction - descent).cwiseAbs().maxCoeff() < 1e-6);

        for (Eigen::Index j = 0; j < 64; ++j)
            for (int c = 0; c < 2; ++c)
                CHECK(std::signbit(raw.direction(c, j)) == std::signbit(mu_impl(c) - mu_expl(c)));

        const auto normed = pseudo_mse_loss<double>(f, f, d, gen, 5, 1e-3);
        CHECK(normed.normalizer > 0.0);
        CHECK((normed.direction * normed.normalizer - raw.direction).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((normed.grad_x - normed.direction / 64.0).cwiseAbs().maxCoeff() < 1e-15);
        CHECK(normed.loss == doctest::Approx(0.5 * normed.direction.colwise().squaredNorm().mean()));

        const Points stepped = gen.x - 0.1 * normed.direction;
        const Vec2 before = gen.x.rowwise().mean(), after = stepped.rowwise().mean();
        CHECK((after - mu_expl).norm() < (before - mu_expl).norm());
    }
}

TEST_CASE("dkdm_iteration is deterministic and its gradient matches finite differences") {
    const WorldSpec w = build_world(1, 1, 0);
    const NetworkHyper h = testing::tiny_hyper(static_cast<std::uint32_t>(w.vocab_size()));
    const ModelParams ref = init_params<double>(h, 1);
    const ModelParams theta = init_params<double>(h, 2);
    REQUIRE(theta.size() <= 100);
    const Schedule s = Schedule::uniform(6);

    DkdmConfig cfg;
    cfg.p_impl = cfg.p_expl = 1.0 / 3.0;
    cfg.p_found = 1.0 - 2.0 / 3.0;
    for (double guidance : {1.0, 2.0}) {
        cfg.guidance = guidance;
        for (std::uint64_t seed = 0; seed < 6; ++seed) {
            const DkdmStep step = dkdm_iteration(theta, ref, w, cfg, s, seed, 8);
            const DkdmStep again = dkdm_iteration(theta, ref, w, cfg, s, seed, 8);
            CHECK(step.loss == again.loss);
            CHECK(step.grad == again.grad);

            const Points x_out = step.last.x_prev + (step.last.t_next - step.last.t_prev) *
                                                        field_of(theta, guidance, w.null_id())(
                                                            step.last.x_prev, step.last.t_prev, step.last.condition);
            const Points target = x_out - step.grad_x * 8.0;
            CHECK(frozen_pseudo_mse(theta, step, target) == doctest::Approx(step.loss).epsilon(1e-9));
            const auto numeric = testing::numeric_gradient(
                theta, [&](const ModelParams& q) { return frozen_pseudo_mse(q, step, target); });
            CHECK(testing::relative_error(step.grad.values(), numeric) < 1e-4);
        }
    }

    WorldSpec empty = w;
    empty.entries.clear();
    CHECK_THROWS_AS(dkdm_iteration(theta, ref, empty, cfg, s, 0, 4), InvalidArgument);
    NetworkHyper other = h;
    other.widths = {7};
    CHECK_THROWS_AS(dkdm_iteration(init_params<double>(other, 1), ref, w, cfg, s, 0, 4), InvalidArgument);
}
