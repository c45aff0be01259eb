#include <doctest.h>

#include <cmath>

#include "erudiff/norl.hpp"
#include "support.hpp"

using namespace erudiff;

namespace {

struct Fixture {
    WorldSpec world = build_world(2, 1, 0);
    NetworkHyper hyper = testing::tiny_hyper(static_cast<std::uint32_t>(world.vocab_size()));
    ModelParams ref = init_params<double>(hyper, 1);
    ModelParams theta = init_params<double>(hyper, 2);
};

FailureSet crafted_failures(const WorldSpec& w, int n, std::uint64_t seed) {
    FailureSet f;
    f.threshold = -1.0;
    Rng rng = make_rng(seed);
    const auto expl = w.tokens_of(TokenKind::explicit_token);
    for (int k = 0; k < n; ++k) {
        const TokenId c = expl[static_cast<std::size_t>(k) % expl.size()];
        f.items.push_back({standard_normal<double>(1, rng).col(0), c, -2.0});
    }
    return f;
}

/// Undesirable (and optionally desirable) KTO objective with the step's draws and Q_ref frozen.
double frozen_kto(const ModelParams& q, const ModelParams& ref, const NorlStep& step, const FailureSet& failures,
                  std::span<const ScoredSample> successes, const NorlConfig& cfg) {
    const Eigen::Index b = static_cast<Eigen::Index>(step.items.size());
    const bool positive = !step.positive_items.empty();
    const double weight = 1.0 / static_cast<double>(positive ? 2 * b : b);
    auto term = [&](const std::vector<std::size_t>& idx, std::span<const ScoredSample> pool,
                    const std::vector<double>& ts, const Points& noise, double sign) {
        double total = 0.0;
        for (Eigen::Index j = 0; j < b; ++j) {
            const ScoredSample& s = pool[idx[static_cast<std::size_t>(j)]];
            const double r = log_ratio_surrogate(q, ref, s.x0, s.condition, ts[static_cast<std::size_t>(j)],
                                                 noise.col(j), cfg.beta);
            total += -1.0 / (1.0 + std::exp(-sign * (r - step.q_ref))) * weight;
        }
        return total;
    };
    double loss = term(step.items, failures.items, step.t, step.noise, -1.0);
    if (positive) loss += term(step.positive_items, successes, step.positive_t, step.positive_noise, 1.0);
    return loss;
}

}  // namespace

TEST_CASE("sigmoid utility") {
    CHECK(utility(Utility::sigmoid, 0.0) == 0.5);
    double prev = utility(Utility::sigmoid, -10.0);
    for (double z = -9.5; z <= 10.0; z += 0.5) {
        const double u = utility(Utility::sigmoid, z);
        CHECK(u > prev);
        prev = u;
        const double h = 1e-6;
        const double fd = (utility(Utility::sigmoid, z + h) - utility(Utility::sigmoid, z - h)) / (2 * h);
        CHECK(utility_derivative(Utility::sigmoid, z) == doctest::Approx(fd).epsilon(1e-6));
    }
    CHECK(parse_utility("sigmoid") == Utility::sigmoid);
    CHECK_THROWS_AS(parse_utility("tanh"), InvalidArgument);
}

TEST_CASE("config validation") {
    NorlConfig c;
    CHECK_NOTHROW(c.validate());
    c.beta = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = {};
    c.m = 0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = {};
    c.t_lo = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    CHECK(NorlConfig{}.n_filter == 1000);
}

TEST_CASE("mean-threshold partition") {
    std::vector<ScoredSample> s;
    for (double r : {1.0, 2.0, 3.0, 4.0}) s.push_back({Vec2(r, 0), 1, r});
    const FilterResult f = partition_by_mean(s);
    CHECK(f.failures.threshold == 2.5);
    REQUIRE(f.failures.items.size() == 2);
    CHECK(f.failures.items[0].reward == 1.0);
    CHECK(f.failures.items[1].reward == 2.0);
    CHECK(f.successes.size() == 2);

    std::vector<ScoredSample> flat(5, ScoredSample{Vec2::Zero(), 1, -3.0});
    const FilterResult g = partition_by_mean(flat);
    CHECK(g.failures.items.empty());
    CHECK(g.successes.size() == 5);
}

TEST_CASE("filter_samples partitions reference generations at the mean reward") {
    Fixture fx;
    NorlConfig cfg;
    cfg.n_filter = 300;
    const Schedule s = Schedule::uniform(4);
    const FilterResult a = filter_samples(fx.ref, fx.world, s, cfg, 9);
    const FilterResult b = filter_samples(fx.ref, fx.world, s, cfg, 9);
    CHECK(a.failures.items.size() + a.successes.size() == 300);
    CHECK(failures_to_csv(a.failures) == failures_to_csv(b.failures));

    double sum = 0.0;
    for (const auto& x : a.failures.items) {
        sum += x.reward;
        CHECK(x.reward < a.failures.threshold);
        CHECK(fx.world.kind(x.condition) == TokenKind::explicit_token);
        CHECK(x.reward == reward_oracle(fx.world, x.condition, x.x0));
    }
    for (const auto& x : a.successes) {
        sum += x.reward;
        CHECK(x.reward >= a.failures.threshold);
    }
    CHECK(std::abs(sum / 300.0 - a.failures.threshold) <= 1e-9);
    CHECK(filter_failures(fx.ref, fx.world, s, cfg, 9).items.size() == a.failures.items.size());
}

TEST_CASE("log-ratio surrogate identities") {
    Fixture fx;
    const Vec2 x0(0.4, -0.3), noise(-1.2, 0.8);
    for (double t : {0.1, 0.5, 0.9}) {
        CHECK(log_ratio_surrogate(fx.ref, fx.ref, x0, 1, t, noise, 0.1) == 0.0);
        const double fwd = log_ratio_surrogate(fx.theta, fx.ref, x0, 2, t, noise, 0.1);
        const double back = log_ratio_surrogate(fx.ref, fx.theta, x0, 2, t, noise, 0.1);
        CHECK(std::abs(fwd + back) <= 1e-9);
    }

    // A network that outputs exactly v* = noise - x0.
    ModelParams perfect(fx.hyper);
    perfect.bias(1) = noise - x0;
    const double t = 0.3;
    const TokenId c[1] = {2};
    const double ts[1] = {t};
    const Points xt = forward_diffuse(Points(x0), t, Points(noise));
    const Vec2 v_ref = network_forward<double>(fx.ref, xt, ts, c).col(0);
    const double expected = 0.25 * (v_ref - (noise - x0)).squaredNorm();
    CHECK(log_ratio_surrogate(perfect, fx.ref, x0, 2, t, noise, 0.25) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected > 0.0);

    CHECK_THROWS_AS(log_ratio_surrogate(fx.theta, fx.ref, x0, 1, 0.0, noise, 0.1), InvalidArgument);
    CHECK_THROWS_AS(log_ratio_surrogate(fx.theta, fx.ref, x0, 1, 1.0, noise, 0.1), InvalidArgument);
}

TEST_CASE("unrelated batch and Q_ref clamp") {
    Fixture fx;
    const auto expl = fx.world.tokens_of(TokenKind::explicit_token);
    const TokenId excluded[1] = {expl[0]};
    const UnrelatedBatch u = draw_unrelated(fx.world, excluded, 40, 0.02, 0.98, 3);
    CHECK(u.x0.cols() == 40);
    CHECK(u.noise.cols() == 40);
    for (std::size_t j = 0; j < 40; ++j) {
        CHECK(u.conditions[j] == expl[1]);
        CHECK(u.t[j] >= 0.02);
        CHECK(u.t[j] <= 0.98);
    }
    CHECK(draw_unrelated(fx.world, excluded, 40, 0.02, 0.98, 3).x0 == u.x0);
    // Every condition excluded: fall back to the full explicit pool.
    CHECK(draw_unrelated(fx.world, expl, 4, 0.02, 0.98, 3).conditions.size() == 4);

    CHECK(estimate_qref(fx.ref, fx.ref, u, 0.1) == 0.0);

    // The log-ratio is linear in beta, so beta selects the batch mean exactly.
    const double m0 = log_ratio_batch(fx.theta, fx.ref, u.x0, u.conditions, u.t, u.noise, 1.0).mean();
    REQUIRE(m0 != 0.0);
    const ModelParams& up = m0 > 0 ? fx.theta : fx.ref;
    const ModelParams& down = m0 > 0 ? fx.ref : fx.theta;
    const double scale = std::abs(m0);
    CHECK(estimate_qref(up, down, u, 0.3 / scale) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(estimate_qref(down, up, u, 0.7 / scale) == 0.0);
    CHECK(log_ratio_batch(down, up, u.x0, u.conditions, u.t, u.noise, 0.7 / scale).mean() ==
          doctest::Approx(-0.7).epsilon(1e-12));
}

TEST_CASE("KTO loss") {
    CHECK(kto_loss(0.4, 0.4) == -0.5);
    double prev = kto_loss(-30.0, 0.2);
    for (double r = -29.0; r <= 30.0; r += 1.0) {
        const double l = kto_loss(r, 0.2);
        CHECK(l > -1.0);
        CHECK(l < 0.0);
        CHECK(l > prev);
        prev = l;
    }
    Fixture fx;
    const ScoredSample item{Vec2(0.1, 0.2), 2, -5.0};
    CHECK(kto_loss(fx.ref, fx.ref, item, 0.5, Vec2(1, 1), 0.0, NorlConfig{}) == -0.5);
}

TEST_CASE("norl_iteration at theta = ref sits at the sigmoid midpoint") {
    Fixture fx;
    const FailureSet f = crafted_failures(fx.world, 10, 1);
    const NorlStep s = norl_iteration(fx.ref, fx.ref, fx.world, f, NorlConfig{}, 5, 16);
    CHECK(s.q_ref == 0.0);
    CHECK(s.loss == doctest::Approx(-0.5).epsilon(1e-15));
    CHECK(s.log_ratios.isZero());
}

TEST_CASE("norl_iteration gradient matches finite differences with Q_ref held fixed") {
    Fixture fx;
    REQUIRE(fx.theta.size() <= 100);
    const FailureSet f = crafted_failures(fx.world, 12, 2);
    std::vector<ScoredSample> successes;
    Rng rng = make_rng(4);
    for (int k = 0; k < 6; ++k)
        successes.push_back({standard_normal<double>(1, rng).col(0), fx.world.tokens_of(TokenKind::explicit_token)[0], 1.0});

    for (bool positive : {false, true}) {
        NorlConfig cfg;
        cfg.beta = 0.7;
        cfg.positive_enabled = positive;
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            const NorlStep s = norl_iteration(fx.theta, fx.ref, fx.world, f, cfg, seed, 8, successes);
            const NorlStep again = norl_iteration(fx.theta, fx.ref, fx.world, f, cfg, seed, 8, successes);
            CHECK(s.loss == again.loss);
            CHECK(s.grad == again.grad);
            CHECK(s.positive_items.empty() == !positive);
            CHECK(frozen_kto(fx.theta, fx.ref, s, f, successes, cfg) == doctest::Approx(s.loss).epsilon(1e-12));
            const auto numeric = testing::numeric_gradient(
                fx.theta, [&](const ModelParams& q) { return frozen_kto(q, fx.ref, s, f, successes, cfg); });
            CHECK(testing::relative_error(s.grad.values(), numeric) < 1e-4);
        }
    }
    CHECK_THROWS_AS(norl_iteration(fx.theta, fx.ref, fx.world, FailureSet{}, NorlConfig{}, 0, 4), InvalidArgument);
}

TEST_CASE("failure CSV round trip") {
    FailureSet f;
    f.threshold = -3.25;
    f.items.push_back({Vec2(0.1, -1.0 / 3.0), 4, -7.125});
    f.items.push_back({Vec2(1e-9, 2.5), 6, -4.0});
    const std::string text = failures_to_csv(f);
    CHECK(text.rfind("# threshold=-3.25\nx0,x1,condition_id,reward\n", 0) == 0);
    const FailureSet back = failures_from_csv(text);
    CHECK(back.threshold == f.threshold);
    REQUIRE(back.items.size() == 2);
    CHECK(back.items[0].x0 == f.items[0].x0);
    CHECK(back.items[1].condition == 6);
    CHECK(failures_to_csv(back) == text);
    CHECK_THROWS_AS(failures_from_csv("x0,x1,condition_id,reward\n1,2,3,4\n"), InvalidArgument);
    CHECK_THROWS_AS(failures_from_csv("# threshold=1\nx0,x1,condition_id,reward\n1,2\n"), InvalidArgument);
    CHECK_THROWS_AS(load_failures("/nonexistent/f.csv"), IoError);
}
