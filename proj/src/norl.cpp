#include "erudiff/norl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace erudiff {

std::string_view to_string(Utility) { return "sigmoid"; }

Utility parse_utility(std::string_view text) {
    if (text == "sigmoid") return Utility::sigmoid;
    throw InvalidArgument("unknown utility '" + std::string(text) + "'");
}

double utility(Utility, double z) { return 1.0 / (1.0 + std::exp(-z)); }

double utility_derivative(Utility u, double z) {
    const double s = utility(u, z);
    return s * (1.0 - s);
}

void NorlConfig::validate() const {
    require(beta > 0.0, "beta must be positive");
    require(m >= 1, "m must be >= 1");
    require(n_filter >= 2, "n_filter must be >= 2 for a mean threshold");
    require(t_lo > 0.0 && t_lo <= t_hi && t_hi < 1.0, "NO-RL time band must satisfy 0 < t_lo <= t_hi < 1");
}

// ---------------------------------------------------------------------------
// Failure filtering

FilterResult partition_by_mean(std::vector<ScoredSample> scored) {
    require(scored.size() >= 2, "mean threshold needs at least two samples");
    double sum = 0.0;
    for (const auto& s : scored) sum += s.reward;
    FilterResult out;
    out.failures.threshold = sum / static_cast<double>(scored.size());
    for (auto& s : scored) {
        if (s.reward < out.failures.threshold)
            out.failures.items.push_back(s);
        else
            out.successes.push_back(s);
    }
    return out;
}

FilterResult filter_samples(const ModelParams& ref, const WorldSpec& world, const Schedule& schedule,
                            const NorlConfig& config, std::uint64_t rng_seed, double guidance) {
    if (config.n_filter < 2) throw InvalidArgument("filter_failures: n_filter must be >= 2");
    const auto explicit_ids = world.tokens_of(TokenKind::explicit_token);
    require(!explicit_ids.empty(), "filter_failures: world has no explicit conditions");

    Rng rng = make_rng(rng_seed, 11);
    std::uniform_int_distribution<std::size_t> pick(0, explicit_ids.size() - 1);
    std::vector<TokenId> drawn(static_cast<std::size_t>(config.n_filter));
    std::map<TokenId, Eigen::Index> counts;
    for (auto& c : drawn) {
        c = explicit_ids[pick(rng)];
        ++counts[c];
    }

    std::map<TokenId, Points> generated;
    const auto field = field_of(ref, guidance, world.null_id());
    for (const auto& [c, n] : counts)
        generated.emplace(c, generate<double>(field, c, schedule, n, derive_seed(rng_seed, 100 + c)));

    std::map<TokenId, Eigen::Index> cursor;
    std::vector<ScoredSample> scored;
    scored.reserve(drawn.size());
    for (TokenId c : drawn) {
        ScoredSample s;
        s.condition = c;
        s.x0 = generated.at(c).col(cursor[c]++);
        s.reward = reward_oracle(world, c, s.x0);
        scored.push_back(s);
    }
    return partition_by_mean(std::move(scored));
}

FailureSet filter_failures(const ModelParams& ref, const WorldSpec& world, const Schedule& schedule,
                           const NorlConfig& config, std::uint64_t rng_seed, double guidance) {
    return filter_samples(ref, world, schedule, config, rng_seed, guidance).failures;
}

// ---------------------------------------------------------------------------
// Log-ratio surrogate and KTO utility

VectorX<double> log_ratio_batch(const ModelParams& theta, const ModelParams& ref, const Points& x0,
                                std::span<const TokenId> conds, std::span<const double> t, const Points& noise,
                                double beta, ForwardCache<double>* theta_cache, Points* v_theta, Points* v_target) {
    if (!theta.compatible(ref)) throw InvalidArgument("log_ratio: theta and ref are incompatible");
    const Eigen::Index n = x0.cols();
    require(static_cast<Eigen::Index>(t.size()) == n, "log_ratio: one time per sample required");
    Points xt(2, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        if (!(t[j] > 0.0 && t[j] < 1.0)) throw InvalidArgument("log_ratio: t must lie strictly inside (0, 1)");
        xt.col(j) = forward_diffuse(x0.col(j), t[j], noise.col(j));
    }
    const Points target = noise - x0;
    const Points vt = network_forward<double>(theta, xt, t, conds, theta_cache);
    const Points vr = network_forward<double>(ref, xt, t, conds);
    VectorX<double> r = beta * ((vr - target).colwise().squaredNorm() - (vt - target).colwise().squaredNorm()).transpose();
    if (v_theta) *v_theta = vt;
    if (v_target) *v_target = target;
    return r;
}

double log_ratio_surrogate(const ModelParams& theta, const ModelParams& ref, const Vec2& x0, TokenId condition,
                           double t, const Vec2& noise, double beta) {
    const TokenId cs[1] = {condition};
    const double ts[1] = {t};
    return log_ratio_batch(theta, ref, Points(x0), cs, ts, Points(noise), beta)(0);
}

UnrelatedBatch draw_unrelated(const WorldSpec& world, std::span<const TokenId> exclude, int m, double t_lo,
                              double t_hi, std::uint64_t rng_seed) {
    require(m >= 1, "unrelated batch must hold at least one pair");
    std::vector<TokenId> pool;
    for (TokenId c : world.tokens_of(TokenKind::explicit_token))
        if (std::find(exclude.begin(), exclude.end(), c) == exclude.end()) pool.push_back(c);
    if (pool.empty()) pool = world.tokens_of(TokenKind::explicit_token);
    require(!pool.empty(), "world has no explicit conditions");

    Rng rng = make_rng(rng_seed, 21);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    UnrelatedBatch b;
    b.x0.resize(2, m);
    for (int j = 0; j < m; ++j) {
        const TokenId c = pool[pick(rng)];
        b.conditions.push_back(c);
        b.t.push_back(t_lo + (t_hi - t_lo) * uniform01(rng));
        b.x0.col(j) = sample_target(world, c, 1, derive_seed(rng_seed, 1000 + static_cast<std::uint64_t>(j)));
    }
    b.noise = standard_normal<double>(m, rng);
    return b;
}

double estimate_qref(const ModelParams& theta, const ModelParams& ref, const UnrelatedBatch& batch, double beta) {
    if (batch.x0.cols() == 0) throw InvalidArgument("estimate_qref: empty batch");
    const VectorX<double> r = log_ratio_batch(theta, ref, batch.x0, batch.conditions, batch.t, batch.noise, beta);
    return std::max(0.0, r.mean());
}

double kto_loss(double log_ratio, double q_ref, Utility u) { return -utility(u, -(log_ratio - q_ref)); }

double kto_loss(const ModelParams& theta, const ModelParams& ref, const ScoredSample& item, double t,
                const Vec2& noise, double q_ref, const NorlConfig& config) {
    const double r = log_ratio_surrogate(theta, ref, item.x0, item.condition, t, noise, config.beta);
    return kto_loss(r, q_ref, config.utility);
}

// ---------------------------------------------------------------------------
// Iteration

NorlStep norl_iteration(const ModelParams& theta, const ModelParams& ref, const WorldSpec& world,
                        const FailureSet& failures, const NorlConfig& config, std::uint64_t rng_seed,
                        Eigen::Index batch, std::span<const ScoredSample> successes) {
    if (failures.items.empty()) throw InvalidArgument("norl_iteration: empty failure set");
    require(batch >= 1, "norl_iteration: batch must be >= 1");
    config.validate();

    Rng rng = make_rng(rng_seed, 31);
    NorlStep step;
    step.grad = ModelParams(theta.hyper());

    auto draw_items = [&](std::size_t pool, std::vector<std::size_t>& idx, std::vector<double>& ts, Points& noise) {
        std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
        for (Eigen::Index j = 0; j < batch; ++j) {
            idx.push_back(pick(rng));
            ts.push_back(config.t_lo + (config.t_hi - config.t_lo) * uniform01(rng));
        }
        noise = standard_normal<double>(batch, rng);
    };
    draw_items(failures.items.size(), step.items, step.t, step.noise);

    Points x0(2, batch);
    std::vector<TokenId> conds;
    for (Eigen::Index j = 0; j < batch; ++j) {
        const auto& item = failures.items[step.items[static_cast<std::size_t>(j)]];
        x0.col(j) = item.x0;
        conds.push_back(item.condition);
    }

    const UnrelatedBatch unrelated =
        draw_unrelated(world, conds, config.m, config.t_lo, config.t_hi, derive_seed(rng_seed, 32));
    step.q_ref = estimate_qref(theta, ref, unrelated, config.beta);

    const bool positive = config.positive_enabled && !successes.empty();
    const double weight = 1.0 / static_cast<double>(positive ? 2 * batch : batch);

    // Undesirable term: loss = -U(q - r); dr/dv_theta = -2 beta (v_theta - v*).
    ForwardCache<double> cache;
    Points vt, target;
    step.log_ratios = log_ratio_batch(theta, ref, x0, conds, step.t, step.noise, config.beta, &cache, &vt, &target);
    Points grad_v(2, batch);
    step.loss = 0.0;
    for (Eigen::Index j = 0; j < batch; ++j) {
        const double z = step.q_ref - step.log_ratios(j);
        step.loss += -utility(config.utility, z) * weight;
        const double dl_dr = utility_derivative(config.utility, z) * weight;
        grad_v.col(j) = dl_dr * (-2.0 * config.beta) * (vt.col(j) - target.col(j));
    }
    network_backward<double>(theta, cache, grad_v, step.grad);

    if (positive) {
        // Desirable term: loss = -U(r - q).
        draw_items(successes.size(), step.positive_items, step.positive_t, step.positive_noise);
        Points px0(2, batch);
        std::vector<TokenId> pconds;
        for (Eigen::Index j = 0; j < batch; ++j) {
            const auto& item = successes[step.positive_items[static_cast<std::size_t>(j)]];
            px0.col(j) = item.x0;
            pconds.push_back(item.condition);
        }
        ForwardCache<double> pcache;
        Points pvt, ptarget;
        const VectorX<double> pr = log_ratio_batch(theta, ref, px0, pconds, step.positive_t, step.positive_noise,
                                                   config.beta, &pcache, &pvt, &ptarget);
        Points pgrad(2, batch);
        for (Eigen::Index j = 0; j < batch; ++j) {
            const double z = pr(j) - step.q_ref;
            step.loss += -utility(config.utility, z) * weight;
            const double dl_dr = -utility_derivative(config.utility, z) * weight;
            pgrad.col(j) = dl_dr * (-2.0 * config.beta) * (pvt.col(j) - ptarget.col(j));
        }
        network_backward<double>(theta, pcache, pgrad, step.grad);
    }
    return step;
}

// ---------------------------------------------------------------------------
// CSV

std::string failures_to_csv(const FailureSet& failures) {
    std::ostringstream os;
    char buf[128];
    std::snprintf(buf, sizeof buf, "# threshold=%.17g\n", failures.threshold);
    os << buf << "x0,x1,condition_id,reward\n";
    for (const auto& s : failures.items) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%u,%.17g\n", s.x0.x(), s.x0.y(), s.condition, s.reward);
        os << buf;
    }
    return os.str();
}

FailureSet failures_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    FailureSet out;
    bool have_threshold = false, have_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("# threshold=", 0) == 0) {
            out.threshold = std::stod(line.substr(12));
            have_threshold = true;
            continue;
        }
        if (line[0] == '#') continue;
        if (!have_header) {
            if (line != "x0,x1,condition_id,reward") throw InvalidArgument("failure CSV: unexpected header");
            have_header = true;
            continue;
        }
        ScoredSample s;
        unsigned cond = 0;
        if (std::sscanf(line.c_str(), "%lf,%lf,%u,%lf", &s.x0.x(), &s.x0.y(), &cond, &s.reward) != 4)
            throw InvalidArgument("failure CSV: malformed row '" + line + "'");
        s.condition = cond;
        out.items.push_back(s);
    }
    if (!have_threshold || !have_header) throw InvalidArgument("failure CSV: missing threshold or header");
    return out;
}

void save_failures(const FailureSet& failures, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << failures_to_csv(failures);
    if (!out) throw IoError("write failed: " + path.string());
}

FailureSet load_failures(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return failures_from_csv(ss.str());
}

}  // namespace erudiff
