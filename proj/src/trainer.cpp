#include "erudiff/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "erudiff/evalsuite.hpp"

namespace erudiff {

EmanResult eman_normalize(EmanState& state, double loss) {
    if (!std::isfinite(loss)) throw NonFiniteError("EMAN received a non-finite loss");
    if (!(state.decay > 0.0 && state.decay < 1.0)) throw InvalidArgument("EMAN decay must lie in (0, 1)");
    state.value = state.decay * state.value + (1.0 - state.decay) * std::abs(loss);
    ++state.steps;
    const double corrected = state.value / (1.0 - std::pow(state.decay, static_cast<double>(state.steps)));
    EmanResult r;
    r.scale = 1.0 / (corrected + 1e-8);
    r.normalized = loss * r.scale;
    return r;
}

Adam::Adam(Eigen::Index n, AdamConfig config)
    : config_(config), m_(VectorX<double>::Zero(n)), v_(VectorX<double>::Zero(n)) {}

void Adam::step(ModelParams& params, const ModelParams& grad, double lr) {
    require(grad.size() == m_.size() && params.size() == m_.size(), "Adam: parameter size mismatch");
    ++steps_;
    const auto& g = grad.values();
    m_ = config_.beta1 * m_ + (1.0 - config_.beta1) * g;
    v_ = config_.beta2 * v_ + (1.0 - config_.beta2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    params.values().array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + config_.epsilon);
}

void TrainerConfig::validate() const {
    require(eta > 0.0, "eta must be positive");
    require(iterations >= 0, "iterations must be >= 0");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(eman_decay > 0.0 && eman_decay < 1.0, "eman_decay must lie in (0, 1)");
    require(probe_every >= 0, "probe_every must be >= 0");
    require(probe_samples >= 1, "probe_samples must be >= 1");
}

std::optional<long> TrainingLog::first_reaching(double threshold) const {
    for (const auto& p : probes)
        if (p.implicit_score >= threshold) return p.iter;
    return std::nullopt;
}

std::string log_csv(const TrainingLog& log) {
    std::ostringstream os;
    os << "# erudiff-trainlog v1\n";
    os << "iter,phase,raw_loss,eman_loss,grad_norm,category,n_steps,t_match\n";
    char buf[256];
    for (const auto& r : log.rows) {
        std::snprintf(buf, sizeof buf, "%ld,%s,%.9g,%.9g,%.9g,%s,%d,%.9g\n", r.iter, r.phase.c_str(), r.raw_loss,
                      r.eman_loss, r.grad_norm, r.category.c_str(), r.n_steps, r.t_match);
        os << buf;
    }
    return os.str();
}

std::string probe_csv(const TrainingLog& log) {
    std::ostringstream os;
    os << "# erudiff-probe v1\n";
    os << "iter,implicit_knowledge\n";
    char buf[96];
    for (const auto& p : log.probes) {
        std::snprintf(buf, sizeof buf, "%ld,%.9g\n", p.iter, p.implicit_score);
        os << buf;
    }
    return os.str();
}

std::vector<ProbeRow> probes_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<ProbeRow> out;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("iter,", 0) == 0) continue;
        ProbeRow p;
        if (std::sscanf(line.c_str(), "%ld,%lf", &p.iter, &p.implicit_score) != 2)
            throw InvalidArgument("probe CSV: malformed row '" + line + "'");
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pretraining

std::string PretrainReport::summary() const {
    char buf[200];
    std::snprintf(buf, sizeof buf, "explicit=%.4f foundational=%.4f implicit=%.4f", explicit_score,
                  foundational_score, implicit_score);
    return buf;
}

PretrainReport check_pretrain_contract(const WorldSpec& world, const ModelParams& params, const Schedule& schedule,
                                       const PretrainConfig& config) {
    const std::uint64_t seed = derive_seed(config.seed, 0xc0);
    PretrainReport r;
    r.explicit_score = mean_knowledge(world, params, schedule, TokenKind::explicit_token, config.contract_samples, seed);
    r.foundational_score =
        mean_knowledge(world, params, schedule, TokenKind::foundational_token, config.contract_samples, seed);
    r.implicit_score = mean_knowledge(world, params, schedule, TokenKind::implicit_token, config.contract_samples, seed);
    r.ok = r.explicit_score >= config.contract_min_fact && r.foundational_score >= config.contract_min_fact &&
           r.implicit_score <= config.contract_max_implicit;
    return r;
}

ModelParams pretrain_unchecked(const WorldSpec& world, const NetworkHyper& hyper_in, const PretrainConfig& config,
                               TrainingLog* log) {
    require(config.iterations >= 0 && config.batch_size >= 1, "invalid pretraining budget");
    require(config.lr > 0.0, "pretraining lr must be positive");
    require(config.cond_dropout >= 0.0 && config.cond_dropout < 1.0, "cond_dropout must lie in [0, 1)");
    validate_world(world);

    NetworkHyper hyper = hyper_in;
    hyper.vocab = static_cast<std::uint32_t>(world.vocab_size());
    ModelParams params = init_params<double>(hyper, derive_seed(config.seed, 1));
    Adam adam(params.size(), config.adam);

    std::vector<TokenId> conds;
    for (TokenId c = 0; c < world.vocab_size(); ++c)
        if (world.kind(c) != TokenKind::null_token) conds.push_back(c);
    constexpr Eigen::Index kPool = 4096;
    std::vector<Points> data;
    for (TokenId c : conds)
        data.push_back(sample_target(world, c, kPool, derive_seed(config.seed, 2), SampleSource::pretrain));

    const TokenId null_id = world.null_id();
    Rng rng = make_rng(config.seed, 3);
    std::uniform_int_distribution<std::size_t> pick_cond(0, conds.size() - 1);
    std::uniform_int_distribution<Eigen::Index> pick_row(0, kPool - 1);
    const Eigen::Index batch = config.batch_size;
    Points x0(2, batch);
    std::vector<TokenId> batch_conds(static_cast<std::size_t>(batch));
    std::vector<double> ts(static_cast<std::size_t>(batch));
    ModelParams grad(params.hyper());

    for (int it = 1; it <= config.iterations; ++it) {
        for (Eigen::Index j = 0; j < batch; ++j) {
            const std::size_t k = pick_cond(rng);
            x0.col(j) = data[k].col(pick_row(rng));
            batch_conds[static_cast<std::size_t>(j)] = uniform01(rng) < config.cond_dropout ? null_id : conds[k];
            ts[static_cast<std::size_t>(j)] = uniform01(rng);
        }
        const Points noise = standard_normal<double>(batch, rng);
        grad.set_zero();
        const double loss = fm_loss_batch<double>(params, x0, batch_conds, ts, noise, &grad);
        if (!std::isfinite(loss) || !grad.all_finite())
            throw NonFiniteError("pretraining diverged at iteration " + std::to_string(it));
        const double progress = config.iterations > 1 ? double(it - 1) / double(config.iterations - 1) : 0.0;
        const double lr = config.lr * (1.0 - (1.0 - config.lr_final_fraction) * progress);
        adam.step(params, grad, lr);
        if (log) log->rows.push_back({it, "pretrain", loss, loss, grad.values().norm(), "-", 0, 0.0});
    }
    return params;
}

ModelParams pretrain(const WorldSpec& world, const NetworkHyper& hyper, const Schedule& schedule,
                     const PretrainConfig& config, TrainingLog* log, PretrainReport* report) {
    ModelParams params = pretrain_unchecked(world, hyper, config, log);
    const PretrainReport r = check_pretrain_contract(world, params, schedule, config);
    if (report) *report = r;
    if (!r.ok) throw ContractViolation("pretraining contract failed: " + r.summary());
    return params;
}

// ---------------------------------------------------------------------------
// Refactoring

RefactorResult refactor(const ModelParams& theta_init, const ModelParams& ref, const WorldSpec& world,
                        const Schedule& schedule, const DkdmConfig& dkdm_config, const NorlConfig& norl_config,
                        const TrainerConfig& config, const FailureSet* failures,
                        std::span<const ScoredSample> successes) {
    config.validate();
    if (!theta_init.compatible(ref)) throw InvalidArgument("refactor: theta_init and ref are incompatible");
    if (config.norl_enabled && (failures == nullptr || failures->items.empty()))
        throw InvalidArgument("refactor: NO-RL enabled but the failure set is empty");

    DkdmConfig dk = config.afkc_enabled ? dkdm_config : dkdm_config.without_consolidation();
    dk.curriculum = config.curriculum;
    dk.validate();
    if (config.norl_enabled) norl_config.validate();

    RefactorResult out{theta_init, {}};
    ModelParams& theta = out.params;
    Adam adam(theta.size(), config.adam);
    EmanState dk_state{0.0, config.eman_decay, 0};
    EmanState no_state{0.0, config.eman_decay, 0};
    const std::uint64_t probe_seed = derive_seed(config.seed, 0xbeef);

    auto probe = [&](long it) {
        const double score = implicit_knowledge(world, theta, schedule, config.probe_samples, probe_seed);
        out.log.probes.push_back({it, score});
        return score;
    };
    if (config.probe_every > 0 && config.iterations > 0) probe(0);

    auto check = [](double loss, const ModelParams& grad, long it, const char* phase) {
        if (!std::isfinite(loss) || !grad.all_finite())
            throw NonFiniteError(std::string(phase) + " produced a non-finite loss or gradient at iteration " +
                                 std::to_string(it));
    };

    for (long it = 1; it <= config.iterations; ++it) {
        // Phase I
        DkdmStep s = dkdm_iteration(theta, ref, world, dk, schedule, derive_seed(config.seed, 2 * it),
                                    config.batch_size);
        check(s.loss, s.grad, it, "DK-DM");
        const EmanResult e = eman_normalize(dk_state, s.loss);
        s.grad.values() *= e.scale;
        adam.step(theta, s.grad, config.eta);
        out.log.rows.push_back({it, "dkdm", s.loss, e.normalized, s.grad.values().norm(),
                                std::string(to_string(s.draw.category)), s.draw.n_steps, s.draw.t_match});

        // Phase II sees theta after this iteration's DK-DM update.
        if (config.norl_enabled) {
            NorlStep n = norl_iteration(theta, ref, world, *failures, norl_config, derive_seed(config.seed, 2 * it + 1),
                                        config.batch_size, successes);
            check(n.loss, n.grad, it, "NO-RL");
            const EmanResult en = eman_normalize(no_state, n.loss);
            n.grad.values() *= en.scale;
            adam.step(theta, n.grad, config.eta);
            out.log.rows.push_back({it, "norl", n.loss, en.normalized, n.grad.values().norm(), "-", 0, 0.0});
        }

        if (config.probe_every > 0 && it % config.probe_every == 0) {
            if (probe(it) >= config.early_stop_score) {
                out.log.early_stopped_at = it;
                break;
            }
        }
    }
    return out;
}

}  // namespace erudiff
