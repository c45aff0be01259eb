#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "erudiff/corpus.hpp"
#include "erudiff/dkdm.hpp"
#include "erudiff/flowcore.hpp"
#include "erudiff/norl.hpp"

namespace erudiff {

/// Exponential moving average of |loss| used to put both objectives on a common scale.
struct EmanState {
    double value = 0.0;
    double decay = 0.99;
    std::uint64_t steps = 0;
};

struct EmanResult {
    double normalized = 0.0;
    /// Factor applied to the loss (and therefore to its gradient).
    double scale = 1.0;
};

/// Updates the state with |loss| and returns loss / (bias-corrected EMA + 1e-8).
EmanResult eman_normalize(EmanState& state, double loss);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(Eigen::Index n, AdamConfig config);

    void step(ModelParams& params, const ModelParams& grad, double lr);
    std::uint64_t steps() const { return steps_; }

private:
    AdamConfig config_;
    VectorX<double> m_, v_;
    std::uint64_t steps_ = 0;
};

struct PretrainConfig {
    int iterations = 6000;
    int batch_size = 256;
    double lr = 2e-3;
    /// Learning rate decays linearly to lr * lr_final_fraction.
    double lr_final_fraction = 0.05;
    std::uint64_t seed = 0;
    /// Probability of replacing a condition by the null token (unconditional branch).
    double cond_dropout = 0.1;
    AdamConfig adam;
    /// Samples per condition when checking the counter-factual contract.
    int contract_samples = 512;
    double contract_min_fact = 0.95;
    double contract_max_implicit = 0.05;
};

struct TrainerConfig {
    double eta = 1e-4;
    int iterations = 4000;
    std::uint64_t seed = 0;
    int batch_size = 64;
    AdamConfig adam;
    bool norl_enabled = true;
    bool afkc_enabled = true;
    Curriculum curriculum = Curriculum::taware;
    double eman_decay = 0.99;
    /// Implicit-condition probe cadence; 0 disables probing and early stopping.
    int probe_every = 500;
    int probe_samples = 256;
    double early_stop_score = 0.95;

    void validate() const;
};

struct LogRow {
    long iter = 0;
    std::string phase;
    double raw_loss = 0.0;
    double eman_loss = 0.0;
    double grad_norm = 0.0;
    std::string category;
    int n_steps = 0;
    double t_match = 0.0;
};

struct ProbeRow {
    long iter = 0;
    double implicit_score = 0.0;
};

struct TrainingLog {
    std::vector<LogRow> rows;
    std::vector<ProbeRow> probes;
    std::optional<long> early_stopped_at;

    /// First probed iteration whose implicit score reaches `threshold`.
    std::optional<long> first_reaching(double threshold) const;
};

/// Training log CSV: version comment, then iter,phase,raw_loss,eman_loss,grad_norm,category,n_steps,t_match.
std::string log_csv(const TrainingLog& log);
/// Probe CSV: version comment, then iter,implicit_knowledge.
std::string probe_csv(const TrainingLog& log);
std::vector<ProbeRow> probes_from_csv(const std::string& text);

struct PretrainReport {
    double explicit_score = 0.0;
    double foundational_score = 0.0;
    double implicit_score = 0.0;
    bool ok = false;
    std::string summary() const;
};

/// Counter-factual contract: facts learned on explicit/foundational conditions, distractors on implicit.
PretrainReport check_pretrain_contract(const WorldSpec& world, const ModelParams& params, const Schedule& schedule,
                                       const PretrainConfig& config);

/// Trains the reference model by conditional flow matching on pretraining data (implicit tokens on
/// their distractors). Throws ContractViolation when the contract fails.
ModelParams pretrain(const WorldSpec& world, const NetworkHyper& hyper, const Schedule& schedule,
                     const PretrainConfig& config, TrainingLog* log = nullptr, PretrainReport* report = nullptr);

/// Same training loop without the contract check.
ModelParams pretrain_unchecked(const WorldSpec& world, const NetworkHyper& hyper, const PretrainConfig& config,
                               TrainingLog* log = nullptr);

struct RefactorResult {
    ModelParams params;
    TrainingLog log;
};

/// Interleaved DK-DM / NO-RL training; each phase applies its own optimizer update in sequence.
RefactorResult refactor(const ModelParams& theta_init, const ModelParams& ref, const WorldSpec& world,
                        const Schedule& schedule, const DkdmConfig& dkdm_config, const NorlConfig& norl_config,
                        const TrainerConfig& config, const FailureSet* failures = nullptr,
                        std::span<const ScoredSample> successes = {});

}  // namespace erudiff
