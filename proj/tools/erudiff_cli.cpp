#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "erudiff/corpus.hpp"
#include "erudiff/dkdm.hpp"
#include "erudiff/evalsuite.hpp"
#include "erudiff/flowcore.hpp"
#include "erudiff/norl.hpp"
#include "erudiff/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace erudiff;

namespace {

constexpr const char* kVersion = "erudiff 0.1.0";

constexpr const char* kConfigHelp = R"(Config file (JSON, every key optional; flags win over the file):
  seed                      base seed (default: $ERUDIFF_SEED or 0)
  t_inference               Euler steps of the sampler (16)
  network.d_embed           condition embedding width (8)
  network.widths            hidden layer widths ([128, 128, 128])
  network.time_freqs        sinusoidal time frequencies (4)
  network.activation        "silu" | "tanh" (silu)
  pretrain.iterations       (6000)
  pretrain.batch_size       (256)
  pretrain.lr               initial Adam step size (0.002)
  pretrain.lr_final_fraction  linear decay target as a fraction of lr (0.05)
  pretrain.cond_dropout     probability of training on the null token (0.1)
  pretrain.contract_samples samples per condition for the contract check (512)
  dkdm.p_impl, dkdm.p_expl, dkdm.p_found   draw category probabilities (0.8, 0.1, 0.1)
  dkdm.lambda               step-count decay of the curriculum (0.1)
  dkdm.curriculum           "taware" | "uniform" (taware)
  dkdm.clamp_lo, dkdm.clamp_hi   matching-time clamps inside a step (0.02, 0.98)
  dkdm.normalizer_eps       (0.001)
  dkdm.guidance             guidance scale for training rollouts (1)
  norl.beta                 log-ratio scale (0.1)
  norl.m                    unrelated tuples for the reference point (16)
  norl.n_filter             generations scored by `filter` (1000)
  norl.t_lo, norl.t_hi      noise-level range (0.02, 0.98)
  norl.positive             also learn from above-threshold samples (false)
  trainer.eta               Adam step size for refactoring (0.0001)
  trainer.iterations        (4000)
  trainer.batch_size        (64)
  trainer.eman_decay        (0.99)
  trainer.probe_every       implicit-score probe cadence, 0 disables (500)
  trainer.probe_samples     (256)
  trainer.early_stop        stop once the probe reaches this score (0.95)
  adam.beta1, adam.beta2, adam.epsilon   (0.9, 0.999, 1e-8)
Exit codes: 0 ok, 2 usage or validation, 3 contract failure, 4 I/O.)";

struct Config {
    std::uint64_t seed = 0;
    int t_inference = 16;
    NetworkHyper network;
    PretrainConfig pretrain;
    DkdmConfig dkdm;
    NorlConfig norl;
    TrainerConfig trainer;
    AdamConfig adam;
};

std::uint64_t env_seed() {
    const char* v = std::getenv("ERUDIFF_SEED");
    if (!v || !*v) return 0;
    try {
        std::size_t used = 0;
        const unsigned long long s = std::stoull(v, &used);
        if (used != std::string(v).size()) throw std::invalid_argument("trailing characters");
        return s;
    } catch (const std::exception&) {
        throw InvalidArgument(std::string("ERUDIFF_SEED is not an unsigned integer: ") + v);
    }
}

template <typename T>
void take(const json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw InvalidArgument("config: bad value for " + where + key);
    }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
    if (!obj.is_object()) throw InvalidArgument("config: " + (where.empty() ? std::string("root") : where) + " must be an object");
    for (const auto& [k, v] : obj.items()) {
        bool known = false;
        for (const char* key : keys) known = known || k == key;
        if (!known) throw InvalidArgument("config: unknown key " + where + k);
    }
}

Config load_config(const std::optional<fs::path>& path) {
    Config c;
    c.seed = env_seed();
    if (!path) return c;
    std::ifstream in(*path);
    if (!in) throw IoError("cannot open config " + path->string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw InvalidArgument("config " + path->string() + ": " + e.what());
    }
    reject_unknown(j, {"seed", "t_inference", "network", "pretrain", "dkdm", "norl", "trainer", "adam"}, "");
    take(j, "seed", c.seed, "");
    take(j, "t_inference", c.t_inference, "");
    if (j.contains("network")) {
        const json& n = j["network"];
        reject_unknown(n, {"d_embed", "widths", "time_freqs", "activation"}, "network.");
        take(n, "d_embed", c.network.d_embed, "network.");
        take(n, "widths", c.network.widths, "network.");
        take(n, "time_freqs", c.network.time_freqs, "network.");
        std::string act = to_string(c.network.activation);
        take(n, "activation", act, "network.");
        c.network.activation = parse_activation(act);
    }
    if (j.contains("pretrain")) {
        const json& p = j["pretrain"];
        reject_unknown(p, {"iterations", "batch_size", "lr", "lr_final_fraction", "cond_dropout", "contract_samples"},
                       "pretrain.");
        take(p, "iterations", c.pretrain.iterations, "pretrain.");
        take(p, "batch_size", c.pretrain.batch_size, "pretrain.");
        take(p, "lr", c.pretrain.lr, "pretrain.");
        take(p, "lr_final_fraction", c.pretrain.lr_final_fraction, "pretrain.");
        take(p, "cond_dropout", c.pretrain.cond_dropout, "pretrain.");
        take(p, "contract_samples", c.pretrain.contract_samples, "pretrain.");
    }
    if (j.contains("dkdm")) {
        const json& d = j["dkdm"];
        reject_unknown(d, {"p_impl", "p_expl", "p_found", "lambda", "curriculum", "clamp_lo", "clamp_hi",
                           "normalizer_eps", "guidance"},
                       "dkdm.");
        take(d, "p_impl", c.dkdm.p_impl, "dkdm.");
        take(d, "p_expl", c.dkdm.p_expl, "dkdm.");
        take(d, "p_found", c.dkdm.p_found, "dkdm.");
        take(d, "lambda", c.dkdm.lambda, "dkdm.");
        std::string cur(to_string(c.trainer.curriculum));
        take(d, "curriculum", cur, "dkdm.");
        c.trainer.curriculum = parse_curriculum(cur);
        take(d, "clamp_lo", c.dkdm.clamp_lo, "dkdm.");
        take(d, "clamp_hi", c.dkdm.clamp_hi, "dkdm.");
        take(d, "normalizer_eps", c.dkdm.normalizer_eps, "dkdm.");
        take(d, "guidance", c.dkdm.guidance, "dkdm.");
    }
    if (j.contains("norl")) {
        const json& n = j["norl"];
        reject_unknown(n, {"beta", "m", "n_filter", "t_lo", "t_hi", "positive"}, "norl.");
        take(n, "beta", c.norl.beta, "norl.");
        take(n, "m", c.norl.m, "norl.");
        take(n, "n_filter", c.norl.n_filter, "norl.");
        take(n, "t_lo", c.norl.t_lo, "norl.");
        take(n, "t_hi", c.norl.t_hi, "norl.");
        take(n, "positive", c.norl.positive_enabled, "norl.");
    }
    if (j.contains("trainer")) {
        const json& t = j["trainer"];
        reject_unknown(t, {"eta", "iterations", "batch_size", "eman_decay", "probe_every", "probe_samples", "early_stop"},
                       "trainer.");
        take(t, "eta", c.trainer.eta, "trainer.");
        take(t, "iterations", c.trainer.iterations, "trainer.");
        take(t, "batch_size", c.trainer.batch_size, "trainer.");
        take(t, "eman_decay", c.trainer.eman_decay, "trainer.");
        take(t, "probe_every", c.trainer.probe_every, "trainer.");
        take(t, "probe_samples", c.trainer.probe_samples, "trainer.");
        take(t, "early_stop", c.trainer.early_stop_score, "trainer.");
    }
    if (j.contains("adam")) {
        const json& a = j["adam"];
        reject_unknown(a, {"beta1", "beta2", "epsilon"}, "adam.");
        take(a, "beta1", c.adam.beta1, "adam.");
        take(a, "beta2", c.adam.beta2, "adam.");
        take(a, "epsilon", c.adam.epsilon, "adam.");
    }
    return c;
}

json config_snapshot(const Config& c) {
    json j;
    j["seed"] = c.seed;
    j["t_inference"] = c.t_inference;
    j["network"] = {{"d_embed", c.network.d_embed},
                    {"widths", c.network.widths},
                    {"time_freqs", c.network.time_freqs},
                    {"activation", to_string(c.network.activation)}};
    j["pretrain"] = {{"iterations", c.pretrain.iterations},
                     {"batch_size", c.pretrain.batch_size},
                     {"lr", c.pretrain.lr},
                     {"lr_final_fraction", c.pretrain.lr_final_fraction},
                     {"cond_dropout", c.pretrain.cond_dropout},
                     {"contract_samples", c.pretrain.contract_samples}};
    j["dkdm"] = {{"p_impl", c.dkdm.p_impl},
                 {"p_expl", c.dkdm.p_expl},
                 {"p_found", c.dkdm.p_found},
                 {"lambda", c.dkdm.lambda},
                 {"curriculum", std::string(to_string(c.trainer.curriculum))},
                 {"clamp_lo", c.dkdm.clamp_lo},
                 {"clamp_hi", c.dkdm.clamp_hi},
                 {"normalizer_eps", c.dkdm.normalizer_eps},
                 {"guidance", c.dkdm.guidance}};
    j["norl"] = {{"beta", c.norl.beta},     {"m", c.norl.m},       {"n_filter", c.norl.n_filter},
                 {"t_lo", c.norl.t_lo},     {"t_hi", c.norl.t_hi}, {"positive", c.norl.positive_enabled}};
    j["trainer"] = {{"eta", c.trainer.eta},
                    {"iterations", c.trainer.iterations},
                    {"batch_size", c.trainer.batch_size},
                    {"eman_decay", c.trainer.eman_decay},
                    {"probe_every", c.trainer.probe_every},
                    {"probe_samples", c.trainer.probe_samples},
                    {"early_stop", c.trainer.early_stop_score},
                    {"norl", c.trainer.norl_enabled},
                    {"afkc", c.trainer.afkc_enabled}};
    j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}};
    return j;
}

Schedule schedule_of(const Config& c) {
    if (c.t_inference < 1) throw InvalidArgument("t_inference must be >= 1");
    return Schedule::uniform(c.t_inference, c.dkdm.clamp_lo, c.dkdm.clamp_hi);
}

void write_atomic(const fs::path& path, const std::string& bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void guard_output(const fs::path& path, bool force) {
    if (fs::exists(path) && !force)
        throw InvalidArgument(path.string() + " exists (use --force to overwrite)");
    const fs::path dir = path.parent_path();
    if (!dir.empty() && !fs::is_directory(dir)) throw IoError("output directory " + dir.string() + " does not exist");
}

void require_input(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("no such file: " + path.string());
}

class Run {
public:
    Run(std::string command, bool force) : command_(std::move(command)), force_(force) {
        start_ = std::chrono::steady_clock::now();
    }

    void input(const std::string& role, const fs::path& p) {
        require_input(p);
        inputs_[role] = p.string();
    }
    void output(const std::string& role, const fs::path& p) {
        guard_output(p, force_);
        outputs_[role] = p.string();
    }
    void seed(const std::string& role, std::uint64_t s) { seeds_[role] = s; }
    void config(json snapshot) { config_ = std::move(snapshot); }

    void finish(const fs::path& anchor) {
        json m;
        m["command"] = command_;
        m["version"] = kVersion;
        m["config"] = config_;
        m["inputs"] = inputs_;
        m["outputs"] = outputs_;
        m["seeds"] = seeds_;
        m["wall_clock_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        for (const auto& [role, p] : outputs_.items())
            if (!fs::exists(p.get<std::string>())) throw IoError("declared output missing: " + p.get<std::string>());
        write_atomic(anchor.string() + ".manifest.json", m.dump(2) + "\n");
    }

private:
    std::string command_;
    bool force_;
    std::chrono::steady_clock::time_point start_;
    json config_ = json::object();
    json inputs_ = json::object();
    json outputs_ = json::object();
    json seeds_ = json::object();
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

ModelParams load_model_for(const WorldSpec& world, const fs::path& p) {
    ModelParams m = load_checkpoint(p);
    if (m.hyper().vocab != world.vocab_size())
        throw InvalidArgument(p.string() + ": checkpoint vocabulary " + std::to_string(m.hyper().vocab) +
                              " does not match the world's " + std::to_string(world.vocab_size()));
    return m;
}

std::vector<ScoredSample> successes_from_csv(const fs::path& p) { return load_failures(p).items; }

// ---------------------------------------------------------------------------

struct WorldArgs {
    int entries = 8;
    int found = 2;
    std::optional<std::uint64_t> seed;
    int bias_entries = 0;
    double bias_weight = 0.3;
    fs::path out;
    bool force = false;
};

int cmd_world(const WorldArgs& a) {
    Run run("world", a.force);
    run.output("world", a.out);
    if (a.entries < 1) throw InvalidArgument("--entries must be >= 1");
    if (a.found < 1) throw InvalidArgument("--found must be >= 1");
    const std::uint64_t seed = a.seed.value_or(env_seed());
    WorldOptions opt;
    opt.bias_entries = a.bias_entries;
    opt.bias_weight = a.bias_weight;
    const WorldSpec w = build_world(a.entries, a.found, seed, opt);
    save_world(w, a.out);

    std::cout << "token kind         entries\n";
    for (TokenId t = 0; t < w.vocab_size(); ++t) {
        std::string entries;
        for (const auto& e : w.entries) {
            const bool uses = e.implicit_id == t || e.explicit_id == t ||
                              std::find(e.found.begin(), e.found.end(), t) != e.found.end();
            if (uses) entries += (entries.empty() ? "" : ",") + std::to_string(e.entry_id);
        }
        std::printf("%5u %-14s %s\n", t, std::string(to_string(w.kind(t))).c_str(),
                    entries.empty() ? "-" : entries.c_str());
    }
    run.seed("world", seed);
    run.config({{"entries", a.entries}, {"found", a.found}, {"bias_entries", a.bias_entries},
                {"bias_weight", a.bias_weight}});
    run.finish(a.out);
    return 0;
}

struct PretrainArgs {
    fs::path world, out, log;
    std::optional<fs::path> config;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_pretrain(const PretrainArgs& a) {
    Run run("pretrain", a.force);
    run.input("world", a.world);
    if (a.config) run.input("config", *a.config);
    const fs::path log_path = a.log.empty() ? fs::path(a.out.string() + ".log.csv") : a.log;
    run.output("checkpoint", a.out);
    run.output("log", log_path);

    Config c = load_config(a.config);
    if (a.seed) c.seed = *a.seed;
    c.pretrain.seed = c.seed;
    c.pretrain.adam = c.adam;
    const WorldSpec w = load_world(a.world);
    const Schedule s = schedule_of(c);

    TrainingLog log;
    const ModelParams p = pretrain_unchecked(w, c.network, c.pretrain, &log);
    const PretrainReport r = check_pretrain_contract(w, p, s, c.pretrain);
    save_checkpoint(p, a.out);
    write_atomic(log_path, log_csv(log));
    run.seed("pretrain", c.seed);
    run.config(config_snapshot(c));
    run.finish(a.out);

    std::cout << "contract: " << r.summary() << "\n";
    if (!r.ok) {
        std::cerr << "error: pretraining contract failed (need explicit and foundational >= " << c.pretrain.contract_min_fact
                  << ", implicit <= " << c.pretrain.contract_max_implicit << ")\n";
        return 3;
    }
    return 0;
}

struct FilterArgs {
    fs::path world, ref, out;
    std::optional<fs::path> config, successes_out;
    std::optional<int> n;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_filter(const FilterArgs& a) {
    Run run("filter", a.force);
    run.input("world", a.world);
    run.input("ref", a.ref);
    if (a.config) run.input("config", *a.config);
    run.output("failures", a.out);
    if (a.successes_out) run.output("successes", *a.successes_out);

    Config c = load_config(a.config);
    if (a.seed) c.seed = *a.seed;
    if (a.n) c.norl.n_filter = *a.n;
    const WorldSpec w = load_world(a.world);
    const ModelParams ref = load_model_for(w, a.ref);
    const FilterResult r = filter_samples(ref, w, schedule_of(c), c.norl, derive_seed(c.seed, 0xf1), c.dkdm.guidance);
    write_atomic(a.out, failures_to_csv(r.failures));
    if (a.successes_out) write_atomic(*a.successes_out, failures_to_csv({r.successes, r.failures.threshold}));

    std::cout << "threshold " << r.failures.threshold << ", failures " << r.failures.items.size() << ", at or above "
              << r.successes.size() << "\n";
    if (r.failures.items.empty()) std::cerr << "warning: no sample fell below the threshold; NO-RL will refuse this set\n";
    run.seed("filter", c.seed);
    run.config(config_snapshot(c));
    run.finish(a.out);
    return 0;
}

struct RefactorArgs {
    fs::path world, ref, out, log;
    std::optional<fs::path> failures, successes, config, init;
    std::optional<std::uint64_t> seed;
    bool no_norl = false, no_afkc = false, uniform = false, force = false;
};

int cmd_refactor(const RefactorArgs& a) {
    Run run("refactor", a.force);
    run.input("world", a.world);
    run.input("ref", a.ref);
    if (a.config) run.input("config", *a.config);
    if (a.init) run.input("init", *a.init);
    const fs::path log_path = a.log.empty() ? fs::path(a.out.string() + ".log.csv") : a.log;
    const fs::path probe_path = a.out.string() + ".probe.csv";
    run.output("checkpoint", a.out);
    run.output("log", log_path);
    run.output("probe", probe_path);

    Config c = load_config(a.config);
    if (a.seed) c.seed = *a.seed;
    c.trainer.seed = c.seed;
    c.trainer.adam = c.adam;
    c.trainer.norl_enabled = !a.no_norl;
    c.trainer.afkc_enabled = !a.no_afkc;
    if (a.uniform) c.trainer.curriculum = Curriculum::uniform;
    if (c.trainer.norl_enabled && !a.failures)
        throw InvalidArgument("--failures is required unless --no-norl is given");

    const WorldSpec w = load_world(a.world);
    const ModelParams ref = load_model_for(w, a.ref);
    const ModelParams init = a.init ? load_model_for(w, *a.init) : ref;
    FailureSet failures;
    std::vector<ScoredSample> successes;
    if (c.trainer.norl_enabled) {
        run.input("failures", *a.failures);
        failures = load_failures(*a.failures);
        if (failures.items.empty()) throw InvalidArgument("failure set " + a.failures->string() + " is empty");
        if (c.norl.positive_enabled) {
            if (!a.successes) throw InvalidArgument("norl.positive needs --successes");
            run.input("successes", *a.successes);
            successes = successes_from_csv(*a.successes);
        }
    }

    const RefactorResult r = refactor(init, ref, w, schedule_of(c), c.dkdm, c.norl, c.trainer,
                                      c.trainer.norl_enabled ? &failures : nullptr, successes);
    save_checkpoint(r.params, a.out);
    write_atomic(log_path, log_csv(r.log));
    write_atomic(probe_path, probe_csv(r.log));
    if (!r.log.probes.empty())
        std::cout << "last probe: iteration " << r.log.probes.back().iter << ", implicit knowledge "
                  << r.log.probes.back().implicit_score << "\n";
    if (r.log.early_stopped_at) std::cout << "early stop at iteration " << *r.log.early_stopped_at << "\n";
    run.seed("refactor", c.seed);
    run.config(config_snapshot(c));
    run.finish(a.out);
    return 0;
}

struct EvalArgs {
    fs::path world, model, out;
    std::optional<fs::path> baseline, svg, config;
    std::vector<std::string> curves;
    long samples = 4096;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    bool force = false;
};

int cmd_eval(const EvalArgs& a) {
    Run run("eval", a.force);
    run.input("world", a.world);
    run.input("model", a.model);
    if (a.baseline) run.input("baseline", *a.baseline);
    if (a.config) run.input("config", *a.config);
    run.output("report", a.out);
    if (a.svg) run.output("svg", *a.svg);
    if (a.samples < 2) throw InvalidArgument("--samples must be >= 2");
    if (a.threads < 1) throw InvalidArgument("--threads must be >= 1");

    Config c = load_config(a.config);
    if (a.seed) c.seed = *a.seed;
    const WorldSpec w = load_world(a.world);
    const ModelParams model = load_model_for(w, a.model);
    const Schedule s = schedule_of(c);

    std::vector<ConvergenceCurve> curves;
    for (const auto& arg : a.curves) {
        const auto eq = arg.find('=');
        const std::string label = eq == std::string::npos ? fs::path(arg).stem().string() : arg.substr(0, eq);
        const fs::path p = eq == std::string::npos ? fs::path(arg) : fs::path(arg.substr(eq + 1));
        run.input("curve:" + label, p);
        ConvergenceCurve cc{label, {}};
        for (const auto& row : probes_from_csv(slurp(p))) cc.points.emplace_back(row.iter, row.implicit_score);
        curves.push_back(std::move(cc));
    }

    MetricsReport rep = evaluate_model(w, model, s, a.samples, c.seed, a.threads);
    if (a.baseline) {
        const ModelParams base = load_model_for(w, *a.baseline);
        if (!base.compatible(model)) throw InvalidArgument("baseline and model checkpoints are incompatible");
        rep.forgetting = forgetting_score(w, base, model, s, a.samples, derive_seed(c.seed, 0xf0));
    }
    rep.checkpoint = a.model.string();
    rep.world_seed = w.seed;
    rep.samples = a.samples;
    rep.metric_seed = c.seed;

    write_atomic(a.out, report_csv(rep));
    if (a.svg) write_atomic(*a.svg, report_svg(w, rep, curves));

    std::printf("implicit %.4f  explicit %.4f  foundational %.4f  implicit mmd2 %.5f\n", rep.implicit_mean,
                rep.explicit_mean, rep.foundational_mean, rep.implicit_mmd2_mean);
    if (rep.forgetting) std::printf("forgetting %.5f\n", *rep.forgetting);
    run.seed("eval", c.seed);
    run.config({{"samples", a.samples}, {"t_inference", c.t_inference}, {"threads", a.threads}});
    run.finish(a.out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge refactoring of a small conditional flow model on a synthetic 2-D world."};
    app.set_version_flag("--version", kVersion);
    app.footer(kConfigHelp);
    app.require_subcommand(1);

    WorldArgs wa;
    auto* world = app.add_subcommand("world", "Build a synthetic knowledge world and print its token table.");
    world->add_option("--entries", wa.entries, "Knowledge entries")->capture_default_str();
    world->add_option("--found", wa.found, "Foundational tokens per entry")->capture_default_str();
    world->add_option("--seed", wa.seed, "World seed (default $ERUDIFF_SEED or 0)");
    world->add_option("--bias-entries", wa.bias_entries, "Explicit tokens that get a biased pretraining mode")
        ->capture_default_str();
    world->add_option("--bias-weight", wa.bias_weight, "Weight of the biased mode")->capture_default_str();
    world->add_option("--out", wa.out, "World file")->required();
    world->add_flag("--force", wa.force, "Overwrite existing outputs");

    PretrainArgs pa;
    auto* pre = app.add_subcommand("pretrain", "Train the reference model on counter-factual pretraining data.");
    pre->add_option("--world", pa.world, "World file")->required();
    pre->add_option("--config", pa.config, "JSON config (keys below)");
    pre->add_option("--out", pa.out, "Checkpoint")->required();
    pre->add_option("--log", pa.log, "Training log CSV (default <out>.log.csv)");
    pre->add_option("--seed", pa.seed, "Overrides the config seed");
    pre->add_flag("--force", pa.force, "Overwrite existing outputs");
    pre->footer(kConfigHelp);

    FilterArgs fa;
    auto* fil = app.add_subcommand("filter", "Score reference generations and keep those below the mean reward.");
    fil->add_option("--world", fa.world, "World file")->required();
    fil->add_option("--ref", fa.ref, "Reference checkpoint")->required();
    fil->add_option("--n", fa.n, "Generations to score (default norl.n_filter)");
    fil->add_option("--config", fa.config, "JSON config (keys below)");
    fil->add_option("--out", fa.out, "Failure CSV")->required();
    fil->add_option("--successes-out", fa.successes_out, "Optional CSV of at/above-threshold samples");
    fil->add_option("--seed", fa.seed, "Overrides the config seed");
    fil->add_flag("--force", fa.force, "Overwrite existing outputs");
    fil->footer(kConfigHelp);

    RefactorArgs ra;
    auto* ref = app.add_subcommand("refactor", "Run interleaved distribution matching and negative-only RL.");
    ref->add_option("--world", ra.world, "World file")->required();
    ref->add_option("--ref", ra.ref, "Frozen reference checkpoint")->required();
    ref->add_option("--init", ra.init, "Starting checkpoint (default: the reference)");
    ref->add_option("--failures", ra.failures, "Failure CSV from `filter`");
    ref->add_option("--successes", ra.successes, "Success CSV, only used with norl.positive");
    ref->add_option("--config", ra.config, "JSON config (keys below)");
    ref->add_option("--out", ra.out, "Checkpoint")->required();
    ref->add_option("--log", ra.log, "Training log CSV (default <out>.log.csv)");
    ref->add_option("--seed", ra.seed, "Overrides the config seed");
    ref->add_flag("--no-norl", ra.no_norl, "Skip the negative-only RL phase");
    ref->add_flag("--no-afkc", ra.no_afkc, "Match implicit pairs only (no consolidation draws)");
    ref->add_flag("--uniform-curriculum", ra.uniform, "Uniform rollout lengths instead of the geometric curriculum");
    ref->add_flag("--force", ra.force, "Overwrite existing outputs");
    ref->footer(kConfigHelp);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Per-condition knowledge, MMD and reward report, plus an SVG plot.");
    ev->add_option("--world", ea.world, "World file")->required();
    ev->add_option("--model", ea.model, "Checkpoint to evaluate")->required();
    ev->add_option("--baseline", ea.baseline, "Checkpoint to measure forgetting against");
    ev->add_option("--samples", ea.samples, "Samples per condition")->capture_default_str();
    ev->add_option("--out", ea.out, "Report CSV")->required();
    ev->add_option("--svg", ea.svg, "SVG plot");
    ev->add_option("--curve", ea.curves, "Probe CSV for the convergence panel, optionally label=path");
    ev->add_option("--config", ea.config, "JSON config (keys below)");
    ev->add_option("--seed", ea.seed, "Overrides the config seed");
    ev->add_option("--threads", ea.threads, "Worker threads; results do not depend on it")->capture_default_str();
    ev->add_flag("--force", ea.force, "Overwrite existing outputs");
    ev->footer(kConfigHelp);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*world) return cmd_world(wa);
        if (*pre) return cmd_pretrain(pa);
        if (*fil) return cmd_filter(fa);
        if (*ref) return cmd_refactor(ra);
        if (*ev) return cmd_eval(ea);
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ContractViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
