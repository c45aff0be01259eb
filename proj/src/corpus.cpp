#include "erudiff/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace erudiff {

namespace {

constexpr std::string_view kWorldMagic = "erudiff-world";
constexpr int kWorldVersion = 1;

std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

MixtureComponent make_component(const Vec2& mean, double sx, double sy, double angle, double weight) {
    const Mat2 rot = Eigen::Rotation2D<double>(angle).toRotationMatrix();
    const Mat2 cov = rot * Vec2(sx * sx, sy * sy).asDiagonal() * rot.transpose();
    MixtureComponent c;
    c.mean = Vec2(quantize9(mean.x()), quantize9(mean.y()));
    const double off = quantize9(0.5 * (cov(0, 1) + cov(1, 0)));
    c.cov << quantize9(cov(0, 0)), off, off, quantize9(cov(1, 1));
    c.weight = weight;
    return c;
}

std::vector<const MixtureSpec*> all_mixtures(const WorldSpec& w) {
    std::vector<const MixtureSpec*> out;
    for (const auto& [id, m] : w.target_of) out.push_back(&m);
    for (const auto& [id, m] : w.distractor_of) out.push_back(&m);
    for (const auto& [id, b] : w.bias_of) out.push_back(&b.mode);
    return out;
}

}  // namespace

std::string_view to_string(TokenKind kind) {
    switch (kind) {
        case TokenKind::null_token: return "null";
        case TokenKind::implicit_token: return "implicit";
        case TokenKind::explicit_token: return "explicit";
        case TokenKind::foundational_token: return "foundational";
    }
    return "?";
}

TokenKind parse_token_kind(std::string_view text) {
    if (text == "null") return TokenKind::null_token;
    if (text == "implicit") return TokenKind::implicit_token;
    if (text == "explicit") return TokenKind::explicit_token;
    if (text == "foundational") return TokenKind::foundational_token;
    throw InvalidArgument("unknown token kind '" + std::string(text) + "'");
}

std::string_view to_string(KnowledgeCategory category) {
    switch (category) {
        case KnowledgeCategory::cultural: return "cultural";
        case KnowledgeCategory::spatiotemporal: return "spatiotemporal";
        case KnowledgeCategory::science: return "science";
    }
    return "?";
}

KnowledgeCategory parse_knowledge_category(std::string_view text) {
    if (text == "cultural") return KnowledgeCategory::cultural;
    if (text == "spatiotemporal") return KnowledgeCategory::spatiotemporal;
    if (text == "science") return KnowledgeCategory::science;
    throw InvalidArgument("unknown knowledge category '" + std::string(text) + "'");
}

double quantize9(double value) {
    return std::strtod(fmt9(value).c_str(), nullptr);
}

// ---------------------------------------------------------------------------
// MixtureSpec

double MixtureSpec::log_density(const Vec2& x) const {
    // log-sum-exp over components
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    terms.reserve(components.size());
    for (const auto& c : components) {
        const Eigen::LLT<Mat2> llt(c.cov);
        const Vec2 z = llt.matrixL().solve(x - c.mean);
        const Mat2 l = llt.matrixL();
        const double log_det = 2.0 * (std::log(l(0, 0)) + std::log(l(1, 1)));
        const double term = std::log(c.weight) - std::log(2.0 * std::numbers::pi) - 0.5 * log_det -
                            0.5 * z.squaredNorm();
        terms.push_back(term);
        best = std::max(best, term);
    }
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - best);
    return best + std::log(acc);
}

Points MixtureSpec::sample(Eigen::Index n, Rng& rng) const {
    std::vector<double> weights;
    for (const auto& c : components) weights.push_back(c.weight);
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::vector<Mat2> chol;
    for (const auto& c : components) chol.push_back(Eigen::LLT<Mat2>(c.cov).matrixL());

    std::normal_distribution<double> normal(0.0, 1.0);
    Points out(2, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const std::size_t k = pick(rng);
        Vec2 eps;
        eps(0) = normal(rng);
        eps(1) = normal(rng);
        out.col(j) = components[k].mean + chol[k] * eps;
    }
    return out;
}

double MixtureSpec::max_stddev() const {
    double s = 0.0;
    for (const auto& c : components) {
        const Eigen::SelfAdjointEigenSolver<Mat2> es(c.cov);
        s = std::max(s, std::sqrt(es.eigenvalues().maxCoeff()));
    }
    return s;
}

bool operator==(const MixtureComponent& a, const MixtureComponent& b) {
    return a.mean == b.mean && a.cov == b.cov && a.weight == b.weight;
}
bool operator==(const MixtureSpec& a, const MixtureSpec& b) { return a.components == b.components; }
bool operator==(const PretrainBias& a, const PretrainBias& b) {
    return a.mode == b.mode && a.weight == b.weight;
}
bool operator==(const KnowledgeEntry& a, const KnowledgeEntry& b) {
    return a.entry_id == b.entry_id && a.implicit_id == b.implicit_id && a.explicit_id == b.explicit_id &&
           a.found == b.found && a.category == b.category;
}

// ---------------------------------------------------------------------------
// WorldSpec

TokenId WorldSpec::null_id() const {
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == TokenKind::null_token) return static_cast<TokenId>(i);
    throw ContractViolation("world has no null token");
}

TokenKind WorldSpec::kind(TokenId id) const {
    if (id >= tokens.size()) throw InvalidArgument("unknown token " + std::to_string(id));
    return tokens[id];
}

std::vector<TokenId> WorldSpec::tokens_of(TokenKind k) const {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == k) out.push_back(static_cast<TokenId>(i));
    return out;
}

const KnowledgeEntry& WorldSpec::entry_of(TokenId id) const {
    for (const auto& e : entries)
        if (e.implicit_id == id || e.explicit_id == id) return e;
    throw InvalidArgument("token " + std::to_string(id) + " belongs to no entry");
}

const MixtureSpec& WorldSpec::fact_of(TokenId id) const {
    const TokenKind k = kind(id);
    if (k == TokenKind::null_token) throw InvalidArgument("null token has no distribution");
    if (k == TokenKind::implicit_token) return target_of.at(entry_of(id).explicit_id);
    const auto it = target_of.find(id);
    if (it == target_of.end()) throw InvalidArgument("token " + std::to_string(id) + " has no target");
    return it->second;
}

bool WorldSpec::operator==(const WorldSpec& o) const {
    return seed == o.seed && n_found_per_entry == o.n_found_per_entry && tokens == o.tokens &&
           entries == o.entries && target_of == o.target_of && distractor_of == o.distractor_of &&
           bias_of == o.bias_of;
}

// ---------------------------------------------------------------------------
// Generation

WorldSpec build_world(int n_entries, int n_found_per_entry, std::uint64_t seed, const WorldOptions& opt) {
    require(n_entries >= 1, "n_entries must be >= 1");
    require(n_found_per_entry >= 1, "n_found_per_entry must be >= 1");
    require(opt.sigma_min > 1e-3 && opt.sigma_min <= opt.sigma_max, "invalid sigma range");
    require(opt.component_offset >= 0.0, "component_offset must be >= 0");
    require(opt.bias_entries >= 0 && opt.bias_entries <= n_entries, "bias_entries out of range");
    require(opt.bias_weight >= 0.0 && opt.bias_weight < 1.0, "bias_weight must be in [0, 1)");

    // Nearest foreign component mean sits at least spacing - 2*offset away.
    const double min_sep = opt.cell_spacing - 2.0 * opt.component_offset;
    if (min_sep < 4.0 * opt.sigma_max)
        throw InvalidArgument("cell spacing too small for the 4-sigma separation invariant");

    Rng rng = make_rng(seed, 0);
    WorldSpec w;
    w.seed = seed;
    w.n_found_per_entry = n_found_per_entry;

    // Foundational tokens are drawn from a shared pool so that entries may share them.
    const int pool = n_entries * n_found_per_entry;
    std::vector<std::vector<int>> picks(n_entries);
    for (int e = 0; e < n_entries; ++e) {
        std::vector<int> idx(pool);
        for (int i = 0; i < pool; ++i) idx[i] = i;
        for (int k = 0; k < n_found_per_entry; ++k) {
            const int j = k + static_cast<int>(std::uniform_int_distribution<int>(0, pool - 1 - k)(rng));
            std::swap(idx[k], idx[j]);
            picks[e].push_back(idx[k]);
        }
    }
    std::map<int, TokenId> pool_to_token;
    const TokenId first_found = static_cast<TokenId>(1 + 2 * n_entries);
    for (const auto& p : picks)
        for (int k : p)
            if (!pool_to_token.count(k)) {
                const auto next = static_cast<TokenId>(first_found + pool_to_token.size());
                pool_to_token.emplace(k, next);
            }

    w.tokens.assign(first_found + pool_to_token.size(), TokenKind::foundational_token);
    w.tokens[0] = TokenKind::null_token;
    std::uniform_int_distribution<int> cat(0, 2);
    for (int e = 0; e < n_entries; ++e) {
        KnowledgeEntry entry;
        entry.entry_id = e;
        entry.implicit_id = static_cast<TokenId>(1 + 2 * e);
        entry.explicit_id = static_cast<TokenId>(2 + 2 * e);
        w.tokens[entry.implicit_id] = TokenKind::implicit_token;
        w.tokens[entry.explicit_id] = TokenKind::explicit_token;
        for (int k : picks[e]) entry.found.push_back(pool_to_token.at(k));
        std::sort(entry.found.begin(), entry.found.end());
        entry.category = static_cast<KnowledgeCategory>(cat(rng));
        w.entries.push_back(std::move(entry));
    }

    // One grid cell per mixture: facts, distractors, foundational, then bias modes.
    const int n_mixtures = 2 * n_entries + static_cast<int>(pool_to_token.size()) + opt.bias_entries;
    const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_mixtures))));
    if (side > opt.max_grid_side)
        throw InvalidArgument("world needs a " + std::to_string(side) + "x" + std::to_string(side) +
                              " grid, above max_grid_side");
    std::vector<Vec2> cells;
    for (int i = 0; i < side; ++i)
        for (int j = 0; j < side; ++j)
            cells.emplace_back((i - 0.5 * (side - 1)) * opt.cell_spacing,
                               (j - 0.5 * (side - 1)) * opt.cell_spacing);
    std::shuffle(cells.begin(), cells.end(), rng);
    std::size_t next_cell = 0;

    std::uniform_real_distribution<double> sigma(opt.sigma_min, opt.sigma_max);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    auto make_mixture = [&](bool allow_two) {
        const Vec2 centre = cells[next_cell++];
        MixtureSpec m;
        const bool two = allow_two && uniform01(rng) < opt.two_component_prob;
        if (!two) {
            m.components.push_back(make_component(centre, sigma(rng), sigma(rng), angle(rng), 1.0));
            return m;
        }
        const double a = angle(rng);
        const Vec2 dir(std::cos(a), std::sin(a));
        const double w1 = std::round(std::uniform_real_distribution<double>(0.3, 0.7)(rng) * 1000.0) / 1000.0;
        const double w2 = quantize9(1.0 - w1);
        m.components.push_back(
            make_component(centre + opt.component_offset * dir, sigma(rng), sigma(rng), angle(rng), w1));
        m.components.push_back(
            make_component(centre - opt.component_offset * dir, sigma(rng), sigma(rng), angle(rng), w2));
        return m;
    };

    for (const auto& e : w.entries) {
        w.target_of.emplace(e.explicit_id, make_mixture(true));
        w.distractor_of.emplace(e.implicit_id, make_mixture(true));
    }
    for (const auto& [k, id] : pool_to_token) w.target_of.emplace(id, make_mixture(true));
    for (int e = 0; e < opt.bias_entries; ++e) {
        PretrainBias b;
        b.mode = make_mixture(false);
        b.weight = quantize9(opt.bias_weight);
        w.bias_of.emplace(w.entries[e].explicit_id, std::move(b));
    }

    validate_world(w);
    return w;
}

void validate_world(const WorldSpec& w) {
    auto fail = [](const std::string& what) { throw ContractViolation("invalid world: " + what); };
    if (w.tokens_of(TokenKind::null_token).size() != 1) fail("exactly one null token required");
    if (w.entries.empty()) fail("no entries");

    std::set<TokenId> seen;
    for (const auto& e : w.entries) {
        if (w.kind(e.implicit_id) != TokenKind::implicit_token) fail("implicit slot has wrong kind");
        if (w.kind(e.explicit_id) != TokenKind::explicit_token) fail("explicit slot has wrong kind");
        if (!seen.insert(e.implicit_id).second || !seen.insert(e.explicit_id).second)
            fail("implicit/explicit token reused across entries");
        if (e.found.empty()) fail("entry without foundational tokens");
        for (TokenId f : e.found)
            if (w.kind(f) != TokenKind::foundational_token) fail("found slot has wrong kind");
        if (!w.target_of.count(e.explicit_id)) fail("explicit token without target");
        if (!w.distractor_of.count(e.implicit_id)) fail("implicit token without distractor");
        if (w.distractor_of.at(e.implicit_id) == w.target_of.at(e.explicit_id))
            fail("distractor equals fact mixture");
    }
    for (TokenId f : w.tokens_of(TokenKind::foundational_token))
        if (!w.target_of.count(f)) fail("foundational token without target");
    for (const auto& [id, b] : w.bias_of)
        if (w.kind(id) != TokenKind::explicit_token) fail("bias attached to non-explicit token");

    const auto mixtures = all_mixtures(w);
    double max_sd = 0.0;
    for (const MixtureSpec* m : mixtures) {
        if (m->components.empty()) fail("empty mixture");
        double total = 0.0;
        for (const auto& c : m->components) {
            if (!(c.weight > 0.0)) fail("non-positive component weight");
            total += c.weight;
            if (std::abs(c.cov(0, 1) - c.cov(1, 0)) > 0.0) fail("asymmetric covariance");
            const Eigen::SelfAdjointEigenSolver<Mat2> es(c.cov);
            if (es.eigenvalues().minCoeff() < 1e-6) fail("covariance eigenvalue below 1e-6");
        }
        if (std::abs(total - 1.0) > 1e-9) fail("mixture weights do not sum to 1");
        max_sd = std::max(max_sd, m->max_stddev());
    }
    for (std::size_t a = 0; a < mixtures.size(); ++a)
        for (std::size_t b = a + 1; b < mixtures.size(); ++b)
            for (const auto& ca : mixtures[a]->components)
                for (const auto& cb : mixtures[b]->components)
                    if ((ca.mean - cb.mean).norm() < 4.0 * max_sd) fail("mixtures closer than 4 sigma");
}

// ---------------------------------------------------------------------------
// Sampling and reward

Points sample_target(const WorldSpec& world, TokenId token, Eigen::Index n, std::uint64_t rng_seed,
                     SampleSource source) {
    require(n >= 1, "sample_target: n must be >= 1");
    const TokenKind k = world.kind(token);
    require(k != TokenKind::null_token, "sample_target: null token has no distribution");
    Rng rng = make_rng(rng_seed, token);
    if (source == SampleSource::fact) return world.fact_of(token).sample(n, rng);

    if (k == TokenKind::implicit_token) return world.distractor_of.at(token).sample(n, rng);
    const auto bias = world.bias_of.find(token);
    if (bias == world.bias_of.end()) return world.target_of.at(token).sample(n, rng);

    // Contaminated explicit data: per-sample Bernoulli choice between the bias mode and the fact.
    Points fact = world.target_of.at(token).sample(n, rng);
    const Points mode = bias->second.mode.sample(n, rng);
    for (Eigen::Index j = 0; j < n; ++j)
        if (uniform01(rng) < bias->second.weight) fact.col(j) = mode.col(j);
    return fact;
}

double reward_oracle(const WorldSpec& world, TokenId token, const Vec2& x) {
    return world.fact_of(token).log_density(x);
}

// ---------------------------------------------------------------------------
// Text format
//
//   erudiff-world 1
//   seed <u64>
//   found_per_entry <int>
//   vocab <n>
//   token <id> <kind>                      (one line per token, ascending id)
//   entry <id> <category> <implicit> <explicit> <found,found,...>
//   mixture <target|distractor> <token> <n_components>
//   bias <token> <weight> <n_components>
//   component <weight> <mean_x> <mean_y> <cov_xx> <cov_xy> <cov_yy>
//   end
//
// Reals are written with 9 significant digits.

std::string world_to_text(const WorldSpec& w) {
    std::ostringstream os;
    os << kWorldMagic << ' ' << kWorldVersion << '\n';
    os << "seed " << w.seed << '\n';
    os << "found_per_entry " << w.n_found_per_entry << '\n';
    os << "vocab " << w.tokens.size() << '\n';
    for (std::size_t i = 0; i < w.tokens.size(); ++i) os << "token " << i << ' ' << to_string(w.tokens[i]) << '\n';
    for (const auto& e : w.entries) {
        os << "entry " << e.entry_id << ' ' << to_string(e.category) << ' ' << e.implicit_id << ' ' << e.explicit_id
           << ' ';
        for (std::size_t k = 0; k < e.found.size(); ++k) os << (k ? "," : "") << e.found[k];
        os << '\n';
    }
    auto write_components = [&](const MixtureSpec& m) {
        for (const auto& c : m.components)
            os << "component " << fmt9(c.weight) << ' ' << fmt9(c.mean.x()) << ' ' << fmt9(c.mean.y()) << ' '
               << fmt9(c.cov(0, 0)) << ' ' << fmt9(c.cov(0, 1)) << ' ' << fmt9(c.cov(1, 1)) << '\n';
    };
    for (const auto& [id, m] : w.target_of) {
        os << "mixture target " << id << ' ' << m.components.size() << '\n';
        write_components(m);
    }
    for (const auto& [id, m] : w.distractor_of) {
        os << "mixture distractor " << id << ' ' << m.components.size() << '\n';
        write_components(m);
    }
    for (const auto& [id, b] : w.bias_of) {
        os << "bias " << id << ' ' << fmt9(b.weight) << ' ' << b.mode.components.size() << '\n';
        write_components(b.mode);
    }
    os << "end\n";
    return os.str();
}

WorldSpec world_from_text(std::string_view text) {
    std::istringstream in{std::string(text)};
    auto bad = [](const std::string& what) { throw InvalidArgument("malformed world file: " + what); };
    std::string word;
    int version = 0;
    if (!(in >> word >> version) || word != kWorldMagic) bad("missing header");
    if (version != kWorldVersion) bad("unsupported version " + std::to_string(version));

    WorldSpec w;
    std::size_t vocab = 0;
    if (!(in >> word >> w.seed) || word != "seed") bad("seed");
    if (!(in >> word >> w.n_found_per_entry) || word != "found_per_entry") bad("found_per_entry");
    if (!(in >> word >> vocab) || word != "vocab") bad("vocab");
    w.tokens.resize(vocab);

    auto read_components = [&](std::size_t n) {
        MixtureSpec m;
        for (std::size_t k = 0; k < n; ++k) {
            MixtureComponent c;
            double xx = 0, xy = 0, yy = 0;
            if (!(in >> word) || word != "component") bad("expected component");
            if (!(in >> c.weight >> c.mean.x() >> c.mean.y() >> xx >> xy >> yy)) bad("component values");
            c.cov << xx, xy, xy, yy;
            m.components.push_back(c);
        }
        return m;
    };

    bool ended = false;
    while (in >> word) {
        if (word == "end") {
            ended = true;
            break;
        }
        if (word == "token") {
            std::size_t id = 0;
            std::string kind;
            if (!(in >> id >> kind) || id >= vocab) bad("token line");
            w.tokens[id] = parse_token_kind(kind);
        } else if (word == "entry") {
            KnowledgeEntry e;
            std::string cat, found;
            if (!(in >> e.entry_id >> cat >> e.implicit_id >> e.explicit_id >> found)) bad("entry line");
            e.category = parse_knowledge_category(cat);
            std::istringstream fs(found);
            std::string item;
            while (std::getline(fs, item, ',')) e.found.push_back(static_cast<TokenId>(std::stoul(item)));
            w.entries.push_back(std::move(e));
        } else if (word == "mixture") {
            std::string role;
            TokenId id = 0;
            std::size_t n = 0;
            if (!(in >> role >> id >> n)) bad("mixture line");
            if (role == "target")
                w.target_of.emplace(id, read_components(n));
            else if (role == "distractor")
                w.distractor_of.emplace(id, read_components(n));
            else
                bad("mixture role " + role);
        } else if (word == "bias") {
            TokenId id = 0;
            PretrainBias b;
            std::size_t n = 0;
            if (!(in >> id >> b.weight >> n)) bad("bias line");
            b.mode = read_components(n);
            w.bias_of.emplace(id, std::move(b));
        } else {
            bad("unexpected keyword '" + word + "'");
        }
    }
    if (!ended) bad("truncated (no end marker)");
    try {
        validate_world(w);
    } catch (const ContractViolation& e) {
        throw InvalidArgument(e.what());
    }
    return w;
}

void save_world(const WorldSpec& world, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << world_to_text(world);
    if (!out) throw IoError("write failed: " + path.string());
}

WorldSpec load_world(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return world_from_text(ss.str());
}

}  // namespace erudiff
