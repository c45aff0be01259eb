#include "erudiff/evalsuite.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

namespace erudiff {

namespace {

struct ComponentOwner {
    Vec2 mean;
    const MixtureSpec* owner;
};

std::vector<ComponentOwner> component_index(const WorldSpec& w) {
    std::vector<ComponentOwner> out;
    auto add = [&](const MixtureSpec& m) {
        for (const auto& c : m.components) out.push_back({c.mean, &m});
    };
    for (const auto& [id, m] : w.target_of) add(m);
    for (const auto& [id, m] : w.distractor_of) add(m);
    for (const auto& [id, b] : w.bias_of) add(b.mode);
    return out;
}

// Sum of k(a_i, b_j) over all pairs; when `same` the sets are identical and symmetry is used.
double kernel_sum(const Points& a, const Points& b, double inv_two_h2, bool same) {
    double acc = 0.0;
    if (same) {
        const Eigen::Index n = a.cols();
        for (Eigen::Index i = 0; i < n; ++i) {
            double row = 0.0;
            for (Eigen::Index j = i + 1; j < n; ++j) row += std::exp(-(a.col(i) - a.col(j)).squaredNorm() * inv_two_h2);
            acc += row;
        }
        return 2.0 * acc + static_cast<double>(n);
    }
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
        double row = 0.0;
        for (Eigen::Index j = 0; j < b.cols(); ++j) row += std::exp(-(a.col(i) - b.col(j)).squaredNorm() * inv_two_h2);
        acc += row;
    }
    return acc;
}

}  // namespace

// ---------------------------------------------------------------------------
// MMD

double median_pairwise_distance(const Points& pts) {
    const Eigen::Index n = pts.cols();
    require(n >= 2, "median_pairwise_distance: need at least two points");
    const std::uint64_t pairs = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(n - 1) / 2;

    auto for_each_pair = [&](auto&& fn) {
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = i + 1; j < n; ++j) fn((pts.col(i) - pts.col(j)).squaredNorm());
    };

    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for_each_pair([&](double d2) {
        lo = std::min(lo, d2);
        hi = std::max(hi, d2);
    });
    if (hi == lo) return std::sqrt(lo);

    // Exact selection without materialising all pairs: bucket the squared distances, then sort
    // only the buckets that hold the middle rank(s).
    constexpr std::size_t kBuckets = 1u << 16;
    const double scale = static_cast<double>(kBuckets) / (hi - lo);
    auto bucket_of = [&](double d2) {
        return std::min(kBuckets - 1, static_cast<std::size_t>((d2 - lo) * scale));
    };
    std::vector<std::uint64_t> hist(kBuckets, 0);
    for_each_pair([&](double d2) { ++hist[bucket_of(d2)]; });

    const std::uint64_t k_hi = pairs / 2;
    const std::uint64_t k_lo = pairs % 2 == 1 ? k_hi : k_hi - 1;
    std::uint64_t below = 0, cum = 0;
    std::size_t b_lo = 0, b_hi = 0;
    bool found_lo = false;
    for (std::size_t b = 0; b < kBuckets; ++b) {
        if (!found_lo && cum + hist[b] > k_lo) {
            b_lo = b;
            below = cum;
            found_lo = true;
        }
        if (cum + hist[b] > k_hi) {
            b_hi = b;
            break;
        }
        cum += hist[b];
    }
    std::vector<double> middle;
    for_each_pair([&](double d2) {
        const std::size_t b = bucket_of(d2);
        if (b >= b_lo && b <= b_hi) middle.push_back(d2);
    });
    std::sort(middle.begin(), middle.end());
    const double d_lo = std::sqrt(middle[static_cast<std::size_t>(k_lo - below)]);
    const double d_hi = std::sqrt(middle[static_cast<std::size_t>(k_hi - below)]);
    return 0.5 * (d_lo + d_hi);
}

MmdResult mmd2(const Points& a, const Points& b, std::optional<double> bandwidth) {
    require(a.cols() >= 1 && b.cols() >= 1, "mmd2: both sample sets must be non-empty");
    MmdResult r;
    if (bandwidth) {
        require(*bandwidth > 0.0, "mmd2: bandwidth must be positive");
        r.bandwidth = *bandwidth;
    } else {
        Points pooled(2, a.cols() + b.cols());
        pooled << a, b;
        r.bandwidth = median_pairwise_distance(pooled);
        if (!(r.bandwidth > 0.0)) {
            r.bandwidth = 1.0;
            r.bandwidth_fallback = true;
        }
    }
    const double inv = 1.0 / (2.0 * r.bandwidth * r.bandwidth);
    const double na = static_cast<double>(a.cols()), nb = static_cast<double>(b.cols());
    // Identical inputs give exactly zero regardless of floating-point summation order.
    if (a.cols() == b.cols() && a == b) return r;
    r.value = kernel_sum(a, a, inv, true) / (na * na) + kernel_sum(b, b, inv, true) / (nb * nb) -
              2.0 * kernel_sum(a, b, inv, false) / (na * nb);
    return r;
}

// ---------------------------------------------------------------------------
// Knowledge and forgetting

double knowledge_score(const WorldSpec& world, TokenId condition, const Points& samples) {
    require(samples.cols() >= 1, "knowledge_score: empty sample set");
    const MixtureSpec* fact = &world.fact_of(condition);
    const auto index = component_index(world);
    Eigen::Index hits = 0;
    for (Eigen::Index j = 0; j < samples.cols(); ++j) {
        double best = std::numeric_limits<double>::infinity();
        const MixtureSpec* owner = nullptr;
        for (const auto& c : index) {
            const double d = (samples.col(j) - c.mean).squaredNorm();
            if (d < best) {
                best = d;
                owner = c.owner;
            }
        }
        if (owner == fact) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.cols());
}

double forgetting_score(const WorldSpec& world, const ModelParams& before, const ModelParams& after,
                        const Schedule& schedule, Eigen::Index n, std::uint64_t rng_seed) {
    if (!before.compatible(after)) throw InvalidArgument("forgetting_score: incompatible models");
    const auto found = world.tokens_of(TokenKind::foundational_token);
    if (found.empty()) throw InvalidArgument("forgetting_score: world has no foundational tokens");
    double total = 0.0;
    for (TokenId f : found) {
        const std::uint64_t gen_seed = derive_seed(rng_seed, f);
        const Points target = sample_target(world, f, n, derive_seed(rng_seed, 0x10000 + f));
        const Points b = generate<double>(field_of(before), f, schedule, n, gen_seed);
        const Points a = generate<double>(field_of(after), f, schedule, n, gen_seed);
        total += std::max(0.0, mmd2(a, target).value - mmd2(b, target).value);
    }
    return total / static_cast<double>(found.size());
}

// ---------------------------------------------------------------------------
// Report

MetricsReport evaluate_model(const WorldSpec& world, const ModelParams& model, const Schedule& schedule,
                             Eigen::Index samples, std::uint64_t rng_seed, int threads,
                             std::optional<TokenKind> only_kind) {
    require(samples >= 1, "evaluate_model: samples must be >= 1");
    MetricsReport report;
    report.world_seed = world.seed;
    report.samples = samples;
    report.metric_seed = rng_seed;

    std::vector<TokenId> conds;
    for (TokenId c = 0; c < world.vocab_size(); ++c) {
        const TokenKind k = world.kind(c);
        if (k == TokenKind::null_token) continue;
        if (only_kind && *only_kind != k) continue;
        conds.push_back(c);
    }
    report.rows.resize(conds.size());
    std::vector<Points> generated(conds.size());

    auto work = [&](std::size_t i) {
        const TokenId c = conds[i];
        const Points gen = generate<double>(field_of(model), c, schedule, samples, derive_seed(rng_seed, c));
        const Points target = sample_target(world, c, samples, derive_seed(rng_seed, 0x10000 + c));
        ConditionMetrics& row = report.rows[i];
        row.condition = c;
        row.kind = world.kind(c);
        row.knowledge_score = knowledge_score(world, c, gen);
        row.mmd2 = mmd2(gen, target).value;
        double reward = 0.0;
        for (Eigen::Index j = 0; j < gen.cols(); ++j) reward += reward_oracle(world, c, gen.col(j));
        row.mean_reward = reward / static_cast<double>(gen.cols());
        generated[i] = gen;
    };

    const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(conds.size())));
    if (n_threads == 1) {
        for (std::size_t i = 0; i < conds.size(); ++i) work(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < conds.size(); i = next++) work(i);
            });
    }

    auto mean_of = [&](TokenKind k, auto field) {
        double s = 0.0;
        int n = 0;
        for (const auto& r : report.rows)
            if (r.kind == k) {
                s += field(r);
                ++n;
            }
        return n ? s / n : 0.0;
    };
    auto ks = [](const ConditionMetrics& r) { return r.knowledge_score; };
    report.implicit_mean = mean_of(TokenKind::implicit_token, ks);
    report.explicit_mean = mean_of(TokenKind::explicit_token, ks);
    report.foundational_mean = mean_of(TokenKind::foundational_token, ks);
    report.implicit_mmd2_mean = mean_of(TokenKind::implicit_token, [](const ConditionMetrics& r) { return r.mmd2; });
    for (std::size_t i = 0; i < conds.size(); ++i) report.generated.emplace(conds[i], std::move(generated[i]));
    return report;
}

double mean_knowledge(const WorldSpec& world, const ModelParams& model, const Schedule& schedule, TokenKind kind,
                      Eigen::Index samples, std::uint64_t rng_seed) {
    const auto ids = world.tokens_of(kind);
    require(!ids.empty(), "mean_knowledge: no conditions of the requested kind");
    double total = 0.0;
    for (TokenId c : ids)
        total += knowledge_score(world, c,
                                 generate<double>(field_of(model), c, schedule, samples, derive_seed(rng_seed, c)));
    return total / static_cast<double>(ids.size());
}

double implicit_knowledge(const WorldSpec& world, const ModelParams& model, const Schedule& schedule,
                          Eigen::Index samples, std::uint64_t rng_seed) {
    return mean_knowledge(world, model, schedule, TokenKind::implicit_token, samples, rng_seed);
}

std::string report_csv(const MetricsReport& report) {
    std::ostringstream os;
    os << "condition_id,kind,knowledge_score,mmd2,mean_reward\n";
    char buf[160];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof buf, "%u,%s,%.9g,%.9g,%.9g\n", r.condition, std::string(to_string(r.kind)).c_str(),
                      r.knowledge_score, r.mmd2, r.mean_reward);
        os << buf;
    }
    return os.str();
}

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                          "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string report_svg(const WorldSpec& world, const MetricsReport& report,
                       const std::vector<ConvergenceCurve>& curves) {
    // Scatter panel occupies y in [0, 700), convergence panel y in [700, 1000).
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& c : component_index(world)) {
        lo = std::min({lo, c.mean.x(), c.mean.y()});
        hi = std::max({hi, c.mean.x(), c.mean.y()});
    }
    lo -= 0.75;
    hi += 0.75;
    const double px0 = 170.0, py0 = 20.0, size = 660.0;
    auto sx = [&](double x) { return px0 + (x - lo) / (hi - lo) * size; };
    auto sy = [&](double y) { return py0 + (hi - y) / (hi - lo) * size; };

    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"1000\" height=\"1000\" viewBox=\"0 0 1000 1000\">\n";
    os << "<g id=\"background\"><rect x=\"0\" y=\"0\" width=\"1000\" height=\"1000\" fill=\"white\"/></g>\n";

    os << "<g id=\"grid\" stroke=\"#dddddd\" stroke-width=\"1\">\n";
    for (double v = std::ceil(lo); v <= hi; v += 1.0) {
        os << "<line x1=\"" << num(sx(v)) << "\" y1=\"" << num(py0) << "\" x2=\"" << num(sx(v)) << "\" y2=\""
           << num(py0 + size) << "\"/>\n";
        os << "<line x1=\"" << num(px0) << "\" y1=\"" << num(sy(v)) << "\" x2=\"" << num(px0 + size) << "\" y2=\""
           << num(sy(v)) << "\"/>\n";
    }
    os << "</g>\n";

    os << "<g id=\"contours\" fill=\"none\">\n";
    auto ellipses = [&](const MixtureSpec& m, const char* stroke) {
        for (const auto& c : m.components) {
            const Eigen::SelfAdjointEigenSolver<Mat2> es(c.cov);
            const Vec2 major = es.eigenvectors().col(1);
            const double angle = -std::atan2(major.y(), major.x()) * 180.0 / 3.14159265358979323846;
            for (double k : {1.0, 2.0}) {
                const double rx = k * std::sqrt(es.eigenvalues()(1)) / (hi - lo) * size;
                const double ry = k * std::sqrt(es.eigenvalues()(0)) / (hi - lo) * size;
                os << "<ellipse cx=\"" << num(sx(c.mean.x())) << "\" cy=\"" << num(sy(c.mean.y())) << "\" rx=\""
                   << num(rx) << "\" ry=\"" << num(ry) << "\" transform=\"rotate(" << num(angle) << ' '
                   << num(sx(c.mean.x())) << ' ' << num(sy(c.mean.y())) << ")\" stroke=\"" << stroke << "\"/>\n";
            }
        }
    };
    for (const auto& [id, m] : world.target_of) ellipses(m, "#333333");
    for (const auto& [id, m] : world.distractor_of) ellipses(m, "#bb3333");
    for (const auto& [id, b] : world.bias_of) ellipses(b.mode, "#bb33bb");
    os << "</g>\n";

    os << "<g id=\"samples\" stroke=\"none\" fill-opacity=\"0.5\">\n";
    std::size_t colour = 0;
    constexpr Eigen::Index kMaxDots = 400;
    for (const auto& [id, pts] : report.generated) {
        const char* fill = kPalette[colour++ % std::size(kPalette)];
        os << "<g id=\"condition-" << id << "\" fill=\"" << fill << "\">\n";
        const Eigen::Index step = std::max<Eigen::Index>(1, pts.cols() / kMaxDots);
        for (Eigen::Index j = 0; j < pts.cols(); j += step) {
            const double x = sx(pts(0, j)), y = sy(pts(1, j));
            if (x < px0 || x > px0 + size || y < py0 || y > py0 + size) continue;
            os << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"1.5\"/>\n";
        }
        os << "</g>\n";
    }
    os << "</g>\n";

    os << "<g id=\"legend\" font-family=\"sans-serif\" font-size=\"11\">\n";
    colour = 0;
    double ly = 30.0;
    for (const auto& r : report.rows) {
        if (!report.generated.count(r.condition)) continue;
        const char* fill = kPalette[colour++ % std::size(kPalette)];
        if (ly > 680.0) continue;
        os << "<rect x=\"10\" y=\"" << num(ly - 8) << "\" width=\"8\" height=\"8\" fill=\"" << fill << "\"/>";
        os << "<text x=\"22\" y=\"" << num(ly) << "\">" << r.condition << ' ' << to_string(r.kind) << " k="
           << num(r.knowledge_score) << "</text>\n";
        ly += 14.0;
    }
    os << "</g>\n";

    // Convergence panel.
    const double cx0 = 90.0, cy0 = 730.0, cw = 860.0, ch = 220.0;
    long max_iter = 1;
    for (const auto& c : curves)
        for (const auto& p : c.points) max_iter = std::max(max_iter, p.first);
    os << "<g id=\"convergence\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect x=\"" << num(cx0) << "\" y=\"" << num(cy0) << "\" width=\"" << num(cw) << "\" height=\"" << num(ch)
       << "\" fill=\"none\" stroke=\"#333333\"/>\n";
    os << "<text x=\"" << num(cx0) << "\" y=\"" << num(cy0 - 6) << "\">implicit knowledge score vs iteration</text>\n";
    os << "<text x=\"" << num(cx0 - 30) << "\" y=\"" << num(cy0 + 4) << "\">1</text>\n";
    os << "<text x=\"" << num(cx0 - 30) << "\" y=\"" << num(cy0 + ch) << "\">0</text>\n";
    os << "<text x=\"" << num(cx0 + cw - 40) << "\" y=\"" << num(cy0 + ch + 16) << "\">" << max_iter << "</text>\n";
    colour = 0;
    for (const auto& c : curves) {
        const char* stroke = kPalette[colour++ % std::size(kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"2\" points=\"";
        for (const auto& [it, score] : c.points)
            os << num(cx0 + cw * static_cast<double>(it) / static_cast<double>(max_iter)) << ','
               << num(cy0 + ch * (1.0 - std::clamp(score, 0.0, 1.0))) << ' ';
        os << "\"/>\n";
        os << "<text x=\"" << num(cx0 + 10) << "\" y=\"" << num(cy0 + 16 + 14.0 * (colour - 1)) << "\" fill=\""
           << stroke << "\">" << xml_escape(c.label) << "</text>\n";
    }
    os << "</g>\n</svg>\n";
    return os.str();
}

void export_report(const WorldSpec& world, const MetricsReport& report, const std::filesystem::path& csv_path,
                   const std::filesystem::path& svg_path, const std::vector<ConvergenceCurve>& curves) {
    auto write = [](const std::filesystem::path& p, const std::string& text) {
        std::ofstream out(p, std::ios::binary);
        if (!out) throw IoError("cannot open " + p.string() + " for writing");
        out << text;
        if (!out) throw IoError("write failed: " + p.string());
    };
    write(csv_path, report_csv(report));
    if (!svg_path.empty()) write(svg_path, report_svg(world, report, curves));
}

}  // namespace erudiff
