#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "erudiff/core.hpp"

namespace erudiff {

enum class TokenKind { null_token, implicit_token, explicit_token, foundational_token };

std::string_view to_string(TokenKind kind);
TokenKind parse_token_kind(std::string_view text);

struct ConditionToken {
    TokenId id = 0;
    TokenKind kind = TokenKind::null_token;
};

enum class KnowledgeCategory { cultural, spatiotemporal, science };

std::string_view to_string(KnowledgeCategory category);
KnowledgeCategory parse_knowledge_category(std::string_view text);

/// One (implicit, explicit, foundational) condition triplet.
struct KnowledgeEntry {
    int entry_id = 0;
    TokenId implicit_id = 0;
    TokenId explicit_id = 0;
    std::vector<TokenId> found;
    KnowledgeCategory category = KnowledgeCategory::science;
};

struct MixtureComponent {
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Identity();
    double weight = 1.0;
};

struct MixtureSpec {
    std::vector<MixtureComponent> components;

    /// log of the mixture density at x.
    double log_density(const Vec2& x) const;
    /// i.i.d. draws, one per column.
    Points sample(Eigen::Index n, Rng& rng) const;
    double max_stddev() const;
};

/// Extra pretraining-only mode mixed into an explicit token's data with the given weight.
struct PretrainBias {
    MixtureSpec mode;
    double weight = 0.0;
};

/// Knobs for world generation. Defaults keep every mixture inside one grid cell.
struct WorldOptions {
    double cell_spacing = 1.0;
    double sigma_min = 0.10;
    double sigma_max = 0.15;
    /// Probability that a mixture gets a second component in the same cell.
    double two_component_prob = 0.5;
    /// Distance of each component of a two-component mixture from the cell centre.
    double component_offset = 0.15;
    int max_grid_side = 16;
    /// The first `bias_entries` explicit tokens receive an injected pretraining bias mode.
    int bias_entries = 0;
    double bias_weight = 0.3;
};

/// Which distribution `sample_target` draws from.
enum class SampleSource {
    fact,      ///< target_of (implicit tokens: the paired explicit fact)
    pretrain,  ///< what the pretrained reference model was taught
};

struct WorldSpec {
    std::uint64_t seed = 0;
    int n_found_per_entry = 0;
    /// Token table; index is the token id.
    std::vector<TokenKind> tokens;
    std::vector<KnowledgeEntry> entries;
    std::map<TokenId, MixtureSpec> target_of;
    std::map<TokenId, MixtureSpec> distractor_of;
    std::map<TokenId, PretrainBias> bias_of;

    std::size_t vocab_size() const { return tokens.size(); }
    TokenId null_id() const;
    TokenKind kind(TokenId id) const;
    ConditionToken token(TokenId id) const { return {id, kind(id)}; }
    std::vector<TokenId> tokens_of(TokenKind kind) const;
    const KnowledgeEntry& entry_of(TokenId implicit_or_explicit) const;

    /// Fact mixture for a token. Implicit tokens resolve to their paired explicit target.
    const MixtureSpec& fact_of(TokenId id) const;

    bool operator==(const WorldSpec&) const;
};

bool operator==(const MixtureComponent& a, const MixtureComponent& b);
bool operator==(const MixtureSpec& a, const MixtureSpec& b);
bool operator==(const PretrainBias& a, const PretrainBias& b);
bool operator==(const KnowledgeEntry& a, const KnowledgeEntry& b);

WorldSpec build_world(int n_entries, int n_found_per_entry, std::uint64_t seed,
                      const WorldOptions& options = {});

Points sample_target(const WorldSpec& world, TokenId token, Eigen::Index n, std::uint64_t rng_seed,
                     SampleSource source = SampleSource::fact);

/// Log-density of x under the token's fact mixture.
double reward_oracle(const WorldSpec& world, TokenId token, const Vec2& x);

/// Checks every structural invariant; throws ContractViolation with the first failure.
void validate_world(const WorldSpec& world);

void save_world(const WorldSpec& world, const std::filesystem::path& path);
WorldSpec load_world(const std::filesystem::path& path);
std::string world_to_text(const WorldSpec& world);
WorldSpec world_from_text(std::string_view text);

/// Rounds to 9 significant decimal digits, the precision of the world file.
double quantize9(double value);

}  // namespace erudiff
