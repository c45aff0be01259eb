#include "erudiff/flowcore.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace erudiff {

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "silu"; }

Activation parse_activation(const std::string& text) {
    if (text == "silu") return Activation::silu;
    if (text == "tanh") return Activation::tanh;
    throw InvalidArgument("unknown activation '" + text + "'");
}

void NetworkHyper::validate() const {
    require(d_embed >= 1, "d_embed must be >= 1");
    require(vocab >= 1, "vocab must be >= 1");
    require(time_freqs <= 16, "time_freqs must be <= 16");
    for (auto w : widths) require(w >= 1, "layer widths must be >= 1");
    require(activation == Activation::silu || activation == Activation::tanh, "unknown activation");
}

Schedule Schedule::uniform(int t_inference, double clamp_lo, double clamp_hi) {
    Schedule s;
    s.t_inference = t_inference;
    s.clamp_lo = clamp_lo;
    s.clamp_hi = clamp_hi;
    require(t_inference >= 1, "t_inference must be >= 1");
    for (int k = 0; k <= t_inference; ++k) s.taus.push_back(1.0 - static_cast<double>(k) / t_inference);
    s.taus.back() = 0.0;
    s.validate();
    return s;
}

void Schedule::validate() const {
    require(t_inference >= 1, "t_inference must be >= 1");
    require(taus.size() == static_cast<std::size_t>(t_inference) + 1, "taus must hold t_inference + 1 values");
    require(taus.front() == 1.0 && taus.back() == 0.0, "taus must run from 1 to 0");
    for (std::size_t k = 1; k < taus.size(); ++k) require(taus[k] < taus[k - 1], "taus must strictly decrease");
    require(clamp_lo > 0.0 && clamp_lo <= clamp_hi && clamp_hi < 1.0, "clamps must satisfy 0 < lo <= hi < 1");
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[4] = {'E', 'R', 'U', 'D'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        if (pos_ + 4 > bytes_.size()) throw InvalidArgument("checkpoint truncated");
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        pos_ += 4;
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }
    std::size_t pos() const { return pos_; }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string checkpoint_bytes(const ModelParams& params) {
    if (!params.all_finite()) throw InvalidArgument("refusing to save non-finite parameters");
    const NetworkHyper& h = params.hyper();
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, h.d_embed);
    put_u32(out, static_cast<std::uint32_t>(h.widths.size()));
    for (auto w : h.widths) put_u32(out, w);
    put_u32(out, h.vocab);
    put_u32(out, h.time_freqs);
    put_u32(out, static_cast<std::uint32_t>(h.activation));
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        const float f = static_cast<float>(params.values()[i]);
        if (!std::isfinite(f)) throw InvalidArgument("parameter overflows float32");
        put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
}

ModelParams checkpoint_from_bytes(const std::string& bytes) {
    if (bytes.size() < 4 || bytes.compare(0, 4, kMagic, 4) != 0) throw InvalidArgument("checkpoint magic mismatch");
    Reader r(bytes);
    r.u32();  // magic
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw InvalidArgument("unsupported checkpoint version " + std::to_string(version));
    NetworkHyper h;
    h.d_embed = r.u32();
    const std::uint32_t n_hidden = r.u32();
    if (n_hidden > 64) throw InvalidArgument("checkpoint declares implausible layer count");
    h.widths.clear();
    for (std::uint32_t i = 0; i < n_hidden; ++i) h.widths.push_back(r.u32());
    h.vocab = r.u32();
    h.time_freqs = r.u32();
    const std::uint32_t act = r.u32();
    if (act > 1) throw InvalidArgument("checkpoint activation tag unknown");
    h.activation = static_cast<Activation>(act);
    h.validate();

    ModelParams p(h);
    const std::size_t expected = r.pos() + 4 * static_cast<std::size_t>(p.size());
    if (bytes.size() < expected) throw InvalidArgument("checkpoint truncated");
    if (bytes.size() > expected) throw InvalidArgument("checkpoint has trailing bytes");
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const float f = std::bit_cast<float>(r.u32());
        if (!std::isfinite(f)) throw InvalidArgument("checkpoint contains non-finite parameters");
        p.values()[i] = f;
    }
    return p;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    const std::string bytes = checkpoint_bytes(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return checkpoint_from_bytes(ss.str());
}

}  // namespace erudiff
