#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "erudiff/core.hpp"

namespace erudiff {

enum class Activation : std::uint32_t { silu = 0, tanh = 1 };

std::string to_string(Activation a);
Activation parse_activation(const std::string& text);

/// Shape of the conditional velocity network.
///
/// Input layout per sample: [x (2) | sin/cos time features (2 * time_freqs) | condition embedding (d_embed)].
/// Hidden layers use `activation`; the output layer is linear with 2 units.
struct NetworkHyper {
    std::uint32_t d_embed = 8;
    std::vector<std::uint32_t> widths = {128, 128, 128};
    std::uint32_t vocab = 0;
    std::uint32_t time_freqs = 4;
    Activation activation = Activation::silu;

    std::uint32_t input_dim() const { return 2 + 2 * time_freqs + d_embed; }
    std::size_t num_layers() const { return widths.size() + 1; }
    std::uint32_t layer_in(std::size_t l) const { return l == 0 ? input_dim() : widths[l - 1]; }
    std::uint32_t layer_out(std::size_t l) const { return l == widths.size() ? 2u : widths[l]; }
    void validate() const;

    bool operator==(const NetworkHyper&) const = default;
};

/// All trainable parameters stored in one flat vector.
///
/// Flat order (also the checkpoint order): embedding rows, then every layer's weight matrix
/// (row-major, out x in) from input to output, then every layer's bias vector.
template <typename Scalar>
class BasicModelParams {
public:
    using Mat = RowMatrixX<Scalar>;
    using MatMap = Eigen::Map<Mat>;
    using ConstMatMap = Eigen::Map<const Mat>;
    using VecMap = Eigen::Map<VectorX<Scalar>>;
    using ConstVecMap = Eigen::Map<const VectorX<Scalar>>;

    BasicModelParams() = default;

    explicit BasicModelParams(NetworkHyper hyper) : hyper_(std::move(hyper)) {
        hyper_.validate();
        Eigen::Index offset = static_cast<Eigen::Index>(hyper_.vocab) * hyper_.d_embed;
        for (std::size_t l = 0; l < hyper_.num_layers(); ++l) {
            weight_offset_.push_back(offset);
            offset += static_cast<Eigen::Index>(hyper_.layer_out(l)) * hyper_.layer_in(l);
        }
        for (std::size_t l = 0; l < hyper_.num_layers(); ++l) {
            bias_offset_.push_back(offset);
            offset += hyper_.layer_out(l);
        }
        values_ = VectorX<Scalar>::Zero(offset);
    }

    const NetworkHyper& hyper() const { return hyper_; }
    Eigen::Index size() const { return values_.size(); }
    VectorX<Scalar>& values() { return values_; }
    const VectorX<Scalar>& values() const { return values_; }

    MatMap embedding() { return MatMap(values_.data(), hyper_.vocab, hyper_.d_embed); }
    ConstMatMap embedding() const { return ConstMatMap(values_.data(), hyper_.vocab, hyper_.d_embed); }

    MatMap weight(std::size_t l) {
        return MatMap(values_.data() + weight_offset_[l], hyper_.layer_out(l), hyper_.layer_in(l));
    }
    ConstMatMap weight(std::size_t l) const {
        return ConstMatMap(values_.data() + weight_offset_[l], hyper_.layer_out(l), hyper_.layer_in(l));
    }
    VecMap bias(std::size_t l) { return VecMap(values_.data() + bias_offset_[l], hyper_.layer_out(l)); }
    ConstVecMap bias(std::size_t l) const {
        return ConstVecMap(values_.data() + bias_offset_[l], hyper_.layer_out(l));
    }

    bool compatible(const BasicModelParams& other) const { return hyper_ == other.hyper_; }
    bool all_finite() const { return values_.allFinite(); }
    void set_zero() { values_.setZero(); }

    template <typename Other>
    BasicModelParams<Other> cast() const {
        BasicModelParams<Other> out(hyper_);
        out.values() = values_.template cast<Other>();
        return out;
    }

    bool operator==(const BasicModelParams& o) const { return hyper_ == o.hyper_ && values_ == o.values_; }

private:
    NetworkHyper hyper_;
    VectorX<Scalar> values_;
    std::vector<Eigen::Index> weight_offset_;
    std::vector<Eigen::Index> bias_offset_;
};

using ModelParams = BasicModelParams<double>;

/// Deterministic He-uniform hidden weights, Glorot-uniform output weights, zero biases,
/// unit-variance uniform embeddings.
template <typename Scalar>
BasicModelParams<Scalar> init_params(const NetworkHyper& hyper, std::uint64_t seed) {
    BasicModelParams<Scalar> p(hyper);
    Rng rng = make_rng(seed, 0x1417);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    auto emb = p.embedding();
    for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = static_cast<Scalar>(std::sqrt(3.0) * unit(rng));
    for (std::size_t l = 0; l < hyper.num_layers(); ++l) {
        auto w = p.weight(l);
        const bool hidden = l < hyper.widths.size();
        const double a = hidden ? std::sqrt(6.0 / hyper.layer_in(l))
                                : std::sqrt(6.0 / (hyper.layer_in(l) + hyper.layer_out(l)));
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(a * unit(rng));
    }
    return p;
}

/// Activations retained by a forward pass for the reverse sweep.
template <typename Scalar>
struct ForwardCache {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    Mat input;
    std::vector<Mat> pre;   // z_l = W_l h_{l-1} + b_l, hidden layers only
    std::vector<Mat> post;  // h_l = act(z_l)
    std::vector<TokenId> conditions;
};

namespace detail {

template <typename Scalar>
Scalar sigmoid(Scalar z) {
    return Scalar(1) / (Scalar(1) + std::exp(-z));
}

template <typename Derived>
auto activate(const Eigen::MatrixBase<Derived>& z, Activation a) {
    using Scalar = typename Derived::Scalar;
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    if (a == Activation::tanh) return Mat(z.array().tanh().matrix());
    return Mat(z.unaryExpr([](Scalar v) { return v * sigmoid(v); }));
}

template <typename Derived>
auto activate_grad(const Eigen::MatrixBase<Derived>& z, Activation a) {
    using Scalar = typename Derived::Scalar;
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    if (a == Activation::tanh) return Mat((Scalar(1) - z.array().tanh().square()).matrix());
    return Mat(z.unaryExpr([](Scalar v) {
        const Scalar s = sigmoid(v);
        return s * (Scalar(1) + v * (Scalar(1) - s));
    }));
}

inline TokenId condition_at(std::span<const TokenId> conds, Eigen::Index j) {
    return conds.size() == 1 ? conds[0] : conds[static_cast<std::size_t>(j)];
}

}  // namespace detail

/// Evaluates the velocity network on a batch. `t` and `conds` hold either one entry (broadcast)
/// or one entry per column of `x`.
template <typename Scalar>
Matrix2X<Scalar> network_forward(const BasicModelParams<Scalar>& params, const Matrix2X<Scalar>& x,
                                 std::span<const Scalar> t, std::span<const TokenId> conds,
                                 ForwardCache<Scalar>* cache = nullptr) {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    const NetworkHyper& h = params.hyper();
    const Eigen::Index batch = x.cols();
    require(!t.empty() && (t.size() == 1 || static_cast<Eigen::Index>(t.size()) == batch),
            "network_forward: time vector size mismatch");
    require(!conds.empty() && (conds.size() == 1 || static_cast<Eigen::Index>(conds.size()) == batch),
            "network_forward: condition vector size mismatch");
    for (TokenId c : conds)
        if (c >= h.vocab) throw InvalidArgument("condition id " + std::to_string(c) + " outside vocabulary");

    Mat in(h.input_dim(), batch);
    in.topRows(2) = x;
    const auto emb = params.embedding();
    for (Eigen::Index j = 0; j < batch; ++j) {
        const Scalar tj = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(j)];
        for (std::uint32_t k = 0; k < h.time_freqs; ++k) {
            const Scalar w = static_cast<Scalar>(std::numbers::pi * double(1u << k));
            in(2 + 2 * k, j) = std::sin(w * tj);
            in(3 + 2 * k, j) = std::cos(w * tj);
        }
        in.col(j).tail(h.d_embed) = emb.row(detail::condition_at(conds, j)).transpose();
    }

    const std::size_t hidden = h.widths.size();
    Mat act = in;
    if (cache) {
        cache->pre.clear();
        cache->post.clear();
        cache->conditions.assign(conds.begin(), conds.end());
    }
    for (std::size_t l = 0; l < hidden; ++l) {
        Mat z = params.weight(l) * act;
        z.colwise() += params.bias(l);
        Mat a = detail::activate(z, h.activation);
        if (cache) {
            cache->pre.push_back(std::move(z));
            cache->post.push_back(a);
        }
        act = std::move(a);
    }
    Matrix2X<Scalar> out = params.weight(hidden) * act;
    out.colwise() += params.bias(hidden);
    if (cache) cache->input = std::move(in);
    return out;
}

/// Reverse sweep: accumulates dL/dtheta into `grad` given dL/dv for every output column.
/// Optionally writes dL/dx.
template <typename Scalar>
void network_backward(const BasicModelParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                      const Matrix2X<Scalar>& grad_out, BasicModelParams<Scalar>& grad,
                      Matrix2X<Scalar>* grad_x = nullptr) {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    const NetworkHyper& h = params.hyper();
    const std::size_t hidden = h.widths.size();
    require(grad.compatible(params), "network_backward: gradient shape mismatch");

    const Mat& last_act = hidden == 0 ? cache.input : cache.post[hidden - 1];
    grad.weight(hidden).noalias() += grad_out * last_act.transpose();
    grad.bias(hidden) += grad_out.rowwise().sum();
    Mat delta = params.weight(hidden).transpose() * grad_out;

    for (std::size_t l = hidden; l-- > 0;) {
        delta.array() *= detail::activate_grad(cache.pre[l], h.activation).array();
        const Mat& below = l == 0 ? cache.input : cache.post[l - 1];
        grad.weight(l).noalias() += delta * below.transpose();
        grad.bias(l) += delta.rowwise().sum();
        delta = params.weight(l).transpose() * delta;
    }

    auto emb = grad.embedding();
    const Eigen::Index e0 = 2 + 2 * static_cast<Eigen::Index>(h.time_freqs);
    const std::span<const TokenId> conds(cache.conditions);
    for (Eigen::Index j = 0; j < delta.cols(); ++j)
        emb.row(detail::condition_at(conds, j)) += delta.col(j).segment(e0, h.d_embed).transpose();
    if (grad_x) *grad_x = delta.topRows(2);
}

}  // namespace erudiff
