#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace erudiff {

template <typename Scalar>
using Vector2 = Eigen::Matrix<Scalar, 2, 1>;

template <typename Scalar>
using Matrix2 = Eigen::Matrix<Scalar, 2, 2>;

/// Batch of 2-vectors, one sample per column.
template <typename Scalar>
using Matrix2X = Eigen::Matrix<Scalar, 2, Eigen::Dynamic>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vec2 = Vector2<double>;
using Mat2 = Matrix2<double>;
using Points = Matrix2X<double>;

using TokenId = std::uint32_t;

using Rng = std::mt19937_64;

// Error categories map onto CLI exit codes (2, 3, 4).
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ContractViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteError : public ContractViolation {
public:
    using ContractViolation::ContractViolation;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvalidArgument(what);
}

/// Splitmix64 finalizer; turns (base seed, stream index) into an independent seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    return Rng(derive_seed(seed, stream));
}

template <typename Scalar>
Matrix2X<Scalar> standard_normal(Eigen::Index n, Rng& rng) {
    std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));
    Matrix2X<Scalar> out(2, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        out(0, j) = normal(rng);
        out(1, j) = normal(rng);
    }
    return out;
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace erudiff
