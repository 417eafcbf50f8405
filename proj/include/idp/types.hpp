#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace idp {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using ItemIndex = std::int32_t;
using UserIndex = std::int32_t;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

enum class Similarity { cosine, dot };

/// Train mode enables dropout; infer mode is deterministic.
enum class Mode { train, infer };

Similarity parse_similarity(const std::string& name);
std::string to_string(Similarity s);

} // namespace idp
