#pragma once

#include "idp/types.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("idp-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Central-difference gradient of `loss` with respect to every entry of `param`.
template <typename F>
idp::Mat<double> numeric_gradient(idp::Mat<double>& param, F&& loss, double h = 1e-5)
{
    idp::Mat<double> g(param.rows(), param.cols());
    for (Eigen::Index i = 0; i < param.size(); ++i) {
        const double keep = param.data()[i];
        param.data()[i] = keep + h;
        const double up = loss();
        param.data()[i] = keep - h;
        const double down = loss();
        param.data()[i] = keep;
        g.data()[i] = (up - down) / (2 * h);
    }
    return g;
}

// ||a - n|| / max(||a||, ||n||), zero when both vanish.
inline double relative_error(const idp::Mat<double>& analytic, const idp::Mat<double>& numeric)
{
    const double scale = std::max(analytic.norm(), numeric.norm());
    if (scale < 1e-12)
        return 0.0;
    return (analytic - numeric).norm() / scale;
}

inline idp::Mat<double> random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    idp::Mat<double> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = n(rng);
    return m;
}

} // namespace testing
