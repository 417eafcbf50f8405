#pragma once

#include "idp/types.hpp"

#include <cmath>
#include <random>

namespace idp {

// log(1 + exp(x)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x)
{
    if (x > Scalar(0))
        return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x)
{
    if (x >= Scalar(0))
        return Scalar(1) / (Scalar(1) + std::exp(-x));
    const Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
}

// -log sigmoid(x)
template <typename Scalar>
Scalar neg_log_sigmoid(Scalar x)
{
    return softplus(-x);
}

// Exact GELU: x * Phi(x).
template <typename Scalar>
Scalar gelu(Scalar x)
{
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x)
{
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
    const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.3989422804014327);
    return cdf + x * pdf;
}

// Row-wise softmax restricted to columns [0, limit) of each row; the rest are zeroed.
// limit(i) = i + 1 gives a causal mask.
template <typename Scalar>
void causal_softmax_rows(Mat<Scalar>& scores)
{
    const Eigen::Index n = scores.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index width = i + 1;
        auto row = scores.row(i);
        const Scalar max = row.head(width).maxCoeff();
        Scalar sum(0);
        for (Eigen::Index j = 0; j < width; ++j) {
            row(j) = std::exp(row(j) - max);
            sum += row(j);
        }
        row.head(width) /= sum;
        row.tail(n - width).setZero();
    }
}

// Layer normalization over each row, with cached statistics for the backward pass.
template <typename Scalar>
struct LayerNormCache {
    Mat<Scalar> normalized;
    Vec<Scalar> inv_std;
};

template <typename Scalar>
Mat<Scalar> layer_norm_forward(const Mat<Scalar>& x,
                               const RowVec<Scalar>& gain,
                               const RowVec<Scalar>& bias,
                               Scalar eps,
                               LayerNormCache<Scalar>* cache)
{
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    Mat<Scalar> xhat(n, d);
    Vec<Scalar> inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar mean = x.row(i).mean();
        const RowVec<Scalar> centered = x.row(i).array() - mean;
        const Scalar var = centered.squaredNorm() / Scalar(d);
        inv_std(i) = Scalar(1) / std::sqrt(var + eps);
        xhat.row(i) = centered * inv_std(i);
    }
    Mat<Scalar> y = (xhat.array().rowwise() * gain.array()).rowwise() + bias.array();
    if (cache) {
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

// Returns d(loss)/dx and accumulates gain/bias gradients.
template <typename Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy,
                                const RowVec<Scalar>& gain,
                                const LayerNormCache<Scalar>& cache,
                                RowVec<Scalar>& dgain,
                                RowVec<Scalar>& dbias)
{
    const Mat<Scalar>& xhat = cache.normalized;
    dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
    dbias += dy.colwise().sum();
    const Mat<Scalar> dxhat = dy.array().rowwise() * gain.array();
    Mat<Scalar> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const Scalar mean_dxhat = dxhat.row(i).mean();
        const Scalar mean_dxhat_xhat = dxhat.row(i).dot(xhat.row(i)) / Scalar(dy.cols());
        dx.row(i) = cache.inv_std(i)
                    * (dxhat.row(i).array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat)
                          .matrix();
    }
    return dx;
}

// Inverted dropout mask: entries are 0 or 1/(1-rate).
template <typename Scalar, typename Rng>
Mat<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng)
{
    Mat<Scalar> mask(rows, cols);
    if (rate <= 0.0) {
        mask.setOnes();
        return mask;
    }
    std::bernoulli_distribution keep(1.0 - rate);
    const Scalar scale = Scalar(1.0 / (1.0 - rate));
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i)
            mask(i, j) = keep(rng) ? scale : Scalar(0);
    return mask;
}

template <typename Scalar, typename Rng>
void fill_normal(Mat<Scalar>& m, double stddev, Rng& rng)
{
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            m(i, j) = Scalar(dist(rng));
}

template <typename Scalar, typename Rng>
void fill_xavier(Mat<Scalar>& m, Rng& rng)
{
    const double bound = std::sqrt(6.0 / double(m.rows() + m.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            m(i, j) = Scalar(dist(rng));
}

template <typename Scalar>
Scalar similarity(const RowVec<Scalar>& a, const RowVec<Scalar>& b, Similarity kind)
{
    const Scalar dot = a.dot(b);
    if (kind == Similarity::dot)
        return dot;
    const Scalar denom = a.norm() * b.norm();
    return denom > Scalar(0) ? dot / denom : Scalar(0);
}

// Gradient of similarity(a, b) with respect to a.
template <typename Scalar>
RowVec<Scalar> similarity_grad(const RowVec<Scalar>& a, const RowVec<Scalar>& b, Similarity kind)
{
    if (kind == Similarity::dot)
        return b;
    const Scalar na = a.norm();
    const Scalar nb = b.norm();
    if (na == Scalar(0) || nb == Scalar(0))
        return RowVec<Scalar>::Zero(a.size());
    const Scalar s = a.dot(b) / (na * nb);
    return b / (na * nb) - a * (s / (na * na));
}

} // namespace idp
