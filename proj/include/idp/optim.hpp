#pragma once

#include "idp/types.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace idp {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over named tensors. Moment buffers are keyed by tensor name, so the
/// set of tensors may be a subset on any step.
template <typename Scalar>
class Adam {
public:
    using TensorList = std::vector<std::pair<std::string, Mat<Scalar>*>>;

    explicit Adam(AdamConfig config) : config_(config) {}

    void step(const TensorList& params, const TensorList& grads,
              const std::function<bool(const std::string&)>& trainable = {})
    {
        ++t_;
        const double bc1 = 1.0 - std::pow(config_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, double(t_));
        const Scalar lr = Scalar(config_.learning_rate * std::sqrt(bc2) / bc1);
        const Scalar b1 = Scalar(config_.beta1);
        const Scalar b2 = Scalar(config_.beta2);
        const Scalar eps = Scalar(config_.eps * std::sqrt(bc2));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const std::string& name = params[i].first;
            if (trainable && !trainable(name))
                continue;
            Mat<Scalar>& p = *params[i].second;
            const Mat<Scalar>& g = *grads[i].second;
            auto [mit, fresh] = m_.try_emplace(name);
            auto& m = mit->second;
            auto& v = v_[name];
            if (fresh) {
                m = Mat<Scalar>::Zero(p.rows(), p.cols());
                v = Mat<Scalar>::Zero(p.rows(), p.cols());
            }
            m = b1 * m + (Scalar(1) - b1) * g;
            v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
            p.array() -= lr * m.array() / (v.array().sqrt() + eps);
        }
    }

    long steps() const { return t_; }

private:
    AdamConfig config_;
    long t_ = 0;
    std::map<std::string, Mat<Scalar>> m_;
    std::map<std::string, Mat<Scalar>> v_;
};

} // namespace idp
