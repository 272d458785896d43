#pragma once

#include <cmath>
#include <vector>

#include "gflowmask/autodiff.hpp"

namespace gfm {

// Adam over a fixed parameter group. step() consumes and clears the
// group's gradients.
class Adam {
public:
    Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (Parameter* p : params_) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, (double)t_);
        const double bc2 = 1.0 - std::pow(beta2_, (double)t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter* p = params_[i];
            for (std::size_t j = 0; j < p->value.size(); ++j) {
                const double g = p->grad[j];
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
                p->value[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
            }
            p->zero_grad();
        }
    }

    const std::vector<Parameter*>& params() const { return params_; }

private:
    std::vector<Parameter*> params_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

} // namespace gfm
