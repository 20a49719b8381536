#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/params.hpp"
#include "rfd/ndcore/tensor.hpp"

namespace rfd {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay.
///
/// Per step t (starting at 1):
///   w <- w * (1 - lr * weight_decay)
///   m <- beta1 m + (1 - beta1) g,   v <- beta2 v + (1 - beta2) g^2
///   w <- w - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
class AdamW {
public:
    AdamW() = default;
    AdamW(const ParamSet& params, AdamWConfig cfg) : cfg_(cfg) { reset(params); }

    void reset(const ParamSet& params) {
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.push_back(Tensor::zeros_like(p.value));
            v_.push_back(Tensor::zeros_like(p.value));
        }
        step_ = 0;
    }

    void step(ParamSet& params, const std::vector<Tensor>& grads) {
        require(grads.size() == params.size() && m_.size() == params.size(), ErrorCode::shape_mismatch,
                "adamw: parameter/gradient count mismatch");
        require(cfg_.lr >= 0.0, ErrorCode::invalid_argument, "adamw: negative learning rate");
        for (std::size_t i = 0; i < grads.size(); ++i) {
            require_same_shape(params[i].value, grads[i], "adamw " + params[i].name);
            require_finite(grads[i], "adamw gradient for " + params[i].name);
        }
        ++step_;
        const double t = static_cast<double>(step_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
        const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
        for (std::size_t i = 0; i < grads.size(); ++i) {
            Tensor& w = params[i].value;
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            const Tensor& g = grads[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                w[k] *= decay;
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                w[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    std::uint64_t step_count() const noexcept { return step_; }
    const AdamWConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) noexcept { cfg_.lr = lr; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }

    bool moments_zero() const noexcept {
        for (const auto& t : m_)
            for (double x : t.data())
                if (x != 0.0) return false;
        for (const auto& t : v_)
            for (double x : t.data())
                if (x != 0.0) return false;
        return true;
    }

private:
    AdamWConfig cfg_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::uint64_t step_ = 0;
};

} // namespace rfd
