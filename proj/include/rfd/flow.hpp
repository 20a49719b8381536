#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfd/models/condition.hpp"
#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/tensor.hpp"

// Rectified-flow path algebra. t = 1 is pure noise, t = 0 is data, and the
// noising path is x_t = (1 - t) x0 + t eps.

namespace rfd {

/// Ordered denoising timesteps t_1 = 1 > t_2 > ... > t_N > 0, with an implied
/// terminal 0.
class Schedule {
public:
    explicit Schedule(std::vector<double> steps) : steps_(std::move(steps)) {
        require(!steps_.empty(), ErrorCode::invalid_argument, "schedule needs at least one step");
        for (std::size_t i = 0; i < steps_.size(); ++i) {
            require(steps_[i] > 0.0 && steps_[i] <= 1.0, ErrorCode::invalid_argument,
                    "schedule timesteps must lie in (0, 1]");
            if (i > 0)
                require(steps_[i] < steps_[i - 1], ErrorCode::invalid_argument,
                        "schedule timesteps must be strictly decreasing");
        }
    }

    /// t_i = 1 - (i - 1) / n for i = 1..n.
    static Schedule uniform(std::size_t n) {
        require(n > 0, ErrorCode::invalid_argument, "uniform schedule needs n > 0");
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) s[i] = 1.0 - static_cast<double>(i) / static_cast<double>(n);
        return Schedule(std::move(s));
    }

    std::size_t size() const noexcept { return steps_.size(); }
    const std::vector<double>& steps() const noexcept { return steps_; }

    /// Zero-based access: at(0) == 1 for default schedules.
    double at(std::size_t i) const { return steps_.at(i); }

    /// Timestep after index i; 0 past the last step.
    double next(std::size_t i) const { return i + 1 < steps_.size() ? steps_[i + 1] : 0.0; }

    /// Smallest timestep at which scores may be evaluated.
    double t_min() const noexcept { return steps_.back() / 2.0; }

    bool contains(double t) const noexcept {
        return std::find(steps_.begin(), steps_.end(), t) != steps_.end();
    }

    friend bool operator==(const Schedule&, const Schedule&) = default;

private:
    std::vector<double> steps_;
};

struct PathPoint {
    Tensor x;
    double t = 0.0;
    std::optional<Tensor> x0;
    std::optional<Tensor> eps;
};

inline void require_unit_time(double t, std::string_view what) {
    if (!(t >= 0.0 && t <= 1.0))
        throw Error(ErrorCode::out_of_range,
                    std::string(what) + ": t = " + std::to_string(t) + " outside [0, 1]");
}

inline PathPoint interpolate(const Tensor& x0, const Tensor& eps, double t) {
    require_unit_time(t, "interpolate");
    require_same_shape(x0, eps, "interpolate");
    Tensor xt(x0.shape());
    for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = (1.0 - t) * x0[i] + t * eps[i];
    return PathPoint{std::move(xt), t, x0, eps};
}

/// d x_t / dt along the straight path: eps - x0.
inline Tensor velocity_target(const Tensor& x0, const Tensor& eps) {
    require_same_shape(x0, eps, "velocity_target");
    return eps - x0;
}

/// Endpoint implied by a velocity prediction: x_t - t v.
inline Tensor velocity_to_x0(const Tensor& x_t, const Tensor& v, double t) {
    require_unit_time(t, "velocity_to_x0");
    return axpy(x_t, -t, v);
}

/// Score of the marginal at time t implied by a velocity prediction.
///
/// With x0_hat = x_t - t v and eps_hat = x_t + (1 - t) v (so that
/// x_t = (1 - t) x0_hat + t eps_hat), the Gaussian path gives
/// s = -eps_hat / t = -(x_t + (1 - t) v) / t.
inline Tensor score_from_velocity(const Tensor& x_t, const Tensor& v, double t, double t_min) {
    require(t_min > 0.0, ErrorCode::invalid_argument, "score_from_velocity: t_min must be positive");
    if (!(t >= t_min && t <= 1.0))
        throw Error(ErrorCode::out_of_range,
                    "score_from_velocity: t = " + std::to_string(t) + " below t_min = " + std::to_string(t_min));
    require_same_shape(x_t, v, "score_from_velocity");
    Tensor s(x_t.shape());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = -(x_t[i] + (1.0 - t) * v[i]) / t;
    return s;
}

inline Tensor euler_step(const Tensor& x_t, const Tensor& v, double t_cur, double t_next) {
    require(t_next < t_cur, ErrorCode::invalid_argument, "euler_step: t_next must be below t_cur");
    return axpy(x_t, t_next - t_cur, v);
}

template <class F>
concept VelocityField = requires(const F& f, const Tensor& x, double t, std::span<const Condition> c) {
    { f(x, t, c) } -> std::convertible_to<Tensor>;
};

/// Classifier-free guidance: v_null + w (v_cond - v_null). w == 1 skips the null pass.
template <VelocityField F>
Tensor guided_velocity(const F& field, const Tensor& x, double t, std::span<const Condition> conds,
                       double guidance_scale) {
    Tensor v_cond = field(x, t, conds);
    if (guidance_scale == 1.0) return v_cond;
    const Conditions nulls = null_conditions(conds.size());
    Tensor v_null = field(x, t, std::span<const Condition>(nulls));
    Tensor out = v_null;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += guidance_scale * (v_cond[i] - v_null[i]);
    return out;
}

/// Euler integration through the schedule. Returns the starting point, every
/// intermediate schedule point and the terminal t = 0 point.
template <VelocityField F>
std::vector<PathPoint> sample(const F& field, const Schedule& schedule, const Tensor& z,
                              std::span<const Condition> conds, double guidance_scale = 1.0) {
    require(z.rank() == 2 && z.rows() == conds.size(), ErrorCode::shape_mismatch,
            "sample: noise rows must match condition count");
    std::vector<PathPoint> traj;
    traj.reserve(schedule.size() + 1);
    traj.push_back(PathPoint{z, schedule.at(0), std::nullopt, std::nullopt});
    Tensor x = z;
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        const double t = schedule.at(i);
        const double tn = schedule.next(i);
        const Tensor v = guided_velocity(field, x, t, conds, guidance_scale);
        x = euler_step(x, v, t, tn);
        traj.push_back(PathPoint{x, tn, std::nullopt, std::nullopt});
    }
    return traj;
}

} // namespace rfd
