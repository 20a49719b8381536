#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rfd/flow.hpp"
#include "rfd/io/csv.hpp"
#include "rfd/models/velocity_net.hpp"
#include "rfd/ndcore/adamw.hpp"
#include "rfd/ndcore/ops.hpp"
#include "rfd/ndcore/params.hpp"
#include "rfd/ndcore/rng.hpp"
#include "rfd/ndcore/tape.hpp"

namespace rfd {

enum class DataKind { gaussian_mixture, checkerboard, single_gaussian };

inline std::string to_string(DataKind k) {
    switch (k) {
    case DataKind::gaussian_mixture: return "gaussian_mixture";
    case DataKind::checkerboard: return "checkerboard";
    case DataKind::single_gaussian: return "single_gaussian";
    }
    return "unknown";
}

inline DataKind parse_data_kind(const std::string& s) {
    if (s == "gaussian_mixture") return DataKind::gaussian_mixture;
    if (s == "checkerboard") return DataKind::checkerboard;
    if (s == "single_gaussian") return DataKind::single_gaussian;
    throw Error(ErrorCode::config, "unknown data kind '" + s + "'");
}

/// Synthetic 2D conditional data.
///
/// gaussian_mixture: `num_modes` isotropic Gaussians of stddev `sigma` with
/// centers evenly spaced on a circle of `radius`. checkerboard: uniform over
/// the 8 dark cells of a 4x4 board covering [-2, 2]^2, one class per cell.
/// single_gaussian: N(mean, sigma^2 I) with a single class.
struct DataSpec {
    DataKind kind = DataKind::gaussian_mixture;
    std::size_t num_modes = 8;
    double radius = 4.0;
    double sigma = 0.3;
    std::vector<double> mean = {0.0, 0.0};
    bool conditional = true;

    std::size_t num_classes() const {
        switch (kind) {
        case DataKind::gaussian_mixture: return num_modes;
        case DataKind::checkerboard: return 8;
        case DataKind::single_gaussian: return 1;
        }
        return 1;
    }

    /// Mode centers, one row per class.
    Tensor centers() const {
        validate();
        const std::size_t k = num_classes();
        Tensor c = Tensor::matrix(k, 2);
        if (kind == DataKind::gaussian_mixture) {
            for (std::size_t i = 0; i < k; ++i) {
                const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(k);
                c.at(i, 0) = radius * std::cos(a);
                c.at(i, 1) = radius * std::sin(a);
            }
        } else if (kind == DataKind::checkerboard) {
            std::size_t i = 0;
            for (std::size_t gy = 0; gy < 4; ++gy)
                for (std::size_t gx = 0; gx < 4; ++gx)
                    if ((gx + gy) % 2 == 0) {
                        c.at(i, 0) = -1.5 + static_cast<double>(gx);
                        c.at(i, 1) = -1.5 + static_cast<double>(gy);
                        ++i;
                    }
        } else {
            c.at(0, 0) = mean[0];
            c.at(0, 1) = mean[1];
        }
        return c;
    }

    /// Spread used for mode assignment radii.
    double mode_scale() const { return kind == DataKind::checkerboard ? 0.5 : sigma; }

    void validate() const {
        require(num_modes >= 1, ErrorCode::invalid_argument, "data spec needs at least one mode");
        require(kind == DataKind::checkerboard || sigma > 0.0, ErrorCode::invalid_argument,
                "data spec sigma must be positive");
        require(kind != DataKind::gaussian_mixture || num_modes == 1 || radius > 0.0, ErrorCode::invalid_argument,
                "mixture centers must be distinct (radius > 0)");
        require(mean.size() == 2, ErrorCode::invalid_argument, "data spec mean must be 2D");
    }
};

struct Dataset {
    Tensor x;
    Conditions c;
};

inline Dataset gen_data(const DataSpec& spec, std::size_t n, Rng& rng) {
    require(n > 0, ErrorCode::invalid_argument, "gen_data: n must be positive");
    const Tensor centers = spec.centers();
    const std::size_t k = spec.num_classes();
    Dataset d{Tensor::matrix(n, 2), Conditions(n)};
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t cls = k == 1 ? 0 : static_cast<std::size_t>(rng.uniform_int(k));
        if (spec.kind == DataKind::checkerboard) {
            d.x.at(r, 0) = centers.at(cls, 0) + rng.uniform(-0.5, 0.5);
            d.x.at(r, 1) = centers.at(cls, 1) + rng.uniform(-0.5, 0.5);
        } else {
            d.x.at(r, 0) = centers.at(cls, 0) + spec.sigma * rng.normal();
            d.x.at(r, 1) = centers.at(cls, 1) + spec.sigma * rng.normal();
        }
        d.c[r] = spec.conditional ? Condition::of(cls) : Condition::null();
    }
    return d;
}

struct FlowMatchingLoss {
    Var loss;
    std::size_t null_count = 0;
};

/// Mean over the batch of ||(eps - x0) - v(x_t, t, c)||^2 with t ~ U(0, 1),
/// eps ~ N(0, I), and each condition dropped to null with probability p.
inline FlowMatchingLoss flow_matching_loss(Tape& tape, const VelocityNet& net, std::span<const Var> bound,
                                           const Tensor& x0, std::span<const Condition> c, Rng& rng,
                                           double cond_dropout_p) {
    require(cond_dropout_p >= 0.0 && cond_dropout_p < 1.0, ErrorCode::invalid_argument,
            "cond_dropout_p must lie in [0, 1)");
    const std::size_t n = x0.rows();
    require(c.size() == n && n > 0, ErrorCode::shape_mismatch, "flow_matching_loss: one condition per sample");
    std::vector<double> t(n);
    for (double& ti : t) ti = rng.uniform();
    Tensor eps = rng.normal_tensor(x0.shape());
    Conditions used(c.begin(), c.end());
    FlowMatchingLoss out;
    for (auto& ci : used) {
        if (rng.bernoulli(cond_dropout_p)) {
            ci = Condition::null();
            ++out.null_count;
        }
    }
    Tensor xt(x0.shape());
    const std::size_t d = x0.cols();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) xt[r * d + j] = (1.0 - t[r]) * x0[r * d + j] + t[r] * eps[r * d + j];
    Var v = net.forward(tape, bound, tape.constant(std::move(xt)), t, used).velocity;
    Var diff = sub(tape.constant(velocity_target(x0, eps)), v);
    out.loss = scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(n));
    return out;
}

struct TeacherConfig {
    std::size_t iterations = 20000;
    std::size_t batch = 256;
    double lr = 1e-3;
    double final_lr_fraction = 0.05;
    double weight_decay = 0.0;
    double cond_dropout_p = 0.1;
    double divergence_factor = 10.0;
};

struct CurvePoint {
    std::size_t iteration;
    double loss;
};

struct TeacherRun {
    VelocityNet net;
    std::vector<CurvePoint> curve;
};

/// Cosine decay from lr to lr * final_fraction over `total` iterations.
inline double cosine_lr(double lr, double final_fraction, std::size_t it, std::size_t total) {
    if (total <= 1) return lr;
    const double p = static_cast<double>(it) / static_cast<double>(total - 1);
    const double lo = lr * final_fraction;
    return lo + 0.5 * (lr - lo) * (1.0 + std::cos(std::numbers::pi * p));
}

/// Aborts training when the loss turns non-finite or exceeds `factor` times
/// the mean loss of the warm-up window.
class DivergenceDetector {
public:
    DivergenceDetector(std::string stage, double factor, std::size_t warmup)
        : stage_(std::move(stage)), factor_(factor), warmup_(std::max<std::size_t>(warmup, 1)) {}

    void observe(std::size_t it, double loss) {
        if (!std::isfinite(loss))
            throw Error(ErrorCode::divergence,
                        stage_ + ": non-finite loss at iteration " + std::to_string(it));
        if (seen_ < warmup_) {
            sum_ += loss;
            ++seen_;
            return;
        }
        const double ref = sum_ / static_cast<double>(seen_);
        if (ref > 0.0 && loss > factor_ * ref)
            throw Error(ErrorCode::divergence, stage_ + ": loss " + io::format_double(loss) + " at iteration " +
                                                   std::to_string(it) + " exceeds " + io::format_double(factor_) +
                                                   "x the warm-up mean " + io::format_double(ref));
    }

private:
    std::string stage_;
    double factor_;
    std::size_t warmup_;
    std::size_t seen_ = 0;
    double sum_ = 0.0;
};

/// Runs `loss_fn` on a fresh tape with the net's parameters bound, then
/// applies one optimizer step. Returns the loss value.
template <class LossFn>
double optimizer_step(VelocityNet& net, AdamW& opt, LossFn&& loss_fn) {
    Tape tape;
    auto bound = net.bind(tape, true);
    Var loss = loss_fn(tape, std::span<const Var>(bound));
    const double value = loss.value().item();
    tape.backward(loss);
    opt.step(net.params(), collect_grads(tape, bound));
    return value;
}

inline TeacherRun train_teacher(const DataSpec& spec, const NetConfig& net_cfg, const TeacherConfig& cfg,
                                std::uint64_t seed) {
    require(net_cfg.num_classes == spec.num_classes(), ErrorCode::config,
            "network num_classes must equal the data class count");
    require(cfg.batch > 0, ErrorCode::invalid_argument, "teacher batch must be positive");
    Rng root(seed);
    TeacherRun run{VelocityNet(net_cfg, root), {}};
    Rng data_rng = root.substream("teacher_data");
    Rng fm_rng = root.substream("teacher_fm");
    AdamW opt(run.net.params(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    DivergenceDetector guard("train_teacher", cfg.divergence_factor, std::min<std::size_t>(200, cfg.iterations / 10));
    run.curve.reserve(cfg.iterations);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        opt.set_lr(cosine_lr(cfg.lr, cfg.final_lr_fraction, it, cfg.iterations));
        const Dataset batch = gen_data(spec, cfg.batch, data_rng);
        double loss = 0.0;
        try {
            loss = optimizer_step(run.net, opt, [&](Tape& tape, std::span<const Var> bound) {
                return flow_matching_loss(tape, run.net, bound, batch.x, batch.c, fm_rng, cfg.cond_dropout_p).loss;
            });
        } catch (const Error& e) {
            if (e.code() != ErrorCode::non_finite) throw;
            throw Error(ErrorCode::divergence,
                        "train_teacher: non-finite value at iteration " + std::to_string(it) + ": " + e.what());
        }
        guard.observe(it, loss);
        run.curve.push_back({it, loss});
    }
    return run;
}

/// Exact marginal velocity E[eps - x0 | x_t] for data N(mu, sigma^2 I).
///
/// With a = 1 - t and s^2 = a^2 sigma^2 + t^2:
///   E[x0 | x_t]  = mu + (a sigma^2 / s^2)(x_t - a mu)
///   E[eps | x_t] = (x_t - a E[x0 | x_t]) / t
inline Tensor analytic_velocity_gaussian(std::span<const double> mu, double sigma, const Tensor& x_t, double t) {
    require(t > 0.0 && t <= 1.0, ErrorCode::out_of_range, "analytic velocity needs t in (0, 1]");
    require(sigma >= 0.0, ErrorCode::invalid_argument, "sigma must be non-negative");
    const std::size_t d = mu.size();
    require(x_t.rank() == 2 && x_t.cols() == d, ErrorCode::shape_mismatch, "analytic velocity: x_t must be [n, d]");
    const double a = 1.0 - t;
    const double s2 = a * a * sigma * sigma + t * t;
    const double gain = a * sigma * sigma / s2;
    Tensor v(x_t.shape());
    for (std::size_t r = 0; r < x_t.rows(); ++r)
        for (std::size_t j = 0; j < d; ++j) {
            const double x = x_t.at(r, j);
            const double ex0 = mu[j] + gain * (x - a * mu[j]);
            const double eeps = (x - a * ex0) / t;
            v.at(r, j) = eeps - ex0;
        }
    return v;
}

/// Score of the marginal N(a mu, s^2 I) at time t.
inline Tensor analytic_score_gaussian(std::span<const double> mu, double sigma, const Tensor& x_t, double t) {
    require(t > 0.0 && t <= 1.0, ErrorCode::out_of_range, "analytic score needs t in (0, 1]");
    const std::size_t d = mu.size();
    require(x_t.rank() == 2 && x_t.cols() == d, ErrorCode::shape_mismatch, "analytic score: x_t must be [n, d]");
    const double a = 1.0 - t;
    const double s2 = a * a * sigma * sigma + t * t;
    Tensor s(x_t.shape());
    for (std::size_t r = 0; r < x_t.rows(); ++r)
        for (std::size_t j = 0; j < d; ++j) s.at(r, j) = -(x_t.at(r, j) - a * mu[j]) / s2;
    return s;
}

struct SyntheticSet {
    Tensor x0;
    Conditions c;
    std::string teacher_id;
    std::size_t steps = 0;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;
};

/// Uniform class labels, one per sample.
inline Conditions draw_conditions(std::size_t n, std::size_t num_classes, Rng& rng) {
    Conditions c(n);
    for (auto& ci : c) ci = Condition::of(static_cast<std::size_t>(rng.uniform_int(num_classes)));
    return c;
}

/// Samples the teacher `steps` uniform Euler steps with classifier-free guidance.
inline Tensor sample_net(const VelocityNet& net, std::size_t steps, const Tensor& z, std::span<const Condition> c,
                         double guidance_scale = 1.0) {
    if (z.rows() == 0) return Tensor::matrix(0, z.cols());
    auto traj = sample(net, Schedule::uniform(steps), z, c, guidance_scale);
    return traj.back().x;
}

inline SyntheticSet gen_synthetic_set(const VelocityNet& teacher, std::size_t n, Rng& rng, std::size_t steps = 32,
                                      double guidance_scale = 4.0, std::string teacher_id = "") {
    require(teacher.params()[0].value.rows() == teacher.config().num_classes + 1, ErrorCode::prerequisite,
            "teacher lacks a null-condition embedding row");
    SyntheticSet s;
    s.steps = steps;
    s.guidance_scale = guidance_scale;
    s.seed = rng.seed();
    s.teacher_id = std::move(teacher_id);
    s.c = draw_conditions(n, teacher.config().num_classes, rng);
    const Tensor z = rng.normal_tensor({n, teacher.config().input_dim});
    s.x0 = sample_net(teacher, steps, z, s.c, guidance_scale);
    return s;
}

inline io::CsvWriter dataset_csv(const Tensor& x, std::span<const Condition> c) {
    require(x.rank() == 2 && x.cols() == 2 && x.rows() == c.size(), ErrorCode::shape_mismatch,
            "dataset_csv: expects [n, 2] samples with one condition each");
    io::CsvWriter w({"x", "y", "class"});
    for (std::size_t r = 0; r < x.rows(); ++r)
        w.row({io::format_double(x.at(r, 0)), io::format_double(x.at(r, 1)),
               c[r].is_null() ? std::string("null") : std::to_string(c[r].class_id())});
    return w;
}

inline Dataset read_dataset_csv(const std::filesystem::path& path) {
    const auto t = io::read_csv(path);
    const std::size_t cx = t.column("x"), cy = t.column("y"), cc = t.column("class");
    Dataset d{Tensor::matrix(t.rows.size(), 2), Conditions(t.rows.size())};
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        d.x.at(r, 0) = io::parse_double(t.rows[r][cx], path.string());
        d.x.at(r, 1) = io::parse_double(t.rows[r][cy], path.string());
        const std::string& c = t.rows[r][cc];
        d.c[r] = c == "null" ? Condition::null()
                             : Condition::of(static_cast<std::size_t>(io::parse_double(c, path.string())));
    }
    return d;
}

inline io::CsvWriter curve_csv(std::span<const CurvePoint> curve) {
    io::CsvWriter w({"iteration", "loss"});
    for (const auto& p : curve) w.row({std::to_string(p.iteration), io::format_double(p.loss)});
    return w;
}

} // namespace rfd
