#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfd/adversarial.hpp"
#include "rfd/flow.hpp"
#include "rfd/io/csv.hpp"
#include "rfd/models/velocity_net.hpp"
#include "rfd/models/weights.hpp"
#include "rfd/ndcore/adamw.hpp"
#include "rfd/ndcore/ops.hpp"
#include "rfd/ndcore/rng.hpp"
#include "rfd/teacher.hpp"

namespace rfd {

enum class Stage { pretrain, dmd, split_ft, two_step };

inline std::string to_string(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::dmd: return "dmd";
        case Stage::split_ft: return "split_ft";
        case Stage::two_step: return "two_step";
    }
    return "?";
}

struct DistillConfig {
    std::size_t steps = 4;
    std::size_t batch = 128;
    /// Rows per proxy / discriminator update.
    std::size_t inner_batch = 128;
    std::size_t pretrain_iterations = 2000;
    std::size_t dmd_iterations = 800;
    std::size_t split_iterations = 400;
    std::size_t two_step_iterations = 1200;
    double pretrain_lr = 1e-4;
    double generator_lr = 2e-5;
    double proxy_lr = 1e-4;
    double proxy_cond_dropout = 0.1;
    /// Euler substeps per student interval for the teacher integral.
    std::size_t tg_substeps = 8;
    /// Precomputed teacher trajectories that pretraining batches are drawn from.
    std::size_t trajectory_pool = 4096;
    /// Teacher synthetic samples used as the "real" side.
    std::size_t real_pool = 8192;
    std::size_t real_steps = 32;
    double real_guidance = 1.0;
    double lambda_adv = 0.1;
    double lambda_gram = 0.05;
    double normalizer_eps = 1e-8;
    double noisier_start_fraction = 0.5;
    bool timestep_sharing = true;
    bool pretrain = true;
    std::size_t updates_per_generator = 10;
    double ema_beta = 0.99;
    double merge_ratio = 0.3;
    double split_boundary = 0.5;
    double divergence_factor = 50.0;
    DiscConfig disc;

    void validate() const {
        require(steps > 0, ErrorCode::config, "distill.steps must be positive");
        require(batch > 0 && inner_batch > 0, ErrorCode::config, "distill batches must be positive");
        require(tg_substeps > 0, ErrorCode::config, "distill.tg_substeps must be at least 1");
        require(noisier_start_fraction >= 0.0 && noisier_start_fraction <= 1.0, ErrorCode::config,
                "distill.noisier_start_fraction must lie in [0, 1]");
        require(lambda_adv >= 0.0 && lambda_gram >= 0.0, ErrorCode::config, "loss weights must be non-negative");
        require(ema_beta >= 0.0 && ema_beta < 1.0, ErrorCode::config, "distill.ema_beta must lie in [0, 1)");
        require(merge_ratio >= 0.0 && merge_ratio <= 1.0, ErrorCode::config, "distill.merge_ratio outside [0, 1]");
        require(split_boundary > 0.0 && split_boundary < 1.0, ErrorCode::config,
                "distill.split_boundary must lie in (0, 1)");
        disc.validate();
        if (lambda_adv > 0.0 || lambda_gram > 0.0) {
            require(batch % disc.pool_group == 0 && inner_batch % disc.pool_group == 0, ErrorCode::config,
                    "distill batches must be multiples of disc.pool_group");
        }
    }
};

struct DistillState {
    VelocityNet teacher;
    VelocityNet student;
    VelocityNet proxy;
    Schedule schedule = Schedule::uniform(4);
    Stage stage = Stage::pretrain;
    std::size_t iteration = 0;
    bool noisier_start = true;
    AdamW student_opt;
    AdamW proxy_opt;
    std::uint64_t teacher_hash = 0;

    /// Student and proxy both start as copies of the teacher.
    static DistillState from_teacher(const VelocityNet& teacher, const DistillConfig& cfg) {
        cfg.validate();
        DistillState s;
        s.teacher = teacher;
        s.student = teacher;
        s.proxy = teacher;
        s.schedule = Schedule::uniform(cfg.steps);
        s.student_opt = AdamW(s.student.params(), {.lr = cfg.pretrain_lr});
        s.proxy_opt = AdamW(s.proxy.params(), {.lr = cfg.proxy_lr});
        s.teacher_hash = teacher.params().hash();
        return s;
    }

    void check_teacher(std::string_view where) const {
        if (teacher.params().hash() != teacher_hash)
            throw Error(ErrorCode::internal, std::string(where) + ": teacher parameters changed");
    }
};

struct StageLogRow {
    std::string stage;
    std::size_t iteration = 0;
    bool noisier_start = false;
    double tg = 0.0;
    double dmd = 0.0;
    double adv = 0.0;
    double gram = 0.0;
    double proxy = 0.0;
    double disc = 0.0;
    double eta = 0.0;
    double grad_norm = 0.0;
    std::size_t proxy_updates = 0;
    std::size_t disc_updates = 0;
    std::size_t generator_updates = 0;
    std::size_t refreshed = 0;
};

/// Input and target timestep used for DMD rows in one iteration.
struct TimestepPair {
    std::size_t iteration = 0;
    double input_t = 0.0;
    double target_t = 0.0;
    friend bool operator==(const TimestepPair&, const TimestepPair&) = default;
};

struct StageLog {
    std::vector<StageLogRow> rows;
    std::vector<TimestepPair> pairs;
    std::size_t score_evaluations = 0;
    std::size_t off_schedule_scores = 0;

    std::size_t total(std::size_t StageLogRow::*field) const {
        std::size_t s = 0;
        for (const auto& r : rows) s += r.*field;
        return s;
    }

    io::CsvWriter csv() const {
        io::CsvWriter w({"stage", "iteration", "noisier_start", "tg", "dmd", "adv", "gram", "proxy", "disc", "eta",
                         "grad_norm", "proxy_updates", "disc_updates", "generator_updates", "refreshed"});
        for (const auto& r : rows)
            w.row({r.stage, std::to_string(r.iteration), r.noisier_start ? "1" : "0", io::format_double(r.tg),
                   io::format_double(r.dmd), io::format_double(r.adv), io::format_double(r.gram),
                   io::format_double(r.proxy), io::format_double(r.disc), io::format_double(r.eta),
                   io::format_double(r.grad_norm), std::to_string(r.proxy_updates), std::to_string(r.disc_updates),
                   std::to_string(r.generator_updates), std::to_string(r.refreshed)});
        return w;
    }
};

// ---------------------------------------------------------------- trajectory guidance

struct TrajectoryTargets {
    std::vector<double> times;
    /// Teacher trajectory point at each student timestep.
    std::vector<Tensor> points;
    /// Average teacher velocity over [next(t_i), t_i].
    std::vector<Tensor> targets;
    Conditions c;

    std::size_t rows() const noexcept { return c.size(); }
};

/// Rolls the teacher from z with K Euler substeps per student interval. Each
/// target is the mean of the substep velocities, which equals the chord
/// (x_end - x_start) / (t_end - t_start) of the fine rollout.
template <VelocityField F>
TrajectoryTargets trajectory_targets(const F& teacher, const Schedule& schedule, const Tensor& z,
                                     std::span<const Condition> c, std::size_t substeps,
                                     double guidance_scale = 1.0) {
    if (substeps < 1) throw Error(ErrorCode::invalid_argument, "trajectory guidance needs K >= 1 substeps");
    require(z.rows() == c.size(), ErrorCode::shape_mismatch, "trajectory_targets: one condition per row");
    TrajectoryTargets out;
    out.c.assign(c.begin(), c.end());
    Tensor x = z;
    const double inv_k = 1.0 / static_cast<double>(substeps);
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        const double ta = schedule.at(i), tb = schedule.next(i);
        out.times.push_back(ta);
        out.points.push_back(x);
        Tensor avg = Tensor::zeros_like(z);
        for (std::size_t k = 0; k < substeps; ++k) {
            const double t0 = ta + (tb - ta) * static_cast<double>(k) * inv_k;
            const double t1 = k + 1 == substeps ? tb : ta + (tb - ta) * static_cast<double>(k + 1) * inv_k;
            const Tensor v = guided_velocity(teacher, x, t0, c, guidance_scale);
            for (std::size_t j = 0; j < avg.size(); ++j) avg[j] += v[j];
            x = euler_step(x, v, t0, t1);
        }
        for (double& a : avg.storage()) a *= inv_k;
        out.targets.push_back(std::move(avg));
    }
    return out;
}

/// sum_i ||t_i (pred_i - target_i)||^2 averaged over rows, for plain tensors.
inline double trajectory_guidance_value(std::span<const Tensor> preds, const TrajectoryTargets& tt) {
    require(preds.size() == tt.times.size(), ErrorCode::shape_mismatch, "one prediction per student timestep");
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        require_same_shape(preds[i], tt.targets[i], "trajectory_guidance_value");
        const double t2 = tt.times[i] * tt.times[i];
        for (std::size_t k = 0; k < preds[i].size(); ++k) {
            const double d = preds[i][k] - tt.targets[i][k];
            s += t2 * d * d;
        }
    }
    return s / static_cast<double>(tt.rows());
}

/// Recorded trajectory guidance loss over the selected rows of `tt`. All
/// student timesteps go through one stacked forward pass.
inline Var trajectory_guidance_loss(Tape& tape, const VelocityNet& student, std::span<const Var> bound,
                                    const TrajectoryTargets& tt, std::span<const std::size_t> rows) {
    const std::size_t b = rows.size(), n = tt.times.size(), d = student.config().input_dim;
    require(b > 0, ErrorCode::invalid_argument, "trajectory guidance batch is empty");
    Tensor x = Tensor::matrix(n * b, d), target = Tensor::matrix(n * b, d);
    std::vector<double> t(n * b);
    Conditions c(n * b);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < b; ++r) {
            const std::size_t row = i * b + r, src = rows[r];
            require(src < tt.rows(), ErrorCode::out_of_range, "trajectory row index");
            for (std::size_t j = 0; j < d; ++j) {
                x.at(row, j) = tt.points[i].at(src, j);
                target.at(row, j) = tt.targets[i].at(src, j);
            }
            t[row] = tt.times[i];
            c[row] = tt.c[src];
        }
    Var v = student.forward(tape, bound, tape.constant(std::move(x)), t, c).velocity;
    Var r = scale_rows(sub(v, tape.constant(std::move(target))), t);
    return scale(sum(mul(r, r)), 1.0 / static_cast<double>(b));
}

/// Stage one: trajectory guidance pretraining on a fixed pool of teacher paths.
inline void pretrain_student(DistillState& st, const DistillConfig& cfg, Rng& rng, StageLog& log) {
    if (st.stage != Stage::pretrain) throw Error(ErrorCode::prerequisite, "pretrain_student: stage is not pretrain");
    if (cfg.pretrain_iterations > 0) {
        const std::size_t d = st.teacher.config().input_dim;
        const Conditions c = draw_conditions(cfg.trajectory_pool, st.teacher.config().num_classes, rng);
        const Tensor z = rng.normal_tensor({cfg.trajectory_pool, d});
        const TrajectoryTargets tt =
            trajectory_targets(st.teacher, st.schedule, z, c, cfg.tg_substeps, cfg.real_guidance);
        st.student_opt = AdamW(st.student.params(), {.lr = cfg.pretrain_lr});
        DivergenceDetector guard("pretrain", cfg.divergence_factor, std::min<std::size_t>(100, cfg.pretrain_iterations));
        std::vector<std::size_t> rows(cfg.batch);
        for (std::size_t it = 0; it < cfg.pretrain_iterations; ++it) {
            for (auto& r : rows) r = static_cast<std::size_t>(rng.uniform_int(cfg.trajectory_pool));
            const double loss = optimizer_step(st.student, st.student_opt, [&](Tape& tape, std::span<const Var> b) {
                return trajectory_guidance_loss(tape, st.student, b, tt, rows);
            });
            guard.observe(it, loss);
            StageLogRow row;
            row.stage = to_string(Stage::pretrain);
            row.iteration = it;
            row.tg = loss;
            row.generator_updates = 1;
            log.rows.push_back(row);
        }
    }
    st.check_teacher("pretrain_student");
    st.stage = Stage::dmd;
    st.iteration = 0;
}

// ---------------------------------------------------------------- distribution matching

/// Gradient-free rollout that keeps every schedule point (t_1 .. t_N); the
/// terminal t = 0 sample is dropped.
template <VelocityField F>
std::vector<PathPoint> student_rollout_with_shared_points(const F& student, const Schedule& schedule, const Tensor& z,
                                                          std::span<const Condition> c) {
    auto traj = sample(student, schedule, z, c);
    traj.pop_back();
    return traj;
}

struct DmdInputs {
    Tensor x_in;
    std::vector<double> t_in;
    std::vector<double> t_target;
    Conditions c;
};

/// Target indices are spread over the rows round-robin. Under noisier start
/// a target i >= 1 reads its input from point i - 1; otherwise from point i.
/// `allowed` restricts the targets (empty means all).
inline DmdInputs select_dmd_inputs(std::span<const PathPoint> points, std::span<const Condition> c,
                                   bool noisier_start, std::span<const std::size_t> allowed = {}) {
    require(!points.empty(), ErrorCode::invalid_argument, "select_dmd_inputs: no schedule points");
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), i) == allowed.end()) continue;
        if (noisier_start && i == 0 && points.size() > 1) continue;
        targets.push_back(i);
    }
    require(!targets.empty(), ErrorCode::invalid_argument, "select_dmd_inputs: no eligible target step");
    const std::size_t n = points[0].x.rows(), d = points[0].x.cols();
    require(c.size() == n, ErrorCode::shape_mismatch, "select_dmd_inputs: one condition per row");
    DmdInputs in;
    in.x_in = Tensor::matrix(n, d);
    in.t_in.resize(n);
    in.t_target.resize(n);
    in.c.assign(c.begin(), c.end());
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = targets[r % targets.size()];
        const std::size_t src = noisier_start && i > 0 ? i - 1 : i;
        for (std::size_t j = 0; j < d; ++j) in.x_in.at(r, j) = points[src].x.at(r, j);
        in.t_in[r] = points[src].t;
        in.t_target[r] = points[i].t;
    }
    return in;
}

struct GeneratorSample {
    /// Sample at the score timestep whose value depends on the student.
    Var x_theta;
    /// Endpoint estimate x_in - t_in v.
    Var x0_hat;
    std::vector<double> score_t;
};

/// The student's own noise estimate x_in + (1 - t_in) v, as a plain tensor.
inline Tensor shared_noise(const DmdInputs& in, const Tensor& v) {
    Tensor noise(in.x_in.shape());
    for (std::size_t r = 0; r < noise.rows(); ++r)
        for (std::size_t j = 0; j < noise.cols(); ++j)
            noise.at(r, j) = in.x_in.at(r, j) + (1.0 - in.t_in[r]) * v.at(r, j);
    return noise;
}

/// (1 - t) x0_hat + t noise per row, with the noise held constant.
inline Var renoise(Var x0_hat, std::span<const double> t, Tensor noise) {
    std::vector<double> keep(t.size());
    for (std::size_t r = 0; r < t.size(); ++r) {
        keep[r] = 1.0 - t[r];
        for (std::size_t j = 0; j < noise.cols(); ++j) noise.at(r, j) *= t[r];
    }
    return add(scale_rows(x0_hat, keep), x0_hat.tape->constant(std::move(noise)));
}

/// With sharing, x_theta = (1 - t_i) x0_hat + t_i sg(eps_hat): its value is
/// exactly the student's point at the target step and no fresh noise is
/// involved. Without sharing, x0_hat is re-noised to a random t with fresh
/// noise.
inline GeneratorSample generator_sample(Tape& tape, const VelocityNet& student, std::span<const Var> bound,
                                        const DmdInputs& in, bool sharing, Rng& rng, double t_lo) {
    Var x = tape.constant(in.x_in);
    Var v = student.forward(tape, bound, x, in.t_in, in.c).velocity;
    GeneratorSample out;
    out.x0_hat = sub(x, scale_rows(v, in.t_in));
    Tensor noise;
    if (sharing) {
        out.score_t = in.t_target;
        noise = shared_noise(in, v.value());
    } else {
        out.score_t.resize(in.t_in.size());
        for (auto& t : out.score_t) t = rng.uniform(t_lo, 1.0);
        noise = rng.normal_tensor(in.x_in.shape());
    }
    out.x_theta = renoise(out.x0_hat, out.score_t, std::move(noise));
    return out;
}

struct DmdDirection {
    /// (s_fake - s_real) / eta per row.
    Tensor weight;
    double eta = 0.0;
};

/// Normalized score difference from the two velocity estimates at (x, t).
inline DmdDirection dmd_direction_from_velocities(const Tensor& x, std::span<const double> t, const Tensor& v_real,
                                                  const Tensor& v_fake, double t_min, double normalizer_eps) {
    const std::size_t n = x.rows(), d = x.cols();
    require(t.size() == n, ErrorCode::shape_mismatch, "dmd_direction: one timestep per row");
    require_same_shape(x, v_real, "dmd_direction");
    require_same_shape(x, v_fake, "dmd_direction");
    DmdDirection out;
    out.weight = Tensor(x.shape());
    double abs_sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (!(t[r] >= t_min))
            throw Error(ErrorCode::out_of_range, "dmd score timestep " + io::format_double(t[r]) + " below t_min " +
                                                     io::format_double(t_min));
        for (std::size_t j = 0; j < d; ++j) {
            const double s_real = -(x.at(r, j) + (1.0 - t[r]) * v_real.at(r, j)) / t[r];
            const double s_fake = -(x.at(r, j) + (1.0 - t[r]) * v_fake.at(r, j)) / t[r];
            out.weight.at(r, j) = s_fake - s_real;
            abs_sum += std::abs(s_fake - s_real);
        }
    }
    out.eta = abs_sum / static_cast<double>(out.weight.size()) + normalizer_eps;
    for (double& w : out.weight.storage()) w /= out.eta;
    return out;
}

/// Teacher velocity with per-row timesteps and classifier-free guidance.
inline Tensor teacher_velocity(const VelocityNet& teacher, const Tensor& x, std::span<const double> t,
                               std::span<const Condition> c, double guidance_scale) {
    Tensor v = teacher.velocity(x, t, c);
    if (guidance_scale == 1.0) return v;
    const Conditions nulls = null_conditions(c.size());
    const Tensor vn = teacher.velocity(x, t, nulls);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = vn[k] + guidance_scale * (v[k] - vn[k]);
    return v;
}

inline DmdDirection dmd_direction(const DistillState& st, const Tensor& x, std::span<const double> t,
                                  std::span<const Condition> c, const DistillConfig& cfg, StageLog* log = nullptr) {
    if (log) {
        log->score_evaluations += t.size();
        for (double ti : t) log->off_schedule_scores += st.schedule.contains(ti) ? 0 : 1;
    }
    return dmd_direction_from_velocities(x, t, teacher_velocity(st.teacher, x, t, c, cfg.real_guidance),
                                         st.proxy.velocity(x, t, c), st.schedule.t_min(), cfg.normalizer_eps);
}

/// sum <sg(weight), x_theta> / rows. Its gradient is the DMD update direction.
inline Var dmd_surrogate(Var x_theta, const Tensor& weight) {
    Tape& tape = *x_theta.tape;
    return scale(sum(mul(x_theta, tape.constant(weight))), 1.0 / static_cast<double>(weight.rows()));
}

/// One generator step with the surrogate alone. Returns the gradient that
/// was applied (before the optimizer) so callers can inspect it.
inline std::vector<Tensor> dmd_step_shared(DistillState& st, const DmdInputs& in, const DistillConfig& cfg, Rng& rng,
                                           StageLog* log = nullptr) {
    Tape tape;
    auto bound = st.student.bind(tape, true);
    GeneratorSample gs = generator_sample(tape, st.student, bound, in, cfg.timestep_sharing, rng, st.schedule.t_min());
    const DmdDirection dir = dmd_direction(st, gs.x_theta.value(), gs.score_t, in.c, cfg, log);
    tape.backward(dmd_surrogate(gs.x_theta, dir.weight));
    auto grads = collect_grads(tape, bound);
    st.student_opt.step(st.student.params(), grads);
    return grads;
}

/// Flow matching of the proxy on gradient-free student endpoints.
inline double proxy_update(DistillState& st, const Tensor& x0, std::span<const Condition> c, Rng& rng,
                           const DistillConfig& cfg) {
    return optimizer_step(st.proxy, st.proxy_opt, [&](Tape& tape, std::span<const Var> b) {
        return flow_matching_loss(tape, st.proxy, b, x0, c, rng, cfg.proxy_cond_dropout).loss;
    });
}

// ---------------------------------------------------------------- gram loss

inline Var gram_matrix(Var f) {
    const double n = static_cast<double>(f.value().rows());
    require(n > 0, ErrorCode::shape_mismatch, "gram_matrix of an empty batch");
    return scale(matmul(transpose(f), f), 1.0 / n);
}

/// Mean over taps of the mean squared difference of the Gram matrices.
inline Var gram_loss(std::span<const Var> a, std::span<const Var> b) {
    require(!a.empty() && a.size() == b.size(), ErrorCode::shape_mismatch, "gram_loss: tap count mismatch");
    Var total = mse(gram_matrix(a[0]), gram_matrix(b[0]));
    for (std::size_t k = 1; k < a.size(); ++k) {
        require(a[k].value().cols() == b[k].value().cols(), ErrorCode::shape_mismatch, "gram_loss: width mismatch");
        total = add(total, mse(gram_matrix(a[k]), gram_matrix(b[k])));
    }
    require(a[0].value().cols() == b[0].value().cols(), ErrorCode::shape_mismatch, "gram_loss: width mismatch");
    return scale(total, 1.0 / static_cast<double>(a.size()));
}

inline double gram_loss(std::span<const Tensor> a, std::span<const Tensor> b) {
    Tape tape;
    std::vector<Var> va, vb;
    for (const auto& t : a) va.push_back(tape.constant(t));
    for (const auto& t : b) vb.push_back(tape.constant(t));
    return gram_loss(va, vb).value().item();
}

// ---------------------------------------------------------------- stage loops

namespace detail {

struct Branch {
    VelocityNet* net;
    AdamW* opt;
    std::vector<std::size_t> targets;
};

inline Tensor rows_of(const Tensor& x, std::span<const std::size_t> idx) { return gather_rows(x, idx); }

template <class Field>
void dmd_loop(DistillState& st, DiscriminatorBank* bank, const DistillConfig& cfg, const SyntheticSet& real, Rng& rng,
              StageLog& log, std::size_t iterations, double noisier_fraction, double lambda_gram, const Field& field,
              std::span<Branch> branches, const std::function<void()>& after_step) {
    require(real.x0.rows() > 0 && real.x0.rows() == real.c.size(), ErrorCode::prerequisite,
            "distillation needs a non-empty synthetic real set");
    const bool adversarial = bank != nullptr && cfg.lambda_adv > 0.0;
    const std::size_t d = st.teacher.config().input_dim, k = st.teacher.config().num_classes;
    const std::size_t switch_at = static_cast<std::size_t>(std::ceil(noisier_fraction * static_cast<double>(iterations)));
    DivergenceDetector guard(to_string(st.stage), cfg.divergence_factor, std::min<std::size_t>(50, iterations));
    auto real_batch = [&](std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(real.x0.rows()));
        Conditions c(n);
        for (std::size_t r = 0; r < n; ++r) c[r] = real.c[idx[r]];
        return std::pair{rows_of(real.x0, idx), c};
    };

    for (std::size_t it = 0; it < iterations; ++it) {
        st.noisier_start = it < switch_at;
        StageLogRow row;
        row.stage = to_string(st.stage);
        row.iteration = st.iteration;
        row.noisier_start = st.noisier_start;

        for (std::size_t u = 0; u < cfg.updates_per_generator; ++u) {
            const Conditions c = draw_conditions(cfg.inner_batch, k, rng);
            const Tensor z = rng.normal_tensor({cfg.inner_batch, d});
            const Tensor fake = sample(field, st.schedule, z, c).back().x;
            row.proxy += proxy_update(st, fake, c, rng, cfg) / static_cast<double>(cfg.updates_per_generator);
            ++row.proxy_updates;
            if (adversarial) {
                const auto [xr, cr] = real_batch(cfg.inner_batch);
                const LevelFeatures fr = extract_disc_features(st.proxy, xr, cr, bank->config(), rng);
                const LevelFeatures ff = extract_disc_features(st.proxy, fake, c, bank->config(), rng);
                row.disc += bank->disc_step(fr, ff) / static_cast<double>(cfg.updates_per_generator);
                ++row.disc_updates;
            }
        }
        guard.observe(it, row.proxy);

        const Conditions c = draw_conditions(cfg.batch, k, rng);
        const Tensor z = rng.normal_tensor({cfg.batch, d});
        const auto points = student_rollout_with_shared_points(field, st.schedule, z, c);
        LevelFeatures real_feats;
        if (lambda_gram > 0.0) {
            const auto [xr, cr] = real_batch(cfg.batch);
            real_feats = extract_disc_features(st.proxy, xr, cr, cfg.disc, rng);
        }
        double sq_norm = 0.0;
        for (Branch& br : branches) {
            const DmdInputs in = select_dmd_inputs(points, c, st.noisier_start, br.targets);
            const std::size_t first = log.pairs.size();
            for (std::size_t r = 0; r < in.t_in.size(); ++r) {
                const TimestepPair p{st.iteration, in.t_in[r], in.t_target[r]};
                if (std::find(log.pairs.begin() + static_cast<std::ptrdiff_t>(first), log.pairs.end(), p) ==
                    log.pairs.end())
                    log.pairs.push_back(p);
            }
            Tape tape;
            auto bound = br.net->bind(tape, true);
            GeneratorSample gs =
                generator_sample(tape, *br.net, bound, in, cfg.timestep_sharing, rng, st.schedule.t_min());
            const DmdDirection dir = dmd_direction(st, gs.x_theta.value(), gs.score_t, in.c, cfg, &log);
            Var loss = dmd_surrogate(gs.x_theta, dir.weight);
            row.dmd += loss.value().item();
            row.eta += dir.eta;
            if (adversarial || lambda_gram > 0.0) {
                auto pb = st.proxy.bind(tape, false);
                const DiscConfig& dc = adversarial ? bank->config() : cfg.disc;
                auto feats = extract_disc_features(tape, st.proxy, pb, gs.x0_hat, in.c, dc, rng);
                if (adversarial) {
                    Var g = bank->gen_loss(tape, feats);
                    row.adv += g.value().item();
                    loss = add(loss, scale(g, cfg.lambda_adv));
                }
                if (lambda_gram > 0.0) {
                    std::vector<Var> fa, fb;
                    for (std::size_t l = 0; l < feats.size(); ++l)
                        for (std::size_t t = 0; t < feats[l].size(); ++t) {
                            fa.push_back(feats[l][t]);
                            fb.push_back(tape.constant(real_feats[l][t]));
                        }
                    Var g = gram_loss(fa, fb);
                    row.gram += g.value().item();
                    loss = add(loss, scale(g, lambda_gram));
                }
            }
            tape.backward(loss);
            auto grads = collect_grads(tape, bound);
            const double gn = global_norm(grads);
            sq_norm += gn * gn;
            br.opt->step(br.net->params(), grads);
            ++row.generator_updates;
        }
        row.grad_norm = std::sqrt(sq_norm);
        if (adversarial) row.refreshed = bank->refresh(rng);
        if (after_step) after_step();
        log.rows.push_back(row);
        ++st.iteration;
    }
    st.check_teacher(to_string(st.stage));
}

inline std::vector<std::size_t> all_targets(const Schedule& s) {
    std::vector<std::size_t> v(s.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    return v;
}

} // namespace detail

/// Stage two: per iteration, `updates_per_generator` proxy and discriminator
/// updates, then one generator update with the DMD surrogate plus the weighted
/// adversarial term. Noisier start holds for the leading fraction of
/// iterations. Pass a null bank to train without the adversarial term.
inline void run_dmd_stage(DistillState& st, DiscriminatorBank* bank, const DistillConfig& cfg,
                          const SyntheticSet& real, Rng& rng, StageLog& log, double lambda_gram = 0.0,
                          std::size_t iterations = std::numeric_limits<std::size_t>::max()) {
    if (st.stage != Stage::dmd && st.stage != Stage::two_step)
        throw Error(ErrorCode::prerequisite, "run_dmd_stage: stage is " + to_string(st.stage));
    cfg.validate();
    if (iterations == std::numeric_limits<std::size_t>::max()) iterations = cfg.dmd_iterations;
    st.student_opt = AdamW(st.student.params(), {.lr = cfg.generator_lr});
    detail::Branch br{&st.student, &st.student_opt, detail::all_targets(st.schedule)};
    detail::dmd_loop(st, bank, cfg, real, rng, log, iterations, cfg.noisier_start_fraction, lambda_gram, st.student,
                     std::span<detail::Branch>(&br, 1), {});
}

/// Indices of schedule steps owned by each branch: M1 takes t <= boundary.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_ranges(const Schedule& s, double boundary) {
    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < s.size(); ++i) (s.at(i) <= boundary ? out.first : out.second).push_back(i);
    return out;
}

/// Trains two copies of the student on disjoint timestep ranges, tracks an
/// EMA of each and returns ratio * M1_ema + (1 - ratio) * M2_ema. Rollouts
/// use whichever branch owns each step.
inline VelocityNet split_timestep_finetune(DistillState& st, DiscriminatorBank* bank, const DistillConfig& cfg,
                                           const SyntheticSet& real, Rng& rng, StageLog& log) {
    if (st.schedule.size() < 4)
        throw Error(ErrorCode::prerequisite, "split fine-tuning is only defined for students with at least 4 steps");
    cfg.validate();
    const auto [low, high] = split_ranges(st.schedule, cfg.split_boundary);
    require(!low.empty() && !high.empty(), ErrorCode::config, "split boundary leaves a branch without timesteps");
    VelocityNet m1 = st.student, m2 = st.student;
    ParamSet ema1 = m1.params(), ema2 = m2.params();
    AdamW o1(m1.params(), {.lr = cfg.generator_lr}), o2(m2.params(), {.lr = cfg.generator_lr});
    detail::Branch branches[2] = {{&m1, &o1, low}, {&m2, &o2, high}};
    const double boundary = cfg.split_boundary;
    auto field = [&](const Tensor& x, double t, std::span<const Condition> c) {
        return t <= boundary ? m1(x, t, c) : m2(x, t, c);
    };
    st.stage = Stage::split_ft;
    detail::dmd_loop(st, bank, cfg, real, rng, log, cfg.split_iterations, 0.0, 0.0, field, branches, [&] {
        ema_update(ema1, m1.params(), cfg.ema_beta);
        ema_update(ema2, m2.params(), cfg.ema_beta);
    });
    VelocityNet merged(st.student.config(), merge_interpolate(ema1, ema2, cfg.merge_ratio));
    st.student = merged;
    st.student_opt = AdamW(st.student.params(), {.lr = cfg.generator_lr});
    return merged;
}

/// Continues from a 4-step student on the uniform 2-step schedule, adding the
/// Gram-matrix loss to the stage-two objective.
inline void distill_two_step(DistillState& st, DiscriminatorBank* bank, const DistillConfig& cfg,
                             const SyntheticSet& real, Rng& rng, StageLog& log) {
    st.schedule = Schedule::uniform(2);
    st.stage = Stage::two_step;
    st.iteration = 0;
    run_dmd_stage(st, bank, cfg, real, rng, log, cfg.lambda_gram, cfg.two_step_iterations);
}

} // namespace rfd
