#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "rfd/distill.hpp"
#include "rfd/eval.hpp"
#include "support/fd_check.hpp"

using namespace rfd;

namespace {

NetConfig tiny_net(std::size_t depth = 12) {
    NetConfig c;
    c.width = 8;
    c.depth = depth;
    c.time_dim = 4;
    c.cond_dim = 4;
    return c;
}

// A random net with a non-zero output head, so its velocity is not identically 0.
VelocityNet random_net(std::uint64_t seed, std::size_t depth = 12) {
    Rng rng(seed);
    VelocityNet net(tiny_net(depth), rng);
    for (auto& p : net.params())
        if (p.name == "out.w" || p.name == "out.b")
            for (double& v : p.value.storage()) v = rng.uniform(-0.5, 0.5);
    return net;
}

struct ConstantField {
    double cx, cy;
    Tensor operator()(const Tensor& x, double, std::span<const Condition>) const {
        Tensor v(x.shape());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            v.at(r, 0) = cx;
            v.at(r, 1) = cy;
        }
        return v;
    }
};

DistillConfig tiny_config() {
    DistillConfig c;
    c.batch = 16;
    c.inner_batch = 16;
    c.pretrain_iterations = 0;
    c.dmd_iterations = 6;
    c.split_iterations = 2;
    c.two_step_iterations = 2;
    c.trajectory_pool = 64;
    c.real_pool = 64;
    c.real_steps = 4;
    c.disc.hidden = 4;
    c.disc.pool_group = 4;
    return c;
}

Conditions classes(std::size_t n) {
    Conditions c(n);
    for (std::size_t r = 0; r < n; ++r) c[r] = Condition::of(r % 8);
    return c;
}

std::vector<Tensor> predictions(const VelocityNet& g, const TrajectoryTargets& tt) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < tt.times.size(); ++i) out.push_back(g(tt.points[i], tt.times[i], tt.c));
    return out;
}

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

} // namespace

TEST(TrajectoryGuidance, ZeroTeacherAndZeroStudentGiveZero) {
    Rng rng(1);
    const VelocityNet zero(tiny_net(), rng);  // zero-initialized head
    const Tensor z = rng.normal_tensor({10, 2});
    const Conditions c = classes(10);
    const TrajectoryTargets tt = trajectory_targets(zero, Schedule::uniform(4), z, c, 8);
    EXPECT_EQ(trajectory_guidance_value(predictions(zero, tt), tt), 0.0);
    Tape tape;
    auto b = zero.bind(tape, true);
    EXPECT_EQ(trajectory_guidance_loss(tape, zero, b, tt, iota(10)).value().item(), 0.0);
}

TEST(TrajectoryGuidance, ConstantFieldIsExactForAnyK) {
    Rng rng(2);
    const Tensor z = rng.normal_tensor({12, 2});
    const Conditions c = classes(12);
    const ConstantField f{0.7, -1.3};
    const auto t1 = trajectory_targets(f, Schedule::uniform(4), z, c, 1);
    const auto t8 = trajectory_targets(f, Schedule::uniform(4), z, c, 8);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_LT(max_abs_diff(t1.targets[i], t8.targets[i]), 1e-15);
        EXPECT_LT(max_abs_diff(t1.points[i], t8.points[i]), 1e-12);
    }
    const VelocityNet g = random_net(3);
    EXPECT_NEAR(trajectory_guidance_value(predictions(g, t1), t1), trajectory_guidance_value(predictions(g, t8), t8),
                1e-12);
    EXPECT_THROW(trajectory_targets(f, Schedule::uniform(4), z, c, 0), Error);
}

TEST(TrajectoryGuidance, PerturbingOnePredictionAddsWeightedSquare) {
    Rng rng(4);
    const VelocityNet teacher = random_net(5);
    const Tensor z = rng.normal_tensor({6, 2});
    const Conditions c = classes(6);
    const TrajectoryTargets tt = trajectory_targets(teacher, Schedule::uniform(4), z, c, 8);
    std::vector<Tensor> preds = tt.targets;
    EXPECT_EQ(trajectory_guidance_value(preds, tt), 0.0);
    const double dx = 0.3, dy = -0.4;
    preds[1].at(2, 0) += dx;
    preds[1].at(2, 1) += dy;
    const double expected = 0.75 * 0.75 * (dx * dx + dy * dy) / 6.0;
    EXPECT_NEAR(trajectory_guidance_value(preds, tt), expected, 1e-14);
}

TEST(TrajectoryGuidance, RecordedLossMatchesPlainEvaluation) {
    Rng rng(6);
    const VelocityNet teacher = random_net(7), student = random_net(8);
    const Tensor z = rng.normal_tensor({9, 2});
    const Conditions c = classes(9);
    const TrajectoryTargets tt = trajectory_targets(teacher, Schedule::uniform(4), z, c, 8);
    Tape tape;
    auto b = student.bind(tape, true);
    EXPECT_NEAR(trajectory_guidance_loss(tape, student, b, tt, iota(9)).value().item(),
                trajectory_guidance_value(predictions(student, tt), tt), 1e-12);
}

TEST(Pretrain, ZeroIterationsOnlyAdvancesStage) {
    DistillConfig cfg = tiny_config();
    DistillState st = DistillState::from_teacher(random_net(9), cfg);
    const auto h = st.student.params().hash();
    Rng rng(10);
    const auto before = rng.state();
    StageLog log;
    pretrain_student(st, cfg, rng, log);
    EXPECT_EQ(st.stage, Stage::dmd);
    EXPECT_EQ(st.student.params().hash(), h);
    EXPECT_TRUE(log.rows.empty());
    EXPECT_EQ(rng.state(), before);
    EXPECT_THROW(pretrain_student(st, cfg, rng, log), Error);
}

TEST(Pretrain, ReducesTrajectoryLossFromAPerturbedStart) {
    DistillConfig cfg = tiny_config();
    cfg.pretrain_iterations = 300;
    cfg.pretrain_lr = 3e-3;
    cfg.trajectory_pool = 256;
    DistillState st = DistillState::from_teacher(random_net(11), cfg);
    st.student = random_net(12);
    Rng rng(13);
    StageLog log;
    pretrain_student(st, cfg, rng, log);
    ASSERT_EQ(log.rows.size(), 300u);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 50; ++i) {
        head += log.rows[i].tg;
        tail += log.rows[250 + i].tg;
    }
    EXPECT_LT(tail, head);
    st.check_teacher("test");
}

TEST(Rollout, RecordsEverySchedulePoint) {
    const VelocityNet net = random_net(14);
    Rng rng(15);
    const Tensor z = rng.normal_tensor({5, 2});
    const Conditions c = classes(5);
    const auto pts = student_rollout_with_shared_points(net, Schedule::uniform(4), z, c);
    ASSERT_EQ(pts.size(), 4u);
    const double t[] = {1.0, 0.75, 0.5, 0.25};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(pts[i].t, t[i]);
    const VelocityNet copy = net;
    const auto again = sample(copy, Schedule::uniform(4), z, c);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(pts[i].x, again[i].x);
}

TEST(Rollout, NoisierStartShiftsInputByOne) {
    const VelocityNet net = random_net(16);
    Rng rng(17);
    const Tensor z = rng.normal_tensor({12, 2});
    const Conditions c = classes(12);
    const auto pts = student_rollout_with_shared_points(net, Schedule::uniform(4), z, c);
    const DmdInputs noisy = select_dmd_inputs(pts, c, true);
    const DmdInputs plain = select_dmd_inputs(pts, c, false);
    for (std::size_t r = 0; r < 12; ++r) {
        EXPECT_NE(noisy.t_target[r], 1.0);
        EXPECT_EQ(noisy.t_in[r], noisy.t_target[r] + 0.25);
        EXPECT_EQ(plain.t_in[r], plain.t_target[r]);
        if (noisy.t_target[r] == 0.75) EXPECT_EQ(noisy.t_in[r], 1.0);
    }
    // Rows cover the targets round-robin.
    EXPECT_EQ(plain.t_target[0], 1.0);
    EXPECT_EQ(plain.t_target[3], 0.25);
    EXPECT_EQ(noisy.t_target[0], 0.75);
    const std::size_t only[] = {2};
    const DmdInputs restricted = select_dmd_inputs(pts, c, false, only);
    for (double t : restricted.t_target) EXPECT_EQ(t, 0.5);
}

TEST(GeneratorSample, SharedValueIsTheStudentsOwnPoint) {
    const VelocityNet net = random_net(18);
    Rng rng(19);
    const Tensor z = rng.normal_tensor({8, 2});
    const Conditions c = classes(8);
    const auto pts = student_rollout_with_shared_points(net, Schedule::uniform(4), z, c);
    for (bool noisier : {false, true}) {
        const DmdInputs in = select_dmd_inputs(pts, c, noisier);
        Tape tape;
        auto b = net.bind(tape, true);
        const GeneratorSample gs = generator_sample(tape, net, b, in, true, rng, 0.125);
        EXPECT_EQ(gs.score_t, in.t_target);
        for (std::size_t r = 0; r < 8; ++r) {
            const std::size_t i = static_cast<std::size_t>(std::lround((1.0 - in.t_target[r]) * 4.0));
            for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(gs.x_theta.value().at(r, j), pts[i].x.at(r, j), 1e-12);
        }
    }
}

TEST(Dmd, MatchedProxyGivesExactlyZeroGradient) {
    DistillConfig cfg = tiny_config();
    DistillState st = DistillState::from_teacher(random_net(20), cfg);
    Rng rng(21);
    const Tensor z = rng.normal_tensor({16, 2});
    const Conditions c = classes(16);
    const auto pts = student_rollout_with_shared_points(st.student, st.schedule, z, c);
    for (bool noisier : {false, true}) {
        const auto grads = dmd_step_shared(st, select_dmd_inputs(pts, c, noisier), cfg, rng);
        EXPECT_LT(global_norm(grads), 1e-10);
        EXPECT_EQ(global_norm(grads), 0.0);
    }
    EXPECT_EQ(st.student.params(), st.teacher.params());
}

TEST(Dmd, GaussianScoresPushTowardTheData) {
    // Data N((2, 0), I); the student currently produces N(0, I).
    const double mu_real[] = {2.0, 0.0}, mu_fake[] = {0.0, 0.0};
    const Tensor x = Tensor::matrix(1, 2, {0.0, 0.0});
    for (double t : {0.25, 0.5, 0.75}) {
        const double ts[] = {t};
        const DmdDirection dir =
            dmd_direction_from_velocities(x, ts, analytic_velocity_gaussian(mu_real, 1.0, x, t),
                                          analytic_velocity_gaussian(mu_fake, 1.0, x, t), 0.125, 1e-8);
        // Descent on <w, x> moves x along -w.
        EXPECT_GT(-dir.weight.at(0, 0), 0.0);
        EXPECT_NEAR(dir.weight.at(0, 1), 0.0, 1e-15);
        const Tensor sr = analytic_score_gaussian(mu_real, 1.0, x, t);
        const Tensor sf = analytic_score_gaussian(mu_fake, 1.0, x, t);
        EXPECT_NEAR(dir.weight.at(0, 0) * dir.eta, sf.at(0, 0) - sr.at(0, 0), 1e-12);
    }
}

TEST(Dmd, SurrogateGradientMatchesFiniteDifferences) {
    // The stop-gradient noise estimate is frozen at the base parameters, so
    // the finite differences see exactly the surrogate being differentiated.
    const VelocityNet g = random_net(22, 2);
    Rng rng(23);
    const Tensor z = rng.normal_tensor({6, 2});
    const Conditions c = classes(6);
    const auto pts = student_rollout_with_shared_points(g, Schedule::uniform(4), z, c);
    for (bool noisier : {false, true}) {
        const DmdInputs in = select_dmd_inputs(pts, c, noisier);
        const Tensor w = rng.normal_tensor({6, 2});
        const Tensor noise = shared_noise(in, g.velocity(in.x_in, in.t_in, in.c));
        std::vector<Tensor> inputs;
        for (const auto& p : g.params()) inputs.push_back(p.value);
        auto f = [&](Tape& tape, const std::vector<Var>& v) {
            Var vel = g.forward(tape, v, tape.constant(in.x_in), in.t_in, in.c).velocity;
            Var x0_hat = sub(tape.constant(in.x_in), scale_rows(vel, in.t_in));
            return dmd_surrogate(renoise(x0_hat, in.t_target, noise), w);
        };
        const auto r = rfd::testing::check_gradients(f, inputs);
        EXPECT_GT(r.checked, 200u);
        EXPECT_LT(r.max_rel_error, 1e-4);
        // The recorded sample used in training carries the same gradient.
        Tape tape;
        auto b = g.bind(tape, true);
        Rng unused(0);
        tape.backward(dmd_surrogate(generator_sample(tape, g, b, in, true, unused, 0.125).x_theta, w));
        Tape ref_tape;
        auto rb = g.bind(ref_tape, true);
        ref_tape.backward(f(ref_tape, rb));
        const auto ga = collect_grads(tape, b), gb = collect_grads(ref_tape, rb);
        for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_LT(max_abs_diff(ga[i], gb[i]), 1e-14);
    }
}

TEST(Dmd, ScoreTimeBelowFloorIsRejected) {
    const Tensor x = Tensor::matrix(1, 2);
    const double ts[] = {0.1};
    EXPECT_THROW(dmd_direction_from_velocities(x, ts, x, x, 0.125, 1e-8), Error);
}

TEST(DmdStage, SharingRatioAndNoisierSwitch) {
    DistillConfig cfg = tiny_config();
    DistillState st = DistillState::from_teacher(random_net(24), cfg);
    st.stage = Stage::dmd;
    st.student = random_net(25);
    Rng rng(26);
    const SyntheticSet real = gen_synthetic_set(st.teacher, cfg.real_pool, rng, cfg.real_steps, 1.0);
    DiscriminatorBank bank(cfg.disc, 8, rng);
    StageLog log;
    run_dmd_stage(st, &bank, cfg, real, rng, log);
    ASSERT_EQ(log.rows.size(), 6u);
    EXPECT_EQ(log.score_evaluations, 6u * cfg.batch);
    EXPECT_EQ(log.off_schedule_scores, 0u);
    EXPECT_EQ(log.total(&StageLogRow::proxy_updates), 10 * log.total(&StageLogRow::generator_updates));
    EXPECT_EQ(log.total(&StageLogRow::disc_updates), log.total(&StageLogRow::proxy_updates));
    for (const auto& p : log.pairs) {
        EXPECT_TRUE(st.schedule.contains(p.target_t));
        if (p.iteration < 3)
            EXPECT_EQ(p.input_t, p.target_t + 0.25);
        else
            EXPECT_EQ(p.input_t, p.target_t);
    }
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(log.rows[i].noisier_start, i < 3);
    st.check_teacher("test");
    EXPECT_EQ(log.csv().size(), 6u);
}

TEST(DmdStage, SharingOffEvaluatesOffSchedule) {
    DistillConfig cfg = tiny_config();
    cfg.timestep_sharing = false;
    cfg.lambda_adv = 0.0;
    DistillState st = DistillState::from_teacher(random_net(27), cfg);
    st.stage = Stage::dmd;
    Rng rng(28);
    const SyntheticSet real = gen_synthetic_set(st.teacher, cfg.real_pool, rng, cfg.real_steps, 1.0);
    DiscriminatorBank bank(cfg.disc, 8, rng);
    const auto bank_hash = bank.hash();
    StageLog log;
    run_dmd_stage(st, &bank, cfg, real, rng, log);
    EXPECT_GT(log.off_schedule_scores, 0u);
    // Without the adversarial term the discriminator is never touched.
    EXPECT_EQ(log.total(&StageLogRow::disc_updates), 0u);
    EXPECT_EQ(bank.hash(), bank_hash);
}

TEST(DmdStage, SeedDeterministic) {
    DistillConfig cfg = tiny_config();
    cfg.pretrain_iterations = 5;
    cfg.dmd_iterations = 3;
    auto run = [&] {
        DistillState st = DistillState::from_teacher(random_net(29), cfg);
        Rng rng(30);
        StageLog log;
        pretrain_student(st, cfg, rng, log);
        const SyntheticSet real = gen_synthetic_set(st.teacher, cfg.real_pool, rng, cfg.real_steps, 1.0);
        DiscriminatorBank bank(cfg.disc, 8, rng);
        run_dmd_stage(st, &bank, cfg, real, rng, log);
        return std::pair{st.student.params().hash(), st.proxy.params().hash()};
    };
    EXPECT_EQ(run(), run());
}

TEST(DmdStage, WrongStageIsRefused) {
    DistillConfig cfg = tiny_config();
    DistillState st = DistillState::from_teacher(random_net(31), cfg);
    Rng rng(32);
    SyntheticSet real;
    StageLog log;
    EXPECT_THROW(run_dmd_stage(st, nullptr, cfg, real, rng, log), Error);
}

TEST(Proxy, UpdatesTrackAFrozenStudent) {
    std::vector<double> gains;
    for (std::uint64_t seed : {40, 41, 42}) {
        DistillConfig cfg = tiny_config();
        cfg.proxy_lr = 3e-3;
        DistillState st = DistillState::from_teacher(random_net(seed), cfg);
        st.student = random_net(seed + 100);
        Rng rng(seed);
        const Tensor hz = rng.normal_tensor({256, 2});
        const Conditions hc = classes(256);
        const Tensor held = sample(st.student, st.schedule, hz, hc).back().x;
        auto held_loss = [&] {
            Rng fixed(7);
            Tape tape;
            auto b = st.proxy.bind(tape, false);
            return flow_matching_loss(tape, st.proxy, b, held, hc, fixed, 0.0).loss.value().item();
        };
        const double before = held_loss();
        for (int i = 0; i < 500; ++i) {
            const Conditions c = draw_conditions(64, 8, rng);
            const Tensor x0 = sample(st.student, st.schedule, rng.normal_tensor({64, 2}), c).back().x;
            proxy_update(st, x0, c, rng, cfg);
        }
        gains.push_back(before - held_loss());
    }
    EXPECT_GT(median(gains), 0.0);
}

TEST(Split, RangesAndZeroIterationIdentity) {
    const auto [low, high] = split_ranges(Schedule::uniform(4), 0.5);
    EXPECT_EQ(low, (std::vector<std::size_t>{2, 3}));
    EXPECT_EQ(high, (std::vector<std::size_t>{0, 1}));
    DistillConfig cfg = tiny_config();
    cfg.split_iterations = 0;
    DistillState st = DistillState::from_teacher(random_net(33), cfg);
    st.student = random_net(34);
    const ParamSet before = st.student.params();
    Rng rng(35);
    const SyntheticSet real = gen_synthetic_set(st.teacher, 16, rng, 4, 1.0);
    StageLog log;
    const VelocityNet merged = split_timestep_finetune(st, nullptr, cfg, real, rng, log);
    EXPECT_TRUE(merged.params() == before);
    EXPECT_TRUE(st.student.params() == before);
}

TEST(Split, RefusesTwoStepAndTrainsBothBranches) {
    DistillConfig cfg = tiny_config();
    cfg.steps = 2;
    DistillState two = DistillState::from_teacher(random_net(36), cfg);
    Rng rng(37);
    const SyntheticSet real = gen_synthetic_set(two.teacher, 32, rng, 4, 1.0);
    StageLog log;
    EXPECT_THROW(split_timestep_finetune(two, nullptr, cfg, real, rng, log), Error);

    cfg = tiny_config();
    DistillState st = DistillState::from_teacher(random_net(36), cfg);
    st.student = random_net(38);
    const auto before = st.student.params().hash();
    DiscriminatorBank bank(cfg.disc, 8, rng);
    split_timestep_finetune(st, &bank, cfg, real, rng, log);
    EXPECT_NE(st.student.params().hash(), before);
    EXPECT_EQ(log.total(&StageLogRow::generator_updates), 2 * cfg.split_iterations);
    EXPECT_EQ(log.off_schedule_scores, 0u);
    st.check_teacher("test");
}

TEST(Gram, HandValuesAndInvariances) {
    const Tensor a = Tensor::matrix(2, 1, {1.0, 1.0}), b = Tensor::matrix(2, 1, {0.0, 0.0});
    const Tensor one[] = {a}, zero[] = {b};
    EXPECT_DOUBLE_EQ(gram_loss(one, zero), 1.0);
    EXPECT_EQ(gram_loss(one, one), 0.0);
    Rng rng(39);
    const Tensor f1 = rng.normal_tensor({7, 3}), f2 = rng.normal_tensor({5, 3});
    const std::size_t perm[] = {3, 0, 6, 1, 5, 2, 4};
    const Tensor p1 = gather_rows(f1, perm);
    const Tensor lhs[] = {f1, f2}, rhs[] = {f2, f1}, lhs_perm[] = {p1, f2};
    EXPECT_NEAR(gram_loss(lhs, rhs), gram_loss(lhs_perm, rhs), 1e-14);
    const Tensor just_one[] = {f1};
    EXPECT_THROW(gram_loss(lhs, just_one), Error);
    const Tensor narrow[] = {f1, Tensor::matrix(5, 2)};
    EXPECT_THROW(gram_loss(lhs, narrow), Error);
}

TEST(Gram, GradientMatchesFiniteDifferences) {
    Rng rng(40);
    auto f = [](Tape&, const std::vector<Var>& v) {
        const Var a[] = {v[0], v[1]}, b[] = {v[2], v[3]};
        return gram_loss(a, b);
    };
    const auto r = rfd::testing::check_gradients(
        f, {rng.normal_tensor({6, 3}), rng.normal_tensor({6, 2}), rng.normal_tensor({4, 3}), rng.normal_tensor({4, 2})},
        1e-5, {true, true, false, false});
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(TwoStep, SwapsScheduleAndZeroGramMatchesPlainStage) {
    DistillConfig cfg = tiny_config();
    cfg.lambda_gram = 0.0;
    cfg.lambda_adv = 0.0;
    auto base = [&] {
        DistillState st = DistillState::from_teacher(random_net(41), cfg);
        st.stage = Stage::dmd;
        st.student = random_net(42);
        return st;
    };
    DistillState a = base(), b = base();
    Rng ra(43), rb(43);
    const SyntheticSet real = gen_synthetic_set(a.teacher, 32, ra, 4, 1.0);
    rb = ra;
    StageLog la, lb;
    distill_two_step(a, nullptr, cfg, real, ra, la);
    EXPECT_EQ(a.schedule.steps(), (std::vector<double>{1.0, 0.5}));
    b.schedule = Schedule::uniform(2);
    b.stage = Stage::two_step;
    run_dmd_stage(b, nullptr, cfg, real, rb, lb, 0.0, cfg.two_step_iterations);
    EXPECT_EQ(a.student.params().hash(), b.student.params().hash());
    EXPECT_EQ(la.off_schedule_scores, 0u);
}
