// acceptance: one PASS/FAIL line per criterion. Tolerances are pinned below.
//
// Trained artifacts go through a content-addressed cache (--cache), so later
// criteria reuse teachers and students built by earlier ones. Reported times
// are wall-clock for this invocation and therefore exclude cached work.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "rfd/experiment.hpp"
#include "support/autodiff_cases.hpp"
#include "support/fd_check.hpp"
#include "support/stats.hpp"

using namespace rfd;
namespace fs = std::filesystem;

namespace {

namespace tol {
constexpr double autodiff_rel = 1e-4;
constexpr int autodiff_points = 100;
constexpr double oracle_velocity_rel = 0.05;
constexpr double oracle_score_abs = 1e-8;
constexpr double teacher_mmd_factor = 3.0;
constexpr double dmd_zero_grad = 1e-10;
constexpr double surrogate_rel = 1e-4;
constexpr std::size_t dmd_run_iterations = 100;
constexpr double student_accuracy = 0.95;
constexpr double student_mmd_factor = 2.0;
constexpr std::size_t ablation_wins = 3;
constexpr double two_step_coverage = 7.0 / 8.0;
constexpr double refresh_p = 0.005;
constexpr double refresh_mass = 0.99;
constexpr std::size_t update_ratio = 10;

constexpr double seconds_autodiff = 60;
constexpr double seconds_oracle = 300;
constexpr double seconds_teacher = 600;
constexpr double seconds_four_step = 1800;
constexpr double seconds_ablation = 7200;
constexpr double seconds_invariants = 300;
} // namespace tol

constexpr double kFullCoverage = 1.0 - 1e-12;

std::string num(double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

std::string list(const std::vector<double>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + num(v[i]);
    return s + "]";
}

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        pass = pass && ok;
        notes.push_back(std::string(ok ? "" : "!! ") + what);
    }
};

/// Shared artifacts, built lazily and cached on disk.
class Lab {
public:
    Lab(RunConfig rc, ArtifactCache cache) : rc_(std::move(rc)), cache_(std::move(cache)) {}

    const RunConfig& config() const { return rc_; }
    ArtifactCache& cache() { return cache_; }

    const VelocityNet& teacher(std::uint64_t seed) {
        auto it = teachers_.find(seed);
        if (it == teachers_.end()) it = teachers_.emplace(seed, cached_teacher(rc_, seed, cache_)).first;
        return it->second;
    }

    const EvalSet& eval(std::uint64_t seed) {
        auto it = evals_.find(seed);
        if (it == evals_.end()) it = evals_.emplace(seed, make_eval_set(rc_.data, rc_.eval, seed)).first;
        return it->second;
    }

    const MetricReport& teacher_report(std::uint64_t seed) {
        auto it = teacher_reports_.find(seed);
        if (it == teacher_reports_.end())
            it = teacher_reports_
                     .emplace(seed, evaluate_net(teacher(seed), rc_.eval.teacher_steps, eval(seed), "teacher"))
                     .first;
        return it->second;
    }

    const StudentRun& four(std::uint64_t seed) {
        auto it = fours_.find(seed);
        if (it == fours_.end())
            it = fours_.emplace(seed, cached_four_step(teacher(seed), rc_, Variant::full, seed, cache_)).first;
        return it->second;
    }

private:
    RunConfig rc_;
    ArtifactCache cache_;
    std::map<std::uint64_t, VelocityNet> teachers_;
    std::map<std::uint64_t, EvalSet> evals_;
    std::map<std::uint64_t, MetricReport> teacher_reports_;
    std::map<std::uint64_t, StudentRun> fours_;
};

void check_runtime(Outcome& o, double seconds, double limit) {
    o.check(seconds < limit, "runtime " + num(seconds) + "s (limit " + num(limit) + "s)");
}

// ---------------------------------------------------------------- 1

Outcome autodiff(Lab&, double elapsed()) {
    Outcome o;
    Rng rng(101);
    double worst = 0.0;
    std::string worst_name;
    const auto cases = rfd::testing::primitive_cases();
    for (const auto& pc : cases) {
        const double e = rfd::testing::primitive_worst_error(pc, rng, tol::autodiff_points);
        if (e >= worst) {
            worst = e;
            worst_name = pc.name;
        }
    }
    o.check(worst < tol::autodiff_rel, std::to_string(cases.size()) + " primitives x " +
                                           std::to_string(tol::autodiff_points) + " points: max rel err " + num(worst) +
                                           " (" + worst_name + ", tol " + num(tol::autodiff_rel) + ")");
    const double mlp = rfd::testing::mlp3_worst_error(rng, tol::autodiff_points);
    o.check(mlp < tol::autodiff_rel, "random 3-layer net: max rel err " + num(mlp));
    check_runtime(o, elapsed(), tol::seconds_autodiff);
    return o;
}

// ---------------------------------------------------------------- 2

/// Single-Gaussian teacher used only for the oracle comparison. A shallower
/// net trained longer than the mixture teacher; see the README.
RunConfig oracle_config(const RunConfig& base) {
    RunConfig rc = base;
    rc.data = DataSpec{};
    rc.data.kind = DataKind::single_gaussian;
    rc.data.mean = {1.0, -0.5};
    rc.data.sigma = 0.5;
    rc.net.num_classes = 1;
    rc.net.depth = 4;
    rc.net.width = 64;
    rc.teacher.iterations = 16000;
    rc.teacher.batch = 512;
    rc.teacher.lr = 2e-3;
    rc.teacher.final_lr_fraction = 0.02;
    return rc;
}

/// 21x21 grid centred on the noised mean, spanning +-half_width standard
/// deviations of the marginal at time t.
Tensor oracle_grid(const DataSpec& s, double t, double half_width) {
    const double a = 1.0 - t, sd = std::sqrt(a * a * s.sigma * s.sigma + t * t);
    Tensor x = Tensor::matrix(441, 2);
    for (std::size_t i = 0; i < 21; ++i)
        for (std::size_t j = 0; j < 21; ++j) {
            x.at(i * 21 + j, 0) = a * s.mean[0] + sd * half_width * (static_cast<double>(i) / 10.0 - 1.0);
            x.at(i * 21 + j, 1) = a * s.mean[1] + sd * half_width * (static_cast<double>(j) / 10.0 - 1.0);
        }
    return x;
}

/// Max over grid points of |v - v*|, relative to the RMS of v* on the grid.
double oracle_error(const VelocityNet& net, const DataSpec& s, double t, double half_width) {
    const Tensor x = oracle_grid(s, t, half_width);
    const Conditions c(x.rows(), Condition::of(0));
    const Tensor v = net(x, t, c), vs = analytic_velocity_gaussian(s.mean, s.sigma, x, t);
    double rms = 0.0;
    for (double e : vs.data()) rms += e * e;
    rms = std::sqrt(rms / static_cast<double>(x.rows()));
    double worst = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r)
        worst = std::max(worst, std::hypot(v.at(r, 0) - vs.at(r, 0), v.at(r, 1) - vs.at(r, 1)) / rms);
    return worst;
}

Outcome oracle(Lab& lab, double elapsed()) {
    Outcome o;
    const RunConfig rc = oracle_config(lab.config());
    const VelocityNet net = cached_teacher(rc, 1, lab.cache());
    double inner = 0.0, outer = 0.0, score = 0.0;
    for (int k = 1; k <= 9; ++k) {
        const double t = k / 10.0;
        inner = std::max(inner, oracle_error(net, rc.data, t, 2.0));
        outer = std::max(outer, oracle_error(net, rc.data, t, 2.5));
        const Tensor x = oracle_grid(rc.data, t, 2.5);
        const Tensor s =
            score_from_velocity(x, analytic_velocity_gaussian(rc.data.mean, rc.data.sigma, x, t), t, 1e-3);
        score = std::max(score, max_abs_diff(s, analytic_score_gaussian(rc.data.mean, rc.data.sigma, x, t)));
    }
    o.check(inner < tol::oracle_velocity_rel, "teacher vs oracle velocity, +-2 sd grid x 9 times: max rel err " +
                                                   num(inner) + " (tol " + num(tol::oracle_velocity_rel) + ")");
    o.notes.push_back("same on +-2.5 sd grid (reported only): " + num(outer));
    o.check(score < tol::oracle_score_abs, "score_from_velocity(oracle) vs analytic score: max abs err " + num(score));
    check_runtime(o, elapsed(), tol::seconds_oracle);
    return o;
}

// ---------------------------------------------------------------- 3

Outcome teacher_quality(Lab& lab, double elapsed()) {
    Outcome o;
    std::vector<double> cov, mmd, base;
    for (std::uint64_t seed : lab.config().seeds) {
        const MetricReport& r = lab.teacher_report(seed);
        cov.push_back(r.mode_coverage);
        mmd.push_back(r.mmd2);
        base.push_back(data_baseline_mmd(lab.config().data, lab.eval(seed)));
    }
    o.check(median(cov) >= kFullCoverage, "median coverage " + num(median(cov)) + " per seed " + list(cov));
    o.check(median(mmd) <= tol::teacher_mmd_factor * median(base),
            "median MMD2 " + num(median(mmd)) + " vs " + num(tol::teacher_mmd_factor) + " x baseline " +
                num(median(base)) + "; teacher " + list(mmd) + " baseline " + list(base));
    check_runtime(o, elapsed(), tol::seconds_teacher);
    return o;
}

// ---------------------------------------------------------------- 4

Outcome dmd_invariants(Lab& lab, double elapsed()) {
    Outcome o;
    const RunConfig& rc = lab.config();
    const std::uint64_t seed = rc.seeds.front();
    const VelocityNet& teacher = lab.teacher(seed);

    {
        DistillState st = DistillState::from_teacher(teacher, rc.distill);
        Rng rng(401);
        const Dataset d = gen_data(rc.data, rc.distill.batch, rng);
        const Tensor z = rng.normal_tensor({d.c.size(), 2});
        const auto pts = student_rollout_with_shared_points(st.student, st.schedule, z, d.c);
        double worst = 0.0;
        for (bool noisier : {false, true})
            worst = std::max(worst, global_norm(dmd_step_shared(st, select_dmd_inputs(pts, d.c, noisier), rc.distill, rng)));
        o.check(worst < tol::dmd_zero_grad, "(a) proxy == student == teacher: generator grad norm " + num(worst));
    }
    {
        DistillConfig cfg = rc.distill;
        cfg.dmd_iterations = tol::dmd_run_iterations;
        const VelocityNet pre = cached_pretrain(teacher, rc, seed, lab.cache());
        const StudentRun run = distill_four_step(teacher, cfg, seed, &pre);
        const Schedule sched = Schedule::uniform(cfg.steps);
        std::size_t bad_pairs = 0;
        for (const auto& p : run.log.pairs) bad_pairs += sched.contains(p.target_t) && sched.contains(p.input_t) ? 0 : 1;
        const bool ok = run.log.off_schedule_scores == 0 && bad_pairs == 0 &&
                        run.generator_iterations == tol::dmd_run_iterations &&
                        run.log.score_evaluations == tol::dmd_run_iterations * cfg.batch;
        o.check(ok, "(b) " + std::to_string(run.generator_iterations) + "-iteration run: " +
                        std::to_string(run.log.score_evaluations) + " score evaluations, " +
                        std::to_string(run.log.off_schedule_scores) + " off schedule, " + std::to_string(bad_pairs) +
                        " off-schedule pairs");
    }
    {
        Rng rng(402);
        NetConfig nc;
        nc.width = 8;
        nc.depth = 2;
        nc.time_dim = 4;
        nc.cond_dim = 4;
        VelocityNet g(nc, rng);
        for (auto& p : g.params())
            if (p.name == "out.w" || p.name == "out.b")
                for (double& v : p.value.storage()) v = rng.uniform(-0.5, 0.5);
        const Dataset d = gen_data(rc.data, 6, rng);
        const Tensor z = rng.normal_tensor({6, 2});
        const auto pts = student_rollout_with_shared_points(g, Schedule::uniform(4), z, d.c);
        double worst = 0.0;
        std::size_t checked = 0;
        for (bool noisier : {false, true}) {
            const DmdInputs in = select_dmd_inputs(pts, d.c, noisier);
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
            worst = std::max(worst, r.max_rel_error);
            checked += r.checked;
        }
        o.check(worst < tol::surrogate_rel && checked > 0, "(c) surrogate vs finite differences over " +
                                                               std::to_string(checked) + " entries: max rel err " +
                                                               num(worst));
    }
    o.notes.push_back("time " + num(elapsed()) + "s");
    return o;
}

// ---------------------------------------------------------------- 5

Outcome four_step(Lab& lab, double elapsed()) {
    Outcome o;
    std::vector<double> cov, acc, mmd, teacher_mmd;
    for (std::uint64_t seed : lab.config().seeds) {
        const StudentRun& run = lab.four(seed);
        const MetricReport r = evaluate_net(run.student, run.steps, lab.eval(seed), "full");
        cov.push_back(r.mode_coverage);
        acc.push_back(r.conditional_accuracy);
        mmd.push_back(r.mmd2);
        teacher_mmd.push_back(lab.teacher_report(seed).mmd2);
    }
    o.check(median(cov) >= kFullCoverage, "median coverage " + num(median(cov)) + " " + list(cov));
    o.check(median(acc) >= tol::student_accuracy, "median accuracy " + num(median(acc)) + " " + list(acc));
    o.check(median(mmd) <= tol::student_mmd_factor * median(teacher_mmd),
            "median 4-step MMD2 " + num(median(mmd)) + " vs " + num(tol::student_mmd_factor) + " x teacher " +
                num(median(teacher_mmd)) + "; student " + list(mmd) + " teacher " + list(teacher_mmd));
    check_runtime(o, elapsed(), tol::seconds_four_step);
    return o;
}

// ---------------------------------------------------------------- 6

Outcome ablation(Lab& lab, double elapsed()) {
    Outcome o;
    std::vector<std::vector<AblationRow>> per_seed;
    for (std::uint64_t seed : lab.config().seeds)
        per_seed.push_back(run_ablation_matrix(lab.teacher(seed), lab.config(), seed, lab.eval(seed), lab.cache()));
    const AblationSummary s = summarize_ablations(per_seed);
    std::string detail = "median MMD2";
    for (std::size_t v = 0; v < kAllVariants.size(); ++v)
        detail += " " + to_string(kAllVariants[v]) + "=" + num(s.median_mmd[v]);
    o.check(s.wins >= tol::ablation_wins,
            "full beats " + std::to_string(s.wins) + "/4 ablations (need " + std::to_string(tol::ablation_wins) + ")");
    o.notes.push_back(detail);
    check_runtime(o, elapsed(), tol::seconds_ablation);
    return o;
}

// ---------------------------------------------------------------- 7

Outcome split(Lab& lab, double elapsed()) {
    Outcome o;
    const RunConfig& rc = lab.config();
    std::vector<double> pre, merged;
    for (std::uint64_t seed : rc.seeds) {
        const StudentRun& four = lab.four(seed);
        const StudentRun ft = cached_split(lab.teacher(seed), rc, four, seed, lab.cache());
        pre.push_back(evaluate_net(four.student, four.steps, lab.eval(seed), "full").conditional_accuracy);
        merged.push_back(evaluate_net(ft.student, ft.steps, lab.eval(seed), "split").conditional_accuracy);
    }
    o.check(median(merged) >= median(pre), "median accuracy merged " + num(median(merged)) + " " + list(merged) +
                                               " vs pre-merge " + num(median(pre)) + " " + list(pre));
    DistillConfig zero = rc.distill;
    zero.split_iterations = 0;
    const std::uint64_t seed = rc.seeds.front();
    const StudentRun same = split_finetune(lab.teacher(seed), lab.four(seed), zero, seed);
    o.check(same.student.params() == lab.four(seed).student.params(), "zero-iteration fine-tune returns the input bit for bit");
    o.notes.push_back("time " + num(elapsed()) + "s");
    return o;
}

// ---------------------------------------------------------------- 8

Outcome two_step(Lab& lab, double elapsed()) {
    Outcome o;
    const RunConfig& rc = lab.config();
    std::vector<double> two_mmd, four_mmd, two_cov;
    for (std::uint64_t seed : rc.seeds) {
        const StudentRun& four = lab.four(seed);
        const StudentRun two = cached_two_step(lab.teacher(seed), rc, four, seed, lab.cache());
        const MetricReport r2 = evaluate_net(two.student, two.steps, lab.eval(seed), "two_step");
        two_mmd.push_back(r2.mmd2);
        two_cov.push_back(r2.mode_coverage);
        four_mmd.push_back(evaluate_net(four.student, four.steps, lab.eval(seed), "full").mmd2);
    }
    o.check(median(two_mmd) >= median(four_mmd), "median MMD2 2-step " + num(median(two_mmd)) + " " + list(two_mmd) +
                                                     " vs 4-step " + num(median(four_mmd)) + " " + list(four_mmd));
    o.check(median(two_cov) >= tol::two_step_coverage - 1e-12,
            "median 2-step coverage " + num(median(two_cov)) + " " + list(two_cov));
    o.notes.push_back("time " + num(elapsed()) + "s");
    return o;
}

// ---------------------------------------------------------------- 9

Outcome invariants(Lab& lab, double elapsed()) {
    Outcome o;
    const RunConfig& rc = lab.config();
    const VelocityNet& net = lab.teacher(rc.seeds.front());

    {
        ParamSet live = net.params(), same = net.params();
        ema_update(same, live, 0.99);
        bool geometric = same == live;
        ParamSet shadow = live;
        for (auto& p : shadow) p.value = Tensor::zeros_like(p.value);
        const ParamSet start = shadow;
        for (int i = 0; i < 100; ++i) ema_update(shadow, live, 0.99);
        double worst = 0.0;
        const double decay = std::pow(0.99, 100);
        for (std::size_t i = 0; i < shadow.size(); ++i)
            for (std::size_t k = 0; k < shadow[i].value.size(); ++k)
                worst = std::max(worst, std::abs((shadow[i].value[k] - live[i].value[k]) -
                                                 decay * (start[i].value[k] - live[i].value[k])));
        geometric = geometric && worst < 1e-12;
        o.check(geometric, "EMA fixed point exact; 100-step geometric decay err " + num(worst));
    }
    {
        const VelocityNet& other = lab.teacher(rc.seeds.back());
        const ParamSet& a = net.params();
        const ParamSet& b = other.params();
        double reflect = 0.0;
        const ParamSet ab = merge_interpolate(a, b, 0.3), ba = merge_interpolate(b, a, 0.7);
        for (std::size_t i = 0; i < ab.size(); ++i) reflect = std::max(reflect, max_abs_diff(ab[i].value, ba[i].value));
        const bool ok = merge_interpolate(a, a, 0.3) == a && merge_interpolate(a, b, 1.0) == a &&
                        merge_interpolate(a, b, 0.0) == b && reflect < 1e-15;
        o.check(ok, "merge: m(a,a)=a, ratio 1 and 0 select endpoints, reflection err " + num(reflect));
    }
    {
        bool ok = quantize_weights(net, 64).params() == net.params();
        double worst_ratio = 0.0;
        for (int bits : {16, 8, 6}) {
            const VelocityNet q1 = quantize_weights(net, bits);
            ok = ok && quantize_weights(q1, bits).params() == q1.params();
            for (std::size_t i = 0; i < net.params().size(); ++i) {
                double m = 0.0;
                for (double v : net.params()[i].value.data()) m = std::max(m, std::abs(v));
                if (m == 0.0) continue;
                const double step = m / (std::ldexp(1.0, bits - 1) - 1.0);
                worst_ratio = std::max(worst_ratio, max_abs_diff(net.params()[i].value, q1.params()[i].value) / step);
            }
        }
        ok = ok && worst_ratio <= 0.5 * (1 + 1e-12);
        o.check(ok, "quantization idempotent at 16/8/6 bits; max error " + num(worst_ratio) + " steps (bound 0.5)");
    }
    const fs::path dir = fs::temp_directory_path() / ("rfd_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    {
        Rng rng(901);
        rng.normal();
        save_checkpoint(net, {{"role", "teacher"}}, rng.state(), dir / "t.ckpt");
        const Checkpoint ck = load_checkpoint(dir / "t.ckpt");
        save_checkpoint(ck.net, {{"role", "teacher"}}, ck.rng_state, dir / "t2.ckpt");
        const bool ok = ck.net.params() == net.params() && ck.rng_state == rng.state() &&
                        read_file_bytes(dir / "t.ckpt") == read_file_bytes(dir / "t2.ckpt");
        o.check(ok, "checkpoint round trip: parameters, rng state and re-encoded bytes identical");
    }
    {
        DiscConfig dc = rc.distill.disc;
        dc.refresh_p = tol::refresh_p;
        Rng rng(902);
        DiscriminatorBank bank(dc, rc.net.width, rng);
        const std::size_t calls = 10000;
        std::size_t total = 0;
        for (std::size_t i = 0; i < calls; ++i) total += bank.refresh(rng);
        const std::size_t n = calls * bank.size();
        const auto [lo, hi] = rfd::testing::binomial_interval(n, tol::refresh_p, tol::refresh_mass);
        o.check(total >= lo && total <= hi, "refresh: " + std::to_string(total) + " of " + std::to_string(n) +
                                                " head draws, 99% interval [" + std::to_string(lo) + ", " +
                                                std::to_string(hi) + "]");
    }
    {
        DistillConfig cfg = rc.distill;
        cfg.pretrain_iterations = 0;
        cfg.dmd_iterations = 12;
        const StudentRun run = distill_four_step(net, cfg, 903);
        run.log.csv().save(dir / "log.csv");
        const io::CsvTable t = io::read_csv(dir / "log.csv");
        const std::size_t pc = t.column("proxy_updates"), gc = t.column("generator_updates");
        std::size_t proxy = 0, gen = 0, bad_rows = 0;
        for (const auto& row : t.rows) {
            const std::size_t p = std::stoul(row[pc]), g = std::stoul(row[gc]);
            proxy += p;
            gen += g;
            bad_rows += p == tol::update_ratio * g ? 0 : 1;
        }
        o.check(gen == cfg.dmd_iterations && proxy == tol::update_ratio * gen && bad_rows == 0,
                "log.csv: " + std::to_string(proxy) + " proxy / " + std::to_string(gen) + " generator updates, " +
                    std::to_string(bad_rows) + " rows off 10:1");
    }
    fs::remove_all(dir);
    check_runtime(o, elapsed(), tol::seconds_invariants);
    return o;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria for the distillation lab"};
    std::vector<int> only;
    std::string cache_dir = "acceptance_cache";
    app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 9));
    app.add_option("--cache", cache_dir, "Artifact cache directory");
    CLI11_PARSE(app, argc, argv);

    using Criterion = Outcome (*)(Lab&, double (*)());
    const std::vector<std::pair<const char*, Criterion>> criteria = {
        {"autodiff soundness", autodiff},  {"oracle fidelity", oracle},     {"teacher quality", teacher_quality},
        {"DMD invariants", dmd_invariants}, {"4-step distillation", four_step}, {"ablation directionality", ablation},
        {"split-timestep fine-tuning", split}, {"two-step staging", two_step}, {"exact invariants", invariants}};

    const std::set<int> selected(only.begin(), only.end());
    Lab lab(RunConfig{}, ArtifactCache(cache_dir));
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.contains(id)) continue;
        static std::chrono::steady_clock::time_point start;
        start = std::chrono::steady_clock::now();
        auto elapsed = +[] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
        Outcome o;
        try {
            o = criteria[i].second(lab, elapsed);
        } catch (const std::exception& e) {
            o.check(false, std::string("error: ") + e.what());
        }
        all = all && o.pass;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << "\n";
        for (const auto& n : o.notes) std::cout << "    " << n << "\n";
        std::cout.flush();
    }
    return all ? 0 : 1;
}
