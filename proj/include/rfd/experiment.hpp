#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rfd/adversarial.hpp"
#include "rfd/config.hpp"
#include "rfd/distill.hpp"
#include "rfd/eval.hpp"
#include "rfd/models/checkpoint.hpp"
#include "rfd/models/weights.hpp"
#include "rfd/teacher.hpp"

namespace rfd {

// ---------------------------------------------------------------- evaluation set

/// Noise, conditions and a ground-truth reference drawn once per seed, so every
/// generator evaluated under the same seed sees the same inputs.
struct EvalSet {
    Tensor z;
    Conditions c;
    Tensor reference;
    Tensor centers;
    EvalOptions opts;
    std::uint64_t seed = 0;
};

inline EvalSet make_eval_set(const DataSpec& spec, const EvalConfig& ec, std::uint64_t seed) {
    Rng rng = Rng(seed).substream("eval");
    EvalSet e;
    const Dataset cond = gen_data(spec, ec.n, rng);
    const Dataset ref = gen_data(spec, ec.n, rng);
    e.c = cond.c;
    e.reference = ref.x;
    e.z = rng.normal_tensor({ec.n, 2});
    e.centers = spec.centers();
    e.opts = {.assign_radius = ec.assign_radius, .min_fraction = ec.min_fraction, .bandwidth = ec.bandwidth};
    e.seed = seed;
    return e;
}

/// MMD of a fresh ground-truth draw against the reference: the floor any
/// generator can reach at this sample size.
inline double data_baseline_mmd(const DataSpec& spec, const EvalSet& e) {
    Rng rng = Rng(e.seed).substream("eval_baseline");
    const Dataset d = gen_data(spec, e.reference.rows(), rng);
    return mmd_rbf(d.x, e.reference, e.opts.bandwidth);
}

inline MetricReport evaluate_net(const VelocityNet& net, std::size_t steps, const EvalSet& e, std::string generator,
                                 double guidance = 1.0) {
    const Tensor x = sample_net(net, steps, e.z, e.c, guidance);
    MetricReport r = evaluate(x, e.c, e.reference, e.centers, e.opts);
    r.seed = e.seed;
    r.generator = std::move(generator);
    return r;
}

// ---------------------------------------------------------------- artifact cache

/// Content-addressed checkpoint store. An empty directory disables caching.
class ArtifactCache {
public:
    ArtifactCache() = default;
    explicit ArtifactCache(std::filesystem::path dir) : dir_(std::move(dir)) {
        if (!dir_.empty()) std::filesystem::create_directories(dir_);
    }

    bool enabled() const { return !dir_.empty(); }

    std::filesystem::path path(const std::string& key) const { return dir_ / (key + ".ckpt"); }

    template <class Make>
    VelocityNet get_or_make(const std::string& key, Make&& make) {
        if (enabled()) {
            const auto p = path(key);
            if (std::filesystem::exists(p)) return load_checkpoint(p).net;
        }
        VelocityNet net = make();
        if (enabled()) {
            // Write then rename so a crashed run never leaves a torn entry.
            const auto p = path(key);
            const auto tmp = p.string() + ".tmp";
            save_checkpoint(net, {{"cache_key", key}}, Rng(0).state(), tmp);
            std::filesystem::rename(tmp, p);
        }
        return net;
    }

private:
    std::filesystem::path dir_;
};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string cache_key(const std::string& tag, const Json& j, std::uint64_t seed) {
    const std::string s = tag + "|" + j.dump() + "|" + std::to_string(seed);
    return tag + "-" + hex64(detail::fnv1a_bytes(s.data(), s.size()));
}

inline Json teacher_key_json(const RunConfig& rc) {
    const Json j = to_json(rc);
    return Json{{"data", j["data"]}, {"net", j["net"]}, {"teacher", j["teacher"]}};
}

inline VelocityNet cached_teacher(const RunConfig& rc, std::uint64_t seed, ArtifactCache& cache) {
    return cache.get_or_make(cache_key("teacher", teacher_key_json(rc), seed),
                             [&] { return train_teacher(rc.data, rc.net, rc.teacher, seed).net; });
}

// ---------------------------------------------------------------- pipeline stages

/// Output of a distillation stage. The proxy travels with the student so a
/// later stage can resume from files alone.
struct StudentRun {
    VelocityNet student;
    VelocityNet proxy;
    StageLog log;
    std::size_t steps = 4;
    std::uint64_t seed = 0;
    /// Generator updates in the stage that produced `student`.
    std::size_t generator_iterations = 0;
};

inline std::size_t stage_rows(const StageLog& log, Stage stage) {
    return static_cast<std::size_t>(std::count_if(log.rows.begin(), log.rows.end(),
                                                  [&](const StageLogRow& r) { return r.stage == to_string(stage); }));
}

namespace detail {

inline DistillState resume_state(const VelocityNet& teacher, const VelocityNet& student, const VelocityNet& proxy,
                                 const DistillConfig& cfg, std::size_t steps, Stage stage) {
    DistillConfig c = cfg;
    c.steps = steps;
    DistillState st = DistillState::from_teacher(teacher, c);
    require(student.config() == teacher.config() && proxy.config() == teacher.config(), ErrorCode::prerequisite,
            "student and proxy must share the teacher architecture");
    st.student = student;
    st.proxy = proxy;
    st.student_opt = AdamW(st.student.params(), {.lr = cfg.generator_lr});
    st.proxy_opt = AdamW(st.proxy.params(), {.lr = cfg.proxy_lr});
    st.stage = stage;
    return st;
}

inline SyntheticSet real_pool(const VelocityNet& teacher, const DistillConfig& cfg, std::uint64_t seed) {
    Rng rng = Rng(seed).substream("real_pool");
    return gen_synthetic_set(teacher, cfg.real_pool, rng, cfg.real_steps, cfg.real_guidance);
}

/// Runs `body` with a fresh discriminator bank, or none when the adversarial
/// weight is zero.
inline void with_bank(DistillState& st, const DistillConfig& cfg, const Rng& rng,
                      const std::function<void(DistillState&, DiscriminatorBank*)>& body) {
    Rng disc_rng = rng.substream("disc");
    if (cfg.lambda_adv > 0.0) {
        DiscriminatorBank bank(cfg.disc, st.teacher.config().width, disc_rng);
        body(st, &bank);
    } else {
        body(st, nullptr);
    }
}

} // namespace detail

/// Trajectory-guidance pretraining alone. Depends only on the teacher, the
/// pretraining settings and the seed, so ablation variants can share it.
inline VelocityNet pretrain_only(const VelocityNet& teacher, const DistillConfig& cfg, std::uint64_t seed,
                                 StageLog* log = nullptr) {
    DistillState st = DistillState::from_teacher(teacher, cfg);
    Rng rng = Rng(seed).substream("pretrain");
    StageLog local;
    pretrain_student(st, cfg, rng, log ? *log : local);
    return st.student;
}

inline Json pretrain_key_json(const RunConfig& rc) {
    const Json d = to_json(rc)["distill"];
    Json j = teacher_key_json(rc);
    for (const char* k : {"steps", "batch", "pretrain_iterations", "pretrain_lr", "tg_substeps", "trajectory_pool",
                          "real_guidance", "divergence_factor"})
        j[k] = d[k];
    return j;
}

/// Four-step distillation: optional pretraining followed by the DMD stage.
/// `pretrained` short-circuits the pretraining stage with a cached result.
inline StudentRun distill_four_step(const VelocityNet& teacher, const DistillConfig& cfg, std::uint64_t seed,
                                    const VelocityNet* pretrained = nullptr) {
    require(cfg.steps >= 4, ErrorCode::config, "distill_four_step expects steps >= 4");
    StudentRun out;
    out.steps = cfg.steps;
    VelocityNet init = teacher;
    if (cfg.pretrain && cfg.pretrain_iterations > 0)
        init = pretrained ? *pretrained : pretrain_only(teacher, cfg, seed, &out.log);
    DistillState st = detail::resume_state(teacher, init, teacher, cfg, cfg.steps, Stage::dmd);
    const SyntheticSet real = detail::real_pool(teacher, cfg, seed);
    Rng rng = Rng(seed).substream("dmd");
    detail::with_bank(st, cfg, rng,
                          [&](DistillState& s, DiscriminatorBank* bank) { run_dmd_stage(s, bank, cfg, real, rng, out.log); });
    out.student = st.student;
    out.proxy = st.proxy;
    out.seed = seed;
    out.generator_iterations = stage_rows(out.log, Stage::dmd);
    return out;
}

/// Split-timestep fine-tuning of a four-step student; returns the merged model.
inline StudentRun split_finetune(const VelocityNet& teacher, const StudentRun& four, const DistillConfig& cfg,
                                 std::uint64_t seed) {
    if (four.steps < 4)
        throw Error(ErrorCode::prerequisite, "split fine-tuning needs a student with at least 4 steps");
    DistillState st = detail::resume_state(teacher, four.student, four.proxy, cfg, four.steps, Stage::split_ft);
    const SyntheticSet real = detail::real_pool(teacher, cfg, seed);
    Rng rng = Rng(seed).substream("split_ft");
    StudentRun out;
    out.steps = four.steps;
    detail::with_bank(st, cfg, rng, [&](DistillState& s, DiscriminatorBank* bank) {
        split_timestep_finetune(s, bank, cfg, real, rng, out.log);
    });
    out.student = st.student;
    out.proxy = st.proxy;
    out.seed = seed;
    out.generator_iterations = stage_rows(out.log, Stage::split_ft);
    return out;
}

/// Two-step stage initialized from a trained four-step student.
inline StudentRun two_step_from(const VelocityNet& teacher, const StudentRun& four, const DistillConfig& cfg,
                                std::uint64_t seed) {
    if (four.steps != 4)
        throw Error(ErrorCode::prerequisite, "two-step distillation starts from a trained 4-step student");
    DistillState st = detail::resume_state(teacher, four.student, four.proxy, cfg, 4, Stage::dmd);
    const SyntheticSet real = detail::real_pool(teacher, cfg, seed);
    Rng rng = Rng(seed).substream("two_step");
    StudentRun out;
    out.steps = 2;
    detail::with_bank(st, cfg, rng, [&](DistillState& s, DiscriminatorBank* bank) {
        distill_two_step(s, bank, cfg, real, rng, out.log);
    });
    out.student = st.student;
    out.proxy = st.proxy;
    out.seed = seed;
    out.generator_iterations = stage_rows(out.log, Stage::two_step);
    return out;
}

// ---------------------------------------------------------------- ablations

enum class Variant { full, no_adv, no_pretrain, no_timestep_sharing, no_refresh };

inline constexpr std::array<Variant, 5> kAllVariants = {Variant::full, Variant::no_adv, Variant::no_pretrain,
                                                        Variant::no_timestep_sharing, Variant::no_refresh};

inline std::string to_string(Variant v) {
    switch (v) {
    case Variant::full: return "full";
    case Variant::no_adv: return "no_adv";
    case Variant::no_pretrain: return "no_pretrain";
    case Variant::no_timestep_sharing: return "no_timestep_sharing";
    case Variant::no_refresh: return "no_refresh";
    }
    return "?";
}

/// Iteration counts are left alone: every variant trains for the same budget.
inline DistillConfig apply_variant(DistillConfig cfg, Variant v) {
    switch (v) {
    case Variant::full: break;
    case Variant::no_adv: cfg.lambda_adv = 0.0; break;
    case Variant::no_pretrain: cfg.pretrain = false; break;
    case Variant::no_timestep_sharing: cfg.timestep_sharing = false; break;
    case Variant::no_refresh: cfg.disc.refresh_p = 0.0; break;
    }
    return cfg;
}

struct AblationRow {
    Variant variant = Variant::full;
    std::uint64_t seed = 0;
    std::size_t generator_iterations = 0;
    MetricReport report;
};

/// Every row of one seed must carry that seed and the same generator budget.
inline void check_paired(std::span<const AblationRow> rows) {
    require(rows.size() == kAllVariants.size(), ErrorCode::internal, "ablation matrix is missing variants");
    for (const auto& r : rows) {
        require(r.seed == rows[0].seed, ErrorCode::internal, "ablation variants ran under different seeds");
        require(r.generator_iterations == rows[0].generator_iterations, ErrorCode::internal,
                "ablation variants ran for different iteration counts");
    }
}

inline Json distill_key_json(const RunConfig& rc, const DistillConfig& d) {
    RunConfig c = rc;
    c.distill = d;
    Json j = teacher_key_json(rc);
    j["distill"] = to_json(c)["distill"];
    return j;
}

/// Student and proxy of a finished stage, with the run metadata kept in the
/// checkpoint so a cached result can still be audited.
template <class Make>
StudentRun cached_run(ArtifactCache& cache, const std::string& key, Make&& make) {
    const auto sp = cache.path(key + ".student"), pp = cache.path(key + ".proxy");
    if (cache.enabled() && std::filesystem::exists(sp) && std::filesystem::exists(pp)) {
        const Checkpoint s = load_checkpoint(sp);
        StudentRun r;
        r.student = s.net;
        r.proxy = load_checkpoint(pp).net;
        r.steps = std::stoul(s.meta_value("steps"));
        r.seed = std::stoull(s.meta_value("seed"));
        r.generator_iterations = std::stoul(s.meta_value("generator_iterations"));
        return r;
    }
    StudentRun r = make();
    if (cache.enabled()) {
        const std::vector<std::pair<std::string, std::string>> meta = {
            {"cache_key", key},
            {"steps", std::to_string(r.steps)},
            {"seed", std::to_string(r.seed)},
            {"generator_iterations", std::to_string(r.generator_iterations)}};
        save_checkpoint(r.proxy, meta, Rng(0).state(), pp);
        save_checkpoint(r.student, meta, Rng(0).state(), sp);
    }
    return r;
}

inline VelocityNet cached_pretrain(const VelocityNet& teacher, const RunConfig& rc, std::uint64_t seed,
                                   ArtifactCache& cache) {
    return cache.get_or_make(cache_key("pretrain", pretrain_key_json(rc), seed),
                             [&] { return pretrain_only(teacher, rc.distill, seed); });
}

/// Four-step student for one variant; variants that pretrain share one
/// cached pretraining result.
inline StudentRun cached_four_step(const VelocityNet& teacher, const RunConfig& rc, Variant v, std::uint64_t seed,
                                   ArtifactCache& cache) {
    const DistillConfig cfg = apply_variant(rc.distill, v);
    return cached_run(cache, cache_key("four-" + to_string(v), distill_key_json(rc, cfg), seed), [&] {
        if (!cfg.pretrain || cfg.pretrain_iterations == 0) return distill_four_step(teacher, cfg, seed);
        const VelocityNet pre = cached_pretrain(teacher, rc, seed, cache);
        return distill_four_step(teacher, cfg, seed, &pre);
    });
}

inline StudentRun cached_split(const VelocityNet& teacher, const RunConfig& rc, const StudentRun& four,
                               std::uint64_t seed, ArtifactCache& cache) {
    Json key = distill_key_json(rc, rc.distill);
    key["from"] = hex64(four.student.params().hash());
    return cached_run(cache, cache_key("split", key, seed),
                      [&] { return split_finetune(teacher, four, rc.distill, seed); });
}

inline StudentRun cached_two_step(const VelocityNet& teacher, const RunConfig& rc, const StudentRun& four,
                                  std::uint64_t seed, ArtifactCache& cache) {
    Json key = distill_key_json(rc, rc.distill);
    key["from"] = hex64(four.student.params().hash());
    return cached_run(cache, cache_key("two", key, seed),
                      [&] { return two_step_from(teacher, four, rc.distill, seed); });
}

/// Full pipeline plus four ablations for one seed. Pretraining is computed
/// once and shared by the variants that use it.
inline std::vector<AblationRow> run_ablation_matrix(const VelocityNet& teacher, const RunConfig& rc,
                                                    std::uint64_t seed, const EvalSet& eval, ArtifactCache& cache,
                                                    std::vector<StudentRun>* runs = nullptr) {
    std::vector<AblationRow> rows;
    for (Variant v : kAllVariants) {
        StudentRun run = cached_four_step(teacher, rc, v, seed, cache);
        AblationRow row;
        row.variant = v;
        row.seed = run.seed;
        row.generator_iterations = run.generator_iterations;
        row.report = evaluate_net(run.student, run.steps, eval, to_string(v));
        rows.push_back(row);
        if (runs) runs->push_back(std::move(run));
    }
    check_paired(rows);
    return rows;
}

struct AblationSummary {
    std::array<double, 5> median_mmd{};
    /// Ablations whose median MMD exceeds the full pipeline's.
    std::size_t wins = 0;
};

inline AblationSummary summarize_ablations(std::span<const std::vector<AblationRow>> per_seed) {
    AblationSummary s;
    for (std::size_t v = 0; v < kAllVariants.size(); ++v) {
        std::vector<double> m;
        for (const auto& rows : per_seed) m.push_back(rows.at(v).report.mmd2);
        s.median_mmd[v] = median(m);
    }
    for (std::size_t v = 1; v < kAllVariants.size(); ++v)
        if (s.median_mmd[0] < s.median_mmd[v]) ++s.wins;
    return s;
}

inline io::CsvWriter ablation_csv(std::span<const AblationRow> rows) {
    std::vector<std::string> header = {"variant", "generator_iterations"};
    for (auto& h : report_header()) header.push_back(h);
    io::CsvWriter w(header);
    for (const auto& r : rows) {
        std::vector<std::string> cells = {to_string(r.variant), std::to_string(r.generator_iterations)};
        for (auto& c : report_row(r.report)) cells.push_back(c);
        w.row(cells);
    }
    return w;
}

// ---------------------------------------------------------------- quantization

struct QuantRow {
    int bits = 64;
    std::size_t bytes = 0;
    MetricReport report;
    /// This row's MMD over the unquantized MMD.
    double mmd_ratio = 1.0;
};

inline std::vector<QuantRow> quantization_tradeoff(const VelocityNet& student, std::size_t steps,
                                                   std::vector<int> bits, const EvalSet& eval) {
    require(!bits.empty(), ErrorCode::invalid_argument, "quantization_tradeoff: no bit widths");
    std::sort(bits.begin(), bits.end(), std::greater<>());
    require(std::adjacent_find(bits.begin(), bits.end()) == bits.end(), ErrorCode::invalid_argument,
            "quantization_tradeoff: repeated bit width");
    const MetricReport base = evaluate_net(student, steps, eval, "unquantized");
    std::vector<QuantRow> rows;
    for (int b : bits) {
        QuantRow r;
        r.bits = b;
        r.bytes = parameter_bytes(student, b);
        r.report = evaluate_net(quantize_weights(student, b), steps, eval, "q" + std::to_string(b));
        r.mmd_ratio = r.report.mmd2 / std::max(base.mmd2, 1e-300);
        if (!rows.empty())
            require(r.bytes < rows.back().bytes, ErrorCode::internal, "parameter bytes must fall with bit width");
        rows.push_back(r);
    }
    return rows;
}

inline io::CsvWriter quant_csv(std::span<const QuantRow> rows) {
    std::vector<std::string> header = {"bits", "bytes", "mmd_ratio"};
    for (auto& h : report_header()) header.push_back(h);
    io::CsvWriter w(header);
    for (const auto& r : rows) {
        std::vector<std::string> cells = {std::to_string(r.bits), std::to_string(r.bytes), io::format_double(r.mmd_ratio)};
        for (auto& c : report_row(r.report)) cells.push_back(c);
        w.row(cells);
    }
    return w;
}

} // namespace rfd
