#pragma once

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "rfd/config.hpp"
#include "rfd/experiment.hpp"
#include "rfd/io/csv.hpp"
#include "rfd/io/svg.hpp"
#include "rfd/models/checkpoint.hpp"

namespace rfd::cli {

namespace fs = std::filesystem;
using Meta = std::vector<std::pair<std::string, std::string>>;

// ---------------------------------------------------------------- hashing

/// Git blob id: sha1("blob <size>\0" + content).
inline std::string git_blob_sha1(const std::vector<char>& content) {
    const std::string head = "blob " + std::to_string(content.size()) + '\0';
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    require(ctx != nullptr, ErrorCode::internal, "cannot allocate a digest context");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, head.data(), head.size()) == 1 &&
                    EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, md, &len) == 1;
    EVP_MD_CTX_free(ctx);
    require(ok, ErrorCode::internal, "sha1 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string file_sha1(const fs::path& p) { return git_blob_sha1(read_file_bytes(p)); }

// ---------------------------------------------------------------- run directory

inline std::string timestamp_utc() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

/// One directory per invocation, owned through an exclusive lock file. The
/// resolved config and a manifest of input and output hashes are written on
/// success; neither contains wall-clock data, so reruns are byte-identical.
class RunDirectory {
public:
    RunDirectory(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
        fs::create_directories(dir_);
        lock_ = dir_ / ".lock";
        std::FILE* f = std::fopen(lock_.c_str(), "wx");
        if (!f) throw Error(ErrorCode::io, "run directory " + dir_.string() + " is locked by another command");
        std::fclose(f);
    }
    RunDirectory(const RunDirectory&) = delete;
    RunDirectory& operator=(const RunDirectory&) = delete;
    ~RunDirectory() {
        std::error_code ec;
        fs::remove(lock_, ec);
        // A command that failed before writing anything leaves no trace.
        if (fs::is_empty(dir_, ec) && !ec) fs::remove(dir_, ec);
    }

    static fs::path default_path(const fs::path& out_dir, const std::string& command, std::uint64_t seed) {
        return out_dir / (command + "-" + timestamp_utc() + "-seed" + std::to_string(seed));
    }

    const fs::path& dir() const { return dir_; }

    fs::path output(const std::string& name) {
        outputs_.push_back(name);
        return dir_ / name;
    }

    void input(const std::string& role, const fs::path& p) {
        require(fs::exists(p), ErrorCode::prerequisite, role + " " + p.string() + " does not exist");
        inputs_.push_back({{"role", role}, {"path", p.string()}, {"sha1", file_sha1(p)}});
    }

    void finish(const RunConfig& cfg, const Json& args) {
        io::save_text(dir_ / "config.json", to_json(cfg).dump(2) + "\n");
        Json m;
        m["command"] = command_;
        m["seed"] = cfg.seed;
        m["args"] = args;
        m["inputs"] = inputs_;
        Json outs = Json::array();
        for (const auto& name : outputs_) outs.push_back({{"file", name}, {"sha1", file_sha1(dir_ / name)}});
        outs.push_back({{"file", "config.json"}, {"sha1", file_sha1(dir_ / "config.json")}});
        m["outputs"] = outs;
        io::save_text(dir_ / "manifest.json", m.dump(2) + "\n");
    }

private:
    fs::path dir_;
    fs::path lock_;
    std::string command_;
    std::vector<std::string> outputs_;
    Json inputs_ = Json::array();
};

// ---------------------------------------------------------------- commands

inline Meta base_meta(const std::string& role, const RunConfig& cfg, std::size_t steps) {
    return {{"role", role}, {"seed", std::to_string(cfg.seed)}, {"steps", std::to_string(steps)}};
}

inline std::size_t checkpoint_steps(const Checkpoint& ck, const RunConfig& cfg) {
    if (ck.meta_value("role") == "teacher") return cfg.eval.teacher_steps;
    const std::string s = ck.meta_value("steps");
    require(!s.empty(), ErrorCode::format, "checkpoint has no steps entry; pass --steps");
    return std::stoul(s);
}

inline Checkpoint load_input(RunDirectory& run, const std::string& role, const fs::path& p, const RunConfig& cfg) {
    run.input(role, p);
    return load_checkpoint(p, &cfg.net);
}

inline void write_samples(RunDirectory& run, const Tensor& x, const Conditions& c, const RunConfig& cfg,
                          const std::string& title) {
    dataset_csv(x, c).save(run.output("samples.csv"));
    io::save_text(run.output("samples.svg"), io::scatter_svg(x, c, cfg.data.centers(), title));
}

inline void cmd_gen_data(const RunConfig& cfg, std::size_t n, RunDirectory& run) {
    Rng rng = Rng(cfg.seed).substream("gen_data");
    const Dataset d = gen_data(cfg.data, n, rng);
    dataset_csv(d.x, d.c).save(run.output("data.csv"));
    io::save_text(run.output("data.svg"), io::scatter_svg(d.x, d.c, cfg.data.centers(), "data"));
}

inline void cmd_train_teacher(const RunConfig& cfg, RunDirectory& run) {
    const TeacherRun t = train_teacher(cfg.data, cfg.net, cfg.teacher, cfg.seed);
    save_checkpoint(t.net, base_meta("teacher", cfg, cfg.eval.teacher_steps), Rng(cfg.seed).state(),
                    run.output("teacher.ckpt"));
    curve_csv(t.curve).save(run.output("curve.csv"));
}

struct DistillFlags {
    std::size_t steps = 4;
    bool no_adv = false;
    bool no_pretrain = false;
    bool no_timestep_sharing = false;
    bool no_refresh = false;
    bool split_ft = false;
};

inline std::string variant_name(const DistillFlags& f) {
    std::string s;
    auto add = [&](bool on, const char* name) {
        if (on) s += (s.empty() ? "" : "+") + std::string(name);
    };
    add(f.no_adv, "no_adv");
    add(f.no_pretrain, "no_pretrain");
    add(f.no_timestep_sharing, "no_timestep_sharing");
    add(f.no_refresh, "no_refresh");
    add(f.split_ft, "split_ft");
    if (f.steps == 2) s += (s.empty() ? "" : "+") + std::string("two_step");
    return s.empty() ? "full" : s;
}

inline void cmd_distill(RunConfig cfg, const fs::path& teacher_path, const std::optional<fs::path>& from,
                        const DistillFlags& f, RunDirectory& run) {
    require(f.steps == 4 || f.steps == 2, ErrorCode::config, "--steps must be 4 or 2");
    DistillConfig& d = cfg.distill;
    if (f.no_adv) d = apply_variant(d, Variant::no_adv);
    if (f.no_pretrain) d = apply_variant(d, Variant::no_pretrain);
    if (f.no_timestep_sharing) d = apply_variant(d, Variant::no_timestep_sharing);
    if (f.no_refresh) d = apply_variant(d, Variant::no_refresh);
    d.steps = 4;
    d.validate();

    const Checkpoint teacher = load_input(run, "teacher", teacher_path, cfg);
    require(teacher.meta_value("role") == "teacher", ErrorCode::prerequisite,
            teacher_path.string() + " is not a teacher checkpoint");
    const std::string teacher_hash = hex64(teacher.net.params().hash());

    StudentRun prior;
    const bool needs_prior = f.steps == 2 || f.split_ft;
    if (needs_prior) {
        const std::string what = f.steps == 2 ? "2-step distillation" : "split fine-tuning";
        if (!from) throw Error(ErrorCode::prerequisite, what + " needs a trained 4-step student (--from)");
        const Checkpoint s = load_input(run, "student", *from, cfg);
        if (s.meta_value("role") != "student" || s.meta_value("steps") != "4")
            throw Error(ErrorCode::prerequisite, what + " needs a trained 4-step student; " + from->string() +
                                                     " is not one");
        if (s.meta_value("teacher") != teacher_hash)
            throw Error(ErrorCode::prerequisite, from->string() + " was distilled from a different teacher");
        const fs::path proxy_path = from->parent_path() / "proxy.ckpt";
        prior.student = s.net;
        prior.proxy = load_input(run, "proxy", proxy_path, cfg).net;
        prior.steps = 4;
    } else if (from) {
        throw Error(ErrorCode::config, "--from only applies to --steps 2 or --split-ft");
    }

    StudentRun out;
    if (f.steps == 2) {
        require(!f.split_ft, ErrorCode::config, "--split-ft applies to 4-step students only");
        out = two_step_from(teacher.net, prior, d, cfg.seed);
    } else if (f.split_ft) {
        out = split_finetune(teacher.net, prior, d, cfg.seed);
    } else {
        out = distill_four_step(teacher.net, d, cfg.seed);
    }

    Meta meta = base_meta("student", cfg, out.steps);
    meta.push_back({"variant", variant_name(f)});
    meta.push_back({"teacher", teacher_hash});
    save_checkpoint(out.student, meta, Rng(cfg.seed).state(), run.output("student.ckpt"));
    Meta pmeta = base_meta("proxy", cfg, out.steps);
    pmeta.push_back({"teacher", teacher_hash});
    save_checkpoint(out.proxy, pmeta, Rng(cfg.seed).state(), run.output("proxy.ckpt"));
    out.log.csv().save(run.output("log.csv"));
}

inline MetricReport cmd_eval(const RunConfig& cfg, const fs::path& ckpt, std::optional<std::size_t> steps,
                             RunDirectory& run) {
    const Checkpoint ck = load_input(run, "checkpoint", ckpt, cfg);
    const std::size_t n_steps = steps ? *steps : checkpoint_steps(ck, cfg);
    const EvalSet e = make_eval_set(cfg.data, cfg.eval, cfg.seed);
    const std::string name = ck.meta_value("variant", ck.meta_value("role", "model"));
    const MetricReport r = evaluate_net(ck.net, n_steps, e, name);
    io::CsvWriter w(report_header());
    w.row(report_row(r));
    w.save(run.output("report.csv"));
    const Tensor x = sample_net(ck.net, n_steps, e.z, e.c, 1.0);
    io::save_text(run.output("samples.svg"), io::scatter_svg(x, e.c, e.centers, name));
    return r;
}

inline std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const std::optional<fs::path>& teacher_path,
                                           RunDirectory& run) {
    std::optional<Checkpoint> shared;
    if (teacher_path) shared = load_input(run, "teacher", *teacher_path, cfg);
    ArtifactCache cache(fs::path(cfg.out_dir) / "cache");
    std::vector<std::vector<AblationRow>> per_seed;
    std::vector<AblationRow> all;
    for (std::uint64_t s : cfg.seeds) {
        const VelocityNet teacher = shared ? shared->net : cached_teacher(cfg, s, cache);
        const EvalSet e = make_eval_set(cfg.data, cfg.eval, s);
        per_seed.push_back(run_ablation_matrix(teacher, cfg, s, e, cache));
        all.insert(all.end(), per_seed.back().begin(), per_seed.back().end());
    }
    ablation_csv(all).save(run.output("ablation.csv"));
    const AblationSummary sum = summarize_ablations(per_seed);
    io::CsvWriter w({"variant", "median_mmd2"});
    std::vector<std::pair<std::string, double>> bars;
    for (std::size_t v = 0; v < kAllVariants.size(); ++v) {
        w.row({to_string(kAllVariants[v]), io::format_double(sum.median_mmd[v])});
        bars.push_back({to_string(kAllVariants[v]), sum.median_mmd[v]});
    }
    w.save(run.output("ablation_summary.csv"));
    io::save_text(run.output("ablation.svg"), io::bar_svg(bars, "median MMD^2 by variant"));
    return all;
}

inline std::vector<QuantRow> cmd_quantize(const RunConfig& cfg, const fs::path& ckpt, int bits, RunDirectory& run) {
    const Checkpoint ck = load_input(run, "checkpoint", ckpt, cfg);
    const std::size_t steps = checkpoint_steps(ck, cfg);
    const VelocityNet q = quantize_weights(ck.net, bits);
    Meta meta = ck.meta;
    meta.push_back({"bits", std::to_string(bits)});
    save_checkpoint(q, meta, ck.rng_state, run.output("quantized.ckpt"));
    // The configured widths plus the requested one, with 64 as the reference row.
    std::vector<int> widths = cfg.eval.quant_bits;
    widths.push_back(64);
    widths.push_back(bits);
    std::sort(widths.begin(), widths.end());
    widths.erase(std::unique(widths.begin(), widths.end()), widths.end());
    const auto rows = quantization_tradeoff(ck.net, steps, widths, make_eval_set(cfg.data, cfg.eval, cfg.seed));
    quant_csv(rows).save(run.output("tradeoff.csv"));
    return rows;
}

inline void cmd_sample(const RunConfig& cfg, const fs::path& ckpt, std::size_t n, std::optional<std::size_t> steps,
                       double guidance, RunDirectory& run) {
    require(n > 0, ErrorCode::config, "--n must be positive");
    const Checkpoint ck = load_input(run, "checkpoint", ckpt, cfg);
    const std::size_t n_steps = steps ? *steps : checkpoint_steps(ck, cfg);
    Rng rng = Rng(cfg.seed).substream("sample");
    const Conditions c = draw_conditions(n, ck.net.config().num_classes, rng);
    const Tensor z = rng.normal_tensor({n, ck.net.config().input_dim});
    const Tensor x = sample_net(ck.net, n_steps, z, c, guidance);
    write_samples(run, x, c, cfg, ck.meta_value("role", "model") + " " + std::to_string(n_steps) + " steps");
}

} // namespace rfd::cli
