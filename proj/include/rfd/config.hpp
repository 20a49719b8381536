#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rfd/distill.hpp"
#include "rfd/models/velocity_net.hpp"
#include "rfd/ndcore/error.hpp"
#include "rfd/teacher.hpp"

namespace rfd {

using Json = nlohmann::ordered_json;

struct EvalConfig {
    std::size_t n = 10000;
    std::size_t teacher_steps = 50;
    double assign_radius = 0.9;
    double min_fraction = 0.02;
    /// 0 selects the median heuristic.
    double bandwidth = 0.0;
    std::vector<int> quant_bits = {64, 16, 8, 6};
};

/// Everything a command needs. Defaults are the desk-scale settings.
struct RunConfig {
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    DataSpec data;
    NetConfig net;
    TeacherConfig teacher;
    DistillConfig distill;
    EvalConfig eval;
    std::string out_dir = "runs";

    RunConfig() {
        net.width = 64;
        teacher.iterations = 3000;
        distill.inner_batch = 64;
        distill.dmd_iterations = 300;
        distill.split_iterations = 150;
        distill.two_step_iterations = 300;
        distill.disc.hidden = 16;
    }

    void validate() const {
        data.validate();
        require(net.num_classes == data.num_classes(), ErrorCode::config,
                "net.num_classes must equal the class count of the data spec");
        require(eval.n > 0, ErrorCode::config, "eval.n must be positive");
        require(eval.teacher_steps > 0, ErrorCode::config, "eval.teacher_steps must be positive");
        for (int b : eval.quant_bits)
            require(b == 6 || b == 8 || b == 16 || b == 64, ErrorCode::config,
                    "eval.quant_bits entries must be 6, 8, 16 or 64");
        distill.validate();
    }
};

namespace config_detail {

/// Strict reader for one JSON object: every key must be consumed, and every
/// error names the full path of the offending key.
class Reader {
public:
    Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw Error(ErrorCode::config, where() + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        seen_.insert(key);
        convert(*it, out, path_ + "." + key);
    }

    Reader child(const char* key) {
        static const Json empty = Json::object();
        auto it = j_.find(key);
        if (it == j_.end()) return Reader(empty, path_ + "." + key);
        seen_.insert(key);
        return Reader(*it, path_ + "." + key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw Error(ErrorCode::config, path_ + "." + it.key() + ": unknown key");
    }

private:
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    static void convert(const Json& v, double& out, const std::string& p) {
        if (!v.is_number()) throw Error(ErrorCode::config, p + ": expected a number");
        out = v.get<double>();
    }
    static void convert(const Json& v, bool& out, const std::string& p) {
        if (!v.is_boolean()) throw Error(ErrorCode::config, p + ": expected true or false");
        out = v.get<bool>();
    }
    static void convert(const Json& v, std::string& out, const std::string& p) {
        if (!v.is_string()) throw Error(ErrorCode::config, p + ": expected a string");
        out = v.get<std::string>();
    }
    template <class I>
        requires std::is_integral_v<I>
    static void convert(const Json& v, I& out, const std::string& p) {
        if (!v.is_number_integer()) throw Error(ErrorCode::config, p + ": expected an integer");
        if (std::is_unsigned_v<I> && v.is_number_integer() && !v.is_number_unsigned())
            throw Error(ErrorCode::config, p + ": expected a non-negative integer");
        out = v.get<I>();
    }
    template <class T>
    static void convert(const Json& v, std::vector<T>& out, const std::string& p) {
        if (!v.is_array()) throw Error(ErrorCode::config, p + ": expected an array");
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            T x{};
            convert(v[i], x, p + "[" + std::to_string(i) + "]");
            out.push_back(x);
        }
    }

    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace config_detail

inline Json to_json(const RunConfig& c) {
    Json j;
    j["seed"] = c.seed;
    j["seeds"] = c.seeds;
    j["out_dir"] = c.out_dir;
    j["data"] = {{"kind", to_string(c.data.kind)},
                 {"num_modes", c.data.num_modes},
                 {"radius", c.data.radius},
                 {"sigma", c.data.sigma},
                 {"mean", c.data.mean},
                 {"conditional", c.data.conditional}};
    j["net"] = {{"width", c.net.width},       {"depth", c.net.depth},       {"num_classes", c.net.num_classes},
                {"time_dim", c.net.time_dim}, {"cond_dim", c.net.cond_dim}};
    j["teacher"] = {{"iterations", c.teacher.iterations},
                    {"batch", c.teacher.batch},
                    {"lr", c.teacher.lr},
                    {"final_lr_fraction", c.teacher.final_lr_fraction},
                    {"weight_decay", c.teacher.weight_decay},
                    {"cond_dropout_p", c.teacher.cond_dropout_p},
                    {"divergence_factor", c.teacher.divergence_factor}};
    const DistillConfig& d = c.distill;
    j["distill"] = {{"steps", d.steps},
                    {"batch", d.batch},
                    {"inner_batch", d.inner_batch},
                    {"pretrain_iterations", d.pretrain_iterations},
                    {"dmd_iterations", d.dmd_iterations},
                    {"split_iterations", d.split_iterations},
                    {"two_step_iterations", d.two_step_iterations},
                    {"pretrain_lr", d.pretrain_lr},
                    {"generator_lr", d.generator_lr},
                    {"proxy_lr", d.proxy_lr},
                    {"proxy_cond_dropout", d.proxy_cond_dropout},
                    {"tg_substeps", d.tg_substeps},
                    {"trajectory_pool", d.trajectory_pool},
                    {"real_pool", d.real_pool},
                    {"real_steps", d.real_steps},
                    {"real_guidance", d.real_guidance},
                    {"lambda_adv", d.lambda_adv},
                    {"lambda_gram", d.lambda_gram},
                    {"normalizer_eps", d.normalizer_eps},
                    {"noisier_start_fraction", d.noisier_start_fraction},
                    {"timestep_sharing", d.timestep_sharing},
                    {"pretrain", d.pretrain},
                    {"updates_per_generator", d.updates_per_generator},
                    {"ema_beta", d.ema_beta},
                    {"merge_ratio", d.merge_ratio},
                    {"split_boundary", d.split_boundary},
                    {"divergence_factor", d.divergence_factor}};
    j["distill"]["disc"] = {{"t_star_levels", d.disc.t_star_levels},
                            {"taps", d.disc.taps.layers},
                            {"hidden", d.disc.hidden},
                            {"pool_group", d.disc.pool_group},
                            {"refresh_p", d.disc.refresh_p},
                            {"lr", d.disc.lr},
                            {"weight_decay", d.disc.weight_decay},
                            {"log_difference_loss", d.disc.log_difference_loss}};
    j["eval"] = {{"n", c.eval.n},
                 {"teacher_steps", c.eval.teacher_steps},
                 {"assign_radius", c.eval.assign_radius},
                 {"min_fraction", c.eval.min_fraction},
                 {"bandwidth", c.eval.bandwidth},
                 {"quant_bits", c.eval.quant_bits}};
    return j;
}

/// Overlays the keys present in `j` onto the defaults. Unknown keys and type
/// mismatches are errors that name the key path.
inline RunConfig config_from_json(const Json& j) {
    using config_detail::Reader;
    RunConfig c;
    Reader root(j, "");
    root.get("seed", c.seed);
    root.get("seeds", c.seeds);
    root.get("out_dir", c.out_dir);
    {
        Reader r = root.child("data");
        std::string kind = to_string(c.data.kind);
        r.get("kind", kind);
        try {
            c.data.kind = parse_data_kind(kind);
        } catch (const Error& e) {
            throw Error(ErrorCode::config, ".data.kind: " + std::string(e.what()));
        }
        r.get("num_modes", c.data.num_modes);
        r.get("radius", c.data.radius);
        r.get("sigma", c.data.sigma);
        r.get("mean", c.data.mean);
        r.get("conditional", c.data.conditional);
        r.finish();
    }
    {
        Reader r = root.child("net");
        r.get("width", c.net.width);
        r.get("depth", c.net.depth);
        r.get("num_classes", c.net.num_classes);
        r.get("time_dim", c.net.time_dim);
        r.get("cond_dim", c.net.cond_dim);
        r.finish();
    }
    {
        Reader r = root.child("teacher");
        r.get("iterations", c.teacher.iterations);
        r.get("batch", c.teacher.batch);
        r.get("lr", c.teacher.lr);
        r.get("final_lr_fraction", c.teacher.final_lr_fraction);
        r.get("weight_decay", c.teacher.weight_decay);
        r.get("cond_dropout_p", c.teacher.cond_dropout_p);
        r.get("divergence_factor", c.teacher.divergence_factor);
        r.finish();
    }
    {
        DistillConfig& d = c.distill;
        Reader r = root.child("distill");
        r.get("steps", d.steps);
        r.get("batch", d.batch);
        r.get("inner_batch", d.inner_batch);
        r.get("pretrain_iterations", d.pretrain_iterations);
        r.get("dmd_iterations", d.dmd_iterations);
        r.get("split_iterations", d.split_iterations);
        r.get("two_step_iterations", d.two_step_iterations);
        r.get("pretrain_lr", d.pretrain_lr);
        r.get("generator_lr", d.generator_lr);
        r.get("proxy_lr", d.proxy_lr);
        r.get("proxy_cond_dropout", d.proxy_cond_dropout);
        r.get("tg_substeps", d.tg_substeps);
        r.get("trajectory_pool", d.trajectory_pool);
        r.get("real_pool", d.real_pool);
        r.get("real_steps", d.real_steps);
        r.get("real_guidance", d.real_guidance);
        r.get("lambda_adv", d.lambda_adv);
        r.get("lambda_gram", d.lambda_gram);
        r.get("normalizer_eps", d.normalizer_eps);
        r.get("noisier_start_fraction", d.noisier_start_fraction);
        r.get("timestep_sharing", d.timestep_sharing);
        r.get("pretrain", d.pretrain);
        r.get("updates_per_generator", d.updates_per_generator);
        r.get("ema_beta", d.ema_beta);
        r.get("merge_ratio", d.merge_ratio);
        r.get("split_boundary", d.split_boundary);
        r.get("divergence_factor", d.divergence_factor);
        Reader disc = r.child("disc");
        disc.get("t_star_levels", d.disc.t_star_levels);
        disc.get("taps", d.disc.taps.layers);
        disc.get("hidden", d.disc.hidden);
        disc.get("pool_group", d.disc.pool_group);
        disc.get("refresh_p", d.disc.refresh_p);
        disc.get("lr", d.disc.lr);
        disc.get("weight_decay", d.disc.weight_decay);
        disc.get("log_difference_loss", d.disc.log_difference_loss);
        disc.finish();
        r.finish();
    }
    {
        Reader r = root.child("eval");
        r.get("n", c.eval.n);
        r.get("teacher_steps", c.eval.teacher_steps);
        r.get("assign_radius", c.eval.assign_radius);
        r.get("min_fraction", c.eval.min_fraction);
        r.get("bandwidth", c.eval.bandwidth);
        r.get("quant_bits", c.eval.quant_bits);
        r.finish();
    }
    root.finish();
    c.validate();
    return c;
}

inline RunConfig parse_config(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::config, std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

} // namespace rfd
