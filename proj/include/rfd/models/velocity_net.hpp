#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rfd/models/condition.hpp"
#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/ops.hpp"
#include "rfd/ndcore/params.hpp"
#include "rfd/ndcore/rng.hpp"
#include "rfd/ndcore/tape.hpp"

namespace rfd {

struct NetConfig {
    std::size_t input_dim = 2;
    std::size_t width = 128;
    std::size_t depth = 12;
    std::size_t num_classes = 8;
    std::size_t time_dim = 16;
    std::size_t cond_dim = 16;

    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Hidden-block indices whose outputs are exposed as features.
struct FeatureTaps {
    std::vector<std::size_t> layers;

    static FeatureTaps defaults() { return FeatureTaps{{3, 4, 5, 6, 8, 10, 11}}; }

    void validate(std::size_t depth) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i] >= depth)
                throw Error(ErrorCode::out_of_range,
                            "feature tap " + std::to_string(layers[i]) + " >= depth " + std::to_string(depth));
            if (i > 0)
                require(layers[i] > layers[i - 1], ErrorCode::invalid_argument, "feature taps must be sorted");
        }
    }
};

/// Conditional MLP velocity field v(x_t, t, c).
///
/// Input: [x, sin/cos time embedding, learned class embedding] -> affine -> silu,
/// then `depth` residual blocks h + silu(layer_norm(affine(h))), then a
/// zero-initialized affine head back to input_dim. The class-embedding table
/// has one extra row for the null condition.
class VelocityNet {
public:
    struct Output {
        Var velocity;
        std::vector<Var> features;
    };

    VelocityNet() = default;

    VelocityNet(NetConfig cfg, Rng& rng) : cfg_(cfg) {
        validate_config(cfg_);
        Rng init = rng.substream("velocity_net_init");
        params_.add("cond_embed", init.normal_tensor({cfg_.num_classes + 1, cfg_.cond_dim}));
        const std::size_t in_width = cfg_.input_dim + cfg_.time_dim + cfg_.cond_dim;
        params_.add("in.w", uniform_init(init, in_width, cfg_.width));
        params_.add("in.b", Tensor({cfg_.width}));
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::string p = "block" + std::to_string(l);
            params_.add(p + ".w", uniform_init(init, cfg_.width, cfg_.width));
            params_.add(p + ".b", Tensor({cfg_.width}));
            params_.add(p + ".ln_g", Tensor({cfg_.width}, 1.0));
            params_.add(p + ".ln_b", Tensor({cfg_.width}));
        }
        params_.add("out.w", Tensor::matrix(cfg_.width, cfg_.input_dim));
        params_.add("out.b", Tensor({cfg_.input_dim}));
    }

    /// Adopts an existing parameter set; its layout must match the config.
    VelocityNet(NetConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
        validate_config(cfg_);
        Rng dummy(0);
        VelocityNet reference(cfg_, dummy);
        if (!reference.params_.same_structure(params_))
            throw Error(ErrorCode::shape_mismatch,
                        "parameter layout does not match network config (width " + std::to_string(cfg_.width) +
                          ", depth " + std::to_string(cfg_.depth) + ")");
    }

    const NetConfig& config() const noexcept { return cfg_; }
    ParamSet& params() noexcept { return params_; }
    const ParamSet& params() const noexcept { return params_; }

    std::vector<Var> bind(Tape& tape, bool trainable) const { return params_.bind(tape, trainable); }

    /// Recorded forward pass. `t` holds one timestep per row (or a single shared one).
    Output forward(Tape& tape, std::span<const Var> bound, Var x, std::span<const double> t,
                   std::span<const Condition> conds, const FeatureTaps* taps = nullptr) const {
        const std::size_t n = x.value().rows();
        if (!(x.value().rank() == 2 && x.value().cols() == cfg_.input_dim))
            throw Error(ErrorCode::shape_mismatch,
                        "forward: x must be [n, " + std::to_string(cfg_.input_dim) + "]");
        require(conds.size() == n, ErrorCode::shape_mismatch, "forward: one condition per row");
        require(t.size() == n || t.size() == 1, ErrorCode::shape_mismatch, "forward: one timestep per row");
        require(bound.size() == params_.size(), ErrorCode::shape_mismatch, "forward: bound parameter count");
        if (taps) taps->validate(cfg_.depth);

        Tensor tcol = Tensor::matrix(n, 1);
        for (std::size_t r = 0; r < n; ++r) {
            const double tr = t.size() == 1 ? t[0] : t[r];
            require_unit_time(tr);
            tcol[r] = tr;
        }
        Var phase = matmul(tape.constant(std::move(tcol)), tape.constant(frequencies()));
        std::vector<std::size_t> rows(n);
        for (std::size_t r = 0; r < n; ++r) rows[r] = conds[r].embedding_row(cfg_.num_classes);
        Var cemb = gather_rows(bound[kCondEmbed], rows);

        Var h = silu(affine(concat({x, sin(phase), cos(phase), cemb}), bound[kInW], bound[kInB]));
        Output out;
        std::size_t next_tap = 0;
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::size_t base = kBlocks + 4 * l;
            Var z = affine(h, bound[base], bound[base + 1]);
            h = add(h, silu(layer_norm(z, bound[base + 2], bound[base + 3])));
            if (taps && next_tap < taps->layers.size() && taps->layers[next_tap] == l) {
                out.features.push_back(h);
                ++next_tap;
            }
        }
        const std::size_t o = kBlocks + 4 * cfg_.depth;
        out.velocity = affine(h, bound[o], bound[o + 1]);
        return out;
    }

    /// Gradient-free evaluation at a single shared timestep.
    Tensor operator()(const Tensor& x, double t, std::span<const Condition> conds) const {
        const double ts[1] = {t};
        return velocity(x, std::span<const double>(ts, 1), conds);
    }

    /// Gradient-free evaluation, chunked over rows to bound tape memory.
    Tensor velocity(const Tensor& x, std::span<const double> t, std::span<const Condition> conds) const {
        const std::size_t n = x.rows();
        require(conds.size() == n, ErrorCode::shape_mismatch, "velocity: one condition per row");
        Tensor out = Tensor::matrix(n, cfg_.input_dim);
        for (std::size_t b = 0; b < n; b += kChunk) {
            const std::size_t e = std::min(n, b + kChunk);
            Tape tape;
            auto bound = bind(tape, false);
            Var xv = tape.constant(take_rows(x, b, e));
            auto ts = t.size() == 1 ? t : t.subspan(b, e - b);
            Output o = forward(tape, bound, xv, ts, conds.subspan(b, e - b));
            std::copy(o.velocity.value().storage().begin(), o.velocity.value().storage().end(),
                      out.storage().begin() + static_cast<std::ptrdiff_t>(b * cfg_.input_dim));
        }
        return out;
    }

    /// Gradient-free features at the taps, plus the velocity as the last entry.
    std::vector<Tensor> features(const Tensor& x, double t, std::span<const Condition> conds,
                                 const FeatureTaps& taps) const {
        Tape tape;
        auto bound = bind(tape, false);
        const double ts[1] = {t};
        Output o = forward(tape, bound, tape.constant(x), std::span<const double>(ts, 1), conds, &taps);
        std::vector<Tensor> out;
        for (const Var& f : o.features) out.push_back(f.value());
        out.push_back(o.velocity.value());
        return out;
    }

    /// Parameter index of the hidden weight matrix of block l.
    static constexpr std::size_t block_weight_index(std::size_t l) noexcept { return kBlocks + 4 * l; }

private:
    static constexpr std::size_t kCondEmbed = 0;
    static constexpr std::size_t kInW = 1;
    static constexpr std::size_t kInB = 2;
    static constexpr std::size_t kBlocks = 3;
    static constexpr std::size_t kChunk = 256;

    static void validate_config(const NetConfig& c) {
        require(c.width > 0 && c.depth > 0 && c.input_dim > 0 && c.num_classes > 0, ErrorCode::invalid_argument,
                "network dimensions must be positive");
        require(c.time_dim >= 2 && c.time_dim % 2 == 0, ErrorCode::invalid_argument,
                "time embedding width must be even");
    }

    static void require_unit_time(double t) {
        require(t >= 0.0 && t <= 1.0, ErrorCode::out_of_range, "forward: t outside [0, 1]");
    }

    static Tensor uniform_init(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Tensor w = Tensor::matrix(fan_in, fan_out);
        for (double& v : w.storage()) v = rng.uniform(-bound, bound);
        return w;
    }

    /// Angular frequencies with periods log-spaced from 1 down to 1e-2.
    Tensor frequencies() const {
        const std::size_t pairs = cfg_.time_dim / 2;
        Tensor f = Tensor::matrix(1, pairs);
        for (std::size_t k = 0; k < pairs; ++k) {
            const double frac = pairs == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(pairs - 1);
            const double period = std::pow(10.0, -2.0 * frac);
            f[k] = 2.0 * std::numbers::pi / period;
        }
        return f;
    }

    NetConfig cfg_;
    ParamSet params_;
};

} // namespace rfd
