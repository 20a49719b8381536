#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfd/io/csv.hpp"
#include "rfd/models/velocity_net.hpp"
#include "rfd/ndcore/adamw.hpp"
#include "rfd/ndcore/ops.hpp"
#include "rfd/ndcore/params.hpp"
#include "rfd/ndcore/rng.hpp"
#include "rfd/ndcore/tape.hpp"

namespace rfd {

struct DiscConfig {
    std::vector<double> t_star_levels = {0.95, 0.75, 0.5, 0.25, 0.05};
    FeatureTaps taps = FeatureTaps::defaults();
    std::size_t hidden = 32;
    /// Rows mean-pooled together between the per-sample and the pooled layers.
    std::size_t pool_group = 8;
    double refresh_p = 0.005;
    double lr = 1e-3;
    double weight_decay = 0.0;
    /// Train heads on -E_r log D + E_f log D instead of the
    /// standard two-sided objective.
    bool log_difference_loss = false;

    void validate() const {
        require(!t_star_levels.empty(), ErrorCode::config, "discriminator needs at least one t* level");
        for (double t : t_star_levels)
            require(t > 0.0 && t < 1.0, ErrorCode::config, "t* levels must lie in (0, 1)");
        require(hidden > 0 && pool_group > 0, ErrorCode::config, "discriminator widths must be positive");
        require(refresh_p >= 0.0 && refresh_p <= 1.0, ErrorCode::config, "refresh probability outside [0, 1]");
    }
};

/// Eight linear layers with layer_norm and silu in between. The first four see
/// each feature row on its own; their output is mean-pooled over groups of
/// rows before the last four reduce each group to one logit.
class DiscriminatorHead {
public:
    static constexpr std::size_t kLayers = 8;
    static constexpr std::size_t kPerSample = 4;

    DiscriminatorHead() = default;
    DiscriminatorHead(std::size_t in_dim, std::size_t hidden, Rng& rng) : in_dim_(in_dim), hidden_(hidden) {
        reinitialize(rng);
    }

    void reinitialize(Rng& rng) {
        params_ = ParamSet();
        for (std::size_t k = 0; k < kLayers; ++k) {
            const std::size_t fan_in = k == 0 ? in_dim_ : hidden_;
            const std::size_t fan_out = k + 1 == kLayers ? 1 : hidden_;
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            Tensor w = Tensor::matrix(fan_in, fan_out);
            for (double& v : w.storage()) v = rng.uniform(-bound, bound);
            params_.add("l" + std::to_string(k) + ".w", std::move(w));
            params_.add("l" + std::to_string(k) + ".b", Tensor({fan_out}));
            if (k + 1 < kLayers) {
                params_.add("ln" + std::to_string(k) + ".g", Tensor({hidden_}, 1.0));
                params_.add("ln" + std::to_string(k) + ".b", Tensor({hidden_}));
            }
        }
    }

    ParamSet& params() noexcept { return params_; }
    const ParamSet& params() const noexcept { return params_; }

    /// Logits [rows / group, 1] for feature rows [rows, in_dim].
    Var forward(std::span<const Var> bound, Var features, std::size_t group) const {
        require(bound.size() == params_.size(), ErrorCode::shape_mismatch, "head: bound parameter count");
        const std::size_t rows = features.value().rows();
        require(features.value().cols() == in_dim_, ErrorCode::shape_mismatch, "head: feature width");
        require(rows % group == 0, ErrorCode::shape_mismatch,
                "head: batch must be a multiple of the pool group");
        Var h = features;
        std::size_t p = 0;
        for (std::size_t k = 0; k < kLayers; ++k) {
            if (k == kPerSample) h = group_mean_rows(h, group);
            h = affine(h, bound[p], bound[p + 1]);
            p += 2;
            if (k + 1 < kLayers) {
                h = silu(layer_norm(h, bound[p], bound[p + 1]));
                p += 2;
            }
        }
        return h;
    }

private:
    std::size_t in_dim_ = 0;
    std::size_t hidden_ = 0;
    ParamSet params_;
};

/// Features per (t* level, tap): feats[level][tap].
using LevelFeatures = std::vector<std::vector<Tensor>>;

/// Noises x0 to each t* level with fresh noise and reads the proxy taps.
inline LevelFeatures extract_disc_features(const VelocityNet& proxy, const Tensor& x0, std::span<const Condition> c,
                                           const DiscConfig& cfg, Rng& rng) {
    LevelFeatures out;
    for (double t_star : cfg.t_star_levels) {
        require(t_star > 0.0 && t_star < 1.0, ErrorCode::out_of_range, "t* must lie in (0, 1)");
        const Tensor eps = rng.normal_tensor(x0.shape());
        Tensor xt = axpy((1.0 - t_star) * x0, t_star, eps);
        auto f = proxy.features(xt, t_star, c, cfg.taps);
        f.pop_back();
        out.push_back(std::move(f));
    }
    return out;
}

/// Recorded variant: gradients flow from the features back into x0, while the
/// proxy parameters are bound as constants.
inline std::vector<std::vector<Var>> extract_disc_features(Tape& tape, const VelocityNet& proxy,
                                                           std::span<const Var> proxy_bound, Var x0,
                                                           std::span<const Condition> c, const DiscConfig& cfg,
                                                           Rng& rng) {
    std::vector<std::vector<Var>> out;
    for (double t_star : cfg.t_star_levels) {
        require(t_star > 0.0 && t_star < 1.0, ErrorCode::out_of_range, "t* must lie in (0, 1)");
        const Tensor eps = rng.normal_tensor(x0.value().shape());
        Var xt = add(scale(x0, 1.0 - t_star), tape.constant(t_star * eps));
        const double ts[1] = {t_star};
        out.push_back(proxy.forward(tape, proxy_bound, xt, std::span<const double>(ts, 1), c, &cfg.taps).features);
    }
    return out;
}

/// -E log sigma(D_real) - E log(1 - sigma(D_fake)).
inline Var disc_loss_from_logits(Var real, Var fake) {
    return sub(scale(mean(log_sigmoid(real)), -1.0), mean(log_sigmoid(scale(fake, -1.0))));
}

/// -E log sigma(D_real) + E log sigma(D_fake).
inline Var log_difference_disc_loss(Var real, Var fake) {
    return sub(mean(log_sigmoid(fake)), mean(log_sigmoid(real)));
}

/// -E log sigma(D_fake).
inline Var gen_loss_from_logits(Var fake) { return scale(mean(log_sigmoid(fake)), -1.0); }

struct HeadStats {
    double real_logit = 0.0;
    double fake_logit = 0.0;
    double loss = 0.0;
};

/// One head per (tap, t* level), each with its own optimizer.
class DiscriminatorBank {
public:
    DiscriminatorBank() = default;

    DiscriminatorBank(DiscConfig cfg, std::size_t feature_width, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng init = rng.substream("disc_init");
        for (std::size_t i = 0; i < cfg_.t_star_levels.size() * cfg_.taps.layers.size(); ++i) {
            heads_.emplace_back(feature_width, cfg_.hidden, init);
            opts_.emplace_back(heads_.back().params(), AdamWConfig{.lr = cfg_.lr, .weight_decay = cfg_.weight_decay});
        }
        feature_width_ = feature_width;
        stats_.resize(heads_.size());
    }

    const DiscConfig& config() const noexcept { return cfg_; }
    std::size_t size() const noexcept { return heads_.size(); }
    std::size_t num_levels() const noexcept { return cfg_.t_star_levels.size(); }
    std::size_t num_taps() const noexcept { return cfg_.taps.layers.size(); }
    std::size_t head_index(std::size_t level, std::size_t tap) const noexcept { return level * num_taps() + tap; }

    DiscriminatorHead& head(std::size_t i) { return heads_.at(i); }
    const DiscriminatorHead& head(std::size_t i) const { return heads_.at(i); }
    const AdamW& optimizer(std::size_t i) const { return opts_.at(i); }
    const std::vector<HeadStats>& last_stats() const noexcept { return stats_; }

    /// Sum over heads of the discriminator loss, with one optimizer step per
    /// head. Features are values only; nothing upstream receives gradients.
    double disc_step(const LevelFeatures& real, const LevelFeatures& fake) {
        check_structure(real);
        check_structure(fake);
        double total = 0.0;
        for (std::size_t l = 0; l < num_levels(); ++l)
            for (std::size_t k = 0; k < num_taps(); ++k) {
                const std::size_t h = head_index(l, k);
                Tape tape;
                auto bound = heads_[h].params().bind(tape, true);
                const auto [dr, df] = pair_logits(tape, h, bound, real[l][k], fake[l][k]);
                Var loss = cfg_.log_difference_loss ? log_difference_disc_loss(dr, df) : disc_loss_from_logits(dr, df);
                tape.backward(loss);
                opts_[h].step(heads_[h].params(), collect_grads(tape, bound));
                stats_[h] = {mean_of(dr.value()), mean_of(df.value()), loss.value().item()};
                total += stats_[h].loss;
            }
        return total;
    }

    /// Discriminator loss over all heads without updating anything.
    double disc_loss(const LevelFeatures& real, const LevelFeatures& fake) const {
        check_structure(real);
        check_structure(fake);
        double total = 0.0;
        for (std::size_t l = 0; l < num_levels(); ++l)
            for (std::size_t k = 0; k < num_taps(); ++k) {
                const std::size_t h = head_index(l, k);
                Tape tape;
                auto bound = heads_[h].params().bind(tape, false);
                const auto [dr, df] = pair_logits(tape, h, bound, real[l][k], fake[l][k]);
                Var loss = cfg_.log_difference_loss ? log_difference_disc_loss(dr, df) : disc_loss_from_logits(dr, df);
                total += loss.value().item();
            }
        return total;
    }

    /// Generator loss summed over heads, recorded on the caller's tape with
    /// the head parameters frozen.
    Var gen_loss(Tape& tape, const std::vector<std::vector<Var>>& fake) const {
        require(fake.size() == num_levels(), ErrorCode::shape_mismatch, "gen_loss: level count");
        Var total = tape.constant(Tensor::scalar(0.0));
        for (std::size_t l = 0; l < num_levels(); ++l) {
            require(fake[l].size() == num_taps(), ErrorCode::shape_mismatch, "gen_loss: tap count");
            for (std::size_t k = 0; k < num_taps(); ++k) {
                const std::size_t h = head_index(l, k);
                auto bound = heads_[h].params().bind(tape, false);
                total = add(total, gen_loss_from_logits(heads_[h].forward(bound, fake[l][k], cfg_.pool_group)));
            }
        }
        return total;
    }

    /// Re-initializes each head with probability refresh_p and zeroes its
    /// optimizer state. Returns how many heads were refreshed.
    std::size_t refresh(Rng& rng) {
        std::size_t count = 0;
        for (std::size_t h = 0; h < heads_.size(); ++h) {
            if (!rng.bernoulli(cfg_.refresh_p)) continue;
            heads_[h].reinitialize(rng);
            opts_[h].reset(heads_[h].params());
            ++count;
        }
        return count;
    }

    /// One row per head: iteration, level, tap, mean logits and loss.
    void append_stats(io::CsvWriter& csv, std::size_t iteration) const {
        for (std::size_t l = 0; l < num_levels(); ++l)
            for (std::size_t k = 0; k < num_taps(); ++k) {
                const HeadStats& s = stats_[head_index(l, k)];
                csv.row({std::to_string(iteration), io::format_double(cfg_.t_star_levels[l]),
                         std::to_string(cfg_.taps.layers[k]), io::format_double(s.real_logit),
                         io::format_double(s.fake_logit), io::format_double(s.loss)});
            }
    }

    static std::vector<std::string> stats_header() {
        return {"iteration", "t_star", "tap", "real_logit", "fake_logit", "loss"};
    }

    std::uint64_t hash() const noexcept {
        std::uint64_t h = 0;
        for (const auto& head : heads_) h = h * 0x100000001B3ULL ^ head.params().hash();
        return h;
    }

private:
    // Real and fake rows share one pass; pool groups never straddle the two.
    std::pair<Var, Var> pair_logits(Tape& tape, std::size_t h, std::span<const Var> bound, const Tensor& real,
                                    const Tensor& fake) const {
        const std::size_t g = cfg_.pool_group;
        require(real.rows() % g == 0 && fake.rows() % g == 0, ErrorCode::shape_mismatch,
                "discriminator: batch must be a multiple of the pool group");
        Var both = heads_[h].forward(bound, tape.constant(vstack(real, fake)), g);
        std::vector<std::size_t> ri(real.rows() / g), fi(fake.rows() / g);
        for (std::size_t i = 0; i < ri.size(); ++i) ri[i] = i;
        for (std::size_t i = 0; i < fi.size(); ++i) fi[i] = ri.size() + i;
        return {gather_rows(both, ri), gather_rows(both, fi)};
    }

    void check_structure(const LevelFeatures& f) const {
        require(f.size() == num_levels(), ErrorCode::shape_mismatch, "discriminator: level count mismatch");
        for (const auto& level : f) {
            require(level.size() == num_taps(), ErrorCode::shape_mismatch, "discriminator: tap count mismatch");
            for (const auto& t : level)
                require(t.cols() == feature_width_, ErrorCode::shape_mismatch, "discriminator: feature width mismatch");
        }
    }

    static double mean_of(const Tensor& t) {
        double s = 0.0;
        for (double v : t.data()) s += v;
        return s / static_cast<double>(t.size());
    }

    DiscConfig cfg_;
    std::size_t feature_width_ = 0;
    std::vector<DiscriminatorHead> heads_;
    std::vector<AdamW> opts_;
    std::vector<HeadStats> stats_;
};

} // namespace rfd
