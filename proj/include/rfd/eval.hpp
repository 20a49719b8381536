#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rfd/io/csv.hpp"
#include "rfd/models/condition.hpp"
#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/tensor.hpp"

namespace rfd {

struct MetricReport {
    double mmd2 = 0.0;
    double energy_distance = 0.0;
    double mode_coverage = 0.0;
    double conditional_accuracy = 0.0;
    std::size_t n_samples = 0;
    std::uint64_t seed = 0;
    std::string generator;
};

namespace detail {

/// Rows in lexicographic order. Metric sums run over this canonical order so
/// results do not depend on how the caller ordered its samples.
inline Tensor sorted_rows(const Tensor& a) {
    const std::size_t n = a.rows();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
        return std::lexicographical_compare(a.row(x).begin(), a.row(x).end(), a.row(y).begin(), a.row(y).end());
    });
    return gather_rows(a, idx);
}

using ColArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

inline ColArray columns(const Tensor& a) {
    ColArray c(static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t j = 0; j < a.cols(); ++j) c(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = a.at(r, j);
    return c;
}

/// Sum over i, j of f(||a_i - b_j||^2). With `same` the off-diagonal pairs are
/// visited once and doubled, and the diagonal contributes f(0) each.
template <class F>
double pair_sum(const ColArray& a, const ColArray& b, bool same, F&& f) {
    const Eigen::Index n = a.rows(), m = b.rows(), d = a.cols();
    Eigen::ArrayXd d2(m);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index begin = same ? i + 1 : 0;
        const Eigen::Index len = m - begin;
        if (len <= 0) continue;
        auto seg = d2.head(len);
        seg.setZero();
        for (Eigen::Index j = 0; j < d; ++j) seg += (b.col(j).segment(begin, len) - a(i, j)).square();
        total += f(seg).sum();
    }
    if (same) total = 2.0 * total + static_cast<double>(n) * f(Eigen::ArrayXd::Zero(1)).sum();
    return total;
}

/// Orders the two sets so that cross sums are accumulated the same way for
/// (a, b) and (b, a).
inline void canonical_pair(ColArray& a, ColArray& b) {
    const auto key = [](const ColArray& x) {
        return std::vector<double>(x.data(), x.data() + x.size());
    };
    if (a.rows() > b.rows() || (a.rows() == b.rows() && key(b) < key(a))) std::swap(a, b);
}

inline void require_samples(const Tensor& a, const Tensor& b, const char* what) {
    require(a.rank() == 2 && b.rank() == 2 && a.rows() > 0 && b.rows() > 0, ErrorCode::invalid_argument,
            std::string(what) + ": sample sets must be nonempty");
    require(a.cols() == b.cols(), ErrorCode::shape_mismatch, std::string(what) + ": dimension mismatch");
}

} // namespace detail

/// Median pairwise distance over the union of a and b. Large unions are
/// thinned to at most 2000 points by a fixed stride over the sorted union.
inline double median_pairwise_distance(const Tensor& a, const Tensor& b) {
    detail::require_samples(a, b, "median_pairwise_distance");
    const Tensor u = detail::sorted_rows(vstack(a, b));
    const std::size_t n = u.rows();
    const std::size_t stride = (n + 1999) / 2000;
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n; i += stride) keep.push_back(i);
    const Tensor s = gather_rows(u, keep);
    std::vector<double> dist;
    dist.reserve(keep.size() * (keep.size() - 1) / 2);
    for (std::size_t i = 0; i < s.rows(); ++i)
        for (std::size_t j = i + 1; j < s.rows(); ++j) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < s.cols(); ++k) d2 += (s.at(i, k) - s.at(j, k)) * (s.at(i, k) - s.at(j, k));
            dist.push_back(std::sqrt(d2));
        }
    if (dist.empty()) return 1.0;
    auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
    std::nth_element(dist.begin(), mid, dist.end());
    return *mid > 0.0 ? *mid : 1.0;
}

/// Biased (V-statistic) squared MMD with k(u, v) = exp(-||u - v||^2 / (2 h^2)).
/// A non-positive bandwidth selects the median heuristic.
inline double mmd_rbf(const Tensor& a, const Tensor& b, double bandwidth = 0.0) {
    detail::require_samples(a, b, "mmd_rbf");
    const double h = bandwidth > 0.0 ? bandwidth : median_pairwise_distance(a, b);
    const double gamma = 1.0 / (2.0 * h * h);
    auto A = detail::columns(detail::sorted_rows(a));
    auto B = detail::columns(detail::sorted_rows(b));
    detail::canonical_pair(A, B);
    auto k = [gamma](const auto& d2) { return (-gamma * d2).exp(); };
    const double n = static_cast<double>(A.rows()), m = static_cast<double>(B.rows());
    const double kaa = detail::pair_sum(A, A, true, k) / (n * n);
    const double kbb = detail::pair_sum(B, B, true, k) / (m * m);
    const double kab = detail::pair_sum(A, B, false, k) / (n * m);
    return kaa + kbb - 2.0 * kab;
}

/// V-statistic energy distance 2 E|X - Y| - E|X - X'| - E|Y - Y'|.
inline double energy_distance(const Tensor& a, const Tensor& b) {
    detail::require_samples(a, b, "energy_distance");
    auto A = detail::columns(detail::sorted_rows(a));
    auto B = detail::columns(detail::sorted_rows(b));
    detail::canonical_pair(A, B);
    auto dist = [](const auto& d2) { return d2.sqrt(); };
    const double n = static_cast<double>(A.rows()), m = static_cast<double>(B.rows());
    const double xy = detail::pair_sum(A, B, false, dist) / (n * m);
    const double xx = detail::pair_sum(A, A, true, dist) / (n * n);
    const double yy = detail::pair_sum(B, B, true, dist) / (m * m);
    return 2.0 * xy - xx - yy;
}

/// Fraction of centers that receive at least `min_fraction` of the samples
/// within `assign_radius`.
inline double mode_coverage(const Tensor& samples, const Tensor& centers, double assign_radius,
                            double min_fraction = 0.02) {
    require(centers.rank() == 2 && centers.rows() > 0, ErrorCode::invalid_argument, "mode_coverage: no centers");
    const std::size_t n = samples.rows(), k = centers.rows();
    if (n == 0) return 0.0;
    require(samples.cols() == centers.cols(), ErrorCode::shape_mismatch, "mode_coverage: dimension mismatch");
    const double r2 = assign_radius * assign_radius;
    std::size_t covered = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < samples.cols(); ++j) {
                const double diff = samples.at(i, j) - centers.at(c, j);
                d2 += diff * diff;
            }
            if (d2 <= r2) ++hits;
        }
        if (static_cast<double>(hits) >= min_fraction * static_cast<double>(n)) ++covered;
    }
    return static_cast<double>(covered) / static_cast<double>(k);
}

inline std::size_t nearest_center(std::span<const double> x, const Tensor& centers) {
    std::size_t best = 0;
    double best_d2 = 0.0;
    for (std::size_t c = 0; c < centers.rows(); ++c) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) d2 += (x[j] - centers.at(c, j)) * (x[j] - centers.at(c, j));
        if (c == 0 || d2 < best_d2) {
            best = c;
            best_d2 = d2;
        }
    }
    return best;
}

/// Fraction of samples whose nearest center is their own class. Null
/// conditions count as misses.
inline double conditional_accuracy(const Tensor& samples, std::span<const Condition> conds, const Tensor& centers) {
    require(samples.rows() == conds.size(), ErrorCode::shape_mismatch,
            "conditional_accuracy: one condition per sample");
    require(centers.rows() > 0, ErrorCode::invalid_argument, "conditional_accuracy: no centers");
    if (conds.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < conds.size(); ++i)
        if (!conds[i].is_null() && nearest_center(samples.row(i), centers) == conds[i].class_id()) ++hits;
    return static_cast<double>(hits) / static_cast<double>(conds.size());
}

struct EvalOptions {
    double assign_radius = 0.9;
    double min_fraction = 0.02;
    double bandwidth = 0.0;
};

inline MetricReport evaluate(const Tensor& samples, std::span<const Condition> conds, const Tensor& reference,
                             const Tensor& centers, const EvalOptions& opt = {}) {
    MetricReport r;
    r.n_samples = samples.rows();
    r.mmd2 = mmd_rbf(samples, reference, opt.bandwidth);
    r.energy_distance = energy_distance(samples, reference);
    r.mode_coverage = mode_coverage(samples, centers, opt.assign_radius, opt.min_fraction);
    r.conditional_accuracy = conditional_accuracy(samples, conds, centers);
    return r;
}

inline double median(std::vector<double> v) {
    require(!v.empty(), ErrorCode::invalid_argument, "median of an empty list");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<std::string> report_header() {
    return {"generator", "seed", "n_samples", "mmd2", "energy_distance", "mode_coverage", "conditional_accuracy"};
}

inline std::vector<std::string> report_row(const MetricReport& r) {
    return {r.generator,
            std::to_string(r.seed),
            std::to_string(r.n_samples),
            io::format_double(r.mmd2),
            io::format_double(r.energy_distance),
            io::format_double(r.mode_coverage),
            io::format_double(r.conditional_accuracy)};
}

} // namespace rfd
