#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "rfd/ndcore/tape.hpp"
#include "rfd/ndcore/tensor.hpp"

// Differentiable primitives. Tensors are treated as row-major matrices: rank-2
// is [rows, cols], rank-1 is a single row, rank-0 a scalar.

namespace rfd {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline CMapMat cmap(const Tensor& t) {
    return CMapMat(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}
inline MapMat map(Tensor& t) {
    return MapMat(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

inline Tape& same_tape(Var a, Var b) {
    require(a.tape != nullptr && a.tape == b.tape, ErrorCode::invalid_argument,
            "operands live on different tapes");
    return *a.tape;
}

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) noexcept { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline bool is_row_of(const Tensor& b, const Tensor& a) {
    return (b.rank() == 1 || (b.rank() == 2 && b.rows() == 1)) && b.cols() == a.cols() && a.rank() == 2;
}

template <class F>
Var unary(Var a, const char* op, F&& f, std::function<double(double, double)> df) {
    Tape& tape = *a.tape;
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    const std::size_t ai = a.id;
    return tape.record(std::move(out), {ai},
                       [ai, df = std::move(df)](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           const Tensor& x = tp.value(ai);
                           const Tensor& y = tp.value(self);
                           Tensor& ga = tp.grad_slot(ai);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
                       },
                       op);
}

} // namespace detail

/// Elementwise a + b, or a [n,d] + row b [d] broadcast over rows.
inline Var add(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t ai = a.id, bi = b.id;
    if (av.same_shape(bv)) {
        Tensor out(av.shape());
        detail::map(out) = detail::cmap(av) + detail::cmap(bv);
        return tape.record(std::move(out), {ai, bi},
                           [ai, bi](Tape& tp, std::size_t self) {
                               const auto g = detail::cmap(tp.grad(self));
                               if (tp.requires_grad(ai)) detail::map(tp.grad_slot(ai)) += g;
                               if (tp.requires_grad(bi)) detail::map(tp.grad_slot(bi)) += g;
                           },
                           "add");
    }
    if (!detail::is_row_of(bv, av))
        throw Error(ErrorCode::shape_mismatch,
                    "add: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    Tensor out = av;
    detail::map(out).rowwise() += detail::cmap(bv).row(0);
    return tape.record(std::move(out), {ai, bi},
                       [ai, bi](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           if (tp.requires_grad(ai)) detail::map(tp.grad_slot(ai)) += detail::cmap(g);
                           if (tp.requires_grad(bi)) {
                               Tensor& gb = tp.grad_slot(bi);
                               detail::map(gb).row(0) += detail::cmap(g).colwise().sum();
                           }
                       },
                       "add_row");
}

inline Var scale(Var a, double s) {
    Tape& tape = *a.tape;
    const std::size_t ai = a.id;
    return tape.record(s * a.value(), {ai},
                       [ai, s](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           Tensor& ga = tp.grad_slot(ai);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                       },
                       "scale");
}

inline Var sub(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    const std::size_t ai = a.id, bi = b.id;
    return tape.record(a.value() - b.value(), {ai, bi},
                       [ai, bi](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           if (tp.requires_grad(ai)) {
                               Tensor& ga = tp.grad_slot(ai);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (tp.requires_grad(bi)) {
                               Tensor& gb = tp.grad_slot(bi);
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                       },
                       "sub");
}

/// Elementwise product of equal shapes.
inline Var mul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_same_shape(av, bv, "mul");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const std::size_t ai = a.id, bi = b.id;
    return tape.record(std::move(out), {ai, bi},
                       [ai, bi](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           const Tensor& x = tp.value(ai);
                           const Tensor& y = tp.value(bi);
                           if (tp.requires_grad(ai)) {
                               Tensor& ga = tp.grad_slot(ai);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                           }
                           if (tp.requires_grad(bi)) {
                               Tensor& gb = tp.grad_slot(bi);
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                           }
                       },
                       "mul");
}

/// Multiplies row r of a by the constant factors[r].
inline Var scale_rows(Var a, std::span<const double> factors) {
    Tape& tape = *a.tape;
    const Tensor& av = a.value();
    require(factors.size() == av.rows() && av.rank() == 2, ErrorCode::shape_mismatch,
            "scale_rows: factor count must equal row count");
    Tensor out = av;
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (double& v : out.row(r)) v *= factors[r];
    const std::size_t ai = a.id;
    std::vector<double> f(factors.begin(), factors.end());
    return tape.record(std::move(out), {ai},
                       [ai, f = std::move(f)](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           Tensor& ga = tp.grad_slot(ai);
                           const std::size_t c = g.cols();
                           for (std::size_t r = 0; r < g.rows(); ++r)
                               for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += f[r] * g[r * c + j];
                       },
                       "scale_rows");
}

inline Var matmul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows()))
        throw Error(ErrorCode::shape_mismatch,
                    "matmul: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    Tensor out = Tensor::matrix(av.rows(), bv.cols());
    detail::map(out).noalias() = detail::cmap(av) * detail::cmap(bv);
    const std::size_t ai = a.id, bi = b.id;
    return tape.record(std::move(out), {ai, bi},
                       [ai, bi](Tape& tp, std::size_t self) {
                           const auto g = detail::cmap(tp.grad(self));
                           if (tp.requires_grad(ai))
                               detail::map(tp.grad_slot(ai)).noalias() += g * detail::cmap(tp.value(bi)).transpose();
                           if (tp.requires_grad(bi))
                               detail::map(tp.grad_slot(bi)).noalias() += detail::cmap(tp.value(ai)).transpose() * g;
                       },
                       "matmul");
}

/// x W + b with b broadcast over rows.
inline Var affine(Var x, Var w, Var b) {
    Tape& tape = detail::same_tape(x, w);
    require(b.tape == &tape, ErrorCode::invalid_argument, "affine: bias on another tape");
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (!(xv.rank() == 2 && wv.rank() == 2 && xv.cols() == wv.rows()))
        throw Error(ErrorCode::shape_mismatch,
                    "affine: shapes " + shape_str(xv.shape()) + " and " + shape_str(wv.shape()));
    require(bv.size() == wv.cols(), ErrorCode::shape_mismatch, "affine: bias width");
    Tensor out = Tensor::matrix(xv.rows(), wv.cols());
    auto o = detail::map(out);
    o.noalias() = detail::cmap(xv) * detail::cmap(wv);
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data().data(), static_cast<Eigen::Index>(bv.size()));
    const std::size_t xi = x.id, wi = w.id, bi = b.id;
    return tape.record(std::move(out), {xi, wi, bi},
                       [xi, wi, bi](Tape& tp, std::size_t self) {
                           const auto g = detail::cmap(tp.grad(self));
                           if (tp.requires_grad(xi))
                               detail::map(tp.grad_slot(xi)).noalias() += g * detail::cmap(tp.value(wi)).transpose();
                           if (tp.requires_grad(wi))
                               detail::map(tp.grad_slot(wi)).noalias() += detail::cmap(tp.value(xi)).transpose() * g;
                           if (tp.requires_grad(bi)) {
                               Tensor& gb = tp.grad_slot(bi);
                               Eigen::Map<Eigen::RowVectorXd>(gb.data().data(), static_cast<Eigen::Index>(gb.size())) +=
                                   g.colwise().sum();
                           }
                       },
                       "affine");
}

inline Var transpose(Var a) {
    Tape& tape = *a.tape;
    const Tensor& av = a.value();
    require(av.rank() == 2, ErrorCode::shape_mismatch, "transpose needs rank 2");
    Tensor out = Tensor::matrix(av.cols(), av.rows());
    detail::map(out) = detail::cmap(av).transpose();
    const std::size_t ai = a.id;
    return tape.record(std::move(out), {ai},
                       [ai](Tape& tp, std::size_t self) {
                           detail::map(tp.grad_slot(ai)) += detail::cmap(tp.grad(self)).transpose();
                       },
                       "transpose");
}

inline Var silu(Var a) {
    Tape& tape = *a.tape;
    const Tensor& av = a.value();
    Tensor out(av.shape());
    const auto x = detail::cmap(av).array();
    detail::map(out).array() = x / (1.0 + (-x).exp());
    const std::size_t ai = a.id;
    return tape.record(std::move(out), {ai},
                       [ai](Tape& tp, std::size_t self) {
                           const auto g = detail::cmap(tp.grad(self)).array();
                           const auto xs = detail::cmap(tp.value(ai)).array();
                           const auto sg = 1.0 / (1.0 + (-xs).exp());
                           detail::map(tp.grad_slot(ai)).array() += g * sg * (1.0 + xs * (1.0 - sg));
                       },
                       "silu");
}

inline Var sin(Var a) {
    return detail::unary(
        a, "sin", [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

inline Var cos(Var a) {
    return detail::unary(
        a, "cos", [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

/// log sigma(x), evaluated without forming sigma.
inline Var log_sigmoid(Var a) {
    return detail::unary(
        a, "log_sigmoid", [](double x) { return -detail::softplus(-x); },
        [](double x, double) { return detail::sigmoid(-x); });
}

inline Var softplus(Var a) {
    return detail::unary(
        a, "softplus", [](double x) { return detail::softplus(x); },
        [](double x, double) { return detail::sigmoid(x); });
}

inline constexpr double kLayerNormEps = 1e-6;

/// Per-row normalization with learnable gain and bias (each of width cols).
inline Var layer_norm(Var x, Var gain, Var bias) {
    Tape& tape = detail::same_tape(x, gain);
    require(bias.tape == &tape, ErrorCode::invalid_argument, "layer_norm: bias on another tape");
    const Tensor& xv = x.value();
    const std::size_t d = xv.cols();
    require(gain.value().size() == d && bias.value().size() == d, ErrorCode::shape_mismatch,
            "layer_norm: gain/bias width must equal feature width");
    using Col = Eigen::Array<double, Eigen::Dynamic, 1>;
    using Row = Eigen::Array<double, 1, Eigen::Dynamic>;
    const auto X = detail::cmap(xv).array();
    const Eigen::Map<const Row> g(gain.value().data().data(), static_cast<Eigen::Index>(d));
    const Eigen::Map<const Row> b(bias.value().data().data(), static_cast<Eigen::Index>(d));
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto inv_std = std::make_shared<Col>();
    auto H = detail::map(*xhat).array();
    const Col mean = X.rowwise().mean();
    H = X.colwise() - mean;
    *inv_std = (H.square().rowwise().mean() + kLayerNormEps).rsqrt();
    H.colwise() *= *inv_std;
    Tensor out(xv.shape());
    detail::map(out).array() = (H.rowwise() * g).rowwise() + b;
    const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
    return tape.record(std::move(out), {xi, gi, bi},
                       [xi, gi, bi, xhat, inv_std, d](Tape& tp, std::size_t self) {
                           const auto G = detail::cmap(tp.grad(self)).array();
                           const auto Hs = detail::cmap(*xhat).array();
                           if (tp.requires_grad(gi)) {
                               Tensor& gg = tp.grad_slot(gi);
                               Eigen::Map<Row>(gg.data().data(), static_cast<Eigen::Index>(d)) +=
                                   (G * Hs).colwise().sum();
                           }
                           if (tp.requires_grad(bi)) {
                               Tensor& gb = tp.grad_slot(bi);
                               Eigen::Map<Row>(gb.data().data(), static_cast<Eigen::Index>(d)) += G.colwise().sum();
                           }
                           if (tp.requires_grad(xi)) {
                               const Tensor& gv = tp.value(gi);
                               const Eigen::Map<const Row> gr(gv.data().data(), static_cast<Eigen::Index>(d));
                               const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dh =
                                   G.rowwise() * gr;
                               const Col mean_dh = dh.rowwise().mean();
                               const Col mean_dh_h = (dh * Hs).rowwise().mean();
                               auto gx = detail::map(tp.grad_slot(xi)).array();
                               gx += ((dh.colwise() - mean_dh) - Hs.colwise() * mean_dh_h).colwise() * *inv_std;
                           }
                       },
                       "layer_norm");
}

inline Var sum(Var a) {
    Tape& tape = *a.tape;
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const std::size_t ai = a.id;
    return tape.record(Tensor::scalar(s), {ai},
                       [ai](Tape& tp, std::size_t self) {
                           const double g = tp.grad(self)[0];
                           for (double& v : tp.grad_slot(ai).storage()) v += g;
                       },
                       "sum");
}

inline Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    require(n > 0, ErrorCode::shape_mismatch, "mean of empty tensor");
    return scale(sum(a), 1.0 / n);
}

/// Mean of squared elementwise differences.
inline Var mse(Var a, Var b) {
    Var d = sub(a, b);
    return mean(mul(d, d));
}

/// Column-wise concatenation of rank-2 operands with equal row counts.
inline Var concat(std::span<const Var> parts) {
    require(!parts.empty(), ErrorCode::invalid_argument, "concat of nothing");
    Tape& tape = *parts[0].tape;
    const std::size_t n = parts[0].value().rows();
    std::vector<std::size_t> ids, offsets, widths;
    std::size_t total = 0;
    for (const Var& p : parts) {
        require(p.tape == &tape, ErrorCode::invalid_argument, "concat across tapes");
        require(p.value().rank() == 2 && p.value().rows() == n, ErrorCode::shape_mismatch,
                "concat: row counts differ");
        ids.push_back(p.id);
        offsets.push_back(total);
        widths.push_back(p.value().cols());
        total += p.value().cols();
    }
    Tensor out = Tensor::matrix(n, total);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k].value();
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(v.row(r).begin(), widths[k], out.row(r).begin() + static_cast<std::ptrdiff_t>(offsets[k]));
    }
    return tape.record(std::move(out), ids,
                       [ids, offsets, widths, n](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           for (std::size_t k = 0; k < ids.size(); ++k) {
                               if (!tp.requires_grad(ids[k])) continue;
                               Tensor& gk = tp.grad_slot(ids[k]);
                               for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t j = 0; j < widths[k]; ++j)
                                       gk.at(r, j) += g.at(r, offsets[k] + j);
                           }
                       },
                       "concat");
}

inline Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
}

/// Columns [begin, end) of a rank-2 operand.
inline Var slice(Var a, std::size_t begin, std::size_t end) {
    Tape& tape = *a.tape;
    const Tensor& av = a.value();
    require(av.rank() == 2 && begin <= end && end <= av.cols(), ErrorCode::shape_mismatch, "slice range");
    const std::size_t n = av.rows(), w = end - begin;
    Tensor out = Tensor::matrix(n, w);
    for (std::size_t r = 0; r < n; ++r)
        std::copy_n(av.row(r).begin() + static_cast<std::ptrdiff_t>(begin), w, out.row(r).begin());
    const std::size_t ai = a.id;
    return tape.record(std::move(out), {ai},
                       [ai, begin, w, n](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           Tensor& ga = tp.grad_slot(ai);
                           for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t j = 0; j < w; ++j) ga.at(r, begin + j) += g.at(r, j);
                       },
                       "slice");
}

/// Row lookup into an embedding table.
inline Var gather_rows(Var table, std::span<const std::size_t> indices) {
    Tape& tape = *table.tape;
    const Tensor& tv = table.value();
    Tensor out = rfd::gather_rows(tv, indices);
    const std::size_t ti = table.id;
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return tape.record(std::move(out), {ti},
                       [ti, idx = std::move(idx)](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           Tensor& gt = tp.grad_slot(ti);
                           const std::size_t c = g.cols();
                           for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t j = 0; j < c; ++j) gt.at(idx[r], j) += g[r * c + j];
                       },
                       "gather_rows");
}

/// Means over consecutive groups of `group` rows: [n, d] -> [n / group, d].
inline Var group_mean_rows(Var a, std::size_t group) {
    Tape& tape = *a.tape;
    const Tensor& av = a.value();
    require(group > 0 && av.rank() == 2 && av.rows() % group == 0, ErrorCode::shape_mismatch,
            "group_mean_rows: row count must be a multiple of the group size");
    const std::size_t groups = av.rows() / group, d = av.cols();
    Tensor out = Tensor::matrix(groups, d);
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t k = 0; k < groups; ++k)
        for (std::size_t r = k * group; r < (k + 1) * group; ++r)
            for (std::size_t j = 0; j < d; ++j) out.at(k, j) += av.at(r, j) * inv;
    const std::size_t ai = a.id;
    return tape.record(std::move(out), {ai},
                       [ai, group, groups, d, inv](Tape& tp, std::size_t self) {
                           const Tensor& g = tp.grad(self);
                           Tensor& ga = tp.grad_slot(ai);
                           for (std::size_t k = 0; k < groups; ++k)
                               for (std::size_t r = k * group; r < (k + 1) * group; ++r)
                                   for (std::size_t j = 0; j < d; ++j) ga.at(r, j) += g.at(k, j) * inv;
                       },
                       "group_mean_rows");
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

} // namespace rfd
