#pragma once

#include <cmath>
#include <cstddef>

#include "rfd/models/velocity_net.hpp"
#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/params.hpp"

namespace rfd {

/// shadow <- beta * shadow + (1 - beta) * live, per tensor.
inline void ema_update(ParamSet& shadow, const ParamSet& live, double beta) {
    require(shadow.same_structure(live), ErrorCode::shape_mismatch, "ema_update: parameter trees differ");
    require(beta >= 0.0 && beta < 1.0, ErrorCode::invalid_argument, "ema_update: beta must be in [0, 1)");
    for (std::size_t i = 0; i < shadow.size(); ++i) {
        Tensor& s = shadow[i].value;
        const Tensor& l = live[i].value;
        for (std::size_t k = 0; k < s.size(); ++k) s[k] = beta * s[k] + (1.0 - beta) * l[k];
    }
}

/// ratio * m1 + (1 - ratio) * m2, per tensor. Identical inputs come back unchanged.
inline ParamSet merge_interpolate(const ParamSet& m1, const ParamSet& m2, double ratio = 0.3) {
    require(m1.same_structure(m2), ErrorCode::shape_mismatch, "merge_interpolate: parameter trees differ");
    require(ratio >= 0.0 && ratio <= 1.0, ErrorCode::invalid_argument, "merge_interpolate: ratio outside [0, 1]");
    ParamSet out = m1;
    for (std::size_t i = 0; i < out.size(); ++i) {
        Tensor& o = out[i].value;
        const Tensor& a = m1[i].value;
        const Tensor& b = m2[i].value;
        for (std::size_t k = 0; k < o.size(); ++k) {
            o[k] = a[k] == b[k] ? a[k] : ratio * a[k] + (1.0 - ratio) * b[k];
        }
    }
    return out;
}

inline VelocityNet merge_interpolate(const VelocityNet& m1, const VelocityNet& m2, double ratio = 0.3) {
    require(m1.config() == m2.config(), ErrorCode::shape_mismatch, "merge_interpolate: configs differ");
    return VelocityNet(m1.config(), merge_interpolate(m1.params(), m2.params(), ratio));
}

/// Symmetric per-tensor quantize-dequantize in place.
///
/// delta = max|w| / (2^(bits-1) - 1); w -> round(w / delta) * delta. Codes at
/// the extreme level map back to +-max|w| exactly, which keeps the step size
/// (and therefore the result) fixed under repeated application.
inline void quantize_tensor(Tensor& w, int bits) {
    double m = 0.0;
    for (double v : w.data()) m = std::max(m, std::abs(v));
    if (m == 0.0) return;
    const double levels = std::ldexp(1.0, bits - 1) - 1.0;
    for (double& v : w.storage()) {
        const double code = std::nearbyint(v * levels / m);
        if (std::abs(code) >= levels) {
            v = std::copysign(m, code);
        } else {
            v = code * m / levels;
        }
    }
}

/// Returns a quantized copy; 64 is accepted as the identity.
inline VelocityNet quantize_weights(const VelocityNet& net, int bits) {
    require(bits == 6 || bits == 8 || bits == 16 || bits == 64, ErrorCode::invalid_argument,
            "quantize_weights: bits must be one of 6, 8, 16 (or 64 for no-op)");
    VelocityNet out = net;
    if (bits == 64) return out;
    for (auto& p : out.params()) quantize_tensor(p.value, bits);
    return out;
}

/// Storage needed for the parameters at the given precision.
inline std::size_t parameter_bytes(const VelocityNet& net, int bits) {
    return (net.params().scalar_count() * static_cast<std::size_t>(bits) + 7) / 8;
}

} // namespace rfd
