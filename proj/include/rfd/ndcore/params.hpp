#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/rng.hpp"
#include "rfd/ndcore/tape.hpp"
#include "rfd/ndcore/tensor.hpp"

namespace rfd {

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Ordered collection of named parameter tensors.
class ParamSet {
public:
    std::size_t add(std::string name, Tensor value) {
        entries_.push_back({std::move(name), std::move(value)});
        return entries_.size() - 1;
    }

    std::size_t size() const noexcept { return entries_.size(); }
    NamedTensor& operator[](std::size_t i) { return entries_[i]; }
    const NamedTensor& operator[](std::size_t i) const { return entries_[i]; }

    auto begin() noexcept { return entries_.begin(); }
    auto end() noexcept { return entries_.end(); }
    auto begin() const noexcept { return entries_.begin(); }
    auto end() const noexcept { return entries_.end(); }

    std::size_t scalar_count() const noexcept {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    /// Same names and shapes in the same order.
    bool same_structure(const ParamSet& other) const noexcept {
        if (entries_.size() != other.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].name != other.entries_[i].name ||
                entries_[i].value.shape() != other.entries_[i].value.shape())
                return false;
        }
        return true;
    }

    /// Records every tensor on the tape, as trainable leaves or as constants.
    std::vector<Var> bind(Tape& tape, bool trainable) const {
        std::vector<Var> vars;
        vars.reserve(entries_.size());
        for (const auto& e : entries_) vars.push_back(trainable ? tape.leaf(e.value) : tape.constant(e.value));
        return vars;
    }

    /// 64-bit FNV-1a over names, shapes and raw value bytes.
    std::uint64_t hash() const noexcept {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (const auto& e : entries_) {
            h = fnv1a64(e.name, h);
            for (std::size_t d : e.value.shape()) h = mix(h, static_cast<std::uint64_t>(d));
            for (double v : e.value.data()) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, sizeof bits);
                h = mix(h, bits);
            }
        }
        return h;
    }

    friend bool operator==(const ParamSet& a, const ParamSet& b) {
        if (!a.same_structure(b)) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!(a[i].value == b[i].value)) return false;
        return true;
    }

private:
    static std::uint64_t mix(std::uint64_t h, std::uint64_t w) noexcept {
        for (int k = 0; k < 8; ++k) {
            h ^= (w >> (8 * k)) & 0xFFu;
            h *= 0x100000001B3ULL;
        }
        return h;
    }

    std::vector<NamedTensor> entries_;
};

inline std::vector<Tensor> collect_grads(Tape& tape, const std::vector<Var>& vars) {
    std::vector<Tensor> grads;
    grads.reserve(vars.size());
    for (const Var& v : vars) grads.push_back(tape.grad(v.id));
    return grads;
}

inline double global_norm(const std::vector<Tensor>& grads) {
    double s = 0.0;
    for (const auto& g : grads) s += squared_norm(g);
    return std::sqrt(s);
}

} // namespace rfd
