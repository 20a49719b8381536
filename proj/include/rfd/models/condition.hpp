#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "rfd/ndcore/error.hpp"

namespace rfd {

/// Class label of a sample, or the null label used for guidance and for the
/// dropped-conditioning path.
class Condition {
public:
    constexpr Condition() = default;

    static constexpr Condition null() noexcept { return Condition(); }
    static constexpr Condition of(std::size_t class_id) noexcept { return Condition(class_id); }

    constexpr bool is_null() const noexcept { return id_ == kNull; }

    std::size_t class_id() const {
        require(!is_null(), ErrorCode::invalid_argument, "class_id() of the null condition");
        return id_;
    }

    /// Row of the condition-embedding table: the class id, or num_classes for null.
    std::size_t embedding_row(std::size_t num_classes) const {
        if (is_null()) return num_classes;
        if (id_ >= num_classes)
            throw Error(ErrorCode::out_of_range,
                        "class id " + std::to_string(id_) + " out of range for " + std::to_string(num_classes) +
                          " classes");
        return id_;
    }

    friend constexpr bool operator==(Condition, Condition) = default;

private:
    static constexpr std::size_t kNull = std::numeric_limits<std::size_t>::max();
    constexpr explicit Condition(std::size_t id) : id_(id) {}
    std::size_t id_ = kNull;
};

using Conditions = std::vector<Condition>;

inline Conditions null_conditions(std::size_t n) { return Conditions(n, Condition::null()); }

} // namespace rfd
