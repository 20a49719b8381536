#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rfd/ndcore/error.hpp"

namespace rfd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// 64-byte aligned storage. Vectorized kernels peel loops by address
/// alignment, so a fixed alignment keeps floating-point results independent of
/// where the allocator happened to place a buffer.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
public:
    Tensor() : data_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, const std::vector<double>& data)
        : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

    Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size())
            throw Error(ErrorCode::shape_mismatch,
                        "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                          shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor(Shape{rows, cols}, fill);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
        return Tensor(Shape{rows, cols}, std::vector<double>(values));
    }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor(Shape{values.size()}, std::vector<double>(values));
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_, 0.0); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    /// Rows/cols of a rank-2 tensor; rank-1 is treated as a single row.
    std::size_t rows() const noexcept {
        return shape_.size() == 2 ? shape_[0] : 1;
    }
    std::size_t cols() const noexcept {
        if (shape_.size() == 2) return shape_[1];
        if (shape_.size() == 1) return shape_[0];
        return 1;
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    Storage& storage() noexcept { return data_; }
    const Storage& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    double item() const {
        if (data_.size() != 1)
            throw Error(ErrorCode::shape_mismatch,
                        "item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols(), cols()};
    }

    bool all_finite() const noexcept {
        // v * 0 is 0 for finite v and nan otherwise; independent lanes keep
        // the loop vectorizable.
        double acc[8] = {};
        const std::size_t n = data_.size(), full = n - n % 8;
        for (std::size_t i = 0; i < full; i += 8)
            for (std::size_t k = 0; k < 8; ++k) acc[k] += data_[i + k] * 0.0;
        for (std::size_t i = full; i < n; ++i) acc[0] += data_[i] * 0.0;
        double total = 0.0;
        for (double a : acc) total += a;
        return total == 0.0;
    }

    void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    Storage data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
    if (!a.same_shape(b))
        throw Error(ErrorCode::shape_mismatch,
                    std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

inline void require_finite(const Tensor& t, std::string_view what) {
    if (!t.all_finite())
        throw Error(ErrorCode::non_finite,
                    std::string(what) + " produced a non-finite value");
}

// Plain (non-recorded) elementwise helpers used by samplers and analysis code.

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

inline Tensor operator*(double s, const Tensor& a) {
    Tensor out = a;
    for (double& v : out.storage()) v *= s;
    return out;
}

/// out = a + s * b
inline Tensor axpy(const Tensor& a, double s, const Tensor& b) {
    require_same_shape(a, b, "axpy");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * b[i];
    return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double squared_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return s;
}

/// Rows [begin, end) of a rank-2 tensor.
inline Tensor take_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require(begin <= end && end <= a.rows(), ErrorCode::out_of_range, "take_rows range");
    const std::size_t c = a.cols();
    Storage d(a.storage().begin() + static_cast<std::ptrdiff_t>(begin * c),
              a.storage().begin() + static_cast<std::ptrdiff_t>(end * c));
    return Tensor(Shape{end - begin, c}, std::move(d));
}

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
    const std::size_t c = a.cols();
    Tensor out(Shape{idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] < a.rows(), ErrorCode::out_of_range, "gather_rows index");
        std::copy_n(a.row(idx[i]).begin(), c, out.row(i).begin());
    }
    return out;
}

inline Tensor vstack(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.cols(), ErrorCode::shape_mismatch, "vstack column mismatch");
    Storage d = a.storage();
    d.insert(d.end(), b.storage().begin(), b.storage().end());
    return Tensor(Shape{a.rows() + b.rows(), a.cols()}, std::move(d));
}

} // namespace rfd
