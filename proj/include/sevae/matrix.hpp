#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sevae/error.hpp"

namespace sevae {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                                 " does not match " + shape_string(rows_, cols_));
        }
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw DimensionError("ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
    static Matrix row_vector(std::vector<double> v) {
        const auto n = v.size();
        return Matrix(1, n, std::move(v));
    }
    static Matrix column_vector(std::vector<double> v) {
        const auto n = v.size();
        return Matrix(n, 1, std::move(v));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }
    const std::vector<double>& storage() const noexcept { return data_; }

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out(rows_);
        for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
        return out;
    }
    void set_column(std::size_t c, std::span<const double> values) {
        for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = values[r];
    }

    std::string shape() const { return shape_string(rows_, cols_); }
    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Matrix& operator+=(const Matrix& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator*=(double s) noexcept {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

    static std::string shape_string(std::size_t r, std::size_t c) {
        std::ostringstream os;
        os << r << "x" << c;
        return os.str();
    }

private:
    void require_same(const Matrix& o, const char* what) const {
        if (!same_shape(o)) {
            throw DimensionError(std::string("shape mismatch in ") + what + ": " + shape() +
                                 " vs " + o.shape());
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace linalg {

// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + a.shape() + " * " + b.shape());
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix c(n, m);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* ci = pc + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            if (aip == 0.0) continue;
            const double* bp = pb + p * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a);

// C = A * B^T. Goes through an explicit transpose so the inner loop is an
// axpy rather than a serial dot-product reduction.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + a.shape() + " * (" + b.shape() + ")^T");
    }
    return matmul(a, transpose(b));
}

// C = A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: (" + a.shape() + ")^T * " + b.shape());
    }
    const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
    Matrix c(n, m);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = pa + p * n;
        const double* bp = pb + p * m;
        for (std::size_t i = 0; i < n; ++i) {
            const double api = ap[i];
            if (api == 0.0) continue;
            double* ci = pc + i * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += api * bp[j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
    return t;
}

inline Matrix select_rows(const Matrix& a, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= a.rows()) throw DimensionError("select_rows: row index out of range");
        std::copy(a.row(rows[i]).begin(), a.row(rows[i]).end(), out.row(i).begin());
    }
    return out;
}

inline Matrix slice_cols(const Matrix& a, std::size_t start, std::size_t len) {
    if (start + len > a.cols()) {
        throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of range for " + a.shape());
    }
    Matrix out(a.rows(), len);
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < len; ++c) out(r, c) = a(r, start + c);
    return out;
}

inline Matrix concat_cols(std::span<const Matrix> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw DimensionError("concat_cols: row mismatch " + parts.front().shape() + " vs " +
                                 p.shape());
        }
        cols += p.cols();
    }
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.row(r).begin(), p.row(r).end(), out.row(r).begin() + off);
            off += p.cols();
        }
    }
    return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw DimensionError("max_abs_diff: " + a.shape() + " vs " + b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace linalg
}  // namespace sevae
