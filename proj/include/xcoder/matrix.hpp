#ifndef XCODER_MATRIX_HPP
#define XCODER_MATRIX_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace xcoder {

// Dense row-major matrix. Storage is T (f32 for training, f64 for gradient
// checks); every reduction in this library accumulates in double.
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill)
    {
    }
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data))
    {
        if (data_.size() != rows_ * cols_) {
            throw InvalidShape("matrix data length " + std::to_string(data_.size()) + " != "
                               + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }
    Matrix(std::initializer_list<std::initializer_list<T>> init)
    {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto &row : init) {
            if (row.size() != cols_) {
                throw InvalidShape("ragged initializer list");
            }
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n)
    {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = T{1};
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T &operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T &operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<T> flat() noexcept { return data_; }
    std::span<const T> flat() const noexcept { return data_; }
    T *data() noexcept { return data_.data(); }
    const T *data() const noexcept { return data_.data(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Matrix &o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    template <typename U>
    Matrix<U> cast() const
    {
        std::vector<U> out(data_.begin(), data_.end());
        return Matrix<U>(rows_, cols_, std::move(out));
    }

    friend bool operator==(const Matrix &a, const Matrix &b)
    {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

inline std::string shape_str(std::size_t r, std::size_t c)
{
    return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
Matrix<T> matmul(const Matrix<T> &a, const Matrix<T> &b)
{
    if (a.cols() != b.rows()) {
        throw InvalidShape("matmul " + shape_str(a.rows(), a.cols()) + " * "
                           + shape_str(b.rows(), b.cols()));
    }
    Matrix<T> c(a.rows(), b.cols());
    std::vector<double> acc(b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                acc[j] += aik * static_cast<double>(brow[j]);
            }
        }
        for (std::size_t j = 0; j < b.cols(); ++j) {
            c(i, j) = static_cast<T>(acc[j]);
        }
    }
    return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T> &a)
{
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

template <typename T>
bool all_finite(const Matrix<T> &m)
{
    return std::all_of(m.flat().begin(), m.flat().end(), [](T v) { return std::isfinite(v); });
}

// Works on any pair of indexable ranges (spans, vectors, matrix rows).
template <typename A, typename B>
double dot(const A &a, const B &b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return s;
}

template <typename A>
double l2_norm(const A &v)
{
    double s = 0.0;
    for (auto x : v) {
        s += static_cast<double>(x) * static_cast<double>(x);
    }
    return std::sqrt(s);
}

} // namespace xcoder

#endif
