#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "avd2/error.hpp"

namespace avd2 {

/// Dense row-major matrix of doubles. Vectors are 1×n matrices.
class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        assert(data_.size() == rows_ * cols_);
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    void set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

    Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    Matrix& operator+=(const Matrix& o) {
        assert(same_shape(o));
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }

inline Matrix operator-(const Matrix& a, const Matrix& b) {
    assert(a.same_shape(b));
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

inline Matrix operator*(double s, Matrix m) { return m *= s; }

/// out (+)= a · b
inline void matmul_into(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate = false) {
    assert(a.cols() == b.rows());
    if (!accumulate) out = Matrix(a.rows(), b.cols());
    const std::size_t n = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* o = out.row(i).data();
        const double* ar = a.row(i).data();
        for (std::size_t k = 0; k < n; ++k) {
            const double av = ar[k];
            if (av == 0.0) continue;
            const double* br = b.row(k).data();
            for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
        }
    }
}

/// out (+)= a · bᵀ
inline void matmul_nt_into(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate = false) {
    assert(a.cols() == b.cols());
    if (!accumulate) out = Matrix(a.rows(), b.rows());
    const std::size_t n = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* br = b.row(j).data();
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += ar[k] * br[k];
            out(i, j) += s;
        }
    }
}

/// out (+)= aᵀ · b
inline void matmul_tn_into(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate = false) {
    assert(a.rows() == b.rows());
    if (!accumulate) out = Matrix(a.cols(), b.cols());
    const std::size_t m = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ar = a.row(k).data();
        const double* br = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* o = out.row(i).data();
            for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
        }
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out;
    matmul_into(a, b, out);
    return out;
}

inline double trace(const Matrix& m) {
    double t = 0.0;
    for (std::size_t i = 0; i < std::min(m.rows(), m.cols()); ++i) t += m(i, i);
    return t;
}

inline Matrix symmetrized(const Matrix& m) {
    Matrix s(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) s(i, j) = 0.5 * (m(i, j) + m(j, i));
    return s;
}

struct SymmetricEigen {
    std::vector<double> values; ///< unsorted, paired with columns of `vectors`
    Matrix vectors;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: repeated sweeps of
/// plane rotations zeroing each off-diagonal entry until the off-diagonal
/// Frobenius norm falls below `tol` relative to the full norm.
inline SymmetricEigen jacobi_eigen(Matrix a, double tol = 1e-15, int max_sweeps = 100) {
    if (a.rows() != a.cols())
        throw Error(Errc::DimensionMismatch, "jacobi_eigen requires a square matrix");
    const std::size_t n = a.rows();
    Matrix v = Matrix::identity(n);

    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) s += a(i, j) * a(i, j);
        return std::sqrt(s);
    };
    double full = 0.0;
    for (double x : a.data()) full += x * x;
    full = std::sqrt(full);

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        if (off_norm() <= tol * std::max(full, 1e-300)) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = a(q, p) = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    SymmetricEigen out;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = a(i, i);
    out.vectors = std::move(v);
    return out;
}

/// Principal square root of a symmetric PSD matrix; eigenvalues below
/// `clamp` are treated as zero.
inline Matrix sqrt_psd(const Matrix& m, double clamp = 1e-12) {
    const auto eig = jacobi_eigen(symmetrized(m));
    const std::size_t n = m.rows();
    Matrix out(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double lam = eig.values[k] < clamp ? 0.0 : std::sqrt(eig.values[k]);
        if (lam == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out(i, j) += lam * eig.vectors(i, k) * eig.vectors(j, k);
    }
    return symmetrized(out);
}

/// Tr(sqrt(M)) for symmetric PSD M, eigenvalues below `clamp` set to zero.
inline double trace_sqrt_psd(const Matrix& m, double clamp = 1e-12) {
    const auto eig = jacobi_eigen(symmetrized(m));
    double t = 0.0;
    for (double lam : eig.values)
        if (lam >= clamp) t += std::sqrt(lam);
    return t;
}

} // namespace avd2
