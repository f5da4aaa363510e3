#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace ldnn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Frobenius inner product <p,q> = sum_{ab} p_ab * q_ab.
inline double frobenius_inner(const Matrix& p, const Matrix& q) {
    if (p.rows() != q.rows() || p.cols() != q.cols())
        throw std::invalid_argument("frobenius_inner: dimension mismatch (" +
                                    std::to_string(p.rows()) + "x" + std::to_string(p.cols()) + " vs " +
                                    std::to_string(q.rows()) + "x" + std::to_string(q.cols()) + ")");
    return p.cwiseProduct(q).sum();
}

inline double frobenius_norm(const Matrix& q) { return std::sqrt(frobenius_inner(q, q)); }

namespace detail {

// Mirrors the strict lower triangle from the upper one, so symmetry holds bit-exactly.
inline Matrix symmetrize_exact(const Matrix& a) {
    Matrix s = a;
    for (Eigen::Index i = 0; i < s.rows(); ++i)
        for (Eigen::Index j = i + 1; j < s.cols(); ++j) {
            const double v = 0.5 * (a(i, j) + a(j, i));
            s(i, j) = v;
            s(j, i) = v;
        }
    return s;
}

inline void require_square_symmetric(const Matrix& a, const char* what) {
    if (a.rows() != a.cols())
        throw std::invalid_argument(std::string(what) + ": matrix must be square");
    const double scale = 1.0 + a.cwiseAbs().maxCoeff();
    if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
        throw std::invalid_argument(std::string(what) + ": matrix is not symmetric");
}

} // namespace detail

/// Symmetric dual variable eta over A x A (units: inverse covariance).
class DualMatrix {
public:
    DualMatrix() = default;
    explicit DualMatrix(const Matrix& entries) {
        detail::require_square_symmetric(entries, "DualMatrix");
        entries_ = detail::symmetrize_exact(entries);
    }
    static DualMatrix zero(Eigen::Index dim) { return DualMatrix(Matrix::Zero(dim, dim)); }

    Eigen::Index dim() const { return entries_.rows(); }
    const Matrix& mat() const { return entries_; }
    double operator()(Eigen::Index i, Eigen::Index j) const { return entries_(i, j); }

private:
    Matrix entries_;
};

/// Symmetric PSD covariance matrix indexed by the input set A.
/// Admission floor: eigenvalues >= -1e-10*(1+||q||_F); anything below rejects construction.
class CovMatrix {
public:
    CovMatrix() = default;
    explicit CovMatrix(const Matrix& entries) {
        detail::require_square_symmetric(entries, "CovMatrix");
        Matrix s = detail::symmetrize_exact(entries);
        Eigen::SelfAdjointEigenSolver<Matrix> es(s);
        const double floor = -1e-10 * (1.0 + frobenius_norm(s));
        if (es.eigenvalues().minCoeff() < floor)
            throw std::invalid_argument("CovMatrix: matrix is not PSD (min eigenvalue " +
                                        std::to_string(es.eigenvalues().minCoeff()) + " < " +
                                        std::to_string(floor) + ")");
        entries_ = std::move(s);
    }
    static CovMatrix zero(Eigen::Index dim) { return CovMatrix(Matrix::Zero(dim, dim)); }
    static CovMatrix identity(Eigen::Index dim) { return CovMatrix(Matrix::Identity(dim, dim)); }

    Eigen::Index dim() const { return entries_.rows(); }
    const Matrix& mat() const { return entries_; }
    double operator()(Eigen::Index i, Eigen::Index j) const { return entries_(i, j); }

private:
    Matrix entries_;
};

/// Unique symmetric PSD square root q^# with q^# q^# = q.
/// Eigenvalues below the numerical-rank floor are clipped to zero before the
/// square root; the sqrt would otherwise inflate O(eps) eigenvalue noise into
/// O(sqrt(eps)) spurious rank, breaking downstream range tests.
inline CovMatrix matrix_root(const CovMatrix& q) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(q.mat());
    const double floor = 1e-13 * std::max(0.0, es.eigenvalues().maxCoeff());
    Vector lam = es.eigenvalues();
    for (Eigen::Index i = 0; i < lam.size(); ++i)
        lam(i) = lam(i) > floor ? std::sqrt(lam(i)) : 0.0;
    Matrix root = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
    return CovMatrix(detail::symmetrize_exact(root));
}

/// Moore-Penrose pseudoinverse. Singular values below 1e-12 * sigma_max are treated as zero.
inline Matrix pseudo_inverse(const Matrix& g) {
    if (g.size() == 0) return g;
    Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    const double cutoff = 1e-12 * (sv.size() > 0 ? sv(0) : 0.0);
    Vector inv = Vector::Zero(sv.size());
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > cutoff) inv(i) = 1.0 / sv(i);
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// True iff Im(z) is contained in Im(g): ||(I - g g+) z||_F <= tol * (1 + ||z||_F).
inline bool range_contains(const Matrix& g, const Matrix& z, double tol = 1e-8) {
    if (g.rows() != z.rows())
        throw std::invalid_argument("range_contains: row dimension mismatch");
    Matrix proj = Matrix::Identity(g.rows(), g.rows()) - g * pseudo_inverse(g);
    return frobenius_norm(proj * z) <= tol * (1.0 + frobenius_norm(z));
}

/// All-ones matrix (the C_b shift in the kernel recursion).
inline Matrix ones(Eigen::Index dim) { return Matrix::Ones(dim, dim); }

} // namespace ldnn
