#include "bsr/linalg.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "bsr/errors.hpp"
#include "bsr/kernels.hpp"
#include "bsr/rng.hpp"

namespace bsr::linalg {

namespace {

Eigen::MatrixXd to_eigen(const Matrix & m) {
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        m.data.data(), m.rows, m.cols);
}

Matrix from_eigen(const Eigen::MatrixXd & e) {
    Matrix m(e.rows(), e.cols());
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        m.data.data(), e.rows(), e.cols()) = e;
    return m;
}

// First entry of each left vector with |x| > 1e-12 is made nonnegative.
void fix_signs(Matrix & u, Matrix & v) {
    for (int64_t j = 0; j < u.cols; ++j) {
        double lead = 0.0;
        for (int64_t i = 0; i < u.rows; ++i) {
            if (std::abs(u(i, j)) > 1e-12) {
                lead = u(i, j);
                break;
            }
        }
        if (lead < 0.0) {
            for (int64_t i = 0; i < u.rows; ++i) u(i, j) = -u(i, j);
            for (int64_t i = 0; i < v.rows; ++i) v(i, j) = -v(i, j);
        }
    }
}

SvdFactors factors_from_eigen(const Eigen::MatrixXd & eu, const Eigen::VectorXd & es,
                              const Eigen::MatrixXd & ev) {
    SvdFactors f;
    f.u = from_eigen(eu);
    f.v = from_eigen(ev);
    f.sigma.assign(es.data(), es.data() + es.size());
    fix_signs(f.u, f.v);
    return f;
}

} // namespace

SvdFactors svd_full(const Matrix & w) {
    validate(w, "svd_full input");
    const Eigen::MatrixXd e = to_eigen(w);
    // JacobiSVD is more accurate on small problems; BDCSVD scales better.
    if (std::min(w.rows, w.cols) <= 16) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(e, Eigen::ComputeThinU | Eigen::ComputeThinV);
        return factors_from_eigen(svd.matrixU(), svd.singularValues(), svd.matrixV());
    }
    Eigen::BDCSVD<Eigen::MatrixXd> svd(e, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return factors_from_eigen(svd.matrixU(), svd.singularValues(), svd.matrixV());
}

SvdFactors svd_randomized(const Matrix & w, int64_t k, int64_t p, int64_t q, uint64_t seed) {
    validate(w, "svd_randomized input");
    if (k < 1) {
        throw InvalidInput("svd_randomized: target rank must be >= 1");
    }
    if (p < 0 || q < 0) {
        throw InvalidInput("svd_randomized: oversampling and power iterations must be >= 0");
    }
    const int64_t R = std::min(w.rows, w.cols);
    const int64_t kk = std::min(k, R);
    const int64_t cols = std::min(kk + p, R);

    Rng rng(seed);
    Matrix omega(w.cols, cols);
    for (double & x : omega.data) x = rng.normal();

    Eigen::MatrixXd ew = to_eigen(w);
    Eigen::MatrixXd y = ew * to_eigen(omega);
    Eigen::MatrixXd qmat = Eigen::HouseholderQR<Eigen::MatrixXd>(y).householderQ() *
                           Eigen::MatrixXd::Identity(y.rows(), cols);
    for (int64_t it = 0; it < q; ++it) {
        Eigen::MatrixXd z = ew.transpose() * qmat;
        Eigen::MatrixXd qz = Eigen::HouseholderQR<Eigen::MatrixXd>(z).householderQ() *
                             Eigen::MatrixXd::Identity(z.rows(), cols);
        Eigen::MatrixXd y2 = ew * qz;
        qmat = Eigen::HouseholderQR<Eigen::MatrixXd>(y2).householderQ() *
               Eigen::MatrixXd::Identity(y2.rows(), cols);
    }

    Eigen::MatrixXd b = qmat.transpose() * ew;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::MatrixXd eu = qmat * svd.matrixU();
    SvdFactors f = factors_from_eigen(eu, svd.singularValues(), svd.matrixV());
    return truncate(f, kk);
}

SvdFactors truncate(const SvdFactors & f, int64_t r) {
    if (r < 1 || r > f.rank()) {
        throw InvalidInput("truncate: rank out of range");
    }
    SvdFactors t;
    t.u = Matrix(f.u.rows, r);
    t.v = Matrix(f.v.rows, r);
    t.sigma.assign(f.sigma.begin(), f.sigma.begin() + r);
    for (int64_t i = 0; i < f.u.rows; ++i) {
        for (int64_t j = 0; j < r; ++j) t.u(i, j) = f.u(i, j);
    }
    for (int64_t i = 0; i < f.v.rows; ++i) {
        for (int64_t j = 0; j < r; ++j) t.v(i, j) = f.v(i, j);
    }
    return t;
}

Matrix reconstruct(const SvdFactors & f) {
    Matrix us = f.u;
    for (int64_t i = 0; i < us.rows; ++i) {
        for (int64_t j = 0; j < us.cols; ++j) us(i, j) *= f.sigma[static_cast<size_t>(j)];
    }
    Matrix out(us.rows, f.v.rows);
    kernels::gemm_nt(us, f.v, out);
    return out;
}

} // namespace bsr::linalg
