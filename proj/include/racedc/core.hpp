#ifndef RACEDC_CORE_HPP
#define RACEDC_CORE_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace racedc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid parameters or inconsistent dimensions.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A linear system that is singular or too ill-conditioned to solve.
class SingularSystemError : public Error {
public:
    SingularSystemError(const std::string& what, double condition)
        : Error(what), condition_(condition)
    {
    }
    double condition() const noexcept { return condition_; }

private:
    double condition_;
};

class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual)
        : Error(what), residual_(residual)
    {
    }
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

/// Condition numbers above this are treated as singular.
inline constexpr double kConditionCeiling = 1e12;

/// One shard of the data. Only workers ever hold these.
struct DataBatch {
    Matrix X;
    Vector y;
    int batch_id = 0;

    Eigen::Index rows() const { return X.rows(); }
    Eigen::Index cols() const { return X.cols(); }

    void validate() const
    {
        if (X.rows() != y.size())
            throw ConfigError("DataBatch: X has " + std::to_string(X.rows()) + " rows but y has " +
                              std::to_string(y.size()) + " entries");
        if (X.rows() < 1)
            throw ConfigError("DataBatch: empty batch");
    }
};

/// Concatenate batches row-wise. Used only by the pooled benchmark estimators.
inline DataBatch pool(std::span<const DataBatch> batches)
{
    if (batches.empty())
        throw ConfigError("pool: no batches");
    Eigen::Index rows = 0;
    for (const auto& b : batches)
        rows += b.rows();
    DataBatch out;
    out.X.resize(rows, batches.front().cols());
    out.y.resize(rows);
    Eigen::Index at = 0;
    for (const auto& b : batches) {
        out.X.middleRows(at, b.rows()) = b.X;
        out.y.segment(at, b.rows()) = b.y;
        at += b.rows();
    }
    out.batch_id = -1;
    return out;
}

/// Ratio of extreme eigenvalues of a symmetric matrix; +inf when not positive definite.
inline double spd_condition(const Matrix& a)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues()(0);
    const double hi = es.eigenvalues()(es.eigenvalues().size() - 1);
    if (!(lo > 0.0) || !std::isfinite(hi))
        return std::numeric_limits<double>::infinity();
    return hi / lo;
}

/// Solve a symmetric positive definite system, rejecting near-singular matrices.
inline Vector solve_spd(const Matrix& a, const Vector& b, const std::string& what,
                        double* condition = nullptr)
{
    const double cond = spd_condition(a);
    if (condition)
        *condition = cond;
    if (!(cond <= kConditionCeiling))
        throw SingularSystemError(what + ": matrix is singular or ill-conditioned (condition " +
                                      std::to_string(cond) + ")",
                                  cond);
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success)
        throw SingularSystemError(what + ": Cholesky factorization failed", cond);
    return llt.solve(b);
}

inline Matrix spd_inverse(const Matrix& a, const std::string& what)
{
    const double cond = spd_condition(a);
    if (!(cond <= kConditionCeiling))
        throw SingularSystemError(what + ": matrix is singular or ill-conditioned (condition " +
                                      std::to_string(cond) + ")",
                                  cond);
    Eigen::LLT<Matrix> llt(a);
    return llt.solve(Matrix::Identity(a.rows(), a.cols()));
}

/// Elementwise Neumaier summation for dense Eigen objects.
template <typename T>
class CompensatedSum {
public:
    CompensatedSum(Eigen::Index rows, Eigen::Index cols)
        : sum_(T::Zero(rows, cols)), comp_(T::Zero(rows, cols))
    {
    }

    void add(const T& v)
    {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            const double s = sum_.data()[i];
            const double x = v.data()[i];
            const double t = s + x;
            if (std::abs(s) >= std::abs(x))
                comp_.data()[i] += (s - t) + x;
            else
                comp_.data()[i] += (x - t) + s;
            sum_.data()[i] = t;
        }
    }

    T value() const { return sum_ + comp_; }

private:
    T sum_;
    T comp_;
};

class CompensatedScalar {
public:
    void add(double x)
    {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

} // namespace racedc

#endif
