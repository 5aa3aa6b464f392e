#ifndef RACEDC_LOCAL_ESTIMATORS_HPP
#define RACEDC_LOCAL_ESTIMATORS_HPP

#include "racedc/core.hpp"
#include "racedc/models.hpp"
#include "racedc/rng.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace racedc {

enum class FitMethod { lasso, ridge, pce, nls, ols };

inline std::string to_string(FitMethod m)
{
    switch (m) {
    case FitMethod::lasso: return "lasso";
    case FitMethod::ridge: return "ridge";
    case FitMethod::pce: return "pce";
    case FitMethod::nls: return "nls";
    case FitMethod::ols: return "ols";
    }
    return "unknown";
}

/// A per-batch (possibly biased) estimate together with the summaries the
/// aggregation steps are allowed to see.
struct LocalFit {
    Vector beta_hat;
    FitMethod method = FitMethod::ols;
    std::map<std::string, double> tuning;
    /// X'X/m for linear fits; fdot'fdot/m at beta_hat for nonlinear fits.
    Matrix gram;
    /// p x r eigenbasis used by principal component fits.
    std::optional<Matrix> basis;
    Eigen::Index rows = 0;
    int batch_id = 0;
    int iterations = 0;
};

class DegenerateEigenspaceError : public Error {
public:
    using Error::Error;
};

inline Matrix scaled_gram(const Matrix& X)
{
    Matrix g = Matrix::Zero(X.cols(), X.cols());
    g.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
    g.triangularView<Eigen::StrictlyUpper>() = g.transpose();
    return g / static_cast<double>(X.rows());
}

// ---------------------------------------------------------------------------
// Lasso

struct LassoOptions {
    /// Stop when the largest coefficient change in a sweep falls below this...
    double tol = 1e-10;
    /// ...or when the largest violation of the optimality conditions does.
    double kkt_tol = 1e-9;
    int max_sweeps = 100000;
};

namespace detail {

inline double soft_threshold(double v, double t)
{
    if (v > t)
        return v - t;
    if (v < -t)
        return v + t;
    return 0.0;
}

inline double lasso_kkt_from_gram(const Vector& c, const Vector& Gb, const Vector& beta, double lambda)
{
    double worst = 0.0;
    for (Eigen::Index k = 0; k < beta.size(); ++k) {
        const double score = c(k) - Gb(k);
        const double v = beta(k) != 0.0 ? std::abs(score - (beta(k) > 0.0 ? lambda : -lambda))
                                        : std::max(0.0, std::abs(score) - lambda);
        worst = std::max(worst, v);
    }
    return worst;
}

inline double lasso_objective(const Matrix& G, const Vector& c, double lambda, const Vector& beta)
{
    return 0.5 * beta.dot(G * beta) - c.dot(beta) + lambda * beta.lpNorm<1>();
}

/// Active-set refinement: repeatedly solve the stationarity equations on the
/// current support and signs, moving only as far as the first sign change
/// (whichever candidate has the lower objective). `beta` is updated whenever
/// the objective drops; returns true once the optimality conditions hold.
inline bool lasso_polish(const Matrix& G, const Vector& c, double lambda, Vector& beta, Vector& Gb, double kkt_tol)
{
    const Eigen::Index p = beta.size();
    for (Eigen::Index attempt = 0; attempt <= p; ++attempt) {
        std::vector<Eigen::Index> active;
        for (Eigen::Index k = 0; k < p; ++k)
            if (beta(k) != 0.0)
                active.push_back(k);
        const auto a = static_cast<Eigen::Index>(active.size());
        if (a == 0)
            return false;
        Matrix Gaa(a, a);
        Vector rhs(a);
        for (Eigen::Index i = 0; i < a; ++i) {
            rhs(i) = c(active[i]) - (beta(active[i]) > 0.0 ? lambda : -lambda);
            for (Eigen::Index j = 0; j < a; ++j)
                Gaa(i, j) = G(active[i], active[j]);
        }
        // Newton step on the face; minimum-norm when the support exceeds the rank.
        Vector current(a);
        for (Eigen::Index i = 0; i < a; ++i)
            current(i) = beta(active[i]);
        Vector sol;
        Eigen::LLT<Matrix> llt(Gaa);
        if (llt.info() == Eigen::Success) {
            sol = llt.solve(rhs);
        } else {
            // Singular face: the smooth part is flat along the null direction v,
            // so the objective is linear there. Walk downhill to the first zero.
            const Eigen::SelfAdjointEigenSolver<Matrix> es(Gaa);
            const Vector v = es.eigenvectors().col(0);
            const double slope = (Gaa * current - rhs).dot(v);
            if (std::abs(slope) <= 1e-14 * (1.0 + rhs.norm()))
                return false;
            const Vector dir = slope > 0.0 ? Vector(-v) : v;
            double t = std::numeric_limits<double>::infinity();
            Eigen::Index hit = -1;
            for (Eigen::Index i = 0; i < a; ++i)
                if (dir(i) * current(i) < 0.0 && -current(i) / dir(i) < t) {
                    t = -current(i) / dir(i);
                    hit = i;
                }
            if (hit < 0)
                return false;
            Vector moved = beta;
            for (Eigen::Index i = 0; i < a; ++i)
                moved(active[i]) = current(i) + t * dir(i);
            moved(active[hit]) = 0.0;
            if (!(lasso_objective(G, c, lambda, moved) < lasso_objective(G, c, lambda, beta)))
                return false;
            beta = moved;
            Gb = G * beta;
            continue;
        }
        Vector target = Vector::Zero(p);
        for (Eigen::Index i = 0; i < a; ++i)
            target(active[i]) = sol(i);

        // Candidates: the support solution itself if sign-consistent, else
        // every zero crossing along the segment from beta to it.
        Vector best = beta;
        double best_obj = lasso_objective(G, c, lambda, beta);
        bool consistent = true;
        for (Eigen::Index i = 0; i < a; ++i) {
            const Eigen::Index k = active[i];
            if (sol(i) != 0.0 && (sol(i) > 0.0) == (beta(k) > 0.0))
                continue;
            consistent = false;
            const double t = beta(k) / (beta(k) - sol(i));
            Vector point = beta + t * (target - beta);
            point(k) = 0.0;
            for (Eigen::Index j = 0; j < p; ++j)
                if (j != k && point(j) != 0.0 && ((point(j) > 0.0) != (beta(j) > 0.0)))
                    point(j) = 0.0;
            const double obj = lasso_objective(G, c, lambda, point);
            if (obj < best_obj) {
                best_obj = obj;
                best = point;
            }
        }
        if (consistent) {
            const Vector target_Gb = G * target;
            if (lasso_objective(G, c, lambda, target) <= best_obj) {
                beta = target;
                Gb = target_Gb;
                return lasso_kkt_from_gram(c, Gb, beta, lambda) <= kkt_tol;
            }
            return false;
        }
        if (best_obj >= lasso_objective(G, c, lambda, beta))
            return false;
        beta = best;
        Gb = G * beta;
    }
    return false;
}

/// Cyclic coordinate descent for (1/2) b'Gb - c'b + lambda |b|_1, i.e. the lasso
/// objective written through the scaled Gram matrix G = X'X/m and c = X'y/m.
/// `beta` is the warm start on entry and the solution on exit.
inline int lasso_coordinate_descent(const Matrix& G, const Vector& c, double lambda, Vector& beta,
                                    const LassoOptions& opts)
{
    constexpr int kPolishEvery = 10;
    const Eigen::Index p = G.rows();
    Vector Gb = G * beta;
    double change = 0.0;
    for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
        change = 0.0;
        for (Eigen::Index k = 0; k < p; ++k) {
            const double gkk = G(k, k);
            const double old = beta(k);
            double updated = 0.0;
            if (gkk > 0.0) {
                const double partial = c(k) - Gb(k) + gkk * old;
                updated = soft_threshold(partial, lambda) / gkk;
            }
            const double delta = updated - old;
            if (delta != 0.0) {
                beta(k) = updated;
                Gb.noalias() += delta * G.col(k);
                change = std::max(change, std::abs(delta));
            }
        }
        if (change < opts.tol || lasso_kkt_from_gram(c, Gb, beta, lambda) <= opts.kkt_tol)
            return sweep;
        if (sweep % kPolishEvery == 0 && lasso_polish(G, c, lambda, beta, Gb, opts.kkt_tol))
            return sweep;
    }
    throw ConvergenceError("lasso: coordinate descent did not converge in " +
                               std::to_string(opts.max_sweeps) + " sweeps (last change " +
                               std::to_string(change) + ")",
                           change);
}

} // namespace detail

/// Largest coordinatewise violation of the lasso optimality conditions.
inline double lasso_kkt_residual(const DataBatch& batch, const Vector& beta, double lambda)
{
    const Vector score = batch.X.transpose() * (batch.y - batch.X * beta) / static_cast<double>(batch.rows());
    double worst = 0.0;
    for (Eigen::Index k = 0; k < beta.size(); ++k) {
        double v;
        if (beta(k) != 0.0)
            v = std::abs(score(k) - lambda * (beta(k) > 0.0 ? 1.0 : -1.0));
        else
            v = std::max(0.0, std::abs(score(k)) - lambda);
        worst = std::max(worst, v);
    }
    return worst;
}

inline LocalFit lasso_fit(const DataBatch& batch, double lambda, const LassoOptions& opts = {})
{
    batch.validate();
    if (!(lambda >= 0.0))
        throw ConfigError("lasso_fit: lambda must be nonnegative");
    const double m = static_cast<double>(batch.rows());
    LocalFit fit;
    fit.method = FitMethod::lasso;
    fit.gram = scaled_gram(batch.X);
    fit.rows = batch.rows();
    fit.batch_id = batch.batch_id;
    const Vector c = batch.X.transpose() * batch.y / m;
    fit.beta_hat = Vector::Zero(batch.cols());
    fit.iterations = detail::lasso_coordinate_descent(fit.gram, c, lambda, fit.beta_hat, opts);
    fit.tuning["lambda"] = lambda;
    return fit;
}

inline double lasso_lambda_max(const DataBatch& batch)
{
    return (batch.X.transpose() * batch.y).cwiseAbs().maxCoeff() / static_cast<double>(batch.rows());
}

/// Log-spaced grid from lambda_max down to ratio * lambda_max, descending.
inline std::vector<double> lasso_lambda_grid(const DataBatch& batch, int points = 50, double ratio = 1e-3)
{
    const double hi = lasso_lambda_max(batch);
    std::vector<double> grid(points);
    for (int i = 0; i < points; ++i) {
        const double frac = points == 1 ? 0.0 : static_cast<double>(i) / (points - 1);
        grid[i] = hi * std::pow(ratio, frac);
    }
    return grid;
}

/// Fold label of every row: a seeded shuffle cut into contiguous blocks.
inline std::vector<int> cv_folds(Eigen::Index m, int folds, std::uint64_t key)
{
    std::vector<Eigen::Index> order(m);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    CounterRng rng(key);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> label(m);
    for (Eigen::Index pos = 0; pos < m; ++pos)
        label[order[pos]] = static_cast<int>(pos * folds / m);
    return label;
}

namespace detail {

inline void check_cv_args(const DataBatch& batch, int folds, std::span<const double> grid)
{
    batch.validate();
    if (folds < 2)
        throw ConfigError("cross-validation: folds must be >= 2");
    if (batch.rows() < folds)
        throw ConfigError("cross-validation: batch has fewer rows (" + std::to_string(batch.rows()) +
                          ") than folds (" + std::to_string(folds) + ")");
    if (grid.empty())
        throw ConfigError("cross-validation: empty grid");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (grid[i] > grid[i - 1])
            throw ConfigError("cross-validation: grid must be sorted descending");
}

inline void split_fold(const DataBatch& batch, const std::vector<int>& label, int fold, Matrix& Xtr,
                       Vector& ytr, Matrix& Xte, Vector& yte)
{
    const Eigen::Index m = batch.rows();
    const auto nte = std::count(label.begin(), label.end(), fold);
    Xtr.resize(m - nte, batch.cols());
    ytr.resize(m - nte);
    Xte.resize(nte, batch.cols());
    yte.resize(nte);
    Eigen::Index a = 0;
    Eigen::Index b = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
        if (label[i] == fold) {
            Xte.row(b) = batch.X.row(i);
            yte(b++) = batch.y(i);
        } else {
            Xtr.row(a) = batch.X.row(i);
            ytr(a++) = batch.y(i);
        }
    }
}

/// First index attaining the minimum, so ties go to the earlier (larger) grid value.
inline std::size_t argmin_first(const std::vector<double>& err)
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < err.size(); ++i)
        if (err[i] < err[best] * (1.0 - 1e-12))
            best = i;
    return best;
}

} // namespace detail

/// Mean held-out squared error of the lasso path over `grid`, one entry per grid value.
inline std::vector<double> lasso_cv_curve(const DataBatch& batch, int folds, std::span<const double> grid,
                                          std::uint64_t key, const LassoOptions& opts = {1e-8, 1e-7, 100000})
{
    detail::check_cv_args(batch, folds, grid);
    const auto label = cv_folds(batch.rows(), folds, key);
    std::vector<double> sse(grid.size(), 0.0);
    Matrix Xtr, Xte;
    Vector ytr, yte;
    for (int f = 0; f < folds; ++f) {
        detail::split_fold(batch, label, f, Xtr, ytr, Xte, yte);
        const Matrix G = scaled_gram(Xtr);
        const Vector c = Xtr.transpose() * ytr / static_cast<double>(Xtr.rows());
        Vector beta = Vector::Zero(batch.cols());
        for (std::size_t i = 0; i < grid.size(); ++i) {
            detail::lasso_coordinate_descent(G, c, grid[i], beta, opts);
            sse[i] += (yte - Xte * beta).squaredNorm();
        }
    }
    for (auto& v : sse)
        v /= static_cast<double>(batch.rows());
    return sse;
}

inline double cv_select_lambda(const DataBatch& batch, int folds, std::span<const double> grid,
                               std::uint64_t key)
{
    const auto err = lasso_cv_curve(batch, folds, grid, key);
    return grid[detail::argmin_first(err)];
}

// ---------------------------------------------------------------------------
// Ridge and least squares

/// (X'X + sI)^{-1} X'y
inline LocalFit ridge_fit(const DataBatch& batch, double s)
{
    batch.validate();
    if (!(s >= 0.0))
        throw ConfigError("ridge_fit: ridge value must be nonnegative");
    const double m = static_cast<double>(batch.rows());
    LocalFit fit;
    fit.method = FitMethod::ridge;
    fit.gram = scaled_gram(batch.X);
    fit.rows = batch.rows();
    fit.batch_id = batch.batch_id;
    Matrix A = m * fit.gram;
    A.diagonal().array() += s;
    fit.beta_hat = solve_spd(A, batch.X.transpose() * batch.y, "ridge_fit");
    fit.tuning["s"] = s;
    return fit;
}

inline LocalFit ols_fit(const DataBatch& batch)
{
    LocalFit fit = ridge_fit(batch, 0.0);
    fit.method = FitMethod::ols;
    fit.tuning.clear();
    return fit;
}

/// Least squares on the row-concatenation of all batches.
inline LocalFit ols_fit(std::span<const DataBatch> batches)
{
    return ols_fit(pool(batches));
}

/// Hoerl-Kennard ridge value p * sigma2 / |beta_ols|^2 with sigma2 the OLS residual mean square.
inline double hk_ridge_value(const DataBatch& batch)
{
    const Eigen::Index m = batch.rows();
    const Eigen::Index p = batch.cols();
    if (m <= p)
        throw ConfigError("hk_ridge_value: needs more rows than columns for the OLS residual variance");
    const LocalFit ols = ols_fit(batch);
    const double norm2 = ols.beta_hat.squaredNorm();
    if (!(norm2 > 0.0))
        throw ConfigError("hk_ridge_value: OLS estimate is zero");
    const double sigma2 = (batch.y - batch.X * ols.beta_hat).squaredNorm() / static_cast<double>(m - p);
    return static_cast<double>(p) * sigma2 / norm2;
}

/// Log-spaced ridge values from 10 * tr(X'X)/p down to 1e-3 * tr(X'X)/p, descending.
inline std::vector<double> ridge_grid(const DataBatch& batch, int points = 50)
{
    const double scale = batch.X.squaredNorm() / static_cast<double>(batch.cols());
    std::vector<double> grid(points);
    for (int i = 0; i < points; ++i) {
        const double frac = points == 1 ? 0.0 : static_cast<double>(i) / (points - 1);
        grid[i] = 10.0 * scale * std::pow(1e-4, frac);
    }
    return grid;
}

inline std::vector<double> ridge_cv_curve(const DataBatch& batch, int folds, std::span<const double> grid,
                                          std::uint64_t key)
{
    detail::check_cv_args(batch, folds, grid);
    const auto label = cv_folds(batch.rows(), folds, key);
    std::vector<double> sse(grid.size(), 0.0);
    Matrix Xtr, Xte;
    Vector ytr, yte;
    for (int f = 0; f < folds; ++f) {
        detail::split_fold(batch, label, f, Xtr, ytr, Xte, yte);
        const Matrix XtX = Xtr.transpose() * Xtr;
        const Vector Xty = Xtr.transpose() * ytr;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            Matrix A = XtX;
            A.diagonal().array() += grid[i];
            const Vector beta = solve_spd(A, Xty, "ridge cross-validation");
            sse[i] += (yte - Xte * beta).squaredNorm();
        }
    }
    for (auto& v : sse)
        v /= static_cast<double>(batch.rows());
    return sse;
}

inline double cv_select_ridge(const DataBatch& batch, int folds, std::span<const double> grid,
                              std::uint64_t key)
{
    const auto err = ridge_cv_curve(batch, folds, grid, key);
    return grid[detail::argmin_first(err)];
}

// ---------------------------------------------------------------------------
// Principal components

/// Leading r eigenvectors of a symmetric matrix, eigenvalues descending, each
/// column signed so that its first nonzero entry is positive.
inline Matrix leading_eigenvectors(const Matrix& S, int r, Vector* eigenvalues = nullptr)
{
    const auto p = static_cast<int>(S.rows());
    if (r < 1 || r > p)
        throw ConfigError("leading_eigenvectors: rank must lie in [1, p]");
    Eigen::SelfAdjointEigenSolver<Matrix> es(S);
    if (es.info() != Eigen::Success)
        throw Error("leading_eigenvectors: eigendecomposition failed");
    const Vector& vals = es.eigenvalues(); // ascending
    if (r < p) {
        const double gap = vals(p - r) - vals(p - r - 1);
        if (gap < 1e-10 * std::max(1.0, std::abs(vals(p - 1))))
            throw DegenerateEigenspaceError("leading_eigenvectors: eigenvalues " + std::to_string(r) + " and " +
                                            std::to_string(r + 1) + " are not separated");
    }
    Matrix P(p, r);
    for (int j = 0; j < r; ++j) {
        Vector v = es.eigenvectors().col(p - 1 - j);
        for (int k = 0; k < p; ++k) {
            if (std::abs(v(k)) > 1e-12) {
                if (v(k) < 0.0)
                    v = -v;
                break;
            }
        }
        P.col(j) = v;
    }
    if (eigenvalues)
        *eigenvalues = vals.reverse();
    return P;
}

/// P (Z'Z)^{-1} Z'y with Z = X P.
inline LocalFit pce_fit(const DataBatch& batch, const Matrix& basis)
{
    batch.validate();
    if (basis.rows() != batch.cols())
        throw ConfigError("pce_fit: basis has wrong row count");
    const Eigen::Index r = basis.cols();
    if ((basis.transpose() * basis - Matrix::Identity(r, r)).cwiseAbs().maxCoeff() > 1e-10)
        throw ConfigError("pce_fit: basis columns are not orthonormal");
    const Matrix Z = batch.X * basis;
    LocalFit fit;
    fit.method = FitMethod::pce;
    fit.gram = scaled_gram(batch.X);
    fit.rows = batch.rows();
    fit.batch_id = batch.batch_id;
    const Vector scores = solve_spd(Z.transpose() * Z, Z.transpose() * batch.y, "pce_fit (rank-deficient scores)");
    fit.beta_hat = basis * scores;
    fit.basis = basis;
    fit.tuning["r"] = static_cast<double>(r);
    return fit;
}

// ---------------------------------------------------------------------------
// Nonlinear least squares

struct NlsOptions {
    /// Stop once |(1/m) J'r| falls below this.
    double tol = 1e-9;
    // Large-residual stationary points converge only linearly under Gauss-Newton.
    int max_iter = 500;
    int max_halvings = 40;
};

/// Gauss-Newton with step halving for min sum (y - f(X, beta))^2.
template <RegressionFunction F>
LocalFit nls_fit(const DataBatch& batch, const F& f, const Vector& init, const NlsOptions& opts = {})
{
    batch.validate();
    if (opts.max_iter < 1)
        throw ConfigError("nls_fit: max_iter must be >= 1");
    if (init.size() != batch.cols())
        throw ConfigError("nls_fit: initial value has wrong dimension");
    const double m = static_cast<double>(batch.rows());
    Vector beta = init;
    Vector resid = batch.y - f.values(batch.X, beta);
    double objective = 0.5 * resid.squaredNorm() / m;
    int iterations = 0;
    double grad_norm = 0.0;
    bool converged = false;

    while (true) {
        const Matrix J = f.jacobian(batch.X, beta);
        const Vector JtR = J.transpose() * resid;
        grad_norm = JtR.norm() / m;
        if (grad_norm <= opts.tol) {
            converged = true;
            break;
        }
        if (iterations >= opts.max_iter)
            break;

        Matrix JtJ = J.transpose() * J;
        Vector step;
        try {
            step = solve_spd(JtJ, JtR, "nls_fit");
        } catch (const SingularSystemError&) {
            JtJ.diagonal().array() += 1e-8 * std::max(1.0, JtJ.diagonal().maxCoeff());
            step = solve_spd(JtJ, JtR, "nls_fit (jittered Gauss-Newton system)");
        }

        double alpha = 1.0;
        int halvings = 0;
        Vector trial = beta + step;
        Vector trial_resid = batch.y - f.values(batch.X, trial);
        double trial_obj = 0.5 * trial_resid.squaredNorm() / m;
        while (!(trial_obj <= objective) && halvings < opts.max_halvings) {
            alpha *= 0.5;
            ++halvings;
            trial = beta + alpha * step;
            trial_resid = batch.y - f.values(batch.X, trial);
            trial_obj = 0.5 * trial_resid.squaredNorm() / m;
        }
        ++iterations;
        if (!(trial_obj <= objective)) {
            // No descent left at roundoff level: stationary up to machine precision.
            if ((alpha * step).norm() <= 1e-14 * (1.0 + beta.norm())) {
                converged = true;
                break;
            }
            throw ConvergenceError("nls_fit: step halving failed to decrease the objective", grad_norm);
        }
        const bool stalled = (trial - beta).norm() <= 1e-15 * (1.0 + beta.norm());
        beta = trial;
        resid = trial_resid;
        objective = trial_obj;
        if (stalled) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw ConvergenceError("nls_fit: no convergence after " + std::to_string(opts.max_iter) +
                                   " iterations (gradient norm " + std::to_string(grad_norm) + ")",
                               grad_norm);
    if (!beta.allFinite())
        throw ConvergenceError("nls_fit: diverged", grad_norm);

    LocalFit fit;
    fit.method = FitMethod::nls;
    fit.beta_hat = beta;
    const Matrix J = f.jacobian(batch.X, beta);
    fit.gram = scaled_gram(J);
    fit.rows = batch.rows();
    fit.batch_id = batch.batch_id;
    fit.iterations = iterations;
    fit.tuning["gradient_norm"] = grad_norm;
    return fit;
}

/// Best (lowest residual sum of squares) of several Gauss-Newton runs; starts
/// that fail to converge are skipped.
template <RegressionFunction F>
LocalFit nls_fit_multistart(const DataBatch& batch, const F& f, std::span<const Vector> starts,
                            const NlsOptions& opts = {})
{
    if (starts.empty())
        throw ConfigError("nls_fit_multistart: no starting values");
    std::optional<LocalFit> best;
    double best_sse = std::numeric_limits<double>::infinity();
    std::string last_error;
    for (const auto& s : starts) {
        try {
            LocalFit fit = nls_fit(batch, f, s, opts);
            const double sse = (batch.y - f.values(batch.X, fit.beta_hat)).squaredNorm();
            if (sse < best_sse) {
                best_sse = sse;
                best = std::move(fit);
            }
        } catch (const ConvergenceError& e) {
            last_error = e.what();
        } catch (const SingularSystemError& e) {
            last_error = e.what();
        }
    }
    if (!best)
        throw ConvergenceError("nls_fit_multistart: every start failed (" + last_error + ")",
                               std::numeric_limits<double>::infinity());
    return *best;
}

// ---------------------------------------------------------------------------
// Tuning-rule dispatch shared by the harness and the protocol workers

enum class LocalEstimator { lasso, ridge, pce, ols };
enum class LambdaRule { cv, fixed };
enum class RidgeRule { hk, cv, fixed };

struct LocalFitConfig {
    LocalEstimator estimator = LocalEstimator::lasso;
    LambdaRule lambda_rule = LambdaRule::cv;
    double lambda = 0.1;
    RidgeRule ridge_rule = RidgeRule::hk;
    double ridge_value = 1.0;
    int pce_rank = 4;
    int cv_folds = 5;
    std::uint64_t seed = 0;
};

/// Fit the configured local estimator. Principal component fits use `shared_basis`
/// when given, otherwise the batch's own leading eigenvectors.
inline LocalFit fit_local(const DataBatch& batch, const LocalFitConfig& cfg, const Matrix* shared_basis = nullptr)
{
    const std::uint64_t key = derive_key(cfg.seed, Stream::cv_folds, {static_cast<std::uint64_t>(batch.batch_id)});
    switch (cfg.estimator) {
    case LocalEstimator::lasso: {
        double lambda = cfg.lambda;
        if (cfg.lambda_rule == LambdaRule::cv) {
            const auto grid = lasso_lambda_grid(batch);
            lambda = cv_select_lambda(batch, cfg.cv_folds, grid, key);
        }
        return lasso_fit(batch, lambda);
    }
    case LocalEstimator::ridge: {
        double s = cfg.ridge_value;
        if (cfg.ridge_rule == RidgeRule::hk) {
            s = hk_ridge_value(batch);
        } else if (cfg.ridge_rule == RidgeRule::cv) {
            const auto grid = ridge_grid(batch);
            s = cv_select_ridge(batch, cfg.cv_folds, grid, key);
        }
        return ridge_fit(batch, s);
    }
    case LocalEstimator::pce: {
        if (shared_basis)
            return pce_fit(batch, *shared_basis);
        return pce_fit(batch, leading_eigenvectors(scaled_gram(batch.X), cfg.pce_rank));
    }
    case LocalEstimator::ols:
        return ols_fit(batch);
    }
    throw ConfigError("fit_local: unknown estimator");
}

} // namespace racedc

#endif
