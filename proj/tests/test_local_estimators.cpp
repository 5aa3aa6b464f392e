#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace racedc;
using namespace racedc::fixtures;

namespace {

double lasso_objective_direct(const DataBatch& b, const Vector& beta, double lambda)
{
    const double m = static_cast<double>(b.rows());
    return 0.5 * (b.y - b.X * beta).squaredNorm() / m + lambda * beta.lpNorm<1>();
}

// Coarse-to-fine lattice minimiser for a two-coefficient lasso.
Vector lattice_lasso(const DataBatch& b, double lambda)
{
    Vector best = Vector::Zero(2);
    double best_obj = lasso_objective_direct(b, best, lambda);
    double centre0 = 0.0, centre1 = 0.0, half = 4.0;
    for (int level = 0; level < 6; ++level) {
        const double step = half / 50.0;
        for (int i = -50; i <= 50; ++i) {
            for (int j = -50; j <= 50; ++j) {
                Vector v(2);
                v << centre0 + i * step, centre1 + j * step;
                const double obj = lasso_objective_direct(b, v, lambda);
                if (obj < best_obj) {
                    best_obj = obj;
                    best = v;
                }
            }
        }
        centre0 = best(0);
        centre1 = best(1);
        half = 4.0 * step;
    }
    return best;
}

DataBatch subset(const DataBatch& b, const std::vector<int>& label, int fold, bool keep)
{
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < b.rows(); ++i)
        if ((label[i] == fold) == keep)
            rows.push_back(i);
    DataBatch out;
    out.X.resize(static_cast<Eigen::Index>(rows.size()), b.cols());
    out.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        out.X.row(static_cast<Eigen::Index>(k)) = b.X.row(rows[k]);
        out.y(static_cast<Eigen::Index>(k)) = b.y(rows[k]);
    }
    return out;
}

} // namespace

// --- lasso ------------------------------------------------------------------

TEST(Lasso, ZeroPenaltyIsLeastSquares)
{
    std::mt19937_64 rng(11);
    Vector beta(4);
    beta << 1.0, -0.5, 0.0, 2.0;
    const auto nb = linear_batch(beta, 60, 0.3, rng);
    const LocalFit fit = lasso_fit(nb.batch, 0.0);
    EXPECT_LT((fit.beta_hat - qr_least_squares(nb.batch.X, nb.batch.y)).norm(), 1e-7);
}

TEST(Lasso, PenaltyAboveMaxGivesZero)
{
    std::mt19937_64 rng(12);
    Vector beta(5);
    beta << 1, 2, 3, 4, 5;
    const auto nb = linear_batch(beta, 40, 1.0, rng);
    const double lmax = (nb.batch.X.transpose() * nb.batch.y).cwiseAbs().maxCoeff() / 40.0;
    EXPECT_NEAR(lasso_lambda_max(nb.batch), lmax, 1e-12);
    EXPECT_EQ(lasso_fit(nb.batch, lmax).beta_hat.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(lasso_fit(nb.batch, 2.0 * lmax).beta_hat.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT(lasso_fit(nb.batch, 0.9 * lmax).beta_hat.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lasso, MatchesLatticeMinimiserOnTwoCoefficients)
{
    DataBatch b;
    b.X.resize(5, 2);
    b.X << 1.0, 0.5, -0.3, 1.2, 0.8, -0.7, 1.5, 0.1, -1.1, 0.9;
    b.y.resize(5);
    b.y << 2.0, 0.4, 1.1, 2.6, -1.5;
    for (double lambda : {0.05, 0.3, 0.8}) {
        const Vector fit = lasso_fit(b, lambda).beta_hat;
        const Vector grid = lattice_lasso(b, lambda);
        EXPECT_LT((fit - grid).cwiseAbs().maxCoeff(), 1e-3) << "lambda " << lambda;
        EXPECT_LE(lasso_objective_direct(b, fit, lambda), lasso_objective_direct(b, grid, lambda) + 1e-12);
    }
}

TEST(Lasso, SatisfiesOptimalityConditions)
{
    std::mt19937_64 rng(13);
    Vector beta = Vector::Zero(30);
    beta.head(5) << 3, 2, 1, 0.5, -2;
    for (Eigen::Index m : {20, 40, 200}) {
        const auto nb = linear_batch(beta, m, 2.0, rng);
        const double lmax = lasso_lambda_max(nb.batch);
        for (double frac : {0.5, 0.1, 0.01, 0.001}) {
            const LocalFit fit = lasso_fit(nb.batch, frac * lmax);
            EXPECT_LE(lasso_kkt_residual(nb.batch, fit.beta_hat, frac * lmax), 1e-6)
                << "m=" << m << " frac=" << frac;
        }
    }
}

TEST(Lasso, GridIsDescendingLogSpaced)
{
    std::mt19937_64 rng(14);
    const auto nb = linear_batch(Vector::Ones(3), 30, 1.0, rng);
    const auto grid = lasso_lambda_grid(nb.batch, 5, 1e-4);
    ASSERT_EQ(grid.size(), 5u);
    EXPECT_NEAR(grid.front(), lasso_lambda_max(nb.batch), 1e-14);
    EXPECT_NEAR(grid.back(), 1e-4 * grid.front(), 1e-14);
    for (std::size_t i = 1; i < grid.size(); ++i)
        EXPECT_NEAR(grid[i] / grid[i - 1], 0.1, 1e-12);
}

TEST(LassoCv, SingleGridValueIsReturned)
{
    std::mt19937_64 rng(15);
    const auto nb = linear_batch(Vector::Ones(3), 30, 1.0, rng);
    const std::vector<double> grid{0.123};
    EXPECT_EQ(cv_select_lambda(nb.batch, 5, grid, 7), 0.123);
}

TEST(LassoCv, NoiselessDataPicksSmallestPenalty)
{
    std::mt19937_64 rng(16);
    Vector beta(4);
    beta << 1.0, -2.0, 0.5, 3.0;
    const auto nb = linear_batch(beta, 50, 0.0, rng);
    const std::vector<double> grid{1.0, 0.1, 0.01, 0.0};
    EXPECT_EQ(cv_select_lambda(nb.batch, 5, grid, 99), 0.0);
}

TEST(LassoCv, CurveMatchesColdStartRefits)
{
    std::mt19937_64 rng(17);
    Vector beta = Vector::Zero(10);
    beta.head(3) << 2, -1, 0.5;
    const auto nb = linear_batch(beta, 80, 1.5, rng);
    const auto grid = lasso_lambda_grid(nb.batch, 20, 1e-2);
    const std::uint64_t key = 4242;
    const auto curve = lasso_cv_curve(nb.batch, 5, grid, key);
    const auto label = cv_folds(nb.batch.rows(), 5, key);

    std::vector<double> oracle(grid.size(), 0.0);
    for (int f = 0; f < 5; ++f) {
        const DataBatch train = subset(nb.batch, label, f, false);
        const DataBatch test = subset(nb.batch, label, f, true);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const Vector b = lasso_fit(train, grid[i]).beta_hat;
            oracle[i] += (test.y - test.X * b).squaredNorm() / static_cast<double>(nb.batch.rows());
        }
    }
    std::size_t best = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        EXPECT_NEAR(curve[i], oracle[i], 1e-5 * oracle[i]);
        if (oracle[i] < oracle[best])
            best = i;
    }
    const double chosen = cv_select_lambda(nb.batch, 5, grid, key);
    std::size_t idx = 0;
    while (grid[idx] != chosen)
        ++idx;
    EXPECT_LE(idx > best ? idx - best : best - idx, 1u);
}

TEST(LassoCv, FoldsAreBalancedAndSeeded)
{
    const auto a = cv_folds(23, 5, 1);
    const auto b = cv_folds(23, 5, 1);
    const auto c = cv_folds(23, 5, 2);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    for (int f = 0; f < 5; ++f) {
        const auto count = std::count(a.begin(), a.end(), f);
        EXPECT_GE(count, 4);
        EXPECT_LE(count, 5);
    }
}

// --- ridge and least squares ------------------------------------------------

TEST(Ridge, TwoByTwoClosedForm)
{
    DataBatch b;
    b.X.resize(3, 2);
    b.X << 1, 2, 0, 1, 1, 0;
    b.y.resize(3);
    b.y << 3, 1, 2;
    // X'X = [[2,2],[2,5]], X'y = (5, 7); with s = 1: [[3,2],[2,6]]^{-1} (5,7) = (16, 11)/14
    const LocalFit fit = ridge_fit(b, 1.0);
    EXPECT_NEAR(fit.beta_hat(0), 16.0 / 14.0, 1e-14);
    EXPECT_NEAR(fit.beta_hat(1), 11.0 / 14.0, 1e-14);
    EXPECT_EQ(fit.tuning.at("s"), 1.0);
}

TEST(Ridge, LimitsOfTheRidgeValue)
{
    std::mt19937_64 rng(18);
    const auto nb = linear_batch(Vector::LinSpaced(4, 1.0, 4.0), 50, 0.5, rng);
    EXPECT_LT((ridge_fit(nb.batch, 0.0).beta_hat - qr_least_squares(nb.batch.X, nb.batch.y)).norm(), 1e-10);
    EXPECT_LT(ridge_fit(nb.batch, 1e12).beta_hat.norm(), 1e-8);
    EXPECT_LT((ols_fit(nb.batch).beta_hat - qr_least_squares(nb.batch.X, nb.batch.y)).norm(), 1e-10);
}

TEST(Ridge, HoerlKennardByHand)
{
    std::mt19937_64 rng(19);
    const auto nb = linear_batch(Vector::LinSpaced(3, -1.0, 2.0), 25, 0.8, rng);
    const Vector b = qr_least_squares(nb.batch.X, nb.batch.y);
    const double s2 = (nb.batch.y - nb.batch.X * b).squaredNorm() / (25.0 - 3.0);
    EXPECT_NEAR(hk_ridge_value(nb.batch), 3.0 * s2 / b.squaredNorm(), 1e-12);
}

TEST(Ridge, HoerlKennardScalesWithNoiseVariance)
{
    std::mt19937_64 rng(20);
    const Matrix X = random_matrix(200, 3, rng);
    const Vector beta = Vector::Ones(3);
    double lo = 0.0, hi = 0.0;
    std::normal_distribution<double> z;
    for (int r = 0; r < 400; ++r) {
        Vector e(200);
        for (auto& v : e)
            v = z(rng);
        DataBatch a{X, X * beta + 0.5 * e, 0};
        DataBatch c{X, X * beta + 1.0 * e, 0};
        lo += hk_ridge_value(a);
        hi += hk_ridge_value(c);
    }
    EXPECT_GT(hi / lo, 3.6);
    EXPECT_LT(hi / lo, 4.4);
}

TEST(Ridge, HoerlKennardNeedsMoreRowsThanColumns)
{
    std::mt19937_64 rng(21);
    const auto nb = linear_batch(Vector::Ones(4), 4, 1.0, rng);
    EXPECT_THROW(hk_ridge_value(nb.batch), ConfigError);
}

TEST(Ridge, CrossValidationMatchesDirectRefits)
{
    std::mt19937_64 rng(22);
    const auto nb = linear_batch(Vector::LinSpaced(5, 1.0, -1.0), 60, 2.0, rng);
    const auto grid = ridge_grid(nb.batch, 15);
    const auto curve = ridge_cv_curve(nb.batch, 5, grid, 31);
    const auto label = cv_folds(60, 5, 31);
    std::vector<double> oracle(grid.size(), 0.0);
    for (int f = 0; f < 5; ++f) {
        const DataBatch train = subset(nb.batch, label, f, false);
        const DataBatch test = subset(nb.batch, label, f, true);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            Matrix A = train.X.transpose() * train.X;
            A.diagonal().array() += grid[i];
            const Vector b = A.ldlt().solve(train.X.transpose() * train.y);
            oracle[i] += (test.y - test.X * b).squaredNorm() / 60.0;
        }
    }
    std::size_t best = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        EXPECT_NEAR(curve[i], oracle[i], 1e-10 * oracle[i]);
        if (oracle[i] < oracle[best])
            best = i;
    }
    EXPECT_EQ(cv_select_ridge(nb.batch, 5, grid, 31), grid[best]);
}

// --- principal components -----------------------------------------------------

TEST(Pce, FullRankIdentityBasisIsLeastSquares)
{
    std::mt19937_64 rng(23);
    const auto nb = linear_batch(Vector::LinSpaced(4, 0.5, 2.0), 40, 0.7, rng);
    const LocalFit fit = pce_fit(nb.batch, Matrix::Identity(4, 4));
    EXPECT_LT((fit.beta_hat - qr_least_squares(nb.batch.X, nb.batch.y)).norm(), 1e-10);
}

TEST(Pce, RankOneIsScalarRegressionOnScores)
{
    std::mt19937_64 rng(24);
    const auto nb = linear_batch(Vector::LinSpaced(3, 1.0, 3.0), 30, 0.5, rng);
    Vector v(3);
    v << 1.0, 2.0, 2.0;
    v /= 3.0;
    const Vector z = nb.batch.X * v;
    const double gamma = z.dot(nb.batch.y) / z.squaredNorm();
    const LocalFit fit = pce_fit(nb.batch, v);
    EXPECT_LT((fit.beta_hat - gamma * v).norm(), 1e-12);
}

TEST(Pce, ResidualIsOrthogonalToScores)
{
    std::mt19937_64 rng(25);
    const auto nb = linear_batch(Vector::LinSpaced(6, 1.0, -1.0), 80, 1.0, rng);
    const Matrix P = leading_eigenvectors(scaled_gram(nb.batch.X), 3);
    const LocalFit fit = pce_fit(nb.batch, P);
    const Vector score = (nb.batch.X * P).transpose() * (nb.batch.y - nb.batch.X * fit.beta_hat);
    EXPECT_LT(score.cwiseAbs().maxCoeff(), 1e-9);
    // the estimate lives in span(P)
    EXPECT_LT((fit.beta_hat - P * (P.transpose() * fit.beta_hat)).norm(), 1e-12);
}

TEST(Pce, RejectsNonOrthonormalBasis)
{
    std::mt19937_64 rng(26);
    const auto nb = linear_batch(Vector::Ones(3), 20, 1.0, rng);
    EXPECT_THROW(pce_fit(nb.batch, 2.0 * Matrix::Identity(3, 2)), ConfigError);
    EXPECT_THROW(pce_fit(nb.batch, Matrix::Identity(4, 2)), ConfigError);
}

TEST(Eigen, LeadingVectorsOfDiagonalMatrix)
{
    Vector d(4);
    d << 1.0, 5.0, 3.0, 2.0;
    Vector vals;
    const Matrix P = leading_eigenvectors(d.asDiagonal(), 2, &vals);
    EXPECT_NEAR(P(1, 0), 1.0, 1e-14);
    EXPECT_NEAR(P(2, 1), 1.0, 1e-14);
    EXPECT_NEAR(vals(0), 5.0, 1e-14);
    EXPECT_NEAR(vals(3), 1.0, 1e-14);
}

TEST(Eigen, SignConventionFirstNonzeroPositive)
{
    std::mt19937_64 rng(27);
    const Matrix S = random_spd(5, rng);
    const Matrix P = leading_eigenvectors(S, 5);
    for (int j = 0; j < 5; ++j) {
        int k = 0;
        while (std::abs(P(k, j)) <= 1e-12)
            ++k;
        EXPECT_GT(P(k, j), 0.0);
        EXPECT_LT((S * P.col(j) - (P.col(j).dot(S * P.col(j))) * P.col(j)).norm(), 1e-10);
    }
    EXPECT_LT((P.transpose() * P - Matrix::Identity(5, 5)).norm(), 1e-12);
}

TEST(Eigen, DegenerateCutThrows)
{
    Vector d(3);
    d << 2.0, 2.0, 1.0;
    EXPECT_THROW(leading_eigenvectors(d.asDiagonal(), 1), DegenerateEigenspaceError);
    EXPECT_NO_THROW(leading_eigenvectors(d.asDiagonal(), 2));
    EXPECT_THROW(leading_eigenvectors(d.asDiagonal(), 0), ConfigError);
    EXPECT_THROW(leading_eigenvectors(d.asDiagonal(), 4), ConfigError);
}

// --- nonlinear least squares ----------------------------------------------------

TEST(Nls, LinearModelConvergesInOneStep)
{
    std::mt19937_64 rng(28);
    const auto nb = linear_batch(Vector::LinSpaced(3, 1.0, -1.0), 40, 0.5, rng);
    const LocalFit fit = nls_fit(nb.batch, LinearFunction{}, Vector::Zero(3));
    EXPECT_LT((fit.beta_hat - qr_least_squares(nb.batch.X, nb.batch.y)).norm(), 1e-8);
    EXPECT_EQ(fit.iterations, 1);
}

TEST(Nls, NoiselessShiftedSquareIsRecovered)
{
    std::mt19937_64 rng(29);
    Vector beta(4);
    beta << 2.0, 1.0, -2.0, 0.0;
    const Matrix X = random_matrix(50, 4, rng);
    const ShiftedSquareFunction f;
    const DataBatch b{X, f.values(X, beta), 0};
    const LocalFit fit = nls_fit(b, f, beta + 0.1 * Vector::Ones(4));
    EXPECT_LT((fit.beta_hat - beta).cwiseAbs().maxCoeff(), 1e-6);
    const Matrix J = f.jacobian(X, fit.beta_hat);
    EXPECT_LT((fit.gram - J.transpose() * J / 50.0).norm(), 1e-10);
}

TEST(Nls, NoisyFitIsAMinimumAlongEveryCoordinate)
{
    std::mt19937_64 rng(30);
    Vector beta(2);
    beta << 1.0, -0.5;
    const Matrix X = random_matrix(30, 2, rng);
    const ShiftedSquareFunction f;
    const DataBatch b{X, f.values(X, beta) + 0.5 * random_vector(30, rng), 0};
    const LocalFit fit = nls_fit(b, f, beta);
    auto sse = [&](const Vector& v) { return (b.y - f.values(X, v)).squaredNorm(); };
    const double at_fit = sse(fit.beta_hat);
    for (int k = 0; k < 2; ++k) {
        for (int i = -20; i <= 20; ++i) {
            Vector v = fit.beta_hat;
            v(k) += i * 1e-3;
            EXPECT_GE(sse(v), at_fit - 1e-10);
        }
    }
}

TEST(Nls, MultistartKeepsTheLowestResidualFit)
{
    std::mt19937_64 rng(31);
    Vector beta(4);
    beta << 2.0, 1.0, -2.0, 0.0;
    const Matrix X = random_matrix(40, 4, rng);
    const ShiftedSquareFunction f;
    const DataBatch b{X, f.values(X, beta) + random_vector(40, rng), 0};
    const auto starts = f.starting_values(X, b.y);
    const LocalFit best = nls_fit_multistart(b, f, starts);
    const double best_sse = (b.y - f.values(X, best.beta_hat)).squaredNorm();
    for (const auto& s : starts) {
        try {
            const LocalFit one = nls_fit(b, f, s);
            EXPECT_LE(best_sse, (b.y - f.values(X, one.beta_hat)).squaredNorm() + 1e-12);
        } catch (const Error&) {
        }
    }
    EXPECT_THROW(nls_fit_multistart(b, f, std::span<const Vector>{}), ConfigError);
}

TEST(Nls, MomentStartIsConsistent)
{
    std::mt19937_64 rng(32);
    Vector beta(3);
    beta << 1.0, -1.0, 0.5;
    const Matrix X = random_matrix(200000, 3, rng);
    const ShiftedSquareFunction f;
    const Vector s = f.moment_start(X, f.values(X, beta));
    EXPECT_LT((s - beta).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Nls, SpectralStartRecoversBetaUpToSign)
{
    std::mt19937_64 rng(35);
    Vector beta(3);
    beta << 2.0, 1.0, -2.0;
    // correlated design: x = A z
    Matrix A(3, 3);
    A << 1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0;
    const Matrix X = random_matrix(200000, 3, rng) * A.transpose();
    const ShiftedSquareFunction f;
    const Vector s = f.spectral_start(X, f.values(X, beta) + random_vector(200000, rng));
    EXPECT_LT(std::min((s - beta).norm(), (s + beta).norm()), 0.1);
}

// --- dispatch and argument checks -----------------------------------------------

TEST(FitLocal, DispatchesEachEstimator)
{
    std::mt19937_64 rng(33);
    const auto nb = linear_batch(Vector::LinSpaced(5, 1.0, -1.0), 60, 1.0, rng);
    LocalFitConfig cfg;
    cfg.estimator = LocalEstimator::ridge;
    cfg.ridge_rule = RidgeRule::fixed;
    cfg.ridge_value = 3.0;
    EXPECT_LT((fit_local(nb.batch, cfg).beta_hat - ridge_fit(nb.batch, 3.0).beta_hat).norm(), 1e-14);
    cfg.ridge_rule = RidgeRule::hk;
    EXPECT_EQ(fit_local(nb.batch, cfg).tuning.at("s"), hk_ridge_value(nb.batch));
    cfg.estimator = LocalEstimator::lasso;
    cfg.lambda_rule = LambdaRule::fixed;
    cfg.lambda = 0.2;
    EXPECT_EQ(fit_local(nb.batch, cfg).tuning.at("lambda"), 0.2);
    cfg.estimator = LocalEstimator::pce;
    cfg.pce_rank = 5;
    EXPECT_LT((fit_local(nb.batch, cfg).beta_hat - qr_least_squares(nb.batch.X, nb.batch.y)).norm(), 1e-9);
    cfg.estimator = LocalEstimator::ols;
    EXPECT_EQ(fit_local(nb.batch, cfg).method, FitMethod::ols);
}

TEST(FitLocal, RejectsBadArguments)
{
    std::mt19937_64 rng(34);
    const auto nb = linear_batch(Vector::Ones(3), 12, 1.0, rng);
    const std::vector<double> grid{1.0, 0.1};
    const std::vector<double> ascending{0.1, 1.0};
    EXPECT_THROW(lasso_fit(nb.batch, -1.0), ConfigError);
    EXPECT_THROW(ridge_fit(nb.batch, -1.0), ConfigError);
    EXPECT_THROW(cv_select_lambda(nb.batch, 1, grid, 0), ConfigError);
    EXPECT_THROW(cv_select_lambda(nb.batch, 13, grid, 0), ConfigError);
    EXPECT_THROW(cv_select_lambda(nb.batch, 5, ascending, 0), ConfigError);
    EXPECT_THROW(cv_select_ridge(nb.batch, 5, std::vector<double>{}, 0), ConfigError);
    EXPECT_THROW(nls_fit(nb.batch, LinearFunction{}, Vector::Zero(2)), ConfigError);
    DataBatch bad{Matrix::Zero(3, 2), Vector::Zero(2), 0};
    EXPECT_THROW(ols_fit(bad), ConfigError);
}

TEST(FitLocal, CollinearDesignRaisesSingular)
{
    DataBatch b;
    b.X.resize(4, 2);
    b.X << 1, 2, 2, 4, 3, 6, 4, 8;
    b.y = Vector::LinSpaced(4, 1.0, 4.0);
    EXPECT_THROW(ols_fit(b), SingularSystemError);
}
