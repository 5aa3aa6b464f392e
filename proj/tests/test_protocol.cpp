#include "test_support.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sstream>
#include <vector>

using namespace racedc;
using namespace racedc::fixtures;

namespace {

std::vector<DataBatch> make_batches(const Vector& beta, int N, Eigen::Index m, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<DataBatch> out;
    for (int j = 0; j < N; ++j)
        out.push_back(linear_batch(beta, m, 1.0, rng, j).batch);
    return out;
}

std::vector<LocalFit> local_fits(const std::vector<DataBatch>& batches, const LocalFitConfig& cfg,
                                 const Matrix* basis = nullptr)
{
    std::vector<LocalFit> fits;
    for (const auto& b : batches)
        fits.push_back(fit_local(b, cfg, basis));
    return fits;
}

LinearSessionConfig session_config(LocalEstimator est)
{
    LinearSessionConfig cfg;
    cfg.local.estimator = est;
    cfg.local.seed = 17;
    cfg.local.pce_rank = 2;
    cfg.proj.R = 8;
    cfg.proj.seed = 23;
    return cfg;
}

} // namespace

TEST(LinearSession, RaceIsBitIdenticalToLibraryAndOneRound)
{
    const Vector beta = Vector::LinSpaced(5, 2.0, -1.0);
    const auto batches = make_batches(beta, 10, 40, 101);
    const auto cfg = session_config(LocalEstimator::lasso);
    const SessionResult s = run_linear_session(batches, SessionMethod::race, cfg);
    const auto fits = local_fits(batches, cfg.local);
    const GlobalEstimate lib = race_linear(batches, fits, cfg.adj, cfg.proj);
    EXPECT_EQ(s.beta, lib.beta);
    EXPECT_EQ(s.stats.rounds, 1);
    EXPECT_EQ(s.stats.setup_rounds, 0);
    EXPECT_EQ(s.stats.upstream_scalars_per_worker, 5u * 5u + 2u * 5u);
    ASSERT_EQ(s.stats.upstream_per_round.size(), 1u);
    EXPECT_EQ(s.stats.upstream_per_round[0], 35u);
    EXPECT_EQ(s.stats.downstream_scalars, 0u);
}

TEST(LinearSession, BaselinesAreBitIdenticalToLibrary)
{
    const Vector beta = Vector::LinSpaced(4, 1.0, -1.0);
    const auto batches = make_batches(beta, 6, 30, 102);

    auto lasso = session_config(LocalEstimator::lasso);
    const auto lasso_fits = local_fits(batches, lasso.local);
    EXPECT_EQ(run_linear_session(batches, SessionMethod::DC_lasso, lasso).beta, dc_lasso(lasso_fits).beta);
    EXPECT_EQ(run_linear_session(batches, SessionMethod::AV, lasso).beta,
              simple_average_adjusted(batches, lasso_fits, lasso.adj.k1).beta);

    auto ridge = session_config(LocalEstimator::ridge);
    const auto ridge_fits = local_fits(batches, ridge.local);
    EXPECT_EQ(run_linear_session(batches, SessionMethod::DC_ridge, ridge).beta, dc_ridge(ridge_fits).beta);
    EXPECT_EQ(run_linear_session(batches, SessionMethod::race, ridge).beta,
              race_linear(batches, ridge_fits, ridge.adj, ridge.proj).beta);
}

TEST(LinearSession, PrincipalComponentsUseTwoRounds)
{
    const Vector beta = Vector::LinSpaced(4, 1.0, -1.0);
    const auto batches = make_batches(beta, 6, 30, 103);
    const auto cfg = session_config(LocalEstimator::pce);

    const SessionResult dc = run_linear_session(batches, SessionMethod::DC_pce, cfg);
    EXPECT_EQ(dc.beta, dc_pce(batches, 2).beta);
    EXPECT_EQ(dc.stats.rounds, 2);
    // round 1 ships X'X (p^2), round 2 ships Z'Z and Z'y (r^2 + r)
    ASSERT_EQ(dc.stats.upstream_per_round.size(), 2u);
    EXPECT_EQ(dc.stats.upstream_per_round[0], 16u);
    EXPECT_EQ(dc.stats.upstream_per_round[1], 6u);

    std::vector<Matrix> grams;
    for (const auto& b : batches)
        grams.push_back(pce_gram_summary(b));
    const Matrix basis = pce_broadcast_basis(grams, 2);
    const auto fits = local_fits(batches, cfg.local, &basis);
    const SessionResult av = run_linear_session(batches, SessionMethod::AV, cfg);
    EXPECT_EQ(av.beta, simple_average_pce(batches, fits, cfg.adj.k1).beta);
    EXPECT_EQ(av.stats.rounds, 2);
}

TEST(Firewall, RejectsPerObservationPayloads)
{
    const Eigen::Index p = 5;
    Network net({50, 50}, p);
    net.begin_round(1);
    Message leak{MessageKind::LocalFitMsg, 1, worker_node(0), kCoordinator, {{"residuals", Matrix::Zero(50, 1)}}};
    EXPECT_THROW(net.send(leak), FirewallViolation);
    Message odd{MessageKind::LocalFitMsg, 1, worker_node(0), kCoordinator, {{"x", Matrix::Zero(7, 1)}}};
    EXPECT_THROW(net.send(odd), FirewallViolation);
    Message ok{MessageKind::LocalFitMsg, 1, worker_node(0), kCoordinator,
               {{"gram", Matrix::Zero(p, p)}, {"beta", Matrix::Zero(p, 1)}}};
    EXPECT_NO_THROW(net.send(ok));
    net.allow_dimension(7);
    EXPECT_NO_THROW(net.send(odd));
    EXPECT_EQ(net.trace().size(), 2u);
}

TEST(Trace, NdjsonLinesCarryEveryField)
{
    const auto batches = make_batches(Vector::Ones(3), 4, 20, 104);
    const SessionResult s = run_linear_session(batches, SessionMethod::race, session_config(LocalEstimator::ridge));
    std::ostringstream os;
    write_trace(s.trace, os);
    std::istringstream is(os.str());
    std::string line;
    std::size_t n = 0;
    std::size_t upstream = 0;
    while (std::getline(is, line)) {
        const auto j = nlohmann::json::parse(line);
        for (const char* key : {"round", "from", "to", "kind", "payload_scalars"})
            EXPECT_TRUE(j.contains(key)) << key;
        if (j["from"].get<int>() != kCoordinator)
            upstream += j["payload_scalars"].get<std::size_t>();
        ++n;
    }
    EXPECT_EQ(n, s.trace.size());
    EXPECT_EQ(n, 8u); // four local fits, four Done messages
    EXPECT_EQ(upstream, 4u * (9u + 6u));
}

namespace {

std::vector<DataBatch> nonlinear_batches(const Vector& beta, int N, Eigen::Index m, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    const ShiftedSquareFunction f;
    std::vector<DataBatch> out;
    for (int j = 0; j < N; ++j) {
        const Matrix X = random_matrix(m, beta.size(), rng);
        out.push_back({X, f.values(X, beta) + random_vector(m, rng), j});
    }
    return out;
}

NonlinearSessionConfig nonlinear_config()
{
    NonlinearSessionConfig cfg;
    cfg.proj.R = 5;
    cfg.proj.seed = 31;
    const ShiftedSquareFunction f;
    cfg.local_starts = [f](const DataBatch& b) { return f.starting_values(b.X, b.y); };
    return cfg;
}

} // namespace

TEST(NonlinearSession, MatchesLibraryAndCountsRounds)
{
    Vector beta(3);
    beta << 2.0, 1.0, -2.0;
    const auto batches = nonlinear_batches(beta, 12, 60, 105);
    const ShiftedSquareFunction f;
    const auto cfg = nonlinear_config();
    const SessionResult s = run_nonlinear_session(batches, f, cfg);

    std::vector<LocalFit> fits;
    for (const auto& b : batches)
        fits.push_back(nls_fit_multistart(b, f, f.starting_values(b.X, b.y)));
    const GlobalEstimate lib = race_nonlinear(batches, fits, f, cfg.adj, cfg.proj);
    EXPECT_LT((s.beta - lib.beta).norm(), 1e-12);
    ASSERT_TRUE(s.global);
    EXPECT_EQ(s.stats.rounds, s.global->iterations);
    EXPECT_EQ(s.stats.setup_rounds, 1);
    for (const auto n : s.stats.upstream_per_round)
        EXPECT_EQ(n, 3u + 9u);
}

TEST(NonlinearSession, PerRoundPayloadDoesNotGrowWithBatchSize)
{
    Vector beta(3);
    beta << 2.0, 1.0, -2.0;
    const ShiftedSquareFunction f;
    const auto small = run_nonlinear_session(nonlinear_batches(beta, 10, 40, 106), f, nonlinear_config());
    const auto large = run_nonlinear_session(nonlinear_batches(beta, 10, 400, 107), f, nonlinear_config());
    ASSERT_FALSE(small.stats.upstream_per_round.empty());
    ASSERT_FALSE(large.stats.upstream_per_round.empty());
    EXPECT_EQ(small.stats.upstream_per_round.front(), large.stats.upstream_per_round.front());
    // setup ships beta, response (p each) and spread (p^2)
    const std::size_t setup = 3 + 3 + 9;
    EXPECT_EQ(small.stats.upstream_scalars_per_worker, setup + 12u * small.stats.upstream_per_round.size());
}
