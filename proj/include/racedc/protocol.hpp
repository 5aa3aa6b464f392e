#ifndef RACEDC_PROTOCOL_HPP
#define RACEDC_PROTOCOL_HPP

// In-process coordinator/worker simulation. Logical nodes exchange typed
// messages in synchronous rounds; every message is checked against the
// raw-data firewall and counted.

#include "racedc/aggregate.hpp"
#include "racedc/baselines.hpp"
#include "racedc/core.hpp"
#include "racedc/local_estimators.hpp"
#include "racedc/remodel.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace racedc {

enum class MessageKind { GramSummary, LocalFitMsg, ProjectedBatch, EigenBroadcast, BetaBroadcast, CompressedNL, Done };

inline std::string to_string(MessageKind k)
{
    switch (k) {
    case MessageKind::GramSummary: return "GramSummary";
    case MessageKind::LocalFitMsg: return "LocalFitMsg";
    case MessageKind::ProjectedBatch: return "ProjectedBatch";
    case MessageKind::EigenBroadcast: return "EigenBroadcast";
    case MessageKind::BetaBroadcast: return "BetaBroadcast";
    case MessageKind::CompressedNL: return "CompressedNL";
    case MessageKind::Done: return "Done";
    }
    return "unknown";
}

/// A named dense block of a message payload. Vectors are stored as one column.
struct Block {
    std::string name;
    Matrix data;
};

inline constexpr int kCoordinator = 0;
inline int worker_node(int batch_index) { return batch_index + 1; }

struct Message {
    MessageKind kind = MessageKind::Done;
    int round = 0;
    int from = kCoordinator;
    int to = kCoordinator;
    std::vector<Block> blocks;

    std::size_t payload_scalars() const
    {
        std::size_t n = 0;
        for (const auto& b : blocks)
            n += static_cast<std::size_t>(b.data.size());
        return n;
    }

    const Matrix& block(const std::string& name) const
    {
        for (const auto& b : blocks)
            if (b.name == name)
                return b.data;
        throw Error("message " + to_string(kind) + " has no block '" + name + "'");
    }

    Vector vector_block(const std::string& name) const { return block(name).col(0); }
};

struct TraceEntry {
    int round = 0;
    int from = 0;
    int to = 0;
    MessageKind kind = MessageKind::Done;
    std::size_t payload_scalars = 0;
};

struct CommStats {
    /// Estimation rounds (worker-to-coordinator exchanges).
    int rounds = 0;
    /// Exchanges before the first estimation round (nonlinear initialisation only).
    int setup_rounds = 0;
    /// Scalars one worker sends over the whole session (maximum over workers).
    std::size_t upstream_scalars_per_worker = 0;
    /// Scalars the coordinator sends to all workers together.
    std::size_t downstream_scalars = 0;
    /// Per-worker upstream scalars in each estimation round, indexed from round 1.
    std::vector<std::size_t> upstream_per_round;
};

class FirewallViolation : public Error {
public:
    using Error::Error;
};

/// Every payload dimension must be 1, p or the broadcast rank r: a block that
/// carries per-observation data would need a dimension equal to the batch size.
inline void check_firewall(const Message& msg, Eigen::Index p, const std::set<Eigen::Index>& extra_dims,
                           Eigen::Index sender_rows)
{
    for (const auto& b : msg.blocks) {
        for (const Eigen::Index dim : {b.data.rows(), b.data.cols()}) {
            const bool allowed = dim == 1 || dim == p || extra_dims.count(dim) > 0;
            if (!allowed || (sender_rows > p && dim == sender_rows))
                throw FirewallViolation("firewall: " + to_string(msg.kind) + " block '" + b.name +
                                        "' has a dimension of " + std::to_string(dim) +
                                        ", which is not a parameter-sized extent");
        }
    }
}

/// Synchronous in-process message fabric with per-node inboxes.
class Network {
public:
    Network(std::vector<Eigen::Index> worker_rows, Eigen::Index p)
        : worker_rows_(std::move(worker_rows)), p_(p), inbox_(worker_rows_.size() + 1),
          upstream_(worker_rows_.size(), 0)
    {
    }

    void allow_dimension(Eigen::Index d) { extra_dims_.insert(d); }

    void begin_round(int round, bool setup = false)
    {
        round_ = round;
        if (setup) {
            ++stats_.setup_rounds;
        } else {
            ++stats_.rounds;
            stats_.upstream_per_round.push_back(0);
        }
        in_setup_ = setup;
        std::fill(round_upstream_.begin(), round_upstream_.end(), 0);
        round_upstream_.resize(worker_rows_.size(), 0);
    }

    int round() const { return round_; }

    void send(Message msg)
    {
        msg.round = round_;
        const bool upstream = msg.from != kCoordinator;
        const Eigen::Index rows = upstream ? worker_rows_.at(msg.from - 1) : 0;
        check_firewall(msg, p_, extra_dims_, rows);
        const std::size_t n = msg.payload_scalars();
        trace_.push_back({msg.round, msg.from, msg.to, msg.kind, n});
        if (upstream) {
            const auto w = static_cast<std::size_t>(msg.from - 1);
            upstream_[w] += n;
            round_upstream_[w] += n;
            if (!in_setup_ && !stats_.upstream_per_round.empty())
                stats_.upstream_per_round.back() =
                    *std::max_element(round_upstream_.begin(), round_upstream_.end());
        } else {
            stats_.downstream_scalars += n;
        }
        inbox_.at(static_cast<std::size_t>(msg.to)).push_back(std::move(msg));
    }

    /// Remove and return everything waiting for `node`, in send order.
    std::vector<Message> drain(int node)
    {
        std::vector<Message> out;
        out.swap(inbox_.at(static_cast<std::size_t>(node)));
        return out;
    }

    void broadcast(MessageKind kind, const std::vector<Block>& blocks)
    {
        for (std::size_t w = 0; w < worker_rows_.size(); ++w)
            send({kind, round_, kCoordinator, worker_node(static_cast<int>(w)), blocks});
    }

    CommStats stats() const
    {
        CommStats s = stats_;
        s.upstream_scalars_per_worker = upstream_.empty() ? 0 : *std::max_element(upstream_.begin(), upstream_.end());
        return s;
    }

    const std::vector<TraceEntry>& trace() const { return trace_; }

private:
    std::vector<Eigen::Index> worker_rows_;
    Eigen::Index p_;
    std::set<Eigen::Index> extra_dims_;
    std::vector<std::vector<Message>> inbox_;
    std::vector<std::size_t> upstream_;
    std::vector<std::size_t> round_upstream_;
    std::vector<TraceEntry> trace_;
    CommStats stats_;
    int round_ = 0;
    bool in_setup_ = false;
};

inline void write_trace(const std::vector<TraceEntry>& trace, std::ostream& os)
{
    for (const auto& t : trace) {
        nlohmann::json j = {{"round", t.round},
                            {"from", t.from},
                            {"to", t.to},
                            {"kind", to_string(t.kind)},
                            {"payload_scalars", t.payload_scalars}};
        os << j.dump() << '\n';
    }
}

inline void write_trace(const std::vector<TraceEntry>& trace, const std::string& path)
{
    std::ofstream os(path, std::ios::app);
    if (!os)
        throw Error("cannot open trace file " + path);
    write_trace(trace, os);
}

// ---------------------------------------------------------------------------
// Linear sessions

enum class SessionMethod { race, AV, DC_lasso, DC_ridge, DC_pce };

inline std::string to_string(SessionMethod m)
{
    switch (m) {
    case SessionMethod::race: return "race";
    case SessionMethod::AV: return "AV";
    case SessionMethod::DC_lasso: return "DC_lasso";
    case SessionMethod::DC_ridge: return "DC_ridge";
    case SessionMethod::DC_pce: return "DC_pce";
    }
    return "unknown";
}

struct LinearSessionConfig {
    LocalFitConfig local;
    AdjustmentSpec adj;
    ProjectionSpec proj;
};

struct SessionResult {
    Vector beta;
    std::optional<GlobalEstimate> global;
    std::optional<BaselineResult> baseline;
    CommStats stats;
    std::vector<TraceEntry> trace;
};

namespace detail {

inline Matrix as_column(const Vector& v) { return Matrix(v); }
inline Matrix as_scalar(double v) { return Matrix::Constant(1, 1, v); }

inline std::vector<Eigen::Index> batch_rows(std::span<const DataBatch> batches)
{
    std::vector<Eigen::Index> rows;
    for (const auto& b : batches)
        rows.push_back(b.rows());
    return rows;
}

/// Upstream messages of one round, ordered by worker.
inline std::vector<Message> collect(Network& net, std::size_t workers, MessageKind expected)
{
    auto msgs = net.drain(kCoordinator);
    if (msgs.size() != workers)
        throw Error("protocol: expected " + std::to_string(workers) + " replies, got " + std::to_string(msgs.size()));
    std::sort(msgs.begin(), msgs.end(), [](const Message& a, const Message& b) { return a.from < b.from; });
    for (const auto& m : msgs)
        if (m.kind != expected)
            throw Error("protocol: unexpected " + to_string(m.kind) + " message");
    return msgs;
}

} // namespace detail

/// Run one linear estimation plan as a coordinator/worker exchange. The result
/// equals the corresponding direct library call.
inline SessionResult run_linear_session(std::span<const DataBatch> batches, SessionMethod method,
                                        const LinearSessionConfig& cfg)
{
    if (batches.empty())
        throw ConfigError("run_linear_session: no batches");
    const Eigen::Index p = batches.front().cols();
    const std::size_t N = batches.size();
    Network net(detail::batch_rows(batches), p);
    const bool needs_basis = method == SessionMethod::DC_pce ||
                             (method == SessionMethod::AV && cfg.local.estimator == LocalEstimator::pce);
    if (needs_basis)
        net.allow_dimension(cfg.local.pce_rank);

    SessionResult result;
    std::optional<Matrix> basis;
    int round = 1;

    if (needs_basis) {
        // Round 1: aggregate X'X, broadcast the leading eigenvectors.
        net.begin_round(round);
        for (std::size_t w = 0; w < N; ++w)
            net.send({MessageKind::GramSummary, round, worker_node(static_cast<int>(w)), kCoordinator,
                      {{"xtx", pce_gram_summary(batches[w])}}});
        std::vector<Matrix> grams;
        for (const auto& m : detail::collect(net, N, MessageKind::GramSummary))
            grams.push_back(m.block("xtx"));
        basis = pce_broadcast_basis(grams, cfg.local.pce_rank);
        net.broadcast(MessageKind::EigenBroadcast, {{"basis", *basis}});
        ++round;
    }

    net.begin_round(round);
    for (std::size_t w = 0; w < N; ++w) {
        const int node = worker_node(static_cast<int>(w));
        const DataBatch& batch = batches[w];
        Matrix received_basis;
        for (const auto& m : net.drain(node))
            if (m.kind == MessageKind::EigenBroadcast)
                received_basis = m.block("basis");
        const Matrix* shared = received_basis.size() ? &received_basis : nullptr;

        Message msg{MessageKind::LocalFitMsg, round, node, kCoordinator, {}};
        switch (method) {
        case SessionMethod::race: {
            const LocalFit fit = fit_local(batch, cfg.local, shared);
            const LinearSummary s = summarize_linear(batch, fit, cfg.adj);
            msg.blocks = {{"gram", s.gram}, {"beta", detail::as_column(s.beta_hat)},
                          {"adjustment", detail::as_column(s.adjustment)}};
            break;
        }
        case SessionMethod::AV: {
            const LocalFit fit = fit_local(batch, cfg.local, shared);
            msg.blocks = {{"adjusted", detail::as_column(debiased_fit(batch, fit, cfg.adj.k1))}};
            break;
        }
        case SessionMethod::DC_lasso: {
            const LocalFit fit = fit_local(batch, cfg.local, shared);
            msg.blocks = {{"gram", fit.gram}, {"beta", detail::as_column(fit.beta_hat)}};
            break;
        }
        case SessionMethod::DC_ridge: {
            const LocalFit fit = fit_local(batch, cfg.local, shared);
            const auto s = fit.tuning.find("s");
            if (s == fit.tuning.end())
                throw ConfigError("run_linear_session: DC_ridge needs ridge local fits");
            msg.blocks = {{"gram", fit.gram}, {"beta", detail::as_column(fit.beta_hat)},
                          {"s", detail::as_scalar(s->second)},
                          {"rows", detail::as_scalar(static_cast<double>(fit.rows))}};
            break;
        }
        case SessionMethod::DC_pce: {
            const PceScoreSummary s = pce_score_summary(batch, received_basis);
            msg.kind = MessageKind::ProjectedBatch;
            msg.blocks = {{"ztz", s.ZtZ}, {"zty", detail::as_column(s.Zty)}};
            break;
        }
        }
        net.send(std::move(msg));
    }

    const MessageKind expected = method == SessionMethod::DC_pce ? MessageKind::ProjectedBatch : MessageKind::LocalFitMsg;
    const auto replies = detail::collect(net, N, expected);
    switch (method) {
    case SessionMethod::race: {
        std::vector<LinearSummary> summaries;
        for (std::size_t w = 0; w < N; ++w) {
            LinearSummary s;
            s.batch_id = batches[w].batch_id;
            s.gram = replies[w].block("gram");
            s.beta_hat = replies[w].vector_block("beta");
            s.adjustment = replies[w].vector_block("adjustment");
            summaries.push_back(std::move(s));
        }
        result.global = race_linear(summaries, cfg.adj, cfg.proj);
        result.beta = result.global->beta;
        break;
    }
    case SessionMethod::AV: {
        std::vector<Vector> adjusted;
        for (const auto& r : replies)
            adjusted.push_back(r.vector_block("adjusted"));
        BaselineResult b = simple_average(adjusted);
        b.rounds = needs_basis ? 2 : 1;
        result.baseline = b;
        break;
    }
    case SessionMethod::DC_lasso:
    case SessionMethod::DC_ridge: {
        std::vector<LocalFit> fits;
        for (const auto& r : replies) {
            LocalFit f;
            f.gram = r.block("gram");
            f.beta_hat = r.vector_block("beta");
            if (method == SessionMethod::DC_ridge) {
                f.tuning["s"] = r.block("s")(0, 0);
                f.rows = static_cast<Eigen::Index>(r.block("rows")(0, 0));
            }
            fits.push_back(std::move(f));
        }
        result.baseline = method == SessionMethod::DC_lasso ? dc_lasso(fits) : dc_ridge(fits);
        break;
    }
    case SessionMethod::DC_pce: {
        std::vector<PceScoreSummary> parts;
        for (std::size_t w = 0; w < N; ++w)
            parts.push_back({batches[w].batch_id, replies[w].block("ztz"), replies[w].vector_block("zty")});
        result.baseline = dc_pce_combine(*basis, parts);
        break;
    }
    }
    if (result.baseline)
        result.beta = result.baseline->beta;
    net.broadcast(MessageKind::Done, {});
    result.stats = net.stats();
    result.trace = net.trace();
    return result;
}

// ---------------------------------------------------------------------------
// Nonlinear session

struct NonlinearSessionConfig {
    AdjustmentSpec adj;
    ProjectionSpec proj;
    NonlinearSolveOptions solve;
    NlsOptions local;
    /// Starting value of every worker's local least squares fit...
    Vector local_init;
    /// ...or, when set, a per-batch multistart set (best fit kept).
    std::function<std::vector<Vector>(const DataBatch&)> local_starts;
    /// Global starting value; defaults to the first worker's local estimate.
    std::optional<Vector> init;
};

/// Iterative nonlinear race-DC. Round 0 ships each worker's fixed summaries;
/// every later round broadcasts the current iterate and collects H f and H fdot.
template <RegressionFunction F>
SessionResult run_nonlinear_session(std::span<const DataBatch> batches, const F& f, const NonlinearSessionConfig& cfg)
{
    if (batches.empty())
        throw ConfigError("run_nonlinear_session: no batches");
    const Eigen::Index p = batches.front().cols();
    const std::size_t N = batches.size();
    Network net(detail::batch_rows(batches), p);

    // Worker-private state: H_j never leaves the worker.
    std::vector<Matrix> H(N);

    net.begin_round(0, true);
    for (std::size_t w = 0; w < N; ++w) {
        const LocalFit fit = cfg.local_starts
                                 ? nls_fit_multistart(batches[w], f, cfg.local_starts(batches[w]), cfg.local)
                                 : nls_fit(batches[w], f, cfg.local_init, cfg.local);
        H[w] = build_H(batches[w], fit, f, cfg.adj.k1);
        const NonlinearSummary s = summarize_nonlinear(batches[w], fit, H[w], f);
        net.send({MessageKind::LocalFitMsg, 0, worker_node(static_cast<int>(w)), kCoordinator,
                  {{"beta", detail::as_column(fit.beta_hat)},
                   {"response", detail::as_column(s.response)},
                   {"spread", s.spread}}});
    }
    std::vector<NonlinearSummary> summaries;
    Vector first_local;
    for (const auto& m : detail::collect(net, N, MessageKind::LocalFitMsg)) {
        NonlinearSummary s;
        s.batch_id = batches[static_cast<std::size_t>(m.from - 1)].batch_id;
        s.response = m.vector_block("response");
        s.spread = m.block("spread");
        if (m.from == worker_node(0))
            first_local = m.vector_block("beta");
        summaries.push_back(std::move(s));
    }

    int round = 0;
    NonlinearEvaluator evaluate = [&](const Vector& beta) {
        net.begin_round(++round);
        net.broadcast(MessageKind::BetaBroadcast, {{"beta", detail::as_column(beta)}});
        for (std::size_t w = 0; w < N; ++w) {
            const int node = worker_node(static_cast<int>(w));
            Vector current;
            for (const auto& m : net.drain(node))
                if (m.kind == MessageKind::BetaBroadcast)
                    current = m.vector_block("beta");
            const NonlinearEvaluation e = evaluate_compressed(batches[w], H[w], f, current);
            net.send({MessageKind::CompressedNL, round, node, kCoordinator,
                      {{"hf", detail::as_column(e.hf)}, {"hj", e.hj}}});
        }
        std::vector<NonlinearEvaluation> evals;
        for (const auto& m : detail::collect(net, N, MessageKind::CompressedNL))
            evals.push_back({batches[static_cast<std::size_t>(m.from - 1)].batch_id, m.vector_block("hf"), m.block("hj")});
        return evals;
    };

    SessionResult result;
    result.global = race_nonlinear(summaries, evaluate, cfg.proj, cfg.init.value_or(first_local), cfg.solve);
    result.beta = result.global->beta;
    net.broadcast(MessageKind::Done, {{"beta", detail::as_column(result.beta)}});
    result.stats = net.stats();
    result.trace = net.trace();
    return result;
}

} // namespace racedc

#endif
