#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include <Eigen/Dense>

#include <smtip/gp.hpp>
#include <smtip/gp_io.hpp>

using namespace smtip;

namespace {

Eigen::VectorXd uniform(Eigen::Index n, double lo, double hi, Rng& rng)
{
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i)
        v[i] = std::uniform_real_distribution<double>(lo, hi)(rng);
    return v;
}

KernelParams random_params(int width, Rng& rng)
{
    return KernelParams::from_values(uniform(width, 0.5, 3.0, rng), std::uniform_real_distribution<double>(0.3, 2.0)(rng),
        std::exp(std::uniform_real_distribution<double>(std::log(1e-3), std::log(1e-1))(rng)));
}

GPModel random_model(int d, int du, int n, Rng& rng, bool periodic_first = false)
{
    std::vector<KernelParams> ps;
    for (int j = 0; j < d; ++j)
        ps.push_back(random_params(d + du, rng));
    DimMask mask(d, false);
    if (periodic_first)
        mask[0] = true;
    std::vector<TransitionTuple> data;
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd x = uniform(d, -3.0, 3.0, rng);
        const Eigen::VectorXd u = uniform(du, -1.0, 1.0, rng);
        Eigen::VectorXd xn = x + 0.5 * x.array().sin().matrix() + 0.1 * uniform(d, -1.0, 1.0, rng);
        data.push_back({x, u, xn, 1, i});
    }
    if (periodic_first)
        for (auto& t : data)
            t.x_next[0] = wrap_angle(t.x_next[0]);
    return GPModel(d, du, ps, mask).condition(data);
}

// Plain RBF written out independently; periodic dims use chord distance.
double oracle_kernel(const KernelParams& p, const Eigen::VectorXd& a, const Eigen::VectorXd& b, const DimMask& periodic)
{
    double r2 = 0.0;
    for (Eigen::Index j = 0; j < a.size(); ++j) {
        double diff = a[j] - b[j];
        if (j < static_cast<Eigen::Index>(periodic.size()) && periodic[j])
            diff = std::hypot(std::cos(a[j]) - std::cos(b[j]), std::sin(a[j]) - std::sin(b[j]));
        r2 += diff * diff / std::exp(2.0 * p.log_lengthscales[j]);
    }
    return std::exp(p.log_signal_variance) * std::exp(-0.5 * r2);
}

struct DenseOracle {
    Eigen::MatrixXd X;  // inputs as rows
    Eigen::MatrixXd Y;  // increments as rows
    std::vector<KernelParams> params;
    DimMask periodic;

    explicit DenseOracle(const GPModel& m) : X(m.inputs()), Y(m.targets()), params(m.params()), periodic(m.periodic_input()) {}

    Eigen::MatrixXd gram(int j) const
    {
        const Eigen::Index n = X.rows();
        Eigen::MatrixXd A(n, n);
        for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = 0; b < n; ++b)
                A(a, b) = oracle_kernel(params[j], X.row(a).transpose(), X.row(b).transpose(), periodic);
        A.diagonal().array() += params[j].noise_variance();
        return A;
    }

    std::pair<double, double> predict(int j, const Eigen::VectorXd& q) const
    {
        const Eigen::MatrixXd A = gram(j);
        Eigen::VectorXd ks(X.rows());
        for (Eigen::Index a = 0; a < X.rows(); ++a)
            ks[a] = oracle_kernel(params[j], X.row(a).transpose(), q, periodic);
        const auto lu = A.fullPivLu();
        const double mean = ks.dot(lu.solve(Eigen::VectorXd(Y.col(j))));
        const double var = params[j].signal_variance() - ks.dot(lu.solve(ks)) + params[j].noise_variance();
        return {mean, var};
    }

    double lml(int j) const
    {
        const Eigen::MatrixXd A = gram(j);
        const auto lu = A.fullPivLu();
        const Eigen::VectorXd y = Y.col(j);
        double logdet = 0.0;
        const Eigen::MatrixXd U = lu.matrixLU().triangularView<Eigen::Upper>();
        for (Eigen::Index i = 0; i < A.rows(); ++i)
            logdet += std::log(std::abs(U(i, i)));
        return -0.5 * y.dot(lu.solve(y)) - 0.5 * logdet - 0.5 * static_cast<double>(A.rows()) * std::log(2.0 * std::numbers::pi);
    }
};

} // namespace

TEST(Kernel, ZeroDistanceIsSignalVariance)
{
    const auto p = KernelParams::from_values(Eigen::Vector3d(0.5, 2.0, 1.0), 1.7, 0.1);
    const Eigen::Vector3d a(0.3, -1.0, 2.0);
    EXPECT_DOUBLE_EQ(kernel_eval(p, a, a), 1.7);
}

TEST(Kernel, Symmetric)
{
    Rng rng(0);
    for (int i = 0; i < 100; ++i) {
        const auto p = random_params(4, rng);
        const Eigen::VectorXd a = uniform(4, -3, 3, rng), b = uniform(4, -3, 3, rng);
        EXPECT_EQ(kernel_eval(p, a, b), kernel_eval(p, b, a));
        EXPECT_EQ(kernel_eval(p, a, b, {true, false}), kernel_eval(p, b, a, {true, false}));
    }
}

TEST(Kernel, ClosedForm)
{
    const auto p = KernelParams::from_values(Eigen::Vector2d(1.0, 1.0), 1.0, 1e-3);
    EXPECT_NEAR(kernel_eval(p, Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 1)), std::exp(-1.0), 1e-15);
    EXPECT_NEAR(kernel_eval(p, Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 1)), 0.367879, 1e-6);
}

TEST(Kernel, PeriodicDimensionIsTwoPiPeriodic)
{
    const auto p = KernelParams::from_values(Eigen::Vector2d(0.7, 1.3), 1.0, 1e-3);
    const Eigen::Vector2d a(3.0, 0.4), b(-3.0, 0.1);
    const Eigen::Vector2d b_shift(b[0] + 2 * std::numbers::pi, b[1]);
    EXPECT_NEAR(kernel_eval(p, a, b, {true, false}), kernel_eval(p, a, b_shift, {true, false}), 1e-14);
    // near the seam the points are close on the circle
    EXPECT_GT(kernel_eval(p, a, b, {true, false}), kernel_eval(p, a, b, {false, false}));
}

TEST(Kernel, SampledGramIsPsd)
{
    Rng rng(4);
    for (int rep = 0; rep < 20; ++rep) {
        const auto p = random_params(3, rng);
        const DimMask mask{rep % 2 == 0, false, false};
        const int n = 40;
        std::vector<Eigen::VectorXd> pts;
        for (int i = 0; i < n; ++i)
            pts.push_back(uniform(3, -4, 4, rng));
        Eigen::MatrixXd K(n, n);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b)
                K(a, b) = kernel_eval(p, pts[a], pts[b], mask);
        EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(K).eigenvalues().minCoeff(), -1e-8);
    }
}

TEST(Posterior, EmptyDatasetIsPrior)
{
    const auto p = KernelParams::from_values(Eigen::Vector3d(1, 1, 1), 0.8, 0.02);
    const GPModel m = GPModel::shared_params(2, 1, p);
    const Eigen::Vector2d x(0.3, -2.0);
    const auto b = m.posterior(x, Eigen::VectorXd::Constant(1, 0.5));
    EXPECT_EQ(b.mean, x);
    EXPECT_NEAR(b.variance[0], 0.82, 1e-15);
    EXPECT_NEAR(b.variance[1], 0.82, 1e-15);
}

TEST(Posterior, InterpolatesAtTinyNoise)
{
    Rng rng(8);
    const auto p = KernelParams::from_values(Eigen::Vector3d(1, 1, 1), 1.0, 1e-12);
    std::vector<TransitionTuple> data;
    for (int i = 0; i < 6; ++i) {
        const Eigen::VectorXd x = uniform(2, -4, 4, rng), u = uniform(1, -2, 2, rng);
        data.push_back({x, u, x + uniform(2, -1, 1, rng), 1, i});
    }
    const GPModel m = GPModel::shared_params(2, 1, p).condition(data);
    for (const auto& t : data) {
        const auto b = m.posterior(t.x, t.u);
        EXPECT_NEAR(b.mean[0], t.x_next[0], 1e-6);
        EXPECT_NEAR(b.mean[1], t.x_next[1], 1e-6);
        EXPECT_LT(b.variance.maxCoeff(), 1e-6);
    }
}

TEST(Posterior, MatchesDenseOracle)
{
    Rng rng(2024);
    for (int rep = 0; rep < 30; ++rep) {
        const int n = 1 + rep * 2;
        const bool periodic = rep % 3 == 0;
        const GPModel m = random_model(2, 1, n, rng, periodic);
        const DenseOracle oracle(m);
        for (int q = 0; q < 10; ++q) {
            const Eigen::VectorXd x = uniform(2, -3, 3, rng), u = uniform(1, -1, 1, rng);
            const auto b = m.posterior(x, u);
            const Eigen::VectorXd in = m.input(x, u);
            for (int j = 0; j < 2; ++j) {
                const auto [mean, var] = oracle.predict(j, in);
                double expect_mean = x[j] + mean;
                if (j == 0 && periodic)
                    expect_mean = wrap_angle(expect_mean);
                EXPECT_NEAR(b.mean[j], expect_mean, 1e-8) << "rep " << rep;
                EXPECT_NEAR(b.variance[j], var, 1e-8) << "rep " << rep;
            }
        }
    }
}

TEST(Posterior, VarianceWithinPriorBounds)
{
    Rng rng(3);
    for (int rep = 0; rep < 10; ++rep) {
        const GPModel m = random_model(3, 2, 20, rng);
        for (int q = 0; q < 20; ++q) {
            const auto b = m.posterior(uniform(3, -5, 5, rng), uniform(2, -1, 1, rng));
            for (int j = 0; j < 3; ++j) {
                EXPECT_GE(b.variance[j], m.params()[j].noise_variance() - 1e-12);
                EXPECT_LE(b.variance[j], m.params()[j].signal_variance() + m.params()[j].noise_variance() + 1e-12);
            }
        }
    }
}

TEST(Lml, SingleZeroObservation)
{
    // K + sn2 = 0.75 + 0.25 = 1
    const auto p = KernelParams::from_values(Eigen::Vector2d(1, 1), 0.75, 0.25);
    const GPModel m = GPModel::shared_params(1, 1, p).condition(
        std::vector<TransitionTuple>{{Eigen::VectorXd::Constant(1, 0.4), Eigen::VectorXd::Constant(1, 0.1), Eigen::VectorXd::Constant(1, 0.4), 1, 0}});
    EXPECT_NEAR(m.log_marginal_likelihood(), -0.5 * std::log(2 * std::numbers::pi), 1e-12);
    EXPECT_NEAR(m.log_marginal_likelihood(), -0.918939, 1e-6);
}

TEST(Lml, MatchesDenseOracle)
{
    Rng rng(13);
    for (int rep = 0; rep < 20; ++rep) {
        const GPModel m = random_model(2, 1, 3 + 3 * rep, rng, rep % 2 == 1);
        const DenseOracle oracle(m);
        EXPECT_NEAR(m.log_marginal_likelihood(), oracle.lml(0) + oracle.lml(1), 1e-8 * std::max(1.0, std::abs(m.log_marginal_likelihood())));
    }
}

TEST(Lml, DuplicatedDatasetMatchesOracle)
{
    Rng rng(17);
    const GPModel m = random_model(2, 1, 10, rng);
    const GPModel doubled = m.condition(m.dataset());
    ASSERT_EQ(doubled.size(), 20);
    EXPECT_NE(doubled.log_marginal_likelihood(), m.log_marginal_likelihood());
    const DenseOracle oracle(doubled);
    EXPECT_NEAR(doubled.log_marginal_likelihood(), oracle.lml(0) + oracle.lml(1), 1e-8 * std::abs(oracle.lml(0) + oracle.lml(1)));
}

TEST(Lml, GradientMatchesFiniteDifferences)
{
    Rng rng(99);
    for (int rep = 0; rep < 10; ++rep) {
        const GPModel m = random_model(2, 1, 8, rng, rep % 2 == 0);
        for (int j = 0; j < 2; ++j) {
            Eigen::VectorXd g;
            m.output_lml(j, m.params()[j], &g);
            const Eigen::VectorXd theta = m.params()[j].packed();
            for (Eigen::Index i = 0; i < theta.size(); ++i) {
                const double h = 1e-5;
                Eigen::VectorXd tp = theta, tm = theta;
                tp[i] += h;
                tm[i] -= h;
                const double fd = (m.output_lml(j, KernelParams::unpacked(tp)) - m.output_lml(j, KernelParams::unpacked(tm))) / (2 * h);
                EXPECT_LE(std::abs(g[i] - fd), 1e-4 * std::max(std::abs(fd), std::abs(g[i])) + 1e-7) << "param " << i;
            }
        }
    }
}

TEST(Condition, EmptyExtraIsNoOp)
{
    Rng rng(5);
    const GPModel m = random_model(2, 1, 12, rng);
    const GPModel c = m.condition(std::vector<TransitionTuple>{});
    for (int q = 0; q < 20; ++q) {
        const Eigen::VectorXd x = uniform(2, -3, 3, rng), u = uniform(1, -1, 1, rng);
        EXPECT_EQ(m.posterior(x, u).mean, c.posterior(x, u).mean);
        EXPECT_EQ(m.posterior(x, u).variance, c.posterior(x, u).variance);
    }
}

TEST(Condition, VarianceNeverIncreases)
{
    Rng rng(6);
    for (int rep = 0; rep < 20; ++rep) {
        const GPModel m = random_model(2, 1, rep, rng, rep % 2 == 0);
        const GPModel extra_src = random_model(2, 1, 1 + rep % 7, rng, rep % 2 == 0);
        const GPModel c = m.condition(extra_src.dataset());
        for (int q = 0; q < 50; ++q) {
            const Eigen::VectorXd x = uniform(2, -3, 3, rng), u = uniform(1, -1, 1, rng);
            const auto before = m.posterior(x, u).variance;
            const auto after = c.posterior(x, u).variance;
            for (int j = 0; j < 2; ++j)
                EXPECT_LE(after[j], before[j] + 1e-9);
        }
    }
}

TEST(Condition, Associative)
{
    Rng rng(7);
    const GPModel m = random_model(2, 1, 10, rng);
    const auto A = random_model(2, 1, 6, rng).dataset();
    const auto B = random_model(2, 1, 5, rng).dataset();
    std::vector<TransitionTuple> AB = A;
    AB.insert(AB.end(), B.begin(), B.end());
    const GPModel seq = m.condition(A).condition(B);
    const GPModel once = m.condition(AB);
    for (int q = 0; q < 30; ++q) {
        const Eigen::VectorXd x = uniform(2, -3, 3, rng), u = uniform(1, -1, 1, rng);
        const auto a = seq.posterior(x, u), b = once.posterior(x, u);
        EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LT((a.variance - b.variance).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(Condition, ExactDuplicatesAtTinyNoiseUseJitter)
{
    const auto p = KernelParams::from_values(Eigen::Vector2d(1, 1), 1.0, 1e-14);
    const TransitionTuple t{Eigen::VectorXd::Constant(1, 0.2), Eigen::VectorXd::Constant(1, 0.0), Eigen::VectorXd::Constant(1, 0.3), 1, 0};
    const GPModel m = GPModel::shared_params(1, 1, p).condition(std::vector<TransitionTuple>(5, t));
    EXPECT_GT(m.jitter(0), 0.0);
    EXPECT_NEAR(m.posterior(t.x, t.u).mean[0], 0.3, 1e-4);
}

TEST(Condition, HyperparamsUnchanged)
{
    Rng rng(1);
    const GPModel m = random_model(2, 1, 5, rng);
    const GPModel c = m.condition(random_model(2, 1, 5, rng).dataset());
    EXPECT_EQ(m.params(), c.params());
    EXPECT_EQ(c.size(), 10);
    EXPECT_EQ(m.size(), 5);
}

TEST(Fit, NoBudgetReturnsInitial)
{
    Rng rng(0);
    const GPModel m = random_model(2, 1, 10, rng);
    FitOptions o;
    o.restarts = 0;
    o.max_iters = 0;
    const auto r = fit_hyperparams(m, o, rng);
    EXPECT_EQ(r.params, m.params());
}

TEST(Fit, ImprovesLml)
{
    Rng rng(21);
    for (int rep = 0; rep < 5; ++rep) {
        const GPModel m = random_model(2, 1, 30, rng);
        const auto r = fit_hyperparams(m, FitOptions{}, rng);
        EXPECT_GE(r.final_lml, r.initial_lml);
        EXPECT_GE(m.with_params(r.params).log_marginal_likelihood(), m.log_marginal_likelihood() - 1e-9);
    }
}

TEST(Fit, Deterministic)
{
    Rng rng(5);
    const GPModel m = random_model(2, 1, 20, rng);
    Rng a(3), b(3);
    EXPECT_EQ(fit_hyperparams(m, FitOptions{}, a).params, fit_hyperparams(m, FitOptions{}, b).params);
}

TEST(Fit, RecoversLengthscale)
{
    // one output, two inputs; targets drawn from a GP prior with lengthscale 2
    Rng rng(31);
    const int n = 64;
    const auto truth = KernelParams::from_values(Eigen::Vector2d(2.0, 2.0), 1.0, 1e-2);
    std::vector<Eigen::VectorXd> in;
    for (int i = 0; i < n; ++i)
        in.push_back(uniform(2, -6, 6, rng));
    Eigen::MatrixXd K(n, n);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            K(a, b) = kernel_eval(truth, in[a], in[b]);
    K.diagonal().array() += truth.noise_variance();
    const Eigen::MatrixXd L = K.llt().matrixL();
    const Eigen::VectorXd f = L * standard_normal(n, rng);
    std::vector<TransitionTuple> data;
    for (int i = 0; i < n; ++i)
        data.push_back({in[i].head(1), in[i].tail(1), in[i].head(1) + Eigen::VectorXd::Constant(1, f[i]), 1, i});
    const auto start = KernelParams::from_values(Eigen::Vector2d(1.0, 1.0), 0.5, 0.1);
    const GPModel m = GPModel::shared_params(1, 1, start).condition(data);
    FitOptions o;
    o.max_iters = 200;
    const auto r = fit_hyperparams(m, o, rng);
    for (int i = 0; i < 2; ++i) {
        EXPECT_GE(r.params[0].lengthscales()[i], 1.0);
        EXPECT_LE(r.params[0].lengthscales()[i], 4.0);
    }
}

TEST(SampleRollout, HorizonOneIsSingleDraw)
{
    Rng rng(2);
    const GPModel m = random_model(2, 1, 10, rng);
    const Eigen::Vector2d x0(0.5, -0.5);
    auto policy = [](const StateVector&) { return Eigen::VectorXd::Constant(1, 0.3); };
    Rng a(10), b(10);
    const auto traj = sample_rollout(m, x0, policy, 1, a);
    ASSERT_EQ(traj.size(), 1u);
    const auto belief = m.posterior(x0, policy(x0));
    const Eigen::VectorXd expect = belief.mean + (belief.variance.array().sqrt() * standard_normal(2, b).array()).matrix();
    EXPECT_EQ(traj[0].x_next, expect);
    EXPECT_EQ(traj[0].x, x0);
}

TEST(SampleRollout, DeterministicAndInputUntouched)
{
    Rng rng(3);
    const GPModel m = random_model(2, 1, 10, rng);
    auto policy = [](const StateVector& x) { return Eigen::VectorXd::Constant(1, -0.2 * x[0]); };
    Rng a(4), b(4);
    const auto t1 = sample_rollout(m, Eigen::Vector2d(0.1, 0.2), policy, 15, a);
    const auto t2 = sample_rollout(m, Eigen::Vector2d(0.1, 0.2), policy, 15, b);
    ASSERT_EQ(t1.size(), 15u);
    for (std::size_t k = 0; k < t1.size(); ++k) {
        EXPECT_EQ(t1[k].x_next, t2[k].x_next);
        EXPECT_EQ(t1[k].epoch, static_cast<long>(k));
        if (k > 0)
            EXPECT_EQ(t1[k].x, t1[k - 1].x_next);
    }
    EXPECT_EQ(m.size(), 10);
}

TEST(SampleRollout, NearExactModelFollowsMeanRollout)
{
    // dense data on x' = x + 0.1 sin x with u held at zero
    const auto p = KernelParams::from_values(Eigen::Vector2d(0.5, 1.0), 1.0, 1e-12);
    std::vector<TransitionTuple> data;
    for (int i = 0; i <= 15; ++i) {
        const double x = 2.0 * i / 15.0;
        data.push_back({Eigen::VectorXd::Constant(1, x), Eigen::VectorXd::Constant(1, 0.0), Eigen::VectorXd::Constant(1, x + 0.1 * std::sin(x)), 1, i});
    }
    const GPModel m = GPModel::shared_params(1, 1, p).condition(data);
    auto policy = [](const StateVector&) { return Eigen::VectorXd::Constant(1, 0.0); };
    Rng rng(6);
    const auto traj = sample_rollout(m, Eigen::VectorXd::Constant(1, 0.5), policy, 10, rng);
    Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 0.5);
    for (const auto& t : traj) {
        x = m.posterior_mean(x, Eigen::VectorXd::Constant(1, 0.0));
        EXPECT_NEAR(t.x_next[0], x[0], 1e-3);
    }
}

TEST(Checkpoint, BitExactRoundTrip)
{
    Rng rng(12);
    GPModel m = random_model(2, 1, 25, rng, true);
    const auto path = (std::filesystem::temp_directory_path() / "smtip_checkpoint_test.json").string();
    save_model(m, path);
    const GPModel r = load_model(path);
    std::filesystem::remove(path);
    EXPECT_EQ(r.params(), m.params());
    EXPECT_EQ(r.periodic_state(), m.periodic_state());
    ASSERT_EQ(r.size(), m.size());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        EXPECT_EQ(r.dataset()[i].x, m.dataset()[i].x);
        EXPECT_EQ(r.dataset()[i].u, m.dataset()[i].u);
        EXPECT_EQ(r.dataset()[i].x_next, m.dataset()[i].x_next);
        EXPECT_EQ(r.dataset()[i].epoch, m.dataset()[i].epoch);
    }
    EXPECT_EQ(model_to_json(r).dump(), model_to_json(m).dump());
    const auto a = m.posterior(Eigen::Vector2d(0.2, 0.1), Eigen::VectorXd::Constant(1, 0.3));
    const auto b = r.posterior(Eigen::Vector2d(0.2, 0.1), Eigen::VectorXd::Constant(1, 0.3));
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.variance, b.variance);
}

TEST(Checkpoint, RejectsUnknownVersion)
{
    Rng rng(1);
    auto j = model_to_json(random_model(1, 1, 3, rng));
    j["format_version"] = 99;
    EXPECT_THROW(model_from_json(j), std::invalid_argument);
}
