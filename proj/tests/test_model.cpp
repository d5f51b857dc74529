#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "indexfuse/errors.hpp"
#include "indexfuse/model.hpp"
#include "indexfuse/rng.hpp"
#include "oracles.hpp"

using namespace indexfuse;
using model::LongitudinalDataset;
using model::Subject;

namespace {

LongitudinalDataset toy_dataset(int n, int m, int d_w, int d_beta, std::uint64_t seed) {
    Rng rng(seed);
    LongitudinalDataset data;
    data.d_w = d_w;
    data.d_beta = d_beta;
    for (int i = 0; i < n; ++i) {
        Subject s;
        s.id = "s" + std::to_string(i);
        s.times.resize(m);
        s.response.resize(m);
        s.z.resize(m, d_w);
        s.x.resize(m, d_beta);
        for (int k = 0; k < m; ++k) {
            s.times[k] = rng.uniform();
            s.response[k] = rng.normal();
            for (int j = 0; j < d_w; ++j) s.z(k, j) = rng.normal();
            for (int j = 0; j < d_beta; ++j) s.x(k, j) = rng.normal();
        }
        data.subjects.push_back(std::move(s));
    }
    return data;
}

}  // namespace

TEST_CASE("logit link derivative matches finite differences of H") {
    model::LinkFunction link{model::LinkFamily::logit};
    const double step = 1e-6;
    for (double u = -10.0; u <= 10.0; u += 0.37) {
        const double fd = (link.h(u + step) - link.h(u - step)) / (2 * step);
        CHECK(std::abs(link.theta(u) - fd) < 1e-8);
        const double fd2 = (link.theta(u + step) - link.theta(u - step)) / (2 * step);
        CHECK(std::abs(link.theta_prime(u) - fd2) < 1e-6);
        CHECK(link.theta(u) > 0.0);
    }
    model::LinkFunction ident{model::LinkFamily::identity};
    CHECK(ident.h(1.7) == 1.7);
    CHECK(ident.theta(-3.0) == 1.0);
    CHECK(ident.theta_prime(0.4) == 0.0);
}

TEST_CASE("exchangeable working covariance is positive definite in range") {
    model::WorkingCovariance cov;
    cov.structure = model::CovarianceStructure::exchangeable;
    for (double rho : {-0.2, 0.0, 0.3, 0.9}) {
        cov.rho = rho;
        for (int m : {1, 2, 5}) {
            if (m > 1 && rho < -1.0 / (m - 1)) continue;
            Eigen::VectorXd vw = Eigen::VectorXd::LinSpaced(m, 0.5, 2.0);
            const Eigen::MatrixXd omega = cov.build(vw);
            Eigen::LLT<Eigen::MatrixXd> llt(omega);
            CHECK(llt.info() == Eigen::Success);
        }
    }
}

TEST_CASE("independence covariance is the variance-weight diagonal") {
    model::WorkingCovariance cov;  // defaults to independence
    Eigen::VectorXd vw(3);
    vw << 0.25, 1.0, 2.0;
    const Eigen::MatrixXd omega = cov.build(vw);
    CHECK((omega - Eigen::MatrixXd(vw.asDiagonal())).norm() < 1e-14);
}

TEST_CASE("rho estimation by within-subject cross products") {
    SUBCASE("independent residuals give rho near zero") {
        const int n = 2000, m = 3;
        LongitudinalDataset data = toy_dataset(n, m, 2, 1, 42);
        Rng rng(77);
        std::vector<Eigen::VectorXd> resid;
        for (int i = 0; i < n; ++i) {
            Eigen::VectorXd e(m);
            for (int k = 0; k < m; ++k) e[k] = rng.normal();
            resid.push_back(e);
        }
        const model::WorkingCovariance cov = model::build_working_covariance(
            model::CovarianceStructure::exchangeable, data, resid);
        CHECK(std::abs(cov.rho) < 0.05);
        CHECK_FALSE(cov.fell_back_to_independence);
    }

    SUBCASE("shared subject shift recovers the intraclass correlation") {
        const int n = 2000, m = 3;
        LongitudinalDataset data = toy_dataset(n, m, 2, 1, 43);
        const double sb = 0.6, se = 0.8;
        const double icc = sb * sb / (sb * sb + se * se);
        Rng rng(78);
        std::vector<Eigen::VectorXd> resid;
        for (int i = 0; i < n; ++i) {
            const double b = rng.normal(0.0, sb);
            Eigen::VectorXd e(m);
            for (int k = 0; k < m; ++k)
                e[k] = (b + rng.normal(0.0, se)) / std::sqrt(sb * sb + se * se);
            resid.push_back(e);
        }
        const model::WorkingCovariance cov = model::build_working_covariance(
            model::CovarianceStructure::exchangeable, data, resid);
        CHECK(std::abs(cov.rho - icc) < 0.05);
    }

    SUBCASE("no pairs falls back to independence with a flag") {
        LongitudinalDataset data = toy_dataset(5, 1, 2, 1, 44);
        std::vector<Eigen::VectorXd> resid(5, Eigen::VectorXd::Zero(1));
        const model::WorkingCovariance cov = model::build_working_covariance(
            model::CovarianceStructure::exchangeable, data, resid);
        CHECK(cov.fell_back_to_independence);
        CHECK((cov.correlation(1) - Eigen::MatrixXd::Identity(1, 1)).norm() == 0.0);
    }
}

TEST_CASE("standardizer maps a normal index to near-uniform values") {
    const int n = 1000, m = 5;  // 5000 visits
    Rng rng(11);
    LongitudinalDataset data;
    data.d_w = 1;
    data.d_beta = 0;
    std::vector<Eigen::MatrixXd> w0;
    for (int i = 0; i < n; ++i) {
        Subject s;
        s.id = "s" + std::to_string(i);
        s.times = Eigen::VectorXd::LinSpaced(m, 0.0, 1.0);
        s.response = Eigen::VectorXd::Zero(m);
        s.z.resize(m, 1);
        for (int k = 0; k < m; ++k) s.z(k, 0) = rng.normal();
        s.x.resize(m, 0);
        data.subjects.push_back(std::move(s));
        w0.push_back(Eigen::MatrixXd::Ones(m, 1));
    }
    const model::Standardizer st = model::build_standardizer(data, w0);
    std::vector<double> u;
    for (const auto& s : data.subjects)
        for (int k = 0; k < s.visits(); ++k) {
            const double v = st.transform(s.z(k, 0));
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            u.push_back(v);
        }
    CHECK(oracle::ks_uniform(u) < 0.05);

    SUBCASE("index at mu maps to one half") {
        CHECK(st.transform(st.mu) == doctest::Approx(0.5).epsilon(1e-14));
    }

    SUBCASE("affine covariate change with matching weights is invariant") {
        // scale z by c and weights by 1/c: same index, same standardizer output
        const double c = 4.0;
        LongitudinalDataset scaled = data;
        for (auto& s : scaled.subjects) s.z *= c;
        std::vector<Eigen::MatrixXd> w_scaled;
        for (int i = 0; i < n; ++i) w_scaled.push_back(Eigen::MatrixXd::Constant(m, 1, 1.0 / c));
        const model::Standardizer st2 = model::build_standardizer(scaled, w_scaled);
        for (int i = 0; i < 20; ++i) {
            const double v = data.subjects[i].z(0, 0);
            CHECK(st2.transform((1.0 / c) * (c * v)) ==
                  doctest::Approx(st.transform(v)).epsilon(1e-12));
        }
    }

    SUBCASE("degenerate index errors") {
        LongitudinalDataset flat = data;
        for (auto& s : flat.subjects) s.z.setConstant(2.0);
        CHECK_THROWS_AS(model::build_standardizer(flat, w0), DegenerateIndex);
    }
}

TEST_CASE("weight constraint projection") {
    Eigen::VectorXd w(2);
    w << 2.0, 2.0;
    auto r = model::enforce_weight_constraint(w);
    CHECK(r.weights[0] == doctest::Approx(0.5));
    CHECK(r.weights[1] == doctest::Approx(0.5));
    CHECK(r.all_positive);

    Eigen::VectorXd already(2);
    already << 0.3, 0.7;
    const auto r2 = model::enforce_weight_constraint(already);
    CHECK((r2.weights - already).norm() < 1e-15);

    Eigen::VectorXd four(4);
    four << 1.0, 2.0, 3.0, 4.0;
    const auto r3 = model::enforce_weight_constraint(four);
    Eigen::VectorXd expected(4);
    expected << 0.1, 0.2, 0.3, 0.4;
    CHECK((r3.weights - expected).lpNorm<Eigen::Infinity>() < 1e-15);

    Eigen::VectorXd with_neg(2);
    with_neg << -0.5, 1.5;
    CHECK_FALSE(model::enforce_weight_constraint(with_neg).all_positive);

    CHECK_THROWS_AS(model::enforce_weight_constraint(Eigen::VectorXd::Zero(3)),
                    InvalidArgument);
}

TEST_CASE("dataset validation") {
    LongitudinalDataset data = toy_dataset(3, 2, 2, 1, 1);
    CHECK_NOTHROW(data.validate());
    LongitudinalDataset bad = data;
    bad.subjects[1].z.resize(2, 3);
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    LongitudinalDataset empty;
    empty.d_w = 1;
    CHECK_THROWS_AS(empty.validate(), InvalidArgument);
}
