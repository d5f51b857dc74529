#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "indexfuse/errors.hpp"
#include "indexfuse/estimator.hpp"
#include "indexfuse/model.hpp"
#include "indexfuse/rng.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace indexfuse;
using estimator::SolveOptions;
using estimator::WeightFunctionEstimate;

namespace {

double index_u(const estimator::Problem& p, const Eigen::VectorXd& w,
               const Eigen::RowVectorXd& z) {
    return estimator::clamp_unit(p.standardizer.transform(w.dot(z)));
}

}  // namespace

TEST_CASE("step 1 equals closed-form WLS under identity link and independence") {
    fixtures::Truth truth;
    truth.link = model::LinkFamily::identity;
    truth.beta = Eigen::VectorXd(2);
    truth.beta << 0.5, -0.3;
    truth.m = [](double v) { return 0.4 + 0.9 * v; };
    truth.w = [](double) { return fixtures::simplex2(0.3); };
    const auto data = fixtures::generate(truth, 120, 2, 2, 21);
    const auto basis = splines::build_basis(3, 4, 0.0, 1.0);
    const auto problem = fixtures::make_problem(data, basis, model::LinkFamily::identity);
    const auto weights = fixtures::constant_weights(data, fixtures::simplex2(0.3));

    Eigen::VectorXd beta(2);
    beta << 0.1, 0.2;
    const Eigen::VectorXd lambda =
        estimator::step1_solve_lambda(problem, beta, weights, SolveOptions{1e-10, 100});

    // closed-form oracle: plain least squares of (D - beta'x) on the basis rows
    std::vector<Eigen::RowVectorXd> rows;
    std::vector<double> ys;
    for (const auto& s : data.subjects)
        for (int k = 0; k < s.visits(); ++k) {
            const double u = index_u(problem, fixtures::simplex2(0.3), s.z.row(k));
            rows.push_back(splines::eval_basis(basis, u).transpose());
            ys.push_back(s.response[k] - beta.dot(s.x.row(k)));
        }
    Eigen::MatrixXd design(rows.size(), basis.dim());
    Eigen::VectorXd y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        design.row(i) = rows[i];
        y[i] = ys[i];
    }
    const Eigen::VectorXd wls = oracle::wls(design, y, Eigen::VectorXd::Ones(y.size()));
    CHECK((lambda - wls).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("step 1 recovers the truth exactly on zero-residual logit data") {
    const auto basis = splines::build_basis(3, 3, 0.0, 1.0);
    Eigen::VectorXd lambda_star(basis.dim());
    for (int j = 0; j < basis.dim(); ++j) lambda_star[j] = 0.3 - 1.1 * basis.greville(j);
    Eigen::VectorXd beta_star(1);
    beta_star << 0.4;

    // build data whose responses equal H at the exact spline predictor
    fixtures::Truth truth;
    truth.link = model::LinkFamily::logit;
    truth.beta = beta_star;
    truth.w = [](double) { return fixtures::simplex2(0.4); };
    truth.m = [](double) { return 0.0; };  // replaced below
    auto data = fixtures::generate(truth, 90, 2, 1, 5);
    {
        estimator::Problem tmp = fixtures::make_problem(data, basis, model::LinkFamily::logit);
        model::LinkFunction lf{model::LinkFamily::logit};
        for (auto& s : data.subjects)
            for (int k = 0; k < s.visits(); ++k) {
                const double u = index_u(tmp, fixtures::simplex2(0.4), s.z.row(k));
                s.response[k] = lf.h(splines::eval_basis(basis, u).dot(lambda_star) +
                                     beta_star.dot(s.x.row(k)));
            }
    }
    const auto problem = fixtures::make_problem(data, basis, model::LinkFamily::logit);
    const auto weights = fixtures::constant_weights(data, fixtures::simplex2(0.4));
    const Eigen::VectorXd lambda =
        estimator::step1_solve_lambda(problem, beta_star, weights, SolveOptions{1e-10, 200});
    CHECK((lambda - lambda_star).lpNorm<Eigen::Infinity>() < 1e-5);

    SUBCASE("duplicating every subject leaves the solution unchanged") {
        model::LongitudinalDataset doubled = data;
        for (const auto& s : data.subjects) {
            model::Subject copy = s;
            copy.id = s.id + "_copy";
            doubled.subjects.push_back(copy);
        }
        const auto problem2 = fixtures::make_problem(doubled, basis, model::LinkFamily::logit);
        const auto weights2 = fixtures::constant_weights(doubled, fixtures::simplex2(0.4));
        const Eigen::VectorXd lambda2 = estimator::step1_solve_lambda(
            problem2, beta_star, weights2, SolveOptions{1e-10, 200});
        CHECK((lambda2 - lambda).lpNorm<Eigen::Infinity>() < 1e-10);
    }
}

TEST_CASE("step 1 names empty basis columns") {
    fixtures::Truth truth;
    truth.link = model::LinkFamily::identity;
    truth.beta = Eigen::VectorXd();
    truth.m = [](double v) { return v; };
    truth.w = [](double) { return fixtures::simplex2(0.5); };
    const auto data = fixtures::generate(truth, 12, 2, 0, 31);
    // far too many knots for 36 visits: some spans hold no data
    const auto basis = splines::build_basis(3, 60, 0.0, 1.0);
    const auto problem = fixtures::make_problem(data, basis, model::LinkFamily::identity);
    const auto weights = fixtures::constant_weights(data, fixtures::simplex2(0.5));
    CHECK_THROWS_AS(
        estimator::step1_solve_lambda(problem, Eigen::VectorXd(), weights, SolveOptions{}),
        RankDeficiency);
}

TEST_CASE("step 2 with one index covariate returns exactly one") {
    fixtures::Truth truth;
    truth.link = model::LinkFamily::logit;
    truth.beta = Eigen::VectorXd();
    truth.m = [](double v) { return 0.5 * v; };
    truth.w = [](double) { return Eigen::VectorXd::Ones(1); };
    const auto data = fixtures::generate(truth, 60, 1, 0, 77);
    const auto basis = splines::build_basis(3, 2, 0.0, 1.0);
    const auto problem = fixtures::make_problem(data, basis, model::LinkFamily::logit);
    const auto weights = fixtures::constant_weights(data, Eigen::VectorXd::Ones(1));
    const Eigen::VectorXd lambda =
        estimator::step1_solve_lambda(problem, Eigen::VectorXd(), weights);
    const auto r = estimator::step2_solve_w_at(problem, Eigen::VectorXd(), lambda, weights,
                                               1.0, Eigen::VectorXd::Ones(1));
    REQUIRE(r.w.size() == 1);
    CHECK(r.w[0] == 1.0);
}

TEST_CASE("step 2 solutions sit on the simplex and track a constant truth") {
    fixtures::Truth truth;
    truth.link = model::LinkFamily::identity;
    truth.noise_sd = 0.4;
    truth.beta = Eigen::VectorXd();
    truth.m = [](double v) { return 0.5 + 0.8 * v; };
    truth.w = [](double) { return fixtures::simplex2(0.3); };
    const auto data = fixtures::generate(truth, 500, 2, 0, 99);
    const auto basis = splines::build_basis(3, 5, 0.0, 1.0);
    const auto problem = fixtures::make_problem(data, basis, model::LinkFamily::identity,
                                                model::CovarianceStructure::independence, 0.0,
                                                0.35);
    auto warm = fixtures::constant_weights(data, fixtures::simplex2(0.5));
    const Eigen::VectorXd lambda =
        estimator::step1_solve_lambda(problem, Eigen::VectorXd(), warm);

    Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(9, 0.25, 1.75);
    const WeightFunctionEstimate est = estimator::step2_solve_w(
        problem, Eigen::VectorXd(), lambda, warm, grid, SolveOptions{}, false, 1);
    double worst = 0.0;
    for (const auto& w : est.values) {
        CHECK(std::abs(w.sum() - 1.0) < 1e-12);
        worst = std::max(worst, (w - fixtures::simplex2(0.3)).lpNorm<Eigen::Infinity>());
    }
    CHECK(worst < 0.1);

    SUBCASE("grid points are independent of scheduling") {
        const WeightFunctionEstimate par = estimator::step2_solve_w(
            problem, Eigen::VectorXd(), lambda, warm, grid, SolveOptions{}, false, 4);
        for (int g = 0; g < grid.size(); ++g)
            CHECK((par.values[g] - est.values[g]).lpNorm<Eigen::Infinity>() == 0.0);
    }

    SUBCASE("single-point grid reduces to the pointwise solver") {
        Eigen::VectorXd one(1);
        one << 1.0;
        const WeightFunctionEstimate single = estimator::step2_solve_w(
            problem, Eigen::VectorXd(), lambda, warm, one, SolveOptions{}, false, 1);
        const auto at = estimator::step2_solve_w_at(problem, Eigen::VectorXd(), lambda, warm,
                                                    1.0, warm.at(1.0));
        CHECK((single.values[0] - at.w).lpNorm<Eigen::Infinity>() == 0.0);
    }

    SUBCASE("insufficient kernel mass raises") {
        CHECK_THROWS_AS(estimator::step2_solve_w_at(problem, Eigen::VectorXd(), lambda, warm,
                                                    25.0, warm.at(25.0)),
                        InsufficientLocalData);
    }
}

TEST_CASE("step 3 equals an independent IRLS fit when m and w are pinned") {
    const auto basis = splines::build_basis(3, 3, 0.0, 1.0);
    Eigen::VectorXd lambda_star(basis.dim());
    for (int j = 0; j < basis.dim(); ++j) {
        const double g = basis.greville(j);
        lambda_star[j] = -0.2 + 1.3 * g - 0.9 * g * g;
    }
    Eigen::VectorXd beta_star(2);
    beta_star << 0.6, -0.4;

    fixtures::Truth truth;
    truth.link = model::LinkFamily::logit;
    truth.beta = beta_star;
    truth.w = [](double) { return fixtures::simplex2(0.35); };
    truth.m = [](double) { return 0.0; };  // responses rebuilt below
    auto data = fixtures::generate(truth, 150, 2, 2, 13);
    {
        estimator::Problem tmp = fixtures::make_problem(data, basis, model::LinkFamily::logit);
        Rng rng(14);
        model::LinkFunction lf{model::LinkFamily::logit};
        for (auto& s : data.subjects)
            for (int k = 0; k < s.visits(); ++k) {
                const double u = index_u(tmp, fixtures::simplex2(0.35), s.z.row(k));
                const double ell = splines::eval_basis(basis, u).dot(lambda_star) +
                                   beta_star.dot(s.x.row(k));
                s.response[k] = rng.uniform() < lf.h(ell) ? 1.0 : 0.0;
            }
    }
    const auto problem = fixtures::make_problem(data, basis, model::LinkFamily::logit);
    const auto weights = fixtures::constant_weights(data, fixtures::simplex2(0.35));

    estimator::Step3Options opts;
    opts.solve = SolveOptions{1e-10, 100};
    opts.fixed_weights = weights;
    opts.fixed_lambda = lambda_star;
    const auto result = estimator::step3_solve_beta(problem, Eigen::VectorXd::Zero(2),
                                                    lambda_star, weights, opts);

    // oracle: logistic IRLS on x with the known index function as offset
    std::vector<Eigen::RowVectorXd> xr;
    std::vector<double> yv, ov;
    for (const auto& s : data.subjects)
        for (int k = 0; k < s.visits(); ++k) {
            const double u = index_u(problem, fixtures::simplex2(0.35), s.z.row(k));
            xr.push_back(s.x.row(k));
            yv.push_back(s.response[k]);
            ov.push_back(splines::eval_basis(basis, u).dot(lambda_star));
        }
    Eigen::MatrixXd x(xr.size(), 2);
    Eigen::VectorXd y(xr.size()), off(xr.size());
    for (std::size_t i = 0; i < xr.size(); ++i) {
        x.row(i) = xr[i];
        y[i] = yv[i];
        off[i] = ov[i];
    }
    const Eigen::VectorXd irls = oracle::irls_logit_offset(x, y, off);
    CHECK((result.beta - irls).lpNorm<Eigen::Infinity>() < 1e-6);

    SUBCASE("re-solving from the returned root is a fixed point") {
        const auto again =
            estimator::step3_solve_beta(problem, result.beta, lambda_star, weights, opts);
        CHECK((again.beta - result.beta).lpNorm<Eigen::Infinity>() < 1e-8);
    }
}

TEST_CASE("implicit sensitivity blocks match finite differences (n=50, d_w=2)") {
    fixtures::Truth truth;
    truth.link = model::LinkFamily::logit;
    truth.beta = Eigen::VectorXd(2);
    truth.beta << 0.5, -0.6;
    truth.m = [](double v) { return 0.3 + std::sin(0.8 * v); };
    truth.w = [](double) { return fixtures::simplex2(0.45); };  // constant truth
    const auto data = fixtures::generate(truth, 50, 2, 2, 2024);
    const auto basis = splines::build_basis(3, 2, 0.0, 1.0);
    const auto problem = fixtures::make_problem(data, basis, model::LinkFamily::logit,
                                                model::CovarianceStructure::independence, 0.0,
                                                0.45);
    const Eigen::VectorXd w_const = fixtures::simplex2(0.45);
    const auto weights = fixtures::constant_weights(data, w_const);
    Eigen::VectorXd beta(2);
    beta << 0.4, -0.5;
    const SolveOptions tight{1e-12, 300};
    const Eigen::VectorXd lambda = estimator::step1_solve_lambda(problem, beta, weights, tight);

    SUBCASE("d lambda / d beta at fixed weights") {
        const Eigen::MatrixXd jlb =
            estimator::lambda_beta_sensitivity(problem, beta, weights, lambda);
        for (int j = 0; j < 2; ++j) {
            const double eps = 1e-4;
            Eigen::VectorXd bp = beta, bm = beta;
            bp[j] += eps;
            bm[j] -= eps;
            const Eigen::VectorXd lp = estimator::step1_solve_lambda(problem, bp, weights, tight);
            const Eigen::VectorXd lm = estimator::step1_solve_lambda(problem, bm, weights, tight);
            const Eigen::VectorXd fd = (lp - lm) / (2 * eps);
            CHECK((jlb.col(j) - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-3);
        }
    }

    SUBCASE("d lambda / d w shift") {
        const Eigen::MatrixXd jlw =
            estimator::lambda_shift_sensitivity(problem, beta, weights, lambda);
        // a renormalized perturbation of a constant weight moves w in the
        // direction e_j - w, so the check compares against jlw (e_j - w)
        for (int j = 0; j < 2; ++j) {
            const double eps = 1e-5;
            Eigen::VectorXd wp = w_const, wm = w_const;
            wp[j] += eps;
            wm[j] -= eps;
            const auto weights_p = fixtures::constant_weights(data, wp / wp.sum());
            const auto weights_m = fixtures::constant_weights(data, wm / wm.sum());
            const Eigen::VectorXd lp =
                estimator::step1_solve_lambda(problem, beta, weights_p, tight);
            const Eigen::VectorXd lm =
                estimator::step1_solve_lambda(problem, beta, weights_m, tight);
            // the renormalization scales the direction by 1/(1+eps); use the
            // exact difference of the two perturbed weight vectors
            const Eigen::VectorXd dir = (wp / wp.sum() - wm / wm.sum()) / (2 * eps);
            const Eigen::VectorXd fd = (lp - lm) / (2 * eps);
            const Eigen::VectorXd want = jlw * dir;
            CHECK((want - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-3);
        }
    }

    SUBCASE("d w-hat / d beta at a grid point") {
        const double t0 = 1.0;
        const auto point = estimator::step2_solve_w_at(problem, beta, lambda, weights, t0,
                                                       w_const, tight, true);
        for (int j = 0; j < 2; ++j) {
            const double eps = 1e-4;
            Eigen::VectorXd bp = beta, bm = beta;
            bp[j] += eps;
            bm[j] -= eps;
            const Eigen::VectorXd lp = estimator::step1_solve_lambda(problem, bp, weights, tight);
            const Eigen::VectorXd lm = estimator::step1_solve_lambda(problem, bm, weights, tight);
            const auto rp =
                estimator::step2_solve_w_at(problem, bp, lp, weights, t0, point.w, tight);
            const auto rm =
                estimator::step2_solve_w_at(problem, bm, lm, weights, t0, point.w, tight);
            const Eigen::VectorXd fd = (rp.w - rm.w) / (2 * eps);
            CHECK((point.dw_dbeta.col(j) - fd).norm() / std::max(fd.norm(), 1e-9) < 1e-3);
        }
    }

    SUBCASE("total d lambda / d beta through the weight grid") {
        Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(7, 0.3, 1.7);
        const WeightFunctionEstimate solved =
            estimator::step2_solve_w(problem, beta, lambda, weights, grid, tight, true, 1);
        const Eigen::VectorXd lambda_at =
            estimator::step1_solve_lambda(problem, beta, solved, tight);
        const Eigen::MatrixXd total =
            estimator::lambda_total_beta_sensitivity(problem, beta, solved, lambda_at);
        for (int j = 0; j < 2; ++j) {
            const double eps = 1e-4;
            Eigen::VectorXd bp = beta, bm = beta;
            bp[j] += eps;
            bm[j] -= eps;
            const auto wp = estimator::step2_solve_w(
                problem, bp, estimator::step1_solve_lambda(problem, bp, solved, tight), solved,
                grid, tight, false, 1);
            const auto wm = estimator::step2_solve_w(
                problem, bm, estimator::step1_solve_lambda(problem, bm, solved, tight), solved,
                grid, tight, false, 1);
            const Eigen::VectorXd lp = estimator::step1_solve_lambda(problem, bp, wp, tight);
            const Eigen::VectorXd lm = estimator::step1_solve_lambda(problem, bm, wm, tight);
            const Eigen::VectorXd fd = (lp - lm) / (2 * eps);
            CHECK((total.col(j) - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-3);
        }
    }
}

TEST_CASE("full fit: smoke, simplex invariant, null effect, permutation invariance") {
    fixtures::Truth truth;
    truth.link = model::LinkFamily::identity;
    truth.noise_sd = 0.5;
    truth.beta = Eigen::VectorXd(2);
    truth.beta << 0.0, 0.0;  // null effect
    truth.m = [](double v) { return 0.4 + 0.7 * v; };
    truth.w = [](double t) { return fixtures::simplex2(0.3 + 0.05 * t); };
    const auto data = fixtures::generate(truth, 300, 2, 2, 314, 3);

    estimator::FitConfig cfg;
    cfg.link = model::LinkFamily::identity;
    cfg.interior_knots = 4;
    cfg.time_grid_size = 12;
    cfg.covariance = model::CovarianceStructure::independence;
    const estimator::ModelFit fit = estimator::fit(data, cfg);
    CHECK(fit.diagnostics.converged);
    for (const auto& w : fit.weights.values) CHECK(std::abs(w.sum() - 1.0) < 1e-9);
    REQUIRE(fit.beta_se.size() == 2);
    for (int j = 0; j < 2; ++j) CHECK(std::abs(fit.beta[j]) < 3.0 * fit.beta_se[j]);

    SUBCASE("subject order does not change the estimates") {
        model::LongitudinalDataset shuffled = data;
        std::reverse(shuffled.subjects.begin(), shuffled.subjects.end());
        const estimator::ModelFit fit2 = estimator::fit(shuffled, cfg);
        CHECK((fit2.beta - fit.beta).lpNorm<Eigen::Infinity>() < 1e-10);
        CHECK((fit2.lambda - fit.lambda).lpNorm<Eigen::Infinity>() < 1e-8);
        for (std::size_t g = 0; g < fit.weights.values.size(); ++g)
            CHECK((fit2.weights.values[g] - fit.weights.values[g]).lpNorm<Eigen::Infinity>() <
                  1e-10);
    }
}
