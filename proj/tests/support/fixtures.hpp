#pragma once

// Shared synthetic-data fixtures for the estimator/inference tests.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "indexfuse/estimator.hpp"
#include "indexfuse/model.hpp"
#include "indexfuse/rng.hpp"

namespace fixtures {

using namespace indexfuse;

struct Truth {
    std::function<double(double)> m;                    // on the raw index scale
    std::function<Eigen::VectorXd(double)> w;           // simplex weights over time
    Eigen::VectorXd beta;
    model::LinkFamily link = model::LinkFamily::logit;
    double noise_sd = 0.5;  // identity link
};

/// Longitudinal draws with times uniform on (0,2), standard normal z and x.
inline model::LongitudinalDataset generate(const Truth& truth, int n, int d_w, int d_beta,
                                           std::uint64_t seed, int visits = 3,
                                           bool exact_mean_response = false) {
    Rng rng(seed);
    model::LongitudinalDataset data;
    data.d_w = d_w;
    data.d_beta = d_beta;
    model::LinkFunction lf{truth.link};
    for (int i = 0; i < n; ++i) {
        model::Subject s;
        s.id = "s" + std::to_string(i + 1);
        s.times.resize(visits);
        for (int k = 0; k < visits; ++k) s.times[k] = rng.uniform(0.0, 2.0);
        std::sort(s.times.data(), s.times.data() + visits);
        s.z.resize(visits, d_w);
        s.x.resize(visits, d_beta);
        s.response.resize(visits);
        for (int k = 0; k < visits; ++k) {
            for (int j = 0; j < d_w; ++j) s.z(k, j) = rng.normal();
            for (int j = 0; j < d_beta; ++j) s.x(k, j) = rng.normal();
        }
        for (int k = 0; k < visits; ++k) {
            const double v = truth.w(s.times[k]).dot(s.z.row(k));
            double ell = truth.m(v);
            if (d_beta > 0) ell += truth.beta.dot(s.x.row(k));
            if (exact_mean_response) {
                s.response[k] = lf.h(ell);
            } else if (truth.link == model::LinkFamily::logit) {
                s.response[k] = rng.uniform() < lf.h(ell) ? 1.0 : 0.0;
            } else {
                s.response[k] = ell + rng.normal(0.0, truth.noise_sd);
            }
        }
        data.subjects.push_back(std::move(s));
    }
    return data;
}

/// Problem with unit variance weights (a deliberately plain working model).
inline estimator::Problem make_problem(const model::LongitudinalDataset& data,
                                       const splines::SplineBasis& basis,
                                       model::LinkFamily link,
                                       model::CovarianceStructure structure =
                                           model::CovarianceStructure::independence,
                                       double rho = 0.0, double kernel_bandwidth = 0.25) {
    estimator::Problem p;
    p.data = &data;
    p.basis = basis;
    p.link = model::LinkFunction{link};

    std::vector<Eigen::MatrixXd> w_const;
    for (const auto& s : data.subjects)
        w_const.push_back(Eigen::MatrixXd::Constant(s.visits(), data.d_w, 1.0 / data.d_w));
    p.standardizer = model::build_standardizer(data, w_const);

    p.kernel = kernels::KernelSpec{kernels::KernelFamily::gaussian, kernel_bandwidth};
    model::WorkingCovariance cov;
    cov.structure = structure;
    cov.rho = rho;
    std::vector<Eigen::VectorXd> vw;
    for (const auto& s : data.subjects) vw.push_back(Eigen::VectorXd::Ones(s.visits()));
    p.omega = estimator::build_omega_set(cov, data, vw);
    return p;
}

inline estimator::WeightFunctionEstimate constant_weights(const model::LongitudinalDataset& data,
                                                          const Eigen::VectorXd& w) {
    return estimator::WeightFunctionEstimate::constant(w, data.min_time(), data.max_time());
}

inline Eigen::VectorXd simplex2(double first) {
    Eigen::VectorXd w(2);
    w << first, 1.0 - first;
    return w;
}

}  // namespace fixtures
