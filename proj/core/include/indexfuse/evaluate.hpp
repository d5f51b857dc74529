#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "indexfuse/estimator.hpp"

namespace indexfuse::evaluate {

enum class ReducedVariant { linear_m, invariant_w };

/// Reduced comparison models: linear index function with a kernel-estimated
/// time-varying weight, or a spline index function with one time-invariant
/// weight vector.
struct ReducedModelFit {
    ReducedVariant variant = ReducedVariant::linear_m;
    double alpha_c = 0.0;  // linear_m intercept
    double alpha1 = 0.0;   // linear_m slope (on the raw index scale)
    Eigen::VectorXd beta;
    Eigen::VectorXd lambda;
    estimator::WeightFunctionEstimate weights;
    splines::SplineBasis basis;
    model::LinkFamily link = model::LinkFamily::logit;
    bool affine_transform = false;
    double tfm_a = 0.0;  // mu (normal) or lo (affine)
    double tfm_b = 1.0;  // sigma (normal) or span (affine)
    estimator::FitDiagnostics diagnostics;

    double predict_mean(const Eigen::VectorXd& z, const Eigen::VectorXd& x, double t) const;
};

ReducedModelFit fit_linear_m(const model::LongitudinalDataset& dataset,
                             const estimator::FitConfig& config);

ReducedModelFit fit_invariant_w(const model::LongitudinalDataset& dataset,
                                const estimator::FitConfig& config);

enum class ComparedModel { full, linear_m, invariant_w };
std::string model_name(ComparedModel m);

struct PredictiveErrorCurve {
    std::string model;
    Eigen::VectorXd bin_centers;
    Eigen::VectorXd mspe;  // NaN marks a bin with no test visits
    Eigen::VectorXd lo;    // empirical 2.5% across repeats
    Eigen::VectorXd hi;    // empirical 97.5% across repeats
    double auc = 0.0;      // trapezoid over non-missing bins of the mean curve
};

struct CrossValidationResult {
    std::vector<PredictiveErrorCurve> curves;  // one per requested model
    Eigen::VectorXd bin_edges;
    int folds = 0;
    int repeats = 0;
};

struct CrossValidationOptions {
    int folds = 5;
    int repeats = 50;
    std::uint64_t seed = 1;
    int bins = 20;
    int min_bin_count = 10;  // thinner bins are merged with a neighbor up front
    int threads = 1;
};

/// Subject-level k-fold cross validation of the squared prediction error,
/// binned by the standardized averaged score mean(z). Fold membership is keyed
/// by a hash of the subject id, so subject order cannot change the result.
CrossValidationResult cross_validate(const model::LongitudinalDataset& dataset,
                                     const std::vector<ComparedModel>& models,
                                     const estimator::FitConfig& fit_config,
                                     const CrossValidationOptions& options = {});

// building blocks, exposed for direct checking
std::vector<int> fold_assignment(const model::LongitudinalDataset& dataset, int folds,
                                 std::uint64_t seed, int repeat);
Eigen::VectorXd bin_means(const std::vector<double>& scores, const std::vector<double>& values,
                          const Eigen::VectorXd& edges);
double trapezoid_auc(const Eigen::VectorXd& centers, const Eigen::VectorXd& values);

}  // namespace indexfuse::evaluate
