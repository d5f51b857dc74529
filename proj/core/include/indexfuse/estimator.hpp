#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

#include "indexfuse/kernels.hpp"
#include "indexfuse/model.hpp"
#include "indexfuse/splines.hpp"

namespace indexfuse::estimator {

struct FitConfig {
    model::LinkFamily link = model::LinkFamily::logit;
    int spline_order = 3;
    std::optional<int> interior_knots;  // default: knot_count_rule(n)
    kernels::KernelFamily kernel_family = kernels::KernelFamily::gaussian;
    std::optional<double> bandwidth;  // default: undersmoothed Silverman on visit times
    double bandwidth_scale = 1.0;
    model::CovarianceStructure covariance = model::CovarianceStructure::exchangeable;
    int time_grid_size = 50;
    double inner_tol = 1e-8;
    int max_inner_iterations = 100;
    double outer_tol = 1e-6;
    int max_outer_iterations = 50;
    std::uint64_t seed = 0;
    int threads = 1;
    bool compute_beta_se = true;

    void validate() const;
};

/// Kernel estimate of the weight function on a time grid. Values sit on the
/// l1 simplex; between grid points the estimate is linear interpolation
/// followed by renormalization, clamped to the end values outside the grid.
struct WeightFunctionEstimate {
    Eigen::VectorXd grid;
    std::vector<Eigen::VectorXd> values;
    std::vector<Eigen::MatrixXd> beta_sensitivity;  // d_w x d_beta per grid point; may be empty

    int d_w() const { return values.empty() ? 0 : static_cast<int>(values.front().size()); }
    Eigen::VectorXd at(double t) const;
    Eigen::MatrixXd beta_sensitivity_at(double t) const;
    static WeightFunctionEstimate constant(const Eigen::VectorXd& w, double t_lo, double t_hi);
    void validate() const;
};

/// Working covariance matrices frozen per subject.
struct OmegaSet {
    model::WorkingCovariance spec;
    std::vector<Eigen::MatrixXd> omega;
    std::vector<Eigen::MatrixXd> omega_inv;
};

OmegaSet build_omega_set(const model::WorkingCovariance& spec,
                         const model::LongitudinalDataset& dataset,
                         const std::vector<Eigen::VectorXd>& variance_weights);

/// Immutable problem description shared by the three profiling steps.
struct Problem {
    const model::LongitudinalDataset* data = nullptr;
    splines::SplineBasis basis;
    model::LinkFunction link;
    model::Standardizer standardizer;
    kernels::KernelSpec kernel;
    OmegaSet omega;
};

struct SolveOptions {
    double tol = 1e-8;
    int max_iterations = 100;
};

/// Step 1: spline coefficients solving the GEE-type equation
/// sum_i Qtilde_i' Theta_i Omega_i^{-1} (D_i - H_i) = 0 by damped Newton with
/// the analytic Gauss-Newton matrix.
Eigen::VectorXd step1_solve_lambda(const Problem& problem, const Eigen::VectorXd& beta,
                                   const WeightFunctionEstimate& weights,
                                   const SolveOptions& opts = {});

/// d lambda / d beta at fixed weights (implicit differentiation of step 1).
Eigen::MatrixXd lambda_beta_sensitivity(const Problem& problem, const Eigen::VectorXd& beta,
                                        const WeightFunctionEstimate& weights,
                                        const Eigen::VectorXd& lambda);

/// d lambda / d(uniform shift of w) (implicit differentiation of step 1);
/// the profiling correction entering the step-2 score.
Eigen::MatrixXd lambda_shift_sensitivity(const Problem& problem, const Eigen::VectorXd& beta,
                                         const WeightFunctionEstimate& weights,
                                         const Eigen::VectorXd& lambda);

/// Total d lambda / d beta including the weight grid's response, taken from
/// the beta_sensitivity stored in `weights`.
Eigen::MatrixXd lambda_total_beta_sensitivity(const Problem& problem,
                                              const Eigen::VectorXd& beta,
                                              const WeightFunctionEstimate& weights,
                                              const Eigen::VectorXd& lambda);

struct Step2Result {
    Eigen::VectorXd w;             // on the simplex exactly
    Eigen::MatrixXd dw_dbeta;      // d_w x d_beta; empty unless requested
    double kernel_mass = 0.0;      // sum_ik K_h(T_ik - t0)
    bool all_positive = true;
    int iterations = 0;
    double final_norm = 0.0;
};

/// Step 2 at a single time point: kernel-local estimating equation in the
/// reduced coordinates (w_1..w_{d_w-1}) plus the constraint row sum w - 1 = 0.
Step2Result step2_solve_w_at(const Problem& problem, const Eigen::VectorXd& beta,
                             const Eigen::VectorXd& lambda,
                             const WeightFunctionEstimate& current_weights, double t0,
                             const Eigen::VectorXd& warm_start, const SolveOptions& opts = {},
                             bool want_beta_sensitivity = false);

/// Step 2 over a grid; points are solved independently (parallelizable) and
/// warm-started from `warm` evaluated at each grid point.
WeightFunctionEstimate step2_solve_w(const Problem& problem, const Eigen::VectorXd& beta,
                                     const Eigen::VectorXd& lambda,
                                     const WeightFunctionEstimate& warm,
                                     const Eigen::VectorXd& grid, const SolveOptions& opts = {},
                                     bool want_beta_sensitivity = false, int threads = 1);

struct Step3Options {
    SolveOptions solve;
    /// When set, the weight function is held fixed (no step-2 re-profiling).
    std::optional<WeightFunctionEstimate> fixed_weights;
    /// When set, the spline coefficients are held fixed (no step-1 re-profiling).
    std::optional<Eigen::VectorXd> fixed_lambda;
    int threads = 1;
};

struct Step3Result {
    Eigen::VectorXd beta;
    Eigen::VectorXd lambda;
    WeightFunctionEstimate weights;
    double norm = 0.0;
    int iterations = 0;
};

/// Step 3: solves the profiled equation for beta by damped Newton with a
/// finite-difference outer Jacobian; every score evaluation re-profiles
/// lambda and the weight grid unless they are pinned via options.
Step3Result step3_solve_beta(const Problem& problem, const Eigen::VectorXd& beta_init,
                             const Eigen::VectorXd& lambda_init,
                             const WeightFunctionEstimate& weights_init,
                             const Step3Options& opts = {});

struct FitDiagnostics {
    int outer_iterations = 0;
    double step1_norm = 0.0;
    double step2_norm = 0.0;
    double step3_norm = 0.0;
    int nonneg_warnings = 0;  // grid points whose solution has a nonpositive entry
    bool converged = false;
    int interior_knots = 0;
    double bandwidth = 0.0;
    int step3_iterations = 0;
};

struct ModelFit {
    Eigen::VectorXd beta;
    Eigen::VectorXd lambda;
    WeightFunctionEstimate weights;
    model::Standardizer standardizer;
    splines::SplineBasis basis;
    model::LinkFamily link = model::LinkFamily::identity;
    model::CovarianceStructure covariance = model::CovarianceStructure::independence;
    double rho = 0.0;
    double dispersion = 1.0;
    kernels::KernelSpec kernel;
    Eigen::VectorXd beta_se;  // empty unless computed
    FitDiagnostics diagnostics;

    double index_u(const Eigen::VectorXd& z, double t) const;
    double linear_predictor(const Eigen::VectorXd& z, const Eigen::VectorXd& x, double t) const;
    double predict_mean(const Eigen::VectorXd& z, const Eigen::VectorXd& x, double t) const;
    /// m(u) = B_r(u)' lambda on the standardized scale.
    double m_hat(double u) const;

    /// Enforces the construction invariant that all final estimating-equation
    /// norms sit below 10x the inner tolerance.
    void validate(double inner_tol) const;
};

/// Full profiling fit: GEE-type initialization (constant weights, linear m),
/// frozen working covariance and standardizer, then alternation of steps
/// 1 -> 2 -> 3 until max |delta beta| drops below the outer tolerance.
ModelFit fit(const model::LongitudinalDataset& dataset, const FitConfig& config);

/// Clamp of the standardized index used before any basis evaluation.
double clamp_unit(double u);

}  // namespace indexfuse::estimator
