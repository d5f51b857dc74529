#pragma once

// Internal engine behind estimator, inference and evaluate. Everything here
// works in the standardized index scale: the spline argument is
// u = tfm(w' z) and all chain-rule factors flow through IndexTransform.
//
// The estimating equations are assembled in collapsed GEE form. The paper-form
// weight matrices with blocks b_p b_q' Omega_pq have rank M_i, so A V^- S is
// evaluated through the Moore-Penrose inverse, which reduces every step to
//   sum_i  Bracket_i  Theta_i  Omega_i^{-1} (kernel o residual)_i
// with Bracket_i the d x M_i matrix of per-visit score brackets. For d_w = 1
// this agrees entry-by-entry with the uncollapsed expressions.

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "indexfuse/estimator.hpp"

namespace indexfuse::internal {

struct IndexTransform {
    enum class Kind { normal_cdf, affine };
    Kind kind = Kind::normal_cdf;
    double a = 0.0;  // mu (normal) or lo (affine)
    double b = 1.0;  // sigma (normal) or span (affine)

    double map(double v) const;
    double dmap(double v) const;
    double d2map(double v) const;

    static IndexTransform normal(const model::Standardizer& s) {
        return IndexTransform{Kind::normal_cdf, s.mu, s.sigma};
    }
    static IndexTransform affine(double lo, double hi) {
        return IndexTransform{Kind::affine, lo, hi - lo};
    }
    model::Standardizer as_standardizer() const { return model::Standardizer{a, b}; }
};

struct EngineRef {
    const model::LongitudinalDataset* data = nullptr;
    const splines::SplineBasis* basis = nullptr;
    model::LinkFunction link;
    IndexTransform tfm;
    const estimator::OmegaSet* omega = nullptr;
    kernels::KernelSpec kernel;
    bool pooled = false;  // step-2 equation pooled over time (kernel == 1)
};

struct VisitEval {
    double v = 0.0;   // raw index w'z
    double u = 0.0;   // clamped transformed index
    double du = 0.0;  // d tfm / dv
    double d2u = 0.0;
    splines::BasisSpan span;
    double gval = 0.0;      // B(u)' lambda
    double gprime_u = 0.0;  // B'(u)' lambda
    double g2_u = 0.0;      // B''(u)' lambda
    double gprime = 0.0;    // d m / dv = gprime_u * du
    double dgprime_dv = 0.0;
    double ell = 0.0;  // linear predictor
    double mean = 0.0;
    double th = 0.0;   // Theta(ell)
    double thp = 0.0;  // Theta'(ell)
    double resid = 0.0;
};

VisitEval eval_visit(const EngineRef& e, const Eigen::VectorXd& lambda,
                     const Eigen::VectorXd& beta, int subject, int visit,
                     const Eigen::Ref<const Eigen::RowVectorXd>& w_at_visit, int max_deriv);

/// All visits of a subject with one weight vector applying everywhere
/// (the "relocated to t0" evaluation of the local equations).
void eval_subject_relocated(const EngineRef& e, const Eigen::VectorXd& lambda,
                            const Eigen::VectorXd& beta, int subject,
                            const Eigen::VectorXd& omega_w, int max_deriv,
                            std::vector<VisitEval>& out);

/// All visits of a subject at their own times with per-visit weights.
void eval_subject_own(const EngineRef& e, const Eigen::VectorXd& lambda,
                      const Eigen::VectorXd& beta, int subject,
                      const Eigen::MatrixXd& w_visits, int max_deriv,
                      std::vector<VisitEval>& out);

/// Weight values at each visit of each subject under a grid estimate.
std::vector<Eigen::MatrixXd> weights_at_visits(const model::LongitudinalDataset& data,
                                               const estimator::WeightFunctionEstimate& w);

// ---- step 1 ----

Eigen::VectorXd step1_solve(const EngineRef& e, const Eigen::VectorXd& beta,
                            const std::vector<Eigen::MatrixXd>& w_visits,
                            const Eigen::VectorXd& lambda_init,
                            const estimator::SolveOptions& opts, double* out_norm);

/// Exact Jacobian dG1/dlambda (Gauss-Newton part plus curvature term).
Eigen::MatrixXd step1_jacobian_exact(const EngineRef& e, const Eigen::VectorXd& beta,
                                     const std::vector<Eigen::MatrixXd>& w_visits,
                                     const Eigen::VectorXd& lambda);

Eigen::MatrixXd step1_dscore_dbeta(const EngineRef& e, const Eigen::VectorXd& beta,
                                   const std::vector<Eigen::MatrixXd>& w_visits,
                                   const Eigen::VectorXd& lambda);

/// dG1 / d(uniform additive shift of w).
Eigen::MatrixXd step1_dscore_dshift(const EngineRef& e, const Eigen::VectorXd& beta,
                                    const std::vector<Eigen::MatrixXd>& w_visits,
                                    const Eigen::VectorXd& lambda);

/// Total d lambda-hat / d beta including the response of the weight grid,
/// whose per-point sensitivities are given in `weights`.
Eigen::MatrixXd lambda_total_beta_sensitivity(const EngineRef& e, const Eigen::VectorXd& beta,
                                              const estimator::WeightFunctionEstimate& weights,
                                              const Eigen::VectorXd& lambda);

// ---- step 2 ----

/// Collapsed local score  G(omega) = sum_i B_i Theta_i Omega_i^{-1} (K o r)_i
/// and, when requested, its analytic Jacobian in omega.
void step2_score(const EngineRef& e, const Eigen::VectorXd& beta, const Eigen::VectorXd& lambda,
                 const Eigen::MatrixXd& jlw, double t0, const Eigen::VectorXd& omega_w,
                 Eigen::VectorXd* score, Eigen::MatrixXd* jac, double* kernel_mass);

struct Step2Context {
    Eigen::VectorXd lambda;
    Eigen::MatrixXd jlw;  // d lambda / d(shift of w)
    // central-difference states for the beta sensitivity of the local solution
    Eigen::VectorXd fd_eps;
    std::vector<Eigen::VectorXd> lambda_plus, lambda_minus;
    std::vector<Eigen::MatrixXd> jlw_plus, jlw_minus;
    bool has_beta_fd = false;
};

Step2Context make_step2_context(const EngineRef& e, const Eigen::VectorXd& beta,
                                const std::vector<Eigen::MatrixXd>& w_visits,
                                const Eigen::VectorXd& lambda,
                                const estimator::SolveOptions& opts, bool want_beta_fd);

estimator::Step2Result step2_point(const EngineRef& e, const Step2Context& ctx,
                                   const Eigen::VectorXd& beta, double t0,
                                   const Eigen::VectorXd& warm,
                                   const estimator::SolveOptions& opts,
                                   bool want_beta_sensitivity);

struct Step2PassResult {
    estimator::WeightFunctionEstimate weights;
    double max_norm = 0.0;
    int nonneg_warnings = 0;
};

Step2PassResult step2_pass(const EngineRef& e, const Eigen::VectorXd& beta,
                           const Eigen::VectorXd& lambda,
                           const estimator::WeightFunctionEstimate& warm,
                           const Eigen::VectorXd& grid, const estimator::SolveOptions& opts,
                           bool want_beta_sensitivity, int threads);

// ---- step 3 ----

struct ProfileState {
    Eigen::VectorXd lambda;
    estimator::WeightFunctionEstimate weights;
    double step1_norm = 0.0;
    double step2_norm = 0.0;
    int nonneg_warnings = 0;
};

/// Profiled score for beta; re-profiles lambda / weights inside unless pinned.
Eigen::VectorXd step3_score(const EngineRef& e, const Eigen::VectorXd& beta,
                            ProfileState& state, const estimator::Step3Options& opts);

estimator::Step3Result step3_solve(const EngineRef& e, const Eigen::VectorXd& beta_init,
                                   const ProfileState& state_init,
                                   const estimator::Step3Options& opts);

// ---- full profiling loop (shared with the reduced models) ----

struct EngineConfig {
    splines::SplineBasis basis;
    model::LinkFamily link = model::LinkFamily::identity;
    IndexTransform::Kind tfm_kind = IndexTransform::Kind::normal_cdf;
    bool pooled = false;
    kernels::KernelFamily kernel_family = kernels::KernelFamily::gaussian;
    std::optional<double> bandwidth;
    double bandwidth_scale = 1.0;
    model::CovarianceStructure covariance = model::CovarianceStructure::exchangeable;
    int grid_size = 50;
    double inner_tol = 1e-8;
    int max_inner = 100;
    double outer_tol = 1e-6;
    int max_outer = 50;
    int threads = 1;
};

struct EngineFit {
    Eigen::VectorXd beta;
    Eigen::VectorXd lambda;
    estimator::WeightFunctionEstimate weights;
    IndexTransform tfm;
    model::WorkingCovariance cov;
    estimator::OmegaSet omega;
    kernels::KernelSpec kernel;
    estimator::FitDiagnostics diag;
};

EngineFit fit_profile(const model::LongitudinalDataset& dataset, const EngineConfig& config);

/// Default grid: `size` points spanning the widest window inside the
/// [0.02, 0.98] time quantiles where the local kernel mass stays workable.
Eigen::VectorXd default_time_grid(const model::LongitudinalDataset& data,
                                  const kernels::KernelSpec& kernel, int size);

/// Per-visit GLM variance weights at given fitted linear predictors.
std::vector<Eigen::VectorXd> variance_weights(const model::LongitudinalDataset& data,
                                              model::LinkFunction link,
                                              const std::vector<Eigen::VectorXd>& eta);

}  // namespace indexfuse::internal
