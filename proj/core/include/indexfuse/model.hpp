#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace indexfuse::model {

/// One individual: M_i visits with time, response, index covariates z and
/// linear covariates x (row per visit).
struct Subject {
    std::string id;
    Eigen::VectorXd times;     // M_i
    Eigen::VectorXd response;  // M_i
    Eigen::MatrixXd z;         // M_i x d_w
    Eigen::MatrixXd x;         // M_i x d_beta (d_beta may be 0)

    int visits() const { return static_cast<int>(times.size()); }
};

struct LongitudinalDataset {
    std::vector<Subject> subjects;
    int d_w = 0;
    int d_beta = 0;

    int n() const { return static_cast<int>(subjects.size()); }
    int total_visits() const;
    int max_cluster_size() const;
    double min_time() const;
    double max_time() const;
    std::vector<double> pooled_times() const;

    /// Throws InvalidArgument on dimension mismatch, empty data or non-finite values.
    void validate() const;
};

enum class LinkFamily { identity, logit };

/// Known monotone link H with derivative Theta = dH/du and second derivative.
struct LinkFunction {
    LinkFamily family = LinkFamily::identity;

    double h(double u) const;
    double theta(double u) const;
    double theta_prime(double u) const;
};

enum class CovarianceStructure { independence, exchangeable };

/// Working covariance Omega_i = dispersion * V^{1/2} R_i V^{1/2} with V the
/// per-visit variance weights and R_i either identity or exchangeable(rho).
/// Correct specification is not required for the estimating equations.
struct WorkingCovariance {
    CovarianceStructure structure = CovarianceStructure::independence;
    double rho = 0.0;
    double dispersion = 1.0;
    bool fell_back_to_independence = false;

    Eigen::MatrixXd correlation(int m) const;
    Eigen::MatrixXd build(const Eigen::VectorXd& variance_weights) const;
};

/// Estimates rho by the method-of-moments average of within-subject
/// cross-products of standardized residuals (exchangeable only), clamped to
/// [-0.99/(maxM-1), 0.99]. Falls back to independence with a flag when no
/// within-subject pairs exist.
WorkingCovariance build_working_covariance(CovarianceStructure structure,
                                           const LongitudinalDataset& dataset,
                                           const std::vector<Eigen::VectorXd>& standardized_residuals,
                                           double dispersion = 1.0);

/// v -> Phi((v - mu)/sigma), mapping the raw index into (0,1) for spline
/// evaluation. mu/sigma come from the index values at the initial weights.
struct Standardizer {
    double mu = 0.0;
    double sigma = 1.0;

    double transform(double v) const;
    /// d transform / dv.
    double density(double v) const;
    /// Inverse map, u in (0,1).
    double inverse(double u) const;
};

Standardizer build_standardizer(const LongitudinalDataset& dataset,
                                const std::vector<Eigen::MatrixXd>& w_at_visits);

struct ConstraintResult {
    Eigen::VectorXd weights;
    bool all_positive = true;
};

/// Scales w onto the l1 simplex. Nonpositive entries are flagged, not clamped.
ConstraintResult enforce_weight_constraint(const Eigen::VectorXd& w);

double normal_cdf(double x);
double normal_pdf(double x);
double normal_quantile(double p);

}  // namespace indexfuse::model
