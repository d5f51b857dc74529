#pragma once

#include <Eigen/Core>
#include <memory>
#include <optional>

#include "indexfuse/estimator.hpp"

namespace indexfuse::inference {

/// Nadaraya-Watson estimates of the conditional-mean projections on the
/// fitted standardized index: delta(u) = E[X | u], eta(u) = E[Z m' | u] and
/// the gamma projection of the weight-equation feedback term.
struct ProjectionEstimates {
    double bandwidth = 0.0;
    bool fallback_used = false;  // nearest-neighbor fallback fired at some query

    Eigen::VectorXd u_samples;
    Eigen::MatrixXd delta_targets;  // nv x d_beta
    Eigen::MatrixXd eta_targets;    // nv x d_w
    Eigen::MatrixXd gamma_targets;  // nv x d_beta

    Eigen::VectorXd delta(double u) const;
    Eigen::VectorXd eta(double u) const;
    Eigen::VectorXd gamma(double u) const;
};

struct ConfidenceBand {
    Eigen::VectorXd grid;
    Eigen::VectorXd estimate;
    Eigen::VectorXd se;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
    double level = 0.95;
};

enum class BandTarget { m, w_component, risk };

struct EngineOptions {
    bool build_m_variance = false;  // precompute the weight-uncertainty term of Theorem-3 bands
    int threads = 1;
};

/// Shared plug-in state: projections, the time-grid matrices behind the beta
/// and weight covariances, and the spline-equation sandwich pieces. Building
/// it costs one pass of relocated evaluations over the grid; the query
/// functions below are cheap afterwards.
class InferenceEngine {
public:
    InferenceEngine(const estimator::ModelFit& fit, const model::LongitudinalDataset& dataset,
                    const EngineOptions& options = {});
    ~InferenceEngine();
    InferenceEngine(InferenceEngine&&) noexcept;
    InferenceEngine& operator=(InferenceEngine&&) noexcept;

    const ProjectionEstimates& projections() const;

    /// Cov(beta-hat) = Sigma-hat / n, symmetrized and eigenvalue-floored.
    Eigen::MatrixXd beta_covariance() const;
    Eigen::MatrixXd beta_covariance_raw() const;

    Eigen::MatrixXd w_covariance_at(double t0) const;

    double m_variance_at(double u) const;
    /// Spline-only part of the Theorem-3 variance (no weight uncertainty).
    double m_sigma2_at(double u) const;

    ConfidenceBand band(BandTarget target, const Eigen::VectorXd& grid, double level = 0.95,
                        int w_component = 0,
                        const std::optional<Eigen::VectorXd>& x_ref = std::nullopt) const;

    double f_t_at(double t) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

ProjectionEstimates estimate_projections(const estimator::ModelFit& fit,
                                         const model::LongitudinalDataset& dataset);

Eigen::MatrixXd beta_covariance(const estimator::ModelFit& fit,
                                const model::LongitudinalDataset& dataset);

Eigen::MatrixXd w_covariance_at(const estimator::ModelFit& fit,
                                const model::LongitudinalDataset& dataset, double t0);

double m_variance_at(const estimator::ModelFit& fit, const model::LongitudinalDataset& dataset,
                     double u);

ConfidenceBand band(const estimator::ModelFit& fit, const model::LongitudinalDataset& dataset,
                    BandTarget target, const Eigen::VectorXd& grid, double level = 0.95,
                    int w_component = 0,
                    const std::optional<Eigen::VectorXd>& x_ref = std::nullopt);

}  // namespace indexfuse::inference
