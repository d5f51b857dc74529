#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "indexfuse/estimator.hpp"
#include "indexfuse/model.hpp"

namespace indexfuse::simulate {

/// Generator parameters for one Monte Carlo setting. Concrete coefficient
/// values live in the versioned manifest (settings_manifest_json) so every
/// summary can echo the exact data-generating process.
struct SettingSpec {
    int setting_id = 1;
    int n = 100;
    std::uint64_t seed = 1;

    model::LinkFamily link = model::LinkFamily::logit;
    int d_w = 4;
    int d_beta = 3;
    Eigen::VectorXd beta0;

    double frailty_sd = 0.3;
    std::vector<int> cluster_sizes{3, 4, 5};

    double z_poisson_mean = 3.0;

    enum class TimeLaw { exponential, uniform };
    TimeLaw time_law = TimeLaw::exponential;
    double time_par1 = 1.0;  // rate (exponential) or lo (uniform)
    double time_par2 = 0.0;  // hi (uniform)

    double x_cross_correlation = 0.0;

    enum class WForm { linear, power };
    WForm w_form = WForm::linear;
    Eigen::VectorXd w_a;  // intercepts
    Eigen::VectorXd w_b;  // slopes or scales
    Eigen::VectorXd w_p;  // powers (power form)

    enum class MForm { quadratic, sine };
    MForm m_form = MForm::quadratic;
    double m_c0 = 0.0, m_c1 = 1.0, m_c2 = 0.0;
    double m_shift = 0.0, m_amp = 1.0, m_freq = 1.0, m_phase = 0.0;

    double noise_sd = 1.0;  // identity link only

    double m0(double v) const;
    /// True weights, normalized onto the simplex.
    Eigen::VectorXd w0(double t) const;
    void validate() const;
};

/// Settings 1-3 from the versioned manifest.
SettingSpec make_setting(int id, int n, std::uint64_t seed);
/// Synthetic stand-in for the application data: strongly time-varying
/// weights and a strongly nonlinear index function.
SettingSpec make_hd_like(int n, std::uint64_t seed);

const std::string& settings_manifest_json();
std::string settings_manifest_hash();

model::LongitudinalDataset generate(const SettingSpec& spec);

struct MonteCarloSummary {
    int setting_id = 0;
    int n = 0;
    int replications = 0;
    int failures = 0;
    std::uint64_t seed = 0;
    Eigen::VectorXd beta_true;
    Eigen::VectorXd beta_mean;
    Eigen::VectorXd beta_sd;       // empirical sd of the estimates
    Eigen::VectorXd beta_se_mean;  // mean of the plug-in standard errors
    Eigen::VectorXd beta_mse;      // sd^2 + bias^2
    Eigen::VectorXd beta_cp;       // 95% interval coverage

    bool has_band_coverage = false;
    double w_band_coverage = 0.0;  // pointwise coverage of w(t)'z*
    double m_band_coverage = 0.0;

    double median_beta_err_inf = 0.0;
    double median_sup_m_err = 0.0;
    double median_sup_w_err = 0.0;

    std::string manifest_hash;

    /// MSE = sd^2 + bias^2 to 1e-12 and CP in [0,1].
    void validate() const;
};

struct MonteCarloOptions {
    int threads = 1;
    bool band_coverage = false;
    double failure_cap = 0.05;
    int coverage_time_points = 25;
    int coverage_index_points = 25;
    Eigen::VectorXd z_star;  // defaults to (1,2,...,d_w)
};

MonteCarloSummary run_monte_carlo(const SettingSpec& spec, int replications,
                                  const estimator::FitConfig& fit_config,
                                  const MonteCarloOptions& options = {});

}  // namespace indexfuse::simulate
