#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace indexfuse::kernels {

enum class KernelFamily { gaussian, epanechnikov };

/// Symmetric density kernel K with bandwidth h; K_h(s) = K(s/h)/h.
struct KernelSpec {
    KernelFamily family = KernelFamily::gaussian;
    double bandwidth = 1.0;

    void validate() const;
    /// |s| beyond which K(s) is treated as zero when scanning data. The
    /// Gaussian cutoff is far enough out that dropped mass is below 1e-16.
    double support_radius() const;
};

double kernel_value(KernelFamily family, double s);

/// K_h(t - t0).
double kernel_weight(const KernelSpec& spec, double t, double t0);

/// 0.9 * min(sd, IQR/1.34) * n^{-1/5}; IQR uses linearly interpolated
/// quantiles. Throws DegenerateSample when all samples coincide.
double silverman_bandwidth(std::span<const double> samples);

/// h = n^{-2/15} * h_s, the undersmoothing that keeps kernel bias negligible
/// (n h^2 -> inf, n h^4 -> 0 when h_s = O(n^{-1/5})).
double undersmoothed_bandwidth(std::int64_t n, double h_s);

struct RateCheck {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    bool warn_below = true;  // warn when value is on the wrong side of threshold
    bool pass = true;
};

struct RateReport {
    std::vector<RateCheck> checks;
    bool all_pass() const;
    std::string to_string() const;
};

/// Finite-n proxies for the asymptotic bandwidth/knot conditions. Advisory
/// only; thresholds are documented heuristics, not estimates. `n` is the
/// number of observations entering the kernel sums (visits, not subjects).
RateReport validate_rates(std::int64_t n, double h, int interior_knots, int order, int q);

}  // namespace indexfuse::kernels
