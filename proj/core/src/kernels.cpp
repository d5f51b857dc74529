#include "indexfuse/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "indexfuse/errors.hpp"

namespace indexfuse::kernels {

void KernelSpec::validate() const {
    if (!(bandwidth > 0.0)) throw InvalidArgument("kernel bandwidth must be positive");
}

double KernelSpec::support_radius() const {
    switch (family) {
        case KernelFamily::gaussian:
            return 8.5;
        case KernelFamily::epanechnikov:
            return 1.0;
    }
    return 1.0;
}

double kernel_value(KernelFamily family, double s) {
    switch (family) {
        case KernelFamily::gaussian:
            return std::exp(-0.5 * s * s) / std::sqrt(2.0 * M_PI);
        case KernelFamily::epanechnikov:
            return std::abs(s) < 1.0 ? 0.75 * (1.0 - s * s) : 0.0;
    }
    return 0.0;
}

double kernel_weight(const KernelSpec& spec, double t, double t0) {
    spec.validate();
    return kernel_value(spec.family, (t - t0) / spec.bandwidth) / spec.bandwidth;
}

namespace {

// Linearly interpolated quantile of sorted values (index (n-1)p).
double sorted_quantile(const std::vector<double>& sorted, double p) {
    const double pos = p * (sorted.size() - 1);
    const std::size_t i = static_cast<std::size_t>(pos);
    if (i + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - i;
    return sorted[i] * (1.0 - frac) + sorted[i + 1] * frac;
}

}  // namespace

double silverman_bandwidth(std::span<const double> samples) {
    const std::size_t n = samples.size();
    if (n < 2) throw InvalidArgument("silverman_bandwidth requires at least 2 samples");
    double sum = 0.0;
    for (double v : samples) sum += v;
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : samples) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1));

    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    const double iqr = sorted_quantile(sorted, 0.75) - sorted_quantile(sorted, 0.25);

    double spread = sd;
    if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
    if (!(spread > 0.0))
        throw DegenerateSample("all samples identical; rule-of-thumb bandwidth undefined");
    return 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
}

double undersmoothed_bandwidth(std::int64_t n, double h_s) {
    if (n < 2) throw InvalidArgument("undersmoothed_bandwidth requires n >= 2");
    if (!(h_s > 0.0)) throw InvalidArgument("undersmoothed_bandwidth requires h_s > 0");
    return std::pow(static_cast<double>(n), -2.0 / 15.0) * h_s;
}

bool RateReport::all_pass() const {
    for (const auto& c : checks)
        if (!c.pass) return false;
    return true;
}

std::string RateReport::to_string() const {
    std::ostringstream os;
    for (const auto& c : checks) {
        os << (c.pass ? "[pass] " : "[warn] ") << c.name << " = " << c.value
           << (c.warn_below ? " (want >= " : " (want <= ") << c.threshold << ")\n";
    }
    return os.str();
}

RateReport validate_rates(std::int64_t n, double h, int interior_knots, int order, int q) {
    RateReport report;
    const double nn = static_cast<double>(n);
    auto add = [&](const std::string& name, double value, double threshold, bool warn_below) {
        RateCheck c;
        c.name = name;
        c.value = value;
        c.threshold = threshold;
        c.warn_below = warn_below;
        c.pass = warn_below ? value >= threshold : value <= threshold;
        report.checks.push_back(c);
    };
    add("n*h^2", nn * h * h, 5.0, true);
    add("n*h^4", nn * h * h * h * h, 5.0, false);
    if (interior_knots < 1) {
        add("knot_rule N>=1", interior_knots, 1.0, true);
    } else {
        const double N = interior_knots;
        add("n/(N*log n)", nn / (N * std::log(nn)), 2.0, true);
        add("N*n^{-1/(2q+1)}", N * std::pow(nn, -1.0 / (2.0 * q + 1.0)), 1.0, true);
        add("n/N^3", nn / (N * N * N), 0.01, true);
    }
    if (order < q)
        add("spline order r>=q", order, q, true);
    return report;
}

}  // namespace indexfuse::kernels
