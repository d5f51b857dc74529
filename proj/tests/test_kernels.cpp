#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "indexfuse/errors.hpp"
#include "indexfuse/kernels.hpp"
#include "indexfuse/splines.hpp"
#include "indexfuse/rng.hpp"
#include "oracles.hpp"

using namespace indexfuse;
using kernels::KernelFamily;
using kernels::KernelSpec;

namespace {

// Simpson quadrature of f on [a, b].
template <typename F>
double simpson(F f, double a, double b, int slices) {
    double acc = f(a) + f(b);
    const double h = (b - a) / slices;
    for (int i = 1; i < slices; ++i) acc += f(a + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

}  // namespace

TEST_CASE("closed-form kernel values") {
    const KernelSpec gauss{KernelFamily::gaussian, 1.0};
    CHECK(kernels::kernel_weight(gauss, 0.3, 0.3) ==
          doctest::Approx(0.3989422804014327).epsilon(1e-12));

    const KernelSpec epa{KernelFamily::epanechnikov, 1.0};
    CHECK(kernels::kernel_weight(epa, 1.0, 0.0) == 0.0);
    CHECK(kernels::kernel_weight(epa, -1.2, 0.0) == 0.0);
    CHECK(kernels::kernel_weight(epa, 0.0, 0.0) == doctest::Approx(0.75));

    const KernelSpec gauss_half{KernelFamily::gaussian, 0.5};
    CHECK(kernels::kernel_weight(gauss_half, 0.5, 0.0) ==
          doctest::Approx(0.48394144903828673).epsilon(1e-12));
}

TEST_CASE("kernel symmetry and moment conditions") {
    for (KernelFamily fam : {KernelFamily::gaussian, KernelFamily::epanechnikov}) {
        const double lim = fam == KernelFamily::gaussian ? 10.0 : 1.0;
        CHECK(std::abs(simpson([&](double s) { return kernels::kernel_value(fam, s); }, -lim,
                               lim, 4000) -
                       1.0) < 1e-8);
        CHECK(std::abs(simpson([&](double s) { return s * kernels::kernel_value(fam, s); },
                               -lim, lim, 4000)) < 1e-8);
        Rng rng(4);
        for (int i = 0; i < 100; ++i) {
            const double s = rng.uniform(-3.0, 3.0);
            CHECK(kernels::kernel_value(fam, s) == kernels::kernel_value(fam, -s));
        }
    }
}

TEST_CASE("kernel weight integrates to one over t") {
    for (KernelFamily fam : {KernelFamily::gaussian, KernelFamily::epanechnikov}) {
        const KernelSpec spec{fam, 0.37};
        const double t0 = 1.3;
        const double lim = spec.bandwidth * (fam == KernelFamily::gaussian ? 12.0 : 1.0);
        const double integral = simpson(
            [&](double t) { return kernels::kernel_weight(spec, t, t0); }, t0 - lim, t0 + lim,
            8000);
        CHECK(std::abs(integral - 1.0) < 1e-6);
    }
}

TEST_CASE("silverman rule-of-thumb") {
    // sample with sd exactly 1 and IQR/1.34 > 1, so the sd branch is taken
    std::vector<double> samples;
    const double c = std::sqrt(0.99);
    for (int i = 0; i < 50; ++i) samples.push_back(-c);
    for (int i = 0; i < 50; ++i) samples.push_back(c);
    const double h = kernels::silverman_bandwidth(samples);
    CHECK(h == doctest::Approx(0.9 * std::pow(100.0, -0.2)).epsilon(1e-12));
    CHECK(h == doctest::Approx(0.35830).epsilon(2e-4));

    SUBCASE("scale equivariance") {
        std::vector<double> scaled = samples;
        for (double& v : scaled) v *= 3.5;
        CHECK(kernels::silverman_bandwidth(scaled) == doctest::Approx(3.5 * h).epsilon(1e-12));
    }

    SUBCASE("matches an independent evaluation on a pseudo-uniform sample") {
        Rng rng(123);
        std::vector<double> u(32);
        for (double& v : u) v = rng.uniform();
        const double sd = oracle::sample_sd(u);
        const double iqr = oracle::quantile(u, 0.75) - oracle::quantile(u, 0.25);
        const double expected =
            0.9 * std::min(sd, iqr / 1.34) * std::pow(32.0, -0.2);
        CHECK(kernels::silverman_bandwidth(u) == doctest::Approx(expected).epsilon(1e-12));
    }

    SUBCASE("degenerate sample") {
        std::vector<double> flat(10, 2.0);
        CHECK_THROWS_AS(kernels::silverman_bandwidth(flat), DegenerateSample);
    }
}

TEST_CASE("undersmoothed bandwidth") {
    const double h = kernels::undersmoothed_bandwidth(100, 0.358296);
    CHECK(h == doctest::Approx(std::pow(100.0, -2.0 / 15.0) * 0.358296).epsilon(1e-12));
    CHECK(h == doctest::Approx(0.19390).epsilon(5e-4));
    CHECK_THROWS_AS(kernels::undersmoothed_bandwidth(1, 0.5), InvalidArgument);
    CHECK_THROWS_AS(kernels::undersmoothed_bandwidth(100, 0.0), InvalidArgument);
    // proportional in h_s
    CHECK(kernels::undersmoothed_bandwidth(100, 1.0) * 0.25 ==
          doctest::Approx(kernels::undersmoothed_bandwidth(100, 0.25)).epsilon(1e-12));
}

TEST_CASE("rate diagnostics") {
    // defaults at n = 500: knot rule + undersmoothed bandwidth on unit-scale times
    const int n = 500;
    const int knots = splines::knot_count_rule(n);
    // rule-of-thumb scale for a standard exponential time sample
    Rng rng(9);
    std::vector<double> times(4 * n);
    for (double& t : times) t = rng.exponential(1.0);
    const double h = kernels::undersmoothed_bandwidth(n, kernels::silverman_bandwidth(times));
    const kernels::RateReport report =
        kernels::validate_rates(static_cast<std::int64_t>(times.size()), h, knots, 3, 3);
    CHECK(report.all_pass());

    SUBCASE("no undersmoothing trips the nh^4 proxy at large n") {
        const kernels::RateReport r2 =
            kernels::validate_rates(1000000, std::pow(1e6, -0.2), 60, 3, 3);
        bool nh4_warn = false;
        for (const auto& c : r2.checks)
            if (c.name == "n*h^4" && !c.pass) nh4_warn = true;
        CHECK(nh4_warn);
    }

    SUBCASE("zero knots warns") {
        const kernels::RateReport r3 = kernels::validate_rates(n, h, 0, 3, 3);
        CHECK_FALSE(r3.all_pass());
    }
}
