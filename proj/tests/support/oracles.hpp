#pragma once

// Independent test oracles. Everything here is implemented from first
// principles, structurally unlike the library code it checks.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

/// Textbook Cox-de Boor recursion, recursive form. The last knot interval is
/// treated as closed so u == hi evaluates to the left limit.
inline double cox_de_boor(const Eigen::VectorXd& knots, int i, int order, double u, double hi) {
    if (order == 1) {
        if (knots[i] <= u && u < knots[i + 1]) return 1.0;
        if (u == hi && knots[i] < knots[i + 1] && knots[i + 1] == hi) return 1.0;
        return 0.0;
    }
    double left = 0.0, right = 0.0;
    if (knots[i + order - 1] > knots[i])
        left = (u - knots[i]) / (knots[i + order - 1] - knots[i]) *
               cox_de_boor(knots, i, order - 1, u, hi);
    if (knots[i + order] > knots[i + 1])
        right = (knots[i + order] - u) / (knots[i + order] - knots[i + 1]) *
                cox_de_boor(knots, i + 1, order - 1, u, hi);
    return left + right;
}

inline Eigen::VectorXd cox_de_boor_all(const Eigen::VectorXd& knots, int order, int dim,
                                       double u, double hi) {
    Eigen::VectorXd out(dim);
    for (int j = 0; j < dim; ++j) out[j] = cox_de_boor(knots, j, order, u, hi);
    return out;
}

/// Weighted least squares solve with weight vector w: argmin sum w_i (y_i - x_i'b)^2.
inline Eigen::VectorXd wls(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& w) {
    const Eigen::MatrixXd xtw = x.transpose() * w.asDiagonal();
    return (xtw * x).ldlt().solve(xtw * y);
}

/// Logistic IRLS with a fixed offset; plain GLM, no clustering.
inline Eigen::VectorXd irls_logit_offset(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                         const Eigen::VectorXd& offset, int max_iter = 100) {
    const int p = static_cast<int>(x.cols());
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::VectorXd eta = offset + x * b;
        Eigen::VectorXd mu(eta.size()), w(eta.size()), z(eta.size());
        for (Eigen::Index i = 0; i < eta.size(); ++i) {
            mu[i] = 1.0 / (1.0 + std::exp(-eta[i]));
            w[i] = std::max(mu[i] * (1.0 - mu[i]), 1e-10);
            z[i] = eta[i] + (y[i] - mu[i]) / w[i] - offset[i];
        }
        const Eigen::MatrixXd xtw = x.transpose() * w.asDiagonal();
        const Eigen::VectorXd next = (xtw * x).ldlt().solve(xtw * z);
        const double delta = (next - b).lpNorm<Eigen::Infinity>();
        b = next;
        if (delta < 1e-13) break;
    }
    return b;
}

/// Kolmogorov-Smirnov distance of samples to Uniform(0,1).
inline double ks_uniform(std::vector<double> u) {
    std::sort(u.begin(), u.end());
    const double n = static_cast<double>(u.size());
    double d = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        d = std::max(d, std::abs((i + 1) / n - u[i]));
        d = std::max(d, std::abs(u[i] - i / n));
    }
    return d;
}

/// Jarque-Bera statistic (asymptotically chi-squared with 2 dof).
inline double jarque_bera(const std::vector<double>& x) {
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : x) {
        const double d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    const double skew = m3 / std::pow(m2, 1.5);
    const double kurt = m4 / (m2 * m2);
    return n / 6.0 * (skew * skew + 0.25 * (kurt - 3.0) * (kurt - 3.0));
}

/// Type-7 (linear interpolation) quantile of unsorted values.
inline double quantile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double pos = p * (v.size() - 1);
    const std::size_t i = static_cast<std::size_t>(pos);
    if (i + 1 >= v.size()) return v.back();
    return v[i] * (1.0 - (pos - i)) + v[i + 1] * (pos - i);
}

inline double sample_sd(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / (v.size() - 1));
}

}  // namespace oracle
