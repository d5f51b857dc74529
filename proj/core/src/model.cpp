#include "indexfuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/distributions/normal.hpp>

#include "indexfuse/errors.hpp"

namespace indexfuse::model {

int LongitudinalDataset::total_visits() const {
    int total = 0;
    for (const auto& s : subjects) total += s.visits();
    return total;
}

int LongitudinalDataset::max_cluster_size() const {
    int m = 0;
    for (const auto& s : subjects) m = std::max(m, s.visits());
    return m;
}

double LongitudinalDataset::min_time() const {
    double t = std::numeric_limits<double>::infinity();
    for (const auto& s : subjects) t = std::min(t, s.times.minCoeff());
    return t;
}

double LongitudinalDataset::max_time() const {
    double t = -std::numeric_limits<double>::infinity();
    for (const auto& s : subjects) t = std::max(t, s.times.maxCoeff());
    return t;
}

std::vector<double> LongitudinalDataset::pooled_times() const {
    std::vector<double> out;
    out.reserve(total_visits());
    for (const auto& s : subjects)
        for (int k = 0; k < s.visits(); ++k) out.push_back(s.times[k]);
    return out;
}

void LongitudinalDataset::validate() const {
    if (subjects.empty()) throw InvalidArgument("dataset has no subjects");
    if (d_w < 1) throw InvalidArgument("dataset requires d_w >= 1");
    if (d_beta < 0) throw InvalidArgument("dataset requires d_beta >= 0");
    for (const auto& s : subjects) {
        const int m = s.visits();
        if (m < 1) throw InvalidArgument("subject '" + s.id + "' has no visits");
        if (s.response.size() != m || s.z.rows() != m || s.x.rows() != m)
            throw InvalidArgument("subject '" + s.id + "' has inconsistent visit counts");
        if (s.z.cols() != d_w)
            throw InvalidArgument("subject '" + s.id + "' has wrong z dimension");
        if (s.x.cols() != d_beta)
            throw InvalidArgument("subject '" + s.id + "' has wrong x dimension");
        if (!s.times.allFinite() || !s.response.allFinite() || !s.z.allFinite() ||
            !s.x.allFinite())
            throw InvalidArgument("subject '" + s.id + "' contains non-finite values");
    }
}

double LinkFunction::h(double u) const {
    switch (family) {
        case LinkFamily::identity:
            return u;
        case LinkFamily::logit: {
            // numerically stable logistic
            if (u >= 0.0) {
                const double e = std::exp(-u);
                return 1.0 / (1.0 + e);
            }
            const double e = std::exp(u);
            return e / (1.0 + e);
        }
    }
    return u;
}

double LinkFunction::theta(double u) const {
    switch (family) {
        case LinkFamily::identity:
            return 1.0;
        case LinkFamily::logit: {
            const double p = h(u);
            return p * (1.0 - p);
        }
    }
    return 1.0;
}

double LinkFunction::theta_prime(double u) const {
    switch (family) {
        case LinkFamily::identity:
            return 0.0;
        case LinkFamily::logit: {
            const double p = h(u);
            return p * (1.0 - p) * (1.0 - 2.0 * p);
        }
    }
    return 0.0;
}

Eigen::MatrixXd WorkingCovariance::correlation(int m) const {
    Eigen::MatrixXd r = Eigen::MatrixXd::Identity(m, m);
    if (structure == CovarianceStructure::exchangeable && !fell_back_to_independence) {
        for (int p = 0; p < m; ++p)
            for (int q = 0; q < m; ++q)
                if (p != q) r(p, q) = rho;
    }
    return r;
}

Eigen::MatrixXd WorkingCovariance::build(const Eigen::VectorXd& variance_weights) const {
    const int m = static_cast<int>(variance_weights.size());
    const Eigen::VectorXd sd = variance_weights.array().max(1e-12).sqrt();
    Eigen::MatrixXd omega = correlation(m);
    for (int p = 0; p < m; ++p)
        for (int q = 0; q < m; ++q) omega(p, q) *= dispersion * sd[p] * sd[q];
    return omega;
}

WorkingCovariance build_working_covariance(CovarianceStructure structure,
                                           const LongitudinalDataset& dataset,
                                           const std::vector<Eigen::VectorXd>& standardized_residuals,
                                           double dispersion) {
    if (standardized_residuals.size() != dataset.subjects.size())
        throw InvalidArgument("residuals are not aligned with dataset subjects");
    WorkingCovariance cov;
    cov.structure = structure;
    cov.dispersion = dispersion;
    if (structure == CovarianceStructure::independence) return cov;

    double cross = 0.0;
    long pairs = 0;
    for (std::size_t i = 0; i < standardized_residuals.size(); ++i) {
        const Eigen::VectorXd& e = standardized_residuals[i];
        if (e.size() != dataset.subjects[i].visits())
            throw InvalidArgument("residuals are not aligned with dataset visits");
        const int m = static_cast<int>(e.size());
        for (int k = 0; k < m; ++k)
            for (int l = k + 1; l < m; ++l) {
                cross += e[k] * e[l];
                ++pairs;
            }
    }
    if (pairs < 1) {
        cov.fell_back_to_independence = true;
        return cov;
    }
    const int max_m = dataset.max_cluster_size();
    const double lo = max_m > 1 ? -0.99 / (max_m - 1) : 0.0;
    cov.rho = std::clamp(cross / pairs, lo, 0.99);
    return cov;
}

double Standardizer::transform(double v) const {
    return normal_cdf((v - mu) / sigma);
}

double Standardizer::density(double v) const {
    return normal_pdf((v - mu) / sigma) / sigma;
}

double Standardizer::inverse(double u) const {
    return mu + sigma * normal_quantile(u);
}

Standardizer build_standardizer(const LongitudinalDataset& dataset,
                                const std::vector<Eigen::MatrixXd>& w_at_visits) {
    if (w_at_visits.size() != dataset.subjects.size())
        throw InvalidArgument("initial weights are not aligned with dataset subjects");
    double sum = 0.0, sumsq = 0.0;
    long count = 0;
    for (std::size_t i = 0; i < w_at_visits.size(); ++i) {
        const auto& s = dataset.subjects[i];
        const Eigen::MatrixXd& w = w_at_visits[i];
        if (w.rows() != s.visits() || w.cols() != dataset.d_w)
            throw InvalidArgument("initial weights have wrong shape for subject '" + s.id + "'");
        for (int k = 0; k < s.visits(); ++k) {
            const double v = w.row(k).dot(s.z.row(k));
            sum += v;
            sumsq += v * v;
            ++count;
        }
    }
    const double mean = sum / count;
    const double var = count > 1 ? (sumsq - count * mean * mean) / (count - 1) : 0.0;
    if (!(var > 0.0))
        throw DegenerateIndex("index values have zero sample variance; cannot standardize");
    return Standardizer{mean, std::sqrt(var)};
}

ConstraintResult enforce_weight_constraint(const Eigen::VectorXd& w) {
    if (w.size() == 0 || w.isZero(0.0))
        throw InvalidArgument("cannot project the zero vector onto the simplex");
    ConstraintResult out;
    out.all_positive = (w.array() > 0.0).all();
    out.weights = w / w.array().abs().sum();
    return out;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("normal quantile requires p in (0,1)");
    static const boost::math::normal_distribution<double> unit(0.0, 1.0);
    return boost::math::quantile(unit, p);
}

}  // namespace indexfuse::model
