#include "indexfuse/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "indexfuse/errors.hpp"
#include "indexfuse/parallel.hpp"
#include "indexfuse/rng.hpp"
#include "profiling.hpp"

namespace indexfuse::evaluate {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

internal::EngineConfig base_engine_config(const model::LongitudinalDataset& dataset,
                                          const estimator::FitConfig& config) {
    internal::EngineConfig ec;
    ec.link = config.link;
    ec.kernel_family = config.kernel_family;
    ec.bandwidth = config.bandwidth;
    ec.bandwidth_scale = config.bandwidth_scale;
    ec.covariance = config.covariance;
    ec.grid_size = config.time_grid_size;
    ec.inner_tol = config.inner_tol;
    ec.max_inner = config.max_inner_iterations;
    ec.outer_tol = config.outer_tol;
    ec.max_outer = config.max_outer_iterations;
    ec.threads = config.threads;
    const int knots = config.interior_knots ? *config.interior_knots
                                            : splines::knot_count_rule(dataset.n());
    ec.basis = splines::build_basis(config.spline_order, knots, 0.0, 1.0);
    return ec;
}

}  // namespace

double ReducedModelFit::predict_mean(const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                                     double t) const {
    const double v = weights.at(t).dot(z);
    const double u = estimator::clamp_unit(
        affine_transform ? (v - tfm_a) / tfm_b : model::normal_cdf((v - tfm_a) / tfm_b));
    double ell = splines::eval_basis(basis, u).dot(lambda);
    if (beta.size() > 0) ell += beta.dot(x);
    model::LinkFunction lf{link};
    return lf.h(ell);
}

ReducedModelFit fit_linear_m(const model::LongitudinalDataset& dataset,
                             const estimator::FitConfig& config) {
    config.validate();
    internal::EngineConfig ec = base_engine_config(dataset, config);
    // order-2 no-knot basis on the affine index scale spans exactly the
    // linear functions alpha_c + alpha1 * v
    ec.basis = splines::build_basis(2, 0, 0.0, 1.0);
    ec.tfm_kind = internal::IndexTransform::Kind::affine;
    ec.pooled = false;
    internal::EngineFit ef = internal::fit_profile(dataset, ec);

    ReducedModelFit out;
    out.variant = ReducedVariant::linear_m;
    out.beta = ef.beta;
    out.lambda = ef.lambda;
    out.weights = ef.weights;
    out.basis = ec.basis;
    out.link = config.link;
    out.affine_transform = true;
    out.tfm_a = ef.tfm.a;
    out.tfm_b = ef.tfm.b;
    out.diagnostics = ef.diag;
    out.alpha1 = (ef.lambda[1] - ef.lambda[0]) / ef.tfm.b;
    out.alpha_c = ef.lambda[0] - out.alpha1 * ef.tfm.a;
    return out;
}

ReducedModelFit fit_invariant_w(const model::LongitudinalDataset& dataset,
                                const estimator::FitConfig& config) {
    config.validate();
    internal::EngineConfig ec = base_engine_config(dataset, config);
    ec.tfm_kind = internal::IndexTransform::Kind::normal_cdf;
    ec.pooled = true;  // weight equation pooled over all times, no kernel
    internal::EngineFit ef = internal::fit_profile(dataset, ec);

    ReducedModelFit out;
    out.variant = ReducedVariant::invariant_w;
    out.beta = ef.beta;
    out.lambda = ef.lambda;
    out.weights = ef.weights;
    out.basis = ec.basis;
    out.link = config.link;
    out.affine_transform = false;
    out.tfm_a = ef.tfm.a;
    out.tfm_b = ef.tfm.b;
    out.diagnostics = ef.diag;
    return out;
}

std::string model_name(ComparedModel m) {
    switch (m) {
        case ComparedModel::full:
            return "full";
        case ComparedModel::linear_m:
            return "linear_m";
        case ComparedModel::invariant_w:
            return "invariant_w";
    }
    return "unknown";
}

std::vector<int> fold_assignment(const model::LongitudinalDataset& dataset, int folds,
                                 std::uint64_t seed, int repeat) {
    if (folds < 2) throw InvalidArgument("cross validation requires folds >= 2");
    const int n = dataset.n();
    if (n < folds) throw InvalidArgument("fewer subjects than folds");
    // key subjects by hashed id so input order is irrelevant, then block-split
    std::vector<std::pair<std::uint64_t, int>> keyed(n);
    for (int i = 0; i < n; ++i) {
        std::uint64_t h = fnv1a(dataset.subjects[i].id);
        h ^= Rng::derive(seed, static_cast<std::uint64_t>(repeat)).next_u64();
        h = h * 0x2545f4914f6cdd1dULL + 0x9e3779b97f4a7c15ULL;
        h ^= h >> 33;
        keyed[i] = {h, i};
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<int> assign(n, 0);
    for (int pos = 0; pos < n; ++pos)
        assign[keyed[pos].second] = pos % folds;
    return assign;
}

Eigen::VectorXd bin_means(const std::vector<double>& scores, const std::vector<double>& values,
                          const Eigen::VectorXd& edges) {
    const int nbins = static_cast<int>(edges.size()) - 1;
    Eigen::VectorXd sums = Eigen::VectorXd::Zero(nbins);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(nbins);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        int b = static_cast<int>(std::upper_bound(edges.data(), edges.data() + edges.size(),
                                                  scores[i]) -
                                 edges.data()) -
                1;
        b = std::clamp(b, 0, nbins - 1);
        sums[b] += values[i];
        counts[b] += 1.0;
    }
    Eigen::VectorXd out(nbins);
    for (int b = 0; b < nbins; ++b) out[b] = counts[b] > 0 ? sums[b] / counts[b] : kNaN;
    return out;
}

double trapezoid_auc(const Eigen::VectorXd& centers, const Eigen::VectorXd& values) {
    double auc = 0.0;
    int prev = -1;
    for (int b = 0; b < centers.size(); ++b) {
        if (std::isnan(values[b])) continue;
        if (prev >= 0)
            auc += 0.5 * (values[prev] + values[b]) * (centers[b] - centers[prev]);
        prev = b;
    }
    return auc;
}

CrossValidationResult cross_validate(const model::LongitudinalDataset& dataset,
                                     const std::vector<ComparedModel>& models,
                                     const estimator::FitConfig& fit_config,
                                     const CrossValidationOptions& options) {
    dataset.validate();
    if (models.empty()) throw InvalidArgument("cross_validate needs at least one model");
    if (options.repeats < 1) throw InvalidArgument("repeats must be >= 1");

    // standardized averaged score per visit
    const int n = dataset.n();
    std::vector<std::vector<double>> score(n);
    double score_lo = std::numeric_limits<double>::infinity(), score_hi = -score_lo;
    for (int i = 0; i < n; ++i) {
        const auto& s = dataset.subjects[i];
        score[i].resize(s.visits());
        for (int k = 0; k < s.visits(); ++k) {
            score[i][k] = s.z.row(k).mean();
            score_lo = std::min(score_lo, score[i][k]);
            score_hi = std::max(score_hi, score[i][k]);
        }
    }
    if (!(score_hi > score_lo)) throw DegenerateSample("all standardized scores identical");

    // equal-width edges, then merge bins too thin on the full data
    std::vector<double> edges(options.bins + 1);
    for (int b = 0; b <= options.bins; ++b)
        edges[b] = score_lo + (score_hi - score_lo) * b / options.bins;
    {
        std::vector<long> counts(options.bins, 0);
        for (int i = 0; i < n; ++i)
            for (double sc : score[i]) {
                int b = static_cast<int>((sc - score_lo) / (score_hi - score_lo) * options.bins);
                b = std::clamp(b, 0, options.bins - 1);
                ++counts[b];
            }
        bool merged = true;
        while (merged && counts.size() > 1) {
            merged = false;
            for (std::size_t b = 0; b < counts.size(); ++b) {
                if (counts[b] >= options.min_bin_count) continue;
                const std::size_t nb =
                    b == 0 ? 1 : (b + 1 == counts.size() ? b - 1
                                                         : (counts[b - 1] <= counts[b + 1] ? b - 1
                                                                                           : b + 1));
                counts[std::min(b, nb)] += counts[std::max(b, nb)];
                counts.erase(counts.begin() + std::max(b, nb));
                edges.erase(edges.begin() + std::max(b, nb));
                merged = true;
                break;
            }
        }
    }
    Eigen::VectorXd edge_vec = Eigen::Map<Eigen::VectorXd>(edges.data(), edges.size());
    const int nbins = static_cast<int>(edges.size()) - 1;
    Eigen::VectorXd centers(nbins);
    for (int b = 0; b < nbins; ++b) centers[b] = 0.5 * (edges[b] + edges[b + 1]);

    estimator::FitConfig cfg = fit_config;
    cfg.compute_beta_se = false;
    cfg.threads = 1;

    // per repeat x model curves
    const int nm = static_cast<int>(models.size());
    std::vector<std::vector<Eigen::VectorXd>> repeat_curves(options.repeats,
                                                            std::vector<Eigen::VectorXd>(nm));
    parallel_for(options.repeats, options.threads, [&](int rep) {
        const std::vector<int> assign = fold_assignment(dataset, options.folds, options.seed, rep);
        std::vector<std::vector<double>> sc(nm), err(nm);
        for (int f = 0; f < options.folds; ++f) {
            model::LongitudinalDataset train;
            train.d_w = dataset.d_w;
            train.d_beta = dataset.d_beta;
            std::vector<int> test_ids;
            for (int i = 0; i < n; ++i) {
                if (assign[i] == f)
                    test_ids.push_back(i);
                else
                    train.subjects.push_back(dataset.subjects[i]);
            }
            if (test_ids.empty() || train.subjects.empty()) continue;
            for (int mi = 0; mi < nm; ++mi) {
                std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&, double)> pf;
                switch (models[mi]) {
                    case ComparedModel::full: {
                        const estimator::ModelFit fit = estimator::fit(train, cfg);
                        pf = [fit](const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                                   double t) { return fit.predict_mean(z, x, t); };
                        break;
                    }
                    case ComparedModel::linear_m: {
                        const ReducedModelFit fit = fit_linear_m(train, cfg);
                        pf = [fit](const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                                   double t) { return fit.predict_mean(z, x, t); };
                        break;
                    }
                    case ComparedModel::invariant_w: {
                        const ReducedModelFit fit = fit_invariant_w(train, cfg);
                        pf = [fit](const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                                   double t) { return fit.predict_mean(z, x, t); };
                        break;
                    }
                }
                for (int ti : test_ids) {
                    const auto& s = dataset.subjects[ti];
                    for (int k = 0; k < s.visits(); ++k) {
                        const double p =
                            pf(s.z.row(k).transpose(), s.x.row(k).transpose(), s.times[k]);
                        const double e = s.response[k] - p;
                        sc[mi].push_back(score[ti][k]);
                        err[mi].push_back(e * e);
                    }
                }
            }
        }
        for (int mi = 0; mi < nm; ++mi)
            repeat_curves[rep][mi] = bin_means(sc[mi], err[mi], edge_vec);
    });

    CrossValidationResult out;
    out.bin_edges = edge_vec;
    out.folds = options.folds;
    out.repeats = options.repeats;
    for (int mi = 0; mi < nm; ++mi) {
        PredictiveErrorCurve curve;
        curve.model = model_name(models[mi]);
        curve.bin_centers = centers;
        curve.mspe.resize(nbins);
        curve.lo.resize(nbins);
        curve.hi.resize(nbins);
        for (int b = 0; b < nbins; ++b) {
            std::vector<double> vals;
            vals.reserve(options.repeats);
            for (int rep = 0; rep < options.repeats; ++rep) {
                const double v = repeat_curves[rep][mi][b];
                if (!std::isnan(v)) vals.push_back(v);
            }
            if (vals.empty()) {
                curve.mspe[b] = kNaN;
                curve.lo[b] = kNaN;
                curve.hi[b] = kNaN;
                continue;
            }
            double sum = 0.0;
            for (double v : vals) sum += v;
            curve.mspe[b] = sum / vals.size();
            std::sort(vals.begin(), vals.end());
            auto quant = [&](double p) {
                const double pos = p * (vals.size() - 1);
                const std::size_t i = static_cast<std::size_t>(pos);
                if (i + 1 >= vals.size()) return vals.back();
                return vals[i] * (1.0 - (pos - i)) + vals[i + 1] * (pos - i);
            };
            curve.lo[b] = quant(0.025);
            curve.hi[b] = quant(0.975);
        }
        curve.auc = trapezoid_auc(centers, curve.mspe);
        out.curves.push_back(std::move(curve));
    }
    return out;
}

}  // namespace indexfuse::evaluate
