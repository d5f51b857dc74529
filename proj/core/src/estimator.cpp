#include "indexfuse/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <cstdlib>
#include <cstdio>

#include <Eigen/Dense>

#include "indexfuse/errors.hpp"
#include "indexfuse/inference.hpp"
#include "indexfuse/parallel.hpp"
#include "profiling.hpp"

namespace indexfuse::estimator {

double clamp_unit(double u) { return std::min(1.0 - 1e-6, std::max(1e-6, u)); }

void FitConfig::validate() const {
    if (spline_order < 1) throw InvalidArgument("spline_order must be >= 1");
    if (interior_knots && *interior_knots < 0) throw InvalidArgument("interior_knots must be >= 0");
    if (bandwidth && !(*bandwidth > 0.0)) throw InvalidArgument("bandwidth must be positive");
    if (!(bandwidth_scale > 0.0)) throw InvalidArgument("bandwidth_scale must be positive");
    if (time_grid_size < 2) throw InvalidArgument("time_grid_size must be >= 2");
    if (!(inner_tol > 0.0) || !(outer_tol > 0.0)) throw InvalidArgument("tolerances must be positive");
    if (max_inner_iterations < 1 || max_outer_iterations < 1)
        throw InvalidArgument("iteration limits must be >= 1");
}

// ---- WeightFunctionEstimate ----

Eigen::VectorXd WeightFunctionEstimate::at(double t) const {
    if (values.empty()) throw InvalidArgument("empty weight function estimate");
    const int g = static_cast<int>(grid.size());
    if (g == 1 || t <= grid[0]) return values.front();
    if (t >= grid[g - 1]) return values.back();
    const int hi = static_cast<int>(std::upper_bound(grid.data(), grid.data() + g, t) - grid.data());
    const int lo = hi - 1;
    const double frac = (t - grid[lo]) / (grid[hi] - grid[lo]);
    Eigen::VectorXd w = (1.0 - frac) * values[lo] + frac * values[hi];
    const double s = w.sum();
    if (std::abs(s) > 1e-12) w /= s;
    return w;
}

Eigen::MatrixXd WeightFunctionEstimate::beta_sensitivity_at(double t) const {
    if (beta_sensitivity.empty()) return Eigen::MatrixXd();
    const int g = static_cast<int>(grid.size());
    if (g == 1 || t <= grid[0]) return beta_sensitivity.front();
    if (t >= grid[g - 1]) return beta_sensitivity.back();
    const int hi = static_cast<int>(std::upper_bound(grid.data(), grid.data() + g, t) - grid.data());
    const int lo = hi - 1;
    const double frac = (t - grid[lo]) / (grid[hi] - grid[lo]);
    return (1.0 - frac) * beta_sensitivity[lo] + frac * beta_sensitivity[hi];
}

WeightFunctionEstimate WeightFunctionEstimate::constant(const Eigen::VectorXd& w, double t_lo,
                                                        double t_hi) {
    WeightFunctionEstimate out;
    if (t_hi > t_lo) {
        out.grid.resize(2);
        out.grid << t_lo, t_hi;
        out.values = {w, w};
    } else {
        out.grid.resize(1);
        out.grid << t_lo;
        out.values = {w};
    }
    return out;
}

void WeightFunctionEstimate::validate() const {
    if (values.empty() || grid.size() != static_cast<Eigen::Index>(values.size()))
        throw InvalidArgument("weight estimate grid/value mismatch");
    for (int g = 1; g < grid.size(); ++g)
        if (!(grid[g] > grid[g - 1])) throw InvalidArgument("weight grid must be increasing");
    for (const auto& w : values)
        if (std::abs(w.sum() - 1.0) >= 1e-9)
            throw InvalidArgument("weight grid value off the l1 simplex");
}

// ---- OmegaSet ----

OmegaSet build_omega_set(const model::WorkingCovariance& spec,
                         const model::LongitudinalDataset& dataset,
                         const std::vector<Eigen::VectorXd>& variance_weights) {
    if (variance_weights.size() != dataset.subjects.size())
        throw InvalidArgument("variance weights not aligned with subjects");
    OmegaSet set;
    set.spec = spec;
    set.omega.reserve(dataset.n());
    set.omega_inv.reserve(dataset.n());
    for (int i = 0; i < dataset.n(); ++i) {
        Eigen::MatrixXd om = spec.build(variance_weights[i]);
        Eigen::LLT<Eigen::MatrixXd> llt(om);
        if (llt.info() != Eigen::Success)
            throw InvalidArgument("working covariance is not positive definite");
        set.omega_inv.push_back(llt.solve(Eigen::MatrixXd::Identity(om.rows(), om.cols())));
        set.omega.push_back(std::move(om));
    }
    return set;
}

}  // namespace indexfuse::estimator

// ============================ internal engine ============================

namespace indexfuse::internal {

using estimator::clamp_unit;
using estimator::OmegaSet;
using estimator::SolveOptions;
using estimator::Step2Result;
using estimator::WeightFunctionEstimate;

double IndexTransform::map(double v) const {
    if (kind == Kind::normal_cdf) return model::normal_cdf((v - a) / b);
    return (v - a) / b;
}

double IndexTransform::dmap(double v) const {
    if (kind == Kind::normal_cdf) return model::normal_pdf((v - a) / b) / b;
    return 1.0 / b;
}

double IndexTransform::d2map(double v) const {
    if (kind == Kind::normal_cdf) {
        const double z = (v - a) / b;
        return -z * model::normal_pdf(z) / (b * b);
    }
    return 0.0;
}

VisitEval eval_visit(const EngineRef& e, const Eigen::VectorXd& lambda,
                     const Eigen::VectorXd& beta, int subject, int visit,
                     const Eigen::Ref<const Eigen::RowVectorXd>& w_at_visit, int max_deriv) {
    const model::Subject& s = e.data->subjects[subject];
    VisitEval ev;
    ev.v = w_at_visit.dot(s.z.row(visit));
    ev.u = clamp_unit(e.tfm.map(ev.v));
    ev.du = e.tfm.dmap(ev.v);
    ev.d2u = e.tfm.d2map(ev.v);
    ev.span = splines::eval_basis_span(*e.basis, ev.u, max_deriv);
    ev.gval = 0.0;
    ev.gprime_u = 0.0;
    ev.g2_u = 0.0;
    for (int j = 0; j < ev.span.count; ++j) {
        const double c = lambda[ev.span.first + j];
        ev.gval += ev.span.value[j] * c;
        if (max_deriv >= 1) ev.gprime_u += ev.span.deriv[j] * c;
        if (max_deriv >= 2) ev.g2_u += ev.span.deriv2[j] * c;
    }
    ev.gprime = ev.gprime_u * ev.du;
    ev.dgprime_dv = ev.g2_u * ev.du * ev.du + ev.gprime_u * ev.d2u;
    ev.ell = ev.gval + (beta.size() > 0 ? beta.dot(s.x.row(visit)) : 0.0);
    ev.mean = e.link.h(ev.ell);
    ev.th = e.link.theta(ev.ell);
    ev.thp = e.link.theta_prime(ev.ell);
    ev.resid = s.response[visit] - ev.mean;
    return ev;
}

void eval_subject_relocated(const EngineRef& e, const Eigen::VectorXd& lambda,
                            const Eigen::VectorXd& beta, int subject,
                            const Eigen::VectorXd& omega_w, int max_deriv,
                            std::vector<VisitEval>& out) {
    const int m = e.data->subjects[subject].visits();
    out.clear();
    out.reserve(m);
    const Eigen::RowVectorXd row = omega_w.transpose();
    for (int k = 0; k < m; ++k) out.push_back(eval_visit(e, lambda, beta, subject, k, row, max_deriv));
}

void eval_subject_own(const EngineRef& e, const Eigen::VectorXd& lambda,
                      const Eigen::VectorXd& beta, int subject, const Eigen::MatrixXd& w_visits,
                      int max_deriv, std::vector<VisitEval>& out) {
    const int m = e.data->subjects[subject].visits();
    out.clear();
    out.reserve(m);
    for (int k = 0; k < m; ++k)
        out.push_back(eval_visit(e, lambda, beta, subject, k, w_visits.row(k), max_deriv));
}

std::vector<Eigen::MatrixXd> weights_at_visits(const model::LongitudinalDataset& data,
                                               const WeightFunctionEstimate& w) {
    std::vector<Eigen::MatrixXd> out;
    out.reserve(data.n());
    for (const auto& s : data.subjects) {
        Eigen::MatrixXd wm(s.visits(), w.d_w());
        for (int k = 0; k < s.visits(); ++k) wm.row(k) = w.at(s.times[k]).transpose();
        out.push_back(std::move(wm));
    }
    return out;
}

// ---- step 1 ----

namespace {

void step1_assemble(const EngineRef& e, const Eigen::VectorXd& beta,
                    const std::vector<Eigen::MatrixXd>& w_visits, const Eigen::VectorXd& lambda,
                    Eigen::VectorXd* score, Eigen::MatrixXd* gn) {
    const int dl = e.basis->dim();
    if (score) score->setZero(dl);
    if (gn) gn->setZero(dl, dl);
    std::vector<VisitEval> ev;
    for (int i = 0; i < e.data->n(); ++i) {
        const int m = e.data->subjects[i].visits();
        eval_subject_own(e, lambda, beta, i, w_visits[i], 0, ev);
        const Eigen::MatrixXd& oi = e.omega->omega_inv[i];
        Eigen::VectorXd r(m);
        for (int k = 0; k < m; ++k) r[k] = ev[k].resid;
        const Eigen::VectorXd c = oi * r;
        for (int k = 0; k < m; ++k) {
            const auto& sp = ev[k].span;
            if (score) {
                const double w = ev[k].th * c[k];
                for (int a = 0; a < sp.count; ++a) (*score)[sp.first + a] += sp.value[a] * w;
            }
            if (gn) {
                for (int l = 0; l < m; ++l) {
                    const double coef = ev[k].th * oi(k, l) * ev[l].th;
                    if (coef == 0.0) continue;
                    const auto& sl = ev[l].span;
                    for (int a = 0; a < sp.count; ++a)
                        for (int b = 0; b < sl.count; ++b)
                            (*gn)(sp.first + a, sl.first + b) += coef * sp.value[a] * sl.value[b];
                }
            }
        }
    }
}

}  // namespace

Eigen::VectorXd step1_solve(const EngineRef& e, const Eigen::VectorXd& beta,
                            const std::vector<Eigen::MatrixXd>& w_visits,
                            const Eigen::VectorXd& lambda_init, const SolveOptions& opts,
                            double* out_norm) {
    const int dl = e.basis->dim();
    const int n = e.data->n();
    Eigen::VectorXd lambda = lambda_init.size() == dl ? lambda_init : Eigen::VectorXd::Zero(dl);
    Eigen::VectorXd score;
    Eigen::MatrixXd gn;
    step1_assemble(e, beta, w_visits, lambda, &score, &gn);

    const double diag_max = gn.diagonal().maxCoeff();
    std::vector<int> empty_cols;
    for (int j = 0; j < dl; ++j)
        if (gn(j, j) <= 1e-12 * std::max(diag_max, 1e-300)) empty_cols.push_back(j);
    if (!empty_cols.empty()) {
        std::ostringstream os;
        os << "spline system is rank deficient; no data mass in basis columns";
        for (int j : empty_cols) os << ' ' << j;
        os << " (reduce the interior knot count)";
        throw RankDeficiency(os.str(), empty_cols);
    }

    double norm = score.norm() / n;
    int it = 0;
    for (; it < opts.max_iterations && norm >= opts.tol; ++it) {
        Eigen::LDLT<Eigen::MatrixXd> ldlt(gn);
        if (ldlt.info() != Eigen::Success)
            throw RankDeficiency("spline normal matrix is not positive definite", {});
        const Eigen::VectorXd delta = ldlt.solve(score);
        double alpha = 1.0;
        bool accepted = false;
        for (int half = 0; half < 20; ++half, alpha *= 0.5) {
            const Eigen::VectorXd trial = lambda + alpha * delta;
            Eigen::VectorXd trial_score;
            step1_assemble(e, beta, w_visits, trial, &trial_score, nullptr);
            const double trial_norm = trial_score.norm() / n;
            if (trial_norm < norm) {
                lambda = trial;
                norm = trial_norm;
                accepted = true;
                break;
            }
        }
        if (!accepted)
            throw ConvergenceError("step 1 damped Newton stalled", norm, it);
        if (norm < opts.tol) break;
        step1_assemble(e, beta, w_visits, lambda, &score, &gn);
        norm = score.norm() / n;
    }
    if (norm >= opts.tol)
        throw ConvergenceError("step 1 did not converge", norm, it);
    if (out_norm) *out_norm = norm;
    return lambda;
}

Eigen::MatrixXd step1_jacobian_exact(const EngineRef& e, const Eigen::VectorXd& beta,
                                     const std::vector<Eigen::MatrixXd>& w_visits,
                                     const Eigen::VectorXd& lambda) {
    const int dl = e.basis->dim();
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(dl, dl);
    std::vector<VisitEval> ev;
    for (int i = 0; i < e.data->n(); ++i) {
        const int m = e.data->subjects[i].visits();
        eval_subject_own(e, lambda, beta, i, w_visits[i], 0, ev);
        const Eigen::MatrixXd& oi = e.omega->omega_inv[i];
        Eigen::VectorXd r(m);
        for (int k = 0; k < m; ++k) r[k] = ev[k].resid;
        const Eigen::VectorXd c = oi * r;
        for (int k = 0; k < m; ++k) {
            const auto& sp = ev[k].span;
            const double curv = ev[k].thp * c[k];
            for (int a = 0; a < sp.count; ++a)
                for (int b = 0; b < sp.count; ++b)
                    jac(sp.first + a, sp.first + b) += curv * sp.value[a] * sp.value[b];
            for (int l = 0; l < m; ++l) {
                const double coef = -ev[k].th * oi(k, l) * ev[l].th;
                const auto& sl = ev[l].span;
                for (int a = 0; a < sp.count; ++a)
                    for (int b = 0; b < sl.count; ++b)
                        jac(sp.first + a, sl.first + b) += coef * sp.value[a] * sl.value[b];
            }
        }
    }
    return jac;
}

Eigen::MatrixXd step1_dscore_dbeta(const EngineRef& e, const Eigen::VectorXd& beta,
                                   const std::vector<Eigen::MatrixXd>& w_visits,
                                   const Eigen::VectorXd& lambda) {
    const int dl = e.basis->dim();
    const int db = static_cast<int>(beta.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(dl, db);
    if (db == 0) return out;
    std::vector<VisitEval> ev;
    for (int i = 0; i < e.data->n(); ++i) {
        const model::Subject& s = e.data->subjects[i];
        const int m = s.visits();
        eval_subject_own(e, lambda, beta, i, w_visits[i], 0, ev);
        const Eigen::MatrixXd& oi = e.omega->omega_inv[i];
        Eigen::VectorXd r(m);
        for (int k = 0; k < m; ++k) r[k] = ev[k].resid;
        const Eigen::VectorXd c = oi * r;
        Eigen::MatrixXd tx(m, db);
        for (int l = 0; l < m; ++l) tx.row(l) = ev[l].th * s.x.row(l);
        for (int k = 0; k < m; ++k) {
            const auto& sp = ev[k].span;
            const Eigen::RowVectorXd cross = oi.row(k) * tx;
            for (int a = 0; a < sp.count; ++a) {
                const int col = sp.first + a;
                out.row(col) += sp.value[a] * (ev[k].thp * c[k] * s.x.row(k) - ev[k].th * cross);
            }
        }
    }
    return out;
}

Eigen::MatrixXd step1_dscore_dshift(const EngineRef& e, const Eigen::VectorXd& beta,
                                    const std::vector<Eigen::MatrixXd>& w_visits,
                                    const Eigen::VectorXd& lambda) {
    const int dl = e.basis->dim();
    const int dw = e.data->d_w;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(dl, dw);
    std::vector<VisitEval> ev;
    for (int i = 0; i < e.data->n(); ++i) {
        const model::Subject& s = e.data->subjects[i];
        const int m = s.visits();
        eval_subject_own(e, lambda, beta, i, w_visits[i], 1, ev);
        const Eigen::MatrixXd& oi = e.omega->omega_inv[i];
        Eigen::VectorXd r(m);
        for (int k = 0; k < m; ++k) r[k] = ev[k].resid;
        const Eigen::VectorXd c = oi * r;
        Eigen::MatrixXd tz(m, dw);
        for (int l = 0; l < m; ++l) tz.row(l) = ev[l].th * ev[l].gprime * s.z.row(l);
        for (int k = 0; k < m; ++k) {
            const auto& sp = ev[k].span;
            const Eigen::RowVectorXd cross = oi.row(k) * tz;
            for (int a = 0; a < sp.count; ++a) {
                const int col = sp.first + a;
                out.row(col) += (sp.deriv[a] * ev[k].du * ev[k].th * c[k] +
                                 sp.value[a] * ev[k].thp * ev[k].gprime * c[k]) *
                                    s.z.row(k) -
                                sp.value[a] * ev[k].th * cross;
            }
        }
    }
    return out;
}

Eigen::MatrixXd lambda_total_beta_sensitivity(const EngineRef& e, const Eigen::VectorXd& beta,
                                              const WeightFunctionEstimate& weights,
                                              const Eigen::VectorXd& lambda) {
    const auto wv = weights_at_visits(*e.data, weights);
    const int db = static_cast<int>(beta.size());
    Eigen::MatrixXd rhs = step1_dscore_dbeta(e, beta, wv, lambda);
    if (!weights.beta_sensitivity.empty()) {
        // chain through the response of the weight grid to beta
        std::vector<VisitEval> ev;
        for (int i = 0; i < e.data->n(); ++i) {
            const model::Subject& s = e.data->subjects[i];
            const int m = s.visits();
            eval_subject_own(e, lambda, beta, i, wv[i], 1, ev);
            const Eigen::MatrixXd& oi = e.omega->omega_inv[i];
            Eigen::VectorXd r(m);
            for (int k = 0; k < m; ++k) r[k] = ev[k].resid;
            const Eigen::VectorXd c = oi * r;
            Eigen::MatrixXd q(m, db);  // row l: z_l' Wbeta(T_l)
            for (int l = 0; l < m; ++l)
                q.row(l) = s.z.row(l) * weights.beta_sensitivity_at(s.times[l]);
            Eigen::MatrixXd tq(m, db);
            for (int l = 0; l < m; ++l) tq.row(l) = ev[l].th * ev[l].gprime * q.row(l);
            for (int k = 0; k < m; ++k) {
                const auto& sp = ev[k].span;
                const Eigen::RowVectorXd cross = oi.row(k) * tq;
                for (int a = 0; a < sp.count; ++a) {
                    const int col = sp.first + a;
                    rhs.row(col) += (sp.deriv[a] * ev[k].du * ev[k].th * c[k] +
                                     sp.value[a] * ev[k].thp * ev[k].gprime * c[k]) *
                                        q.row(k) -
                                    sp.value[a] * ev[k].th * cross;
                }
            }
        }
    }
    const Eigen::MatrixXd jac = step1_jacobian_exact(e, beta, wv, lambda);
    return -jac.partialPivLu().solve(rhs);
}

// ---- step 2 ----

void step2_score(const EngineRef& e, const Eigen::VectorXd& beta, const Eigen::VectorXd& lambda,
                 const Eigen::MatrixXd& jlw, double t0, const Eigen::VectorXd& omega_w,
                 Eigen::VectorXd* score, Eigen::MatrixXd* jac, double* kernel_mass) {
    const int dw = e.data->d_w;
    if (score) score->setZero(dw);
    if (jac) jac->setZero(dw, dw);
    double mass = 0.0;
    const double h = e.kernel.bandwidth;
    const double radius = e.kernel.support_radius() * h;
    std::vector<VisitEval> ev;
    Eigen::MatrixXd brackets;
    for (int i = 0; i < e.data->n(); ++i) {
        const model::Subject& s = e.data->subjects[i];
        const int m = s.visits();
        if (!e.pooled) {
            bool near = false;
            for (int k = 0; k < m; ++k)
                if (std::abs(s.times[k] - t0) <= radius) {
                    near = true;
                    break;
                }
            if (!near) continue;
        }
        Eigen::VectorXd kern(m);
        for (int k = 0; k < m; ++k) {
            kern[k] = e.pooled ? 1.0 : kernels::kernel_weight(e.kernel, s.times[k], t0);
            mass += kern[k];
        }
        eval_subject_relocated(e, lambda, beta, i, omega_w, jac ? 2 : 1, ev);
        const Eigen::MatrixXd& oi = e.omega->omega_inv[i];
        Eigen::VectorXd kr(m);
        for (int k = 0; k < m; ++k) kr[k] = kern[k] * ev[k].resid;
        const Eigen::VectorXd c = oi * kr;

        brackets.resize(dw, m);
        for (int k = 0; k < m; ++k) {
            Eigen::VectorXd b = ev[k].gprime * s.z.row(k).transpose();
            const auto& sp = ev[k].span;
            for (int a = 0; a < sp.count; ++a) b += sp.value[a] * jlw.row(sp.first + a).transpose();
            brackets.col(k) = b;
        }
        if (score)
            for (int k = 0; k < m; ++k) *score += brackets.col(k) * (ev[k].th * c[k]);
        if (jac) {
            Eigen::MatrixXd tz(m, dw);
            for (int l = 0; l < m; ++l)
                tz.row(l) = kern[l] * ev[l].th * ev[l].gprime * s.z.row(l);
            for (int k = 0; k < m; ++k) {
                const auto& sp = ev[k].span;
                Eigen::VectorXd db = ev[k].dgprime_dv * s.z.row(k).transpose();
                for (int a = 0; a < sp.count; ++a)
                    db += sp.deriv[a] * ev[k].du * jlw.row(sp.first + a).transpose();
                // d(b Theta c)/d omega: bracket derivative, Theta derivative,
                // residual derivative through every visit sharing Omega^{-1}
                *jac += (db * ev[k].th * c[k] + brackets.col(k) * ev[k].thp * ev[k].gprime * c[k]) *
                        s.z.row(k);
                const Eigen::RowVectorXd cross = oi.row(k) * tz;
                *jac -= brackets.col(k) * ev[k].th * cross;
            }
        }
    }
    if (kernel_mass) *kernel_mass = mass;
}

Step2Context make_step2_context(const EngineRef& e, const Eigen::VectorXd& beta,
                                const std::vector<Eigen::MatrixXd>& w_visits,
                                const Eigen::VectorXd& lambda, const SolveOptions& opts,
                                bool want_beta_fd) {
    Step2Context ctx;
    ctx.lambda = lambda;
    if (std::getenv("IDXF_NO_JLW")) {
        ctx.jlw = Eigen::MatrixXd::Zero(e.basis->dim(), e.data->d_w);
    } else {
        const Eigen::MatrixXd jac = step1_jacobian_exact(e, beta, w_visits, lambda);
        const Eigen::MatrixXd rhs = step1_dscore_dshift(e, beta, w_visits, lambda);
        ctx.jlw = -jac.partialPivLu().solve(rhs);
    }
    const int db = static_cast<int>(beta.size());
    if (want_beta_fd && db > 0) {
        ctx.has_beta_fd = true;
        ctx.fd_eps.resize(db);
        ctx.lambda_plus.resize(db);
        ctx.lambda_minus.resize(db);
        ctx.jlw_plus.resize(db);
        ctx.jlw_minus.resize(db);
        for (int j = 0; j < db; ++j) {
            const double eps = 1e-5 * (1.0 + std::abs(beta[j]));
            ctx.fd_eps[j] = eps;
            for (int sgn : {+1, -1}) {
                Eigen::VectorXd bj = beta;
                bj[j] += sgn * eps;
                const Eigen::VectorXd lj = step1_solve(e, bj, w_visits, lambda, opts, nullptr);
                const Eigen::MatrixXd jac = step1_jacobian_exact(e, bj, w_visits, lj);
                const Eigen::MatrixXd rhs = step1_dscore_dshift(e, bj, w_visits, lj);
                Eigen::MatrixXd jlw = -jac.partialPivLu().solve(rhs);
                if (sgn > 0) {
                    ctx.lambda_plus[j] = lj;
                    ctx.jlw_plus[j] = std::move(jlw);
                } else {
                    ctx.lambda_minus[j] = lj;
                    ctx.jlw_minus[j] = std::move(jlw);
                }
            }
        }
    }
    return ctx;
}

namespace {

// F = [ L' G ; sum(w) - 1 ] with L' the reduced-coordinate chain matrix.
Eigen::VectorXd reduce_score(const Eigen::VectorXd& g, const Eigen::VectorXd& w) {
    const int dw = static_cast<int>(g.size());
    Eigen::VectorXd f(dw);
    for (int j = 0; j < dw - 1; ++j) f[j] = g[j] - g[dw - 1];
    f[dw - 1] = w.sum() - 1.0;
    return f;
}

Eigen::MatrixXd reduce_jacobian(const Eigen::MatrixXd& jg) {
    const int dw = static_cast<int>(jg.rows());
    Eigen::MatrixXd jf(dw, dw);
    for (int j = 0; j < dw - 1; ++j) jf.row(j) = jg.row(j) - jg.row(dw - 1);
    jf.row(dw - 1).setOnes();
    return jf;
}

}  // namespace

Step2Result step2_point(const EngineRef& e, const Step2Context& ctx, const Eigen::VectorXd& beta,
                        double t0, const Eigen::VectorXd& warm, const SolveOptions& opts,
                        bool want_beta_sensitivity) {
    const int dw = e.data->d_w;
    const int db = static_cast<int>(beta.size());
    Step2Result out;
    if (dw == 1) {
        out.w = Eigen::VectorXd::Ones(1);
        Eigen::VectorXd g;
        step2_score(e, beta, ctx.lambda, ctx.jlw, t0, out.w, &g, nullptr, &out.kernel_mass);
        out.dw_dbeta = Eigen::MatrixXd::Zero(1, db);
        return out;
    }
    Eigen::VectorXd w = warm;
    w /= w.sum();

    Eigen::VectorXd g(dw);
    Eigen::MatrixXd jg(dw, dw);
    step2_score(e, beta, ctx.lambda, ctx.jlw, t0, w, &g, &jg, &out.kernel_mass);
    if (!e.pooled && out.kernel_mass < 5.0)
        throw InsufficientLocalData(
            "insufficient kernel mass for the local weight equation at t0=" + std::to_string(t0),
            t0, out.kernel_mass);
    const double scale = std::max(1.0, out.kernel_mass);
    Eigen::VectorXd f = reduce_score(g, w);
    double norm = f.norm() / scale;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu;
    Eigen::MatrixXd jf = reduce_jacobian(jg);
    int it = 0;
    for (; it < opts.max_iterations && norm >= opts.tol; ++it) {
        lu.compute(jf);
        const Eigen::VectorXd delta = lu.solve(-f);
        double alpha = 1.0;
        bool accepted = false;
        for (int half = 0; half < 20; ++half, alpha *= 0.5) {
            const Eigen::VectorXd trial = w + alpha * delta;
            Eigen::VectorXd gt;
            step2_score(e, beta, ctx.lambda, ctx.jlw, t0, trial, &gt, nullptr, nullptr);
            const Eigen::VectorXd ft = reduce_score(gt, trial);
            if (ft.norm() / scale < norm) {
                w = trial;
                accepted = true;
                break;
            }
        }
        if (!accepted)
            throw ConvergenceError("step 2 damped Newton stalled at t0=" + std::to_string(t0),
                                   norm, it);
        step2_score(e, beta, ctx.lambda, ctx.jlw, t0, w, &g, &jg, nullptr);
        f = reduce_score(g, w);
        jf = reduce_jacobian(jg);
        norm = f.norm() / scale;
    }
    if (norm >= opts.tol)
        throw ConvergenceError("step 2 did not converge at t0=" + std::to_string(t0), norm, it);
    out.w = w;
    out.all_positive = (w.array() > 0.0).all();
    out.iterations = it;
    out.final_norm = norm;
    if (want_beta_sensitivity && db > 0) {
        if (!ctx.has_beta_fd)
            throw InvalidArgument("step 2 context was built without beta sensitivity states");
        lu.compute(reduce_jacobian(jg));
        Eigen::MatrixXd df = Eigen::MatrixXd::Zero(dw, db);
        for (int j = 0; j < db; ++j) {
            Eigen::VectorXd bp = beta, bm = beta;
            bp[j] += ctx.fd_eps[j];
            bm[j] -= ctx.fd_eps[j];
            Eigen::VectorXd gp, gm;
            step2_score(e, bp, ctx.lambda_plus[j], ctx.jlw_plus[j], t0, w, &gp, nullptr, nullptr);
            step2_score(e, bm, ctx.lambda_minus[j], ctx.jlw_minus[j], t0, w, &gm, nullptr, nullptr);
            const Eigen::VectorXd dg = (gp - gm) / (2.0 * ctx.fd_eps[j]);
            for (int rrow = 0; rrow < dw - 1; ++rrow) df(rrow, j) = dg[rrow] - dg[dw - 1];
        }
        out.dw_dbeta = -lu.solve(df);
    } else {
        out.dw_dbeta = Eigen::MatrixXd();
    }
    return out;
}

Step2PassResult step2_pass(const EngineRef& e, const Eigen::VectorXd& beta,
                           const Eigen::VectorXd& lambda, const WeightFunctionEstimate& warm,
                           const Eigen::VectorXd& grid, const SolveOptions& opts,
                           bool want_beta_sensitivity, int threads) {
    const auto wv = weights_at_visits(*e.data, warm);
    const Step2Context ctx = make_step2_context(e, beta, wv, lambda, opts, want_beta_sensitivity);
    const int g = static_cast<int>(grid.size());
    Step2PassResult out;
    out.weights.grid = grid;
    out.weights.values.resize(g);
    if (want_beta_sensitivity) out.weights.beta_sensitivity.resize(g);
    std::vector<double> norms(g, 0.0);
    std::vector<int> nonneg(g, 0);
    parallel_for(g, threads, [&](int gi) {
        const Step2Result r = step2_point(e, ctx, beta, grid[gi], warm.at(grid[gi]), opts,
                                          want_beta_sensitivity);
        out.weights.values[gi] = r.w;
        if (want_beta_sensitivity) out.weights.beta_sensitivity[gi] = r.dw_dbeta;
        norms[gi] = r.final_norm;
        nonneg[gi] = r.all_positive ? 0 : 1;
    });
    for (int gi = 0; gi < g; ++gi) {
        out.max_norm = std::max(out.max_norm, norms[gi]);
        out.nonneg_warnings += nonneg[gi];
    }
    return out;
}

// ---- step 3 ----

Eigen::VectorXd step3_score(const EngineRef& e, const Eigen::VectorXd& beta, ProfileState& state,
                            const estimator::Step3Options& opts) {
    const int db = static_cast<int>(beta.size());
    const int dw = e.data->d_w;
    if (opts.fixed_weights) state.weights = *opts.fixed_weights;
    if (opts.fixed_lambda) {
        state.lambda = *opts.fixed_lambda;
        state.step1_norm = 0.0;
    }
    // profile (lambda, w) to a joint fixed point so the score is a
    // well-defined function of beta regardless of the warm start
    const bool solve_lambda = !opts.fixed_lambda;
    const bool solve_w = !opts.fixed_weights && dw > 1;
    const double profile_tol = std::max(opts.solve.tol, 1e-12);
    if (solve_lambda || solve_w) {
        for (int pass_no = 0;; ++pass_no) {
            double delta = 0.0;
            if (solve_lambda) {
                const Eigen::VectorXd prev = state.lambda;
                state.lambda = step1_solve(e, beta, weights_at_visits(*e.data, state.weights),
                                           state.lambda, opts.solve, &state.step1_norm);
                delta = std::max(delta, (state.lambda - prev).lpNorm<Eigen::Infinity>() /
                                            (1.0 + state.lambda.lpNorm<Eigen::Infinity>()));
            }
            if (solve_w) {
                Step2PassResult pass = step2_pass(e, beta, state.lambda, state.weights,
                                                  state.weights.grid, opts.solve, false,
                                                  opts.threads);
                for (std::size_t g = 0; g < pass.weights.values.size(); ++g)
                    delta = std::max(delta, (pass.weights.values[g] - state.weights.values[g])
                                                .lpNorm<Eigen::Infinity>());
                state.step2_norm = pass.max_norm;
                state.nonneg_warnings = pass.nonneg_warnings;
                state.weights = std::move(pass.weights);
            } else {
                break;  // a single full step-1 solve is already the fixed point
            }
            if (std::getenv("IDXF_DEBUG_STEP3"))
                fprintf(stderr, "[profile] pass=%d delta=%.3e\n", pass_no, delta);
            if (delta < profile_tol) break;
            if (pass_no >= 60)
                throw ConvergenceError("profile alternation did not reach a fixed point",
                                       delta, pass_no);
        }
        // attach the weight-grid beta sensitivities at the converged profile
        if (solve_w && db > 0) {
            Step2PassResult pass = step2_pass(e, beta, state.lambda, state.weights,
                                              state.weights.grid, opts.solve, true,
                                              opts.threads);
            state.weights = std::move(pass.weights);
        }
    }

    Eigen::MatrixXd jtot = Eigen::MatrixXd::Zero(e.basis->dim(), db);
    if (!opts.fixed_lambda)
        jtot = lambda_total_beta_sensitivity(e, beta, state.weights, state.lambda);

    const auto wv = weights_at_visits(*e.data, state.weights);
    Eigen::VectorXd score = Eigen::VectorXd::Zero(db);
    std::vector<VisitEval> ev;
    for (int i = 0; i < e.data->n(); ++i) {
        const model::Subject& s = e.data->subjects[i];
        const int m = s.visits();
        eval_subject_own(e, state.lambda, beta, i, wv[i], 1, ev);
        const Eigen::MatrixXd& oi = e.omega->omega_inv[i];
        Eigen::VectorXd r(m);
        for (int k = 0; k < m; ++k) r[k] = ev[k].resid;
        const Eigen::VectorXd c = oi * r;
        for (int k = 0; k < m; ++k) {
            Eigen::VectorXd bracket = s.x.row(k).transpose();
            const auto& sp = ev[k].span;
            for (int a = 0; a < sp.count; ++a)
                bracket += sp.value[a] * jtot.row(sp.first + a).transpose();
            const Eigen::MatrixXd wb = state.weights.beta_sensitivity_at(s.times[k]);
            if (wb.size() > 0)
                bracket += wb.transpose() * (ev[k].gprime * s.z.row(k).transpose());
            score += bracket * (ev[k].th * c[k]);
        }
    }
    return score;
}

estimator::Step3Result step3_solve(const EngineRef& e, const Eigen::VectorXd& beta_init,
                                   const ProfileState& state_init,
                                   const estimator::Step3Options& opts) {
    const int db = static_cast<int>(beta_init.size());
    const int n = e.data->n();
    estimator::Step3Result out;
    if (db == 0) {
        ProfileState state = state_init;
        step3_score(e, beta_init, state, opts);
        out.beta = beta_init;
        out.lambda = state.lambda;
        out.weights = state.weights;
        return out;
    }
    Eigen::VectorXd beta = beta_init;
    ProfileState state = state_init;
    Eigen::VectorXd score = step3_score(e, beta, state, opts);
    double norm = score.norm() / n;
    int it = 0;
    for (; it < opts.solve.max_iterations && norm >= opts.solve.tol; ++it) {
        Eigen::MatrixXd jac(db, db);
        for (int j = 0; j < db; ++j) {
            const double eps = 1e-5 * (1.0 + std::abs(beta[j]));
            Eigen::VectorXd bj = beta;
            bj[j] += eps;
            ProfileState tmp = state;
            const Eigen::VectorXd sj = step3_score(e, bj, tmp, opts);
            jac.col(j) = (sj - score) / eps;
        }
        const Eigen::VectorXd delta = jac.partialPivLu().solve(-score);
        if (std::getenv("IDXF_DEBUG_STEP3"))
            fprintf(stderr, "[step3] it=%d norm=%.6g delta=%.6g %.6g\n", it, norm, delta[0],
                    delta.size() > 1 ? delta[1] : 0.0);
        double alpha = 1.0;
        bool accepted = false;
        for (int half = 0; half < 20; ++half, alpha *= 0.5) {
            ProfileState trial_state = state;
            const Eigen::VectorXd trial = beta + alpha * delta;
            const Eigen::VectorXd trial_score = step3_score(e, trial, trial_state, opts);
            if (std::getenv("IDXF_DEBUG_STEP3"))
                fprintf(stderr, "[step3]   alpha=%g trial_norm=%.6g\n", alpha,
                        trial_score.norm() / n);
            if (trial_score.norm() / n < norm) {
                beta = trial;
                state = std::move(trial_state);
                score = trial_score;
                norm = score.norm() / n;
                accepted = true;
                break;
            }
        }
        if (!accepted) throw ConvergenceError("step 3 damped Newton stalled", norm, it);
    }
    if (norm >= opts.solve.tol)
        throw ConvergenceError("step 3 did not converge", norm, it);
    out.beta = beta;
    out.lambda = state.lambda;
    out.weights = state.weights;
    out.norm = norm;
    out.iterations = it;
    return out;
}

// ---- initialization + full loop ----

std::vector<Eigen::VectorXd> variance_weights(const model::LongitudinalDataset& data,
                                              model::LinkFunction link,
                                              const std::vector<Eigen::VectorXd>& eta) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(data.n());
    for (int i = 0; i < data.n(); ++i) {
        const int m = data.subjects[i].visits();
        Eigen::VectorXd v(m);
        for (int k = 0; k < m; ++k) v[k] = std::max(link.theta(eta[i][k]), 1e-6);
        out.push_back(std::move(v));
    }
    return out;
}

Eigen::VectorXd default_time_grid(const model::LongitudinalDataset& data,
                                  const kernels::KernelSpec& kernel, int size) {
    std::vector<double> times = data.pooled_times();
    std::sort(times.begin(), times.end());
    auto quant = [&](double p) {
        const double pos = p * (times.size() - 1);
        const std::size_t i = static_cast<std::size_t>(pos);
        if (i + 1 >= times.size()) return times.back();
        return times[i] * (1.0 - (pos - i)) + times[i + 1] * (pos - i);
    };
    double lo = quant(0.02), hi = quant(0.98);
    if (!(hi > lo)) {
        Eigen::VectorXd g(1);
        g << times[times.size() / 2];
        return g;
    }
    // Trim to the widest contiguous window whose kernel mass is comfortably
    // above the local-data threshold, so extreme order statistics cannot
    // produce unsolvable grid points.
    const int probes = 160;
    std::vector<char> ok(probes, 0);
    for (int p = 0; p < probes; ++p) {
        const double t = lo + (hi - lo) * p / (probes - 1);
        double mass = 0.0;
        for (double tk : times) {
            const double s = std::abs(tk - t);
            if (s <= kernel.support_radius() * kernel.bandwidth)
                mass += kernels::kernel_weight(kernel, tk, t);
        }
        ok[p] = mass >= 10.0 ? 1 : 0;
    }
    int best_lo = 0, best_len = 0, cur_lo = 0, cur_len = 0;
    for (int p = 0; p < probes; ++p) {
        if (ok[p]) {
            if (cur_len == 0) cur_lo = p;
            ++cur_len;
            if (cur_len > best_len) {
                best_len = cur_len;
                best_lo = cur_lo;
            }
        } else {
            cur_len = 0;
        }
    }
    if (best_len >= 2) {
        const double wlo = lo + (hi - lo) * best_lo / (probes - 1);
        const double whi = lo + (hi - lo) * (best_lo + best_len - 1) / (probes - 1);
        lo = wlo;
        hi = whi;
    }
    Eigen::VectorXd grid(size);
    for (int g = 0; g < size; ++g) grid[g] = lo + (hi - lo) * g / (size - 1);
    return grid;
}

namespace {

struct InitFit {
    Eigen::VectorXd beta;
    double intercept = 0.0;
    double slope = 0.0;
    std::vector<Eigen::VectorXd> eta;  // per subject fitted predictors
};

// Plain GLM pass (independence working model) on [1, u0, X].
InitFit initial_glm(const model::LongitudinalDataset& data, model::LinkFunction link,
                    const std::vector<Eigen::VectorXd>& u0) {
    const int db = data.d_beta;
    const int p = 2 + db;
    Eigen::VectorXd coef = Eigen::VectorXd::Zero(p);
    const int max_iter = link.family == model::LinkFamily::identity ? 1 : 30;
    for (int iter = 0; iter < max_iter; ++iter) {
        Eigen::MatrixXd xtwx = Eigen::MatrixXd::Zero(p, p);
        Eigen::VectorXd xtwz = Eigen::VectorXd::Zero(p);
        for (int i = 0; i < data.n(); ++i) {
            const model::Subject& s = data.subjects[i];
            for (int k = 0; k < s.visits(); ++k) {
                Eigen::VectorXd row(p);
                row[0] = 1.0;
                row[1] = u0[i][k];
                for (int j = 0; j < db; ++j) row[2 + j] = s.x(k, j);
                const double eta = row.dot(coef);
                const double w = std::max(link.theta(eta), 1e-6);
                const double z = eta + (s.response[k] - link.h(eta)) / w;
                xtwx.noalias() += w * row * row.transpose();
                xtwz.noalias() += w * z * row;
            }
        }
        const Eigen::VectorXd next = xtwx.ldlt().solve(xtwz);
        const double delta = (next - coef).lpNorm<Eigen::Infinity>();
        coef = next;
        if (delta < 1e-10) break;
    }
    InitFit out;
    out.intercept = coef[0];
    out.slope = coef[1];
    out.beta = coef.tail(db);
    out.eta.reserve(data.n());
    for (int i = 0; i < data.n(); ++i) {
        const model::Subject& s = data.subjects[i];
        Eigen::VectorXd eta(s.visits());
        for (int k = 0; k < s.visits(); ++k) {
            double v = coef[0] + coef[1] * u0[i][k];
            for (int j = 0; j < db; ++j) v += coef[2 + j] * s.x(k, j);
            eta[k] = v;
        }
        out.eta.push_back(std::move(eta));
    }
    return out;
}

}  // namespace

EngineFit fit_profile(const model::LongitudinalDataset& data, const EngineConfig& config) {
    data.validate();
    const int n = data.n();
    const int dw = data.d_w;
    const int db = data.d_beta;

    kernels::KernelSpec kernel;
    kernel.family = config.kernel_family;
    if (config.bandwidth) {
        kernel.bandwidth = *config.bandwidth;
    } else {
        const std::vector<double> times = data.pooled_times();
        const double hs = kernels::silverman_bandwidth(times);
        kernel.bandwidth = kernels::undersmoothed_bandwidth(n, hs) * config.bandwidth_scale;
    }
    kernel.validate();

    // initial pass: constant weights, linear m
    const Eigen::VectorXd w0 = Eigen::VectorXd::Constant(dw, 1.0 / dw);
    std::vector<Eigen::MatrixXd> w_visits0;
    w_visits0.reserve(n);
    for (const auto& s : data.subjects)
        w_visits0.push_back(Eigen::MatrixXd::Constant(s.visits(), dw, 1.0 / dw));

    IndexTransform tfm;
    if (config.tfm_kind == IndexTransform::Kind::normal_cdf) {
        const model::Standardizer st = model::build_standardizer(data, w_visits0);
        tfm = IndexTransform::normal(st);
    } else {
        double vlo = std::numeric_limits<double>::infinity();
        double vhi = -vlo;
        for (const auto& s : data.subjects)
            for (int k = 0; k < s.visits(); ++k) {
                const double v = w0.dot(s.z.row(k));
                vlo = std::min(vlo, v);
                vhi = std::max(vhi, v);
            }
        if (!(vhi > vlo)) throw DegenerateIndex("index values are constant");
        const double margin = 0.05 * (vhi - vlo);
        tfm = IndexTransform::affine(vlo - margin, vhi + margin);
    }

    std::vector<Eigen::VectorXd> u0;
    u0.reserve(n);
    for (const auto& s : data.subjects) {
        Eigen::VectorXd u(s.visits());
        for (int k = 0; k < s.visits(); ++k) u[k] = clamp_unit(tfm.map(w0.dot(s.z.row(k))));
        u0.push_back(std::move(u));
    }
    model::LinkFunction the_link;
    the_link.family = config.link;
    const InitFit init = initial_glm(data, the_link, u0);

    // frozen working covariance from the initial pass
    std::vector<Eigen::VectorXd> varw = variance_weights(data, the_link, init.eta);
    double dispersion = 1.0;
    if (the_link.family == model::LinkFamily::identity) {
        double ss = 0.0;
        long count = 0;
        for (int i = 0; i < n; ++i) {
            const model::Subject& s = data.subjects[i];
            for (int k = 0; k < s.visits(); ++k) {
                const double r = s.response[k] - the_link.h(init.eta[i][k]);
                ss += r * r;
                ++count;
            }
        }
        const long dof = std::max<long>(1, count - (2 + db));
        dispersion = std::max(ss / dof, 1e-12);
    }
    std::vector<Eigen::VectorXd> std_resid;
    std_resid.reserve(n);
    for (int i = 0; i < n; ++i) {
        const model::Subject& s = data.subjects[i];
        Eigen::VectorXd e(s.visits());
        for (int k = 0; k < s.visits(); ++k)
            e[k] = (s.response[k] - the_link.h(init.eta[i][k])) /
                   std::sqrt(varw[i][k] * dispersion);
        std_resid.push_back(std::move(e));
    }
    model::WorkingCovariance cov =
        model::build_working_covariance(config.covariance, data, std_resid, dispersion);
    OmegaSet omega = estimator::build_omega_set(cov, data, varw);

    EngineRef engine{&data, &config.basis, the_link, tfm, &omega, kernel, config.pooled};

    // spline coefficients representing the initial linear m
    const int dl = config.basis.dim();
    Eigen::VectorXd lambda(dl);
    for (int j = 0; j < dl; ++j)
        lambda[j] = config.basis.order >= 2
                        ? init.intercept + init.slope * config.basis.greville(j)
                        : init.intercept;

    Eigen::VectorXd grid;
    if (config.pooled) {
        grid.resize(1);
        grid << 0.5 * (data.min_time() + data.max_time());
    } else {
        grid = default_time_grid(data, kernel, config.grid_size);
    }
    WeightFunctionEstimate weights;
    weights.grid = grid;
    weights.values.assign(grid.size(), w0);

    const SolveOptions solve{config.inner_tol, config.max_inner};
    estimator::Step3Options s3opts;
    s3opts.solve = solve;
    s3opts.threads = config.threads;

    Eigen::VectorXd beta = init.beta;
    EngineFit out;
    out.diag.interior_knots = config.basis.interior_knot_count;
    out.diag.bandwidth = kernel.bandwidth;

    Eigen::VectorXd lambda_prev = lambda;
    bool converged = false;
    int outer = 0;
    for (; outer < config.max_outer; ++outer) {
        lambda = step1_solve(engine, beta, weights_at_visits(data, weights), lambda, solve,
                             &out.diag.step1_norm);
        if (dw > 1) {
            Step2PassResult pass = step2_pass(engine, beta, lambda, weights, grid, solve,
                                              db > 0, config.threads);
            weights = std::move(pass.weights);
            out.diag.step2_norm = pass.max_norm;
            out.diag.nonneg_warnings = pass.nonneg_warnings;
        }
        if (db > 0) {
            ProfileState state{lambda, weights, out.diag.step1_norm, out.diag.step2_norm,
                               out.diag.nonneg_warnings};
            const estimator::Step3Result s3 = step3_solve(engine, beta, state, s3opts);
            const double delta = (s3.beta - beta).lpNorm<Eigen::Infinity>();
            beta = s3.beta;
            lambda = s3.lambda;
            weights = s3.weights;
            out.diag.step3_norm = s3.norm;
            out.diag.step3_iterations = s3.iterations;
            if (delta < config.outer_tol) {
                converged = true;
                ++outer;
                break;
            }
        } else {
            const double delta = (lambda - lambda_prev).lpNorm<Eigen::Infinity>() /
                                 (1.0 + lambda.lpNorm<Eigen::Infinity>());
            lambda_prev = lambda;
            if (outer > 0 && delta < config.outer_tol) {
                converged = true;
                ++outer;
                break;
            }
        }
    }
    if (!converged)
        throw FitError("outer profiling loop did not converge within max_outer_iterations",
                       out.diag.step3_norm, outer);

    out.beta = beta;
    out.lambda = lambda;
    out.weights = weights;
    out.tfm = tfm;
    out.cov = cov;
    out.omega = std::move(omega);
    out.kernel = kernel;
    out.diag.outer_iterations = outer;
    out.diag.converged = converged;
    return out;
}

}  // namespace indexfuse::internal

// ============================ public wrappers ============================

namespace indexfuse::estimator {

namespace {

internal::EngineRef make_engine(const Problem& p, bool pooled = false) {
    internal::EngineRef e;
    e.data = p.data;
    e.basis = &p.basis;
    e.link = p.link;
    e.tfm = internal::IndexTransform::normal(p.standardizer);
    e.omega = &p.omega;
    e.kernel = p.kernel;
    e.pooled = pooled;
    return e;
}

}  // namespace

Eigen::VectorXd step1_solve_lambda(const Problem& problem, const Eigen::VectorXd& beta,
                                   const WeightFunctionEstimate& weights,
                                   const SolveOptions& opts) {
    const internal::EngineRef e = make_engine(problem);
    return internal::step1_solve(e, beta, internal::weights_at_visits(*problem.data, weights),
                                 Eigen::VectorXd(), opts, nullptr);
}

Eigen::MatrixXd lambda_beta_sensitivity(const Problem& problem, const Eigen::VectorXd& beta,
                                        const WeightFunctionEstimate& weights,
                                        const Eigen::VectorXd& lambda) {
    const internal::EngineRef e = make_engine(problem);
    const auto wv = internal::weights_at_visits(*problem.data, weights);
    const Eigen::MatrixXd jac = internal::step1_jacobian_exact(e, beta, wv, lambda);
    const Eigen::MatrixXd rhs = internal::step1_dscore_dbeta(e, beta, wv, lambda);
    return -jac.partialPivLu().solve(rhs);
}

Eigen::MatrixXd lambda_shift_sensitivity(const Problem& problem, const Eigen::VectorXd& beta,
                                         const WeightFunctionEstimate& weights,
                                         const Eigen::VectorXd& lambda) {
    const internal::EngineRef e = make_engine(problem);
    const auto wv = internal::weights_at_visits(*problem.data, weights);
    const Eigen::MatrixXd jac = internal::step1_jacobian_exact(e, beta, wv, lambda);
    const Eigen::MatrixXd rhs = internal::step1_dscore_dshift(e, beta, wv, lambda);
    return -jac.partialPivLu().solve(rhs);
}

Eigen::MatrixXd lambda_total_beta_sensitivity(const Problem& problem,
                                              const Eigen::VectorXd& beta,
                                              const WeightFunctionEstimate& weights,
                                              const Eigen::VectorXd& lambda) {
    const internal::EngineRef e = make_engine(problem);
    return internal::lambda_total_beta_sensitivity(e, beta, weights, lambda);
}

Step2Result step2_solve_w_at(const Problem& problem, const Eigen::VectorXd& beta,
                             const Eigen::VectorXd& lambda,
                             const WeightFunctionEstimate& current_weights, double t0,
                             const Eigen::VectorXd& warm_start, const SolveOptions& opts,
                             bool want_beta_sensitivity) {
    const internal::EngineRef e = make_engine(problem);
    const auto wv = internal::weights_at_visits(*problem.data, current_weights);
    const internal::Step2Context ctx =
        internal::make_step2_context(e, beta, wv, lambda, opts, want_beta_sensitivity);
    return internal::step2_point(e, ctx, beta, t0, warm_start, opts, want_beta_sensitivity);
}

WeightFunctionEstimate step2_solve_w(const Problem& problem, const Eigen::VectorXd& beta,
                                     const Eigen::VectorXd& lambda,
                                     const WeightFunctionEstimate& warm,
                                     const Eigen::VectorXd& grid, const SolveOptions& opts,
                                     bool want_beta_sensitivity, int threads) {
    const internal::EngineRef e = make_engine(problem);
    internal::Step2PassResult pass =
        internal::step2_pass(e, beta, lambda, warm, grid, opts, want_beta_sensitivity, threads);
    return std::move(pass.weights);
}

Step3Result step3_solve_beta(const Problem& problem, const Eigen::VectorXd& beta_init,
                             const Eigen::VectorXd& lambda_init,
                             const WeightFunctionEstimate& weights_init,
                             const Step3Options& opts) {
    const internal::EngineRef e = make_engine(problem);
    internal::ProfileState state;
    state.lambda = lambda_init;
    state.weights = weights_init;
    return internal::step3_solve(e, beta_init, state, opts);
}

// ---- ModelFit ----

double ModelFit::index_u(const Eigen::VectorXd& z, double t) const {
    const Eigen::VectorXd w = weights.at(t);
    return clamp_unit(standardizer.transform(w.dot(z)));
}

double ModelFit::m_hat(double u) const {
    return splines::eval_basis(basis, clamp_unit(u)).dot(lambda);
}

double ModelFit::linear_predictor(const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                                  double t) const {
    double ell = m_hat(index_u(z, t));
    if (beta.size() > 0) ell += beta.dot(x);
    return ell;
}

double ModelFit::predict_mean(const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                              double t) const {
    model::LinkFunction lf{link};
    return lf.h(linear_predictor(z, x, t));
}

void ModelFit::validate(double inner_tol) const {
    const double cap = 10.0 * inner_tol;
    if (diagnostics.step1_norm >= cap || diagnostics.step2_norm >= cap ||
        diagnostics.step3_norm >= cap)
        throw FitError("final estimating-equation norms exceed 10x the inner tolerance",
                       std::max({diagnostics.step1_norm, diagnostics.step2_norm,
                                 diagnostics.step3_norm}),
                       diagnostics.outer_iterations);
    weights.validate();
}

ModelFit fit(const model::LongitudinalDataset& dataset, const FitConfig& config) {
    config.validate();
    dataset.validate();
    const int n = dataset.n();
    const int knots = config.interior_knots ? *config.interior_knots
                                            : splines::knot_count_rule(n);

    internal::EngineConfig ec;
    ec.basis = splines::build_basis(config.spline_order, knots, 0.0, 1.0);
    ec.link = config.link;
    ec.tfm_kind = internal::IndexTransform::Kind::normal_cdf;
    ec.pooled = false;
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

    internal::EngineFit ef = internal::fit_profile(dataset, ec);

    ModelFit mf;
    mf.beta = ef.beta;
    mf.lambda = ef.lambda;
    mf.weights = ef.weights;
    mf.standardizer = ef.tfm.as_standardizer();
    mf.basis = ec.basis;
    mf.link = ec.link;
    mf.covariance = ef.cov.structure;
    mf.rho = ef.cov.fell_back_to_independence ? 0.0 : ef.cov.rho;
    mf.dispersion = ef.cov.dispersion;
    mf.kernel = ef.kernel;
    mf.diagnostics = ef.diag;
    mf.validate(config.inner_tol);

    if (config.compute_beta_se && dataset.d_beta > 0) {
        const Eigen::MatrixXd cov_beta = inference::beta_covariance(mf, dataset);
        mf.beta_se = cov_beta.diagonal().cwiseMax(0.0).cwiseSqrt();
    }
    return mf;
}

}  // namespace indexfuse::estimator
