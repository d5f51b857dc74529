#include "indexfuse/inference.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "indexfuse/errors.hpp"
#include "indexfuse/parallel.hpp"
#include "profiling.hpp"

namespace indexfuse::inference {

using internal::EngineRef;
using internal::VisitEval;

namespace {

Eigen::VectorXd nw_query(const Eigen::VectorXd& u_samples, const Eigen::MatrixXd& targets,
                         double bandwidth, double u, bool* fallback) {
    const Eigen::Index nv = u_samples.size();
    Eigen::VectorXd num = Eigen::VectorXd::Zero(targets.cols());
    double den = 0.0;
    for (Eigen::Index i = 0; i < nv; ++i) {
        const double k = kernels::kernel_value(kernels::KernelFamily::gaussian,
                                               (u_samples[i] - u) / bandwidth);
        den += k;
        num.noalias() += k * targets.row(i).transpose();
    }
    if (den < 1e-10) {
        if (fallback) *fallback = true;
        Eigen::Index best = 0;
        double dist = std::abs(u_samples[0] - u);
        for (Eigen::Index i = 1; i < nv; ++i) {
            const double d = std::abs(u_samples[i] - u);
            if (d < dist) {
                dist = d;
                best = i;
            }
        }
        return targets.row(best).transpose();
    }
    return num / den;
}

}  // namespace

Eigen::VectorXd ProjectionEstimates::delta(double u) const {
    return nw_query(u_samples, delta_targets, bandwidth, u,
                    const_cast<bool*>(&fallback_used));
}

Eigen::VectorXd ProjectionEstimates::eta(double u) const {
    return nw_query(u_samples, eta_targets, bandwidth, u, const_cast<bool*>(&fallback_used));
}

Eigen::VectorXd ProjectionEstimates::gamma(double u) const {
    return nw_query(u_samples, gamma_targets, bandwidth, u, const_cast<bool*>(&fallback_used));
}

// ---------------------------------------------------------------------------

struct InferenceEngine::Impl {
    const estimator::ModelFit* fit;
    const model::LongitudinalDataset* data;
    estimator::OmegaSet omega;
    EngineRef engine;
    int n = 0, dw = 0, db = 0, dl = 0;

    std::vector<std::vector<VisitEval>> own;  // per subject, own times
    std::vector<Eigen::MatrixXd> wv;          // weights at visits

    ProjectionEstimates proj;

    // time-grid functions (grid shared with the fitted weight estimate)
    Eigen::VectorXd grid;
    std::vector<Eigen::MatrixXd> bhat;      // d_w x d_w
    std::vector<Eigen::MatrixXd> psihat;    // d_w x d_beta
    std::vector<Eigen::MatrixXd> gammahat;  // d_beta x d_w

    // spline-equation pieces
    Eigen::MatrixXd vhat;         // d_l x d_l
    Eigen::MatrixXd mhat_lambda;  // d_l x d_l
    Eigen::LDLT<Eigen::MatrixXd> vhat_ldlt;

    Eigen::MatrixXd fhat;  // d_beta x d_beta
    Eigen::MatrixXd ghat;  // d_beta x d_l

    Eigen::MatrixXd sigma_raw, sigma_repaired;

    // density of visit times
    std::vector<double> times_sorted;
    double f_bandwidth = 0.0;

    // weight-uncertainty middle matrix for Theorem-3 bands
    bool has_m_variance = false;
    Eigen::MatrixXd xi_outer;  // d_l x d_l

    double f_t(double t) const {
        double mass = 0.0;
        const kernels::KernelSpec ks{fit->kernel.family, f_bandwidth};
        for (double tk : times_sorted) mass += kernels::kernel_weight(ks, tk, t);
        return mass / times_sorted.size();
    }

    template <typename Fn>
    void interp_grid(double t, Fn&& fn) const {
        const int g = static_cast<int>(grid.size());
        if (g == 1 || t <= grid[0]) {
            fn(0, 0, 1.0);
            return;
        }
        if (t >= grid[g - 1]) {
            fn(g - 1, g - 1, 1.0);
            return;
        }
        const int hi =
            static_cast<int>(std::upper_bound(grid.data(), grid.data() + g, t) - grid.data());
        const double frac = (t - grid[hi - 1]) / (grid[hi] - grid[hi - 1]);
        fn(hi - 1, hi, 1.0 - frac);
    }

    Eigen::MatrixXd bhat_at(double t) const {
        Eigen::MatrixXd out;
        interp_grid(t, [&](int lo, int hi, double wlo) {
            out = wlo * bhat[lo] + (1.0 - wlo) * bhat[hi];
        });
        return out;
    }
    Eigen::MatrixXd psihat_at(double t) const {
        Eigen::MatrixXd out;
        interp_grid(t, [&](int lo, int hi, double wlo) {
            out = wlo * psihat[lo] + (1.0 - wlo) * psihat[hi];
        });
        return out;
    }
    Eigen::MatrixXd gammahat_at(double t) const {
        Eigen::MatrixXd out;
        interp_grid(t, [&](int lo, int hi, double wlo) {
            out = wlo * gammahat[lo] + (1.0 - wlo) * gammahat[hi];
        });
        return out;
    }

    // population-form w bracket at a relocated evaluation
    Eigen::VectorXd popw(const model::Subject& s, int k, const VisitEval& ev) const {
        return ev.gprime * s.z.row(k).transpose() - proj.eta(ev.u);
    }

    // kernel-weighted local score of subject j relocated to t0 (collapsed form)
    Eigen::VectorXd local_score(int j, double t0, bool kernel_weighted) const {
        const model::Subject& s = data->subjects[j];
        const int m = s.visits();
        std::vector<VisitEval> ev;
        internal::eval_subject_relocated(engine, fit->lambda, fit->beta, j,
                                         fit->weights.at(t0), 1, ev);
        Eigen::VectorXd kr(m);
        for (int k = 0; k < m; ++k) {
            const double kw =
                kernel_weighted ? kernels::kernel_weight(fit->kernel, s.times[k], t0) : 1.0;
            kr[k] = kw * ev[k].resid;
        }
        const Eigen::VectorXd c = omega.omega_inv[j] * kr;
        Eigen::VectorXd out = Eigen::VectorXd::Zero(dw);
        for (int k = 0; k < m; ++k) out += popw(s, k, ev[k]) * (ev[k].th * c[k]);
        return out;
    }

    void build(const EngineOptions& options);
    void build_grid_functions(int threads);
    void build_beta_pieces();
    void build_xi(int threads);
};

void InferenceEngine::Impl::build(const EngineOptions& options) {
    n = data->n();
    dw = data->d_w;
    db = data->d_beta;
    dl = fit->basis.dim();

    // working covariance rebuilt from final fitted values
    wv = internal::weights_at_visits(*data, fit->weights);
    model::LinkFunction link{fit->link};
    std::vector<Eigen::VectorXd> eta;
    eta.reserve(n);
    for (int i = 0; i < n; ++i) {
        const model::Subject& s = data->subjects[i];
        Eigen::VectorXd e(s.visits());
        for (int k = 0; k < s.visits(); ++k)
            e[k] = fit->linear_predictor(s.z.row(k).transpose(), s.x.row(k).transpose(),
                                         s.times[k]);
        eta.push_back(std::move(e));
    }
    model::WorkingCovariance cov;
    cov.structure = fit->covariance;
    cov.rho = fit->rho;
    cov.dispersion = fit->dispersion;
    omega = estimator::build_omega_set(cov, *data,
                                       internal::variance_weights(*data, link, eta));

    engine = EngineRef{data, &fit->basis, link,
                       internal::IndexTransform::normal(fit->standardizer), &omega,
                       fit->kernel, false};

    own.resize(n);
    for (int i = 0; i < n; ++i)
        internal::eval_subject_own(engine, fit->lambda, fit->beta, i, wv[i], 1, own[i]);

    // index projections (delta, eta); gamma targets attached after the grid pass
    const int nv = data->total_visits();
    proj.u_samples.resize(nv);
    proj.delta_targets.resize(nv, db);
    proj.eta_targets.resize(nv, dw);
    proj.gamma_targets = Eigen::MatrixXd::Zero(nv, db);
    {
        int row = 0;
        for (int i = 0; i < n; ++i) {
            const model::Subject& s = data->subjects[i];
            for (int k = 0; k < s.visits(); ++k, ++row) {
                proj.u_samples[row] = own[i][k].u;
                proj.delta_targets.row(row) = s.x.row(k);
                proj.eta_targets.row(row) = own[i][k].gprime * s.z.row(k);
            }
        }
    }
    proj.bandwidth = kernels::silverman_bandwidth(
        std::span<const double>(proj.u_samples.data(), proj.u_samples.size()));

    times_sorted = data->pooled_times();
    std::sort(times_sorted.begin(), times_sorted.end());
    f_bandwidth = kernels::silverman_bandwidth(times_sorted);

    grid = fit->weights.grid;
    build_grid_functions(options.threads);
    build_beta_pieces();
    if (options.build_m_variance) {
        build_xi(options.threads);
        has_m_variance = true;
    }
}

void InferenceEngine::Impl::build_grid_functions(int threads) {
    const int g = static_cast<int>(grid.size());
    bhat.assign(g, Eigen::MatrixXd());
    psihat.assign(g, Eigen::MatrixXd());
    parallel_for(g, threads, [&](int gi) {
        const double t = grid[gi];
        const Eigen::VectorXd w = fit->weights.at(t);
        Eigen::MatrixXd bh = Eigen::MatrixXd::Zero(dw, dw);
        Eigen::MatrixXd ps = Eigen::MatrixXd::Zero(dw, db);
        std::vector<VisitEval> ev;
        for (int i = 0; i < n; ++i) {
            const model::Subject& s = data->subjects[i];
            const int m = s.visits();
            internal::eval_subject_relocated(engine, fit->lambda, fit->beta, i, w, 1, ev);
            Eigen::MatrixXd p(dw, m);   // population w brackets (columns)
            Eigen::MatrixXd gz(m, dw);  // rows: Theta * gprime * z
            Eigen::MatrixXd tx(m, db);  // rows: Theta * x
            for (int k = 0; k < m; ++k) {
                p.col(k) = popw(s, k, ev[k]) * ev[k].th;
                gz.row(k) = ev[k].th * ev[k].gprime * s.z.row(k);
                tx.row(k) = ev[k].th * s.x.row(k);
            }
            const Eigen::MatrixXd po = p * omega.omega_inv[i];
            bh.noalias() += po * gz;
            if (db > 0) ps.noalias() -= po * tx;
        }
        bhat[gi] = bh / n;
        psihat[gi] = ps / n;
    });

    // gamma projection targets need bhat/psihat at each visit time
    if (db > 0) {
        int row = 0;
        for (int i = 0; i < n; ++i) {
            const model::Subject& s = data->subjects[i];
            for (int k = 0; k < s.visits(); ++k, ++row) {
                const Eigen::MatrixXd bh = bhat_at(s.times[k]);
                const Eigen::MatrixXd ps = psihat_at(s.times[k]);
                const Eigen::MatrixXd feed = bh.partialPivLu().solve(ps);  // d_w x d_beta
                proj.gamma_targets.row(row) =
                    (feed.transpose() * s.z.row(k).transpose() * own[i][k].gprime).transpose();
            }
        }
    }

    // Gamma-hat grid (beta-equation sensitivity to the weight function)
    gammahat.assign(g, Eigen::MatrixXd());
    parallel_for(g, threads, [&](int gi) {
        const double t = grid[gi];
        const Eigen::VectorXd w = fit->weights.at(t);
        const Eigen::MatrixXd bh_inv_ps =
            db > 0 ? Eigen::MatrixXd(bhat[gi].partialPivLu().solve(psihat[gi]))
                   : Eigen::MatrixXd::Zero(dw, 0);
        Eigen::MatrixXd gm = Eigen::MatrixXd::Zero(db, dw);
        if (db == 0) {
            gammahat[gi] = gm;
            return;
        }
        std::vector<VisitEval> ev;
        for (int i = 0; i < n; ++i) {
            const model::Subject& s = data->subjects[i];
            const int m = s.visits();
            internal::eval_subject_relocated(engine, fit->lambda, fit->beta, i, w, 1, ev);
            Eigen::MatrixXd c(db, m);
            Eigen::MatrixXd gz(m, dw);
            for (int k = 0; k < m; ++k) {
                const Eigen::VectorXd q =
                    bh_inv_ps.transpose() * s.z.row(k).transpose() * ev[k].gprime;
                c.col(k) = (s.x.row(k).transpose() - proj.delta(ev[k].u) - q +
                            proj.gamma(ev[k].u)) *
                           ev[k].th;
                gz.row(k) = ev[k].th * ev[k].gprime * s.z.row(k);
            }
            gm.noalias() += c * omega.omega_inv[i] * gz;
        }
        gammahat[gi] = gm / n;
    });
}

void InferenceEngine::Impl::build_beta_pieces() {
    vhat = Eigen::MatrixXd::Zero(dl, dl);
    mhat_lambda = Eigen::MatrixXd::Zero(dl, dl);
    fhat = Eigen::MatrixXd::Zero(db, db);
    ghat = Eigen::MatrixXd::Zero(db, dl);

    std::vector<Eigen::VectorXd> psi1(n), psi3(n), psi2(n);
    std::vector<Eigen::MatrixXd> popx_cols(n);  // d_beta x M_i

    for (int i = 0; i < n; ++i) {
        const model::Subject& s = data->subjects[i];
        const int m = s.visits();
        const Eigen::MatrixXd& oi = omega.omega_inv[i];
        Eigen::MatrixXd q(m, dl);  // spline design rows
        Eigen::VectorXd r(m);
        Eigen::VectorXd th(m);
        for (int k = 0; k < m; ++k) {
            const auto& sp = own[i][k].span;
            q.row(k).setZero();
            for (int a = 0; a < sp.count; ++a) q(k, sp.first + a) = sp.value[a];
            r[k] = own[i][k].resid;
            th[k] = own[i][k].th;
        }
        const Eigen::MatrixXd tq = th.asDiagonal() * q;           // Theta Qtilde
        const Eigen::VectorXd sc = tq.transpose() * (oi * r);      // spline score
        vhat.noalias() += tq.transpose() * oi * tq;
        mhat_lambda.noalias() += sc * sc.transpose();

        if (db > 0) {
            Eigen::MatrixXd c(db, m);
            for (int k = 0; k < m; ++k) {
                const auto& evk = own[i][k];
                const Eigen::MatrixXd bh = bhat_at(s.times[k]);
                const Eigen::MatrixXd ps = psihat_at(s.times[k]);
                const Eigen::VectorXd q_feed =
                    bh.partialPivLu().solve(ps).transpose() * s.z.row(k).transpose() *
                    evk.gprime;
                c.col(k) = s.x.row(k).transpose() - proj.delta(evk.u) - q_feed +
                           proj.gamma(evk.u);
            }
            popx_cols[i] = c;
            const Eigen::MatrixXd ct = c * th.asDiagonal();
            fhat.noalias() += ct * oi * th.asDiagonal() * c.transpose();
            ghat.noalias() += ct * oi * tq;
            psi1[i] = ct * (oi * r);
        }
    }
    vhat /= n;
    mhat_lambda /= n;
    vhat_ldlt.compute(vhat);
    if (vhat_ldlt.info() != Eigen::Success)
        throw RankDeficiency("empirical spline information matrix is singular", {});
    if (db == 0) return;
    fhat /= n;
    ghat /= n;
    {
        Eigen::LLT<Eigen::MatrixXd> llt(fhat);
        if (llt.info() != Eigen::Success)
            throw NonIdentifiable("plug-in F-hat matrix is not positive definite");
    }

    // lambda-inflation scores
    for (int i = 0; i < n; ++i) {
        const model::Subject& s = data->subjects[i];
        const int m = s.visits();
        Eigen::MatrixXd q(m, dl);
        Eigen::VectorXd r(m), th(m);
        for (int k = 0; k < m; ++k) {
            const auto& sp = own[i][k].span;
            q.row(k).setZero();
            for (int a = 0; a < sp.count; ++a) q(k, sp.first + a) = sp.value[a];
            r[k] = own[i][k].resid;
            th[k] = own[i][k].th;
        }
        const Eigen::VectorXd sc =
            (th.asDiagonal() * q).transpose() * (omega.omega_inv[i] * r);
        psi3[i] = ghat * vhat_ldlt.solve(sc);
    }

    // w-inflation scores: per own visit, feedback through the local equations
    for (int j = 0; j < n; ++j) {
        const model::Subject& s = data->subjects[j];
        const int m = s.visits();
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(db);
        std::vector<VisitEval> ev;
        for (int l = 0; l < m; ++l) {
            const double t0 = s.times[l];
            internal::eval_subject_relocated(engine, fit->lambda, fit->beta, j,
                                             fit->weights.at(t0), 1, ev);
            Eigen::VectorXd svec = Eigen::VectorXd::Zero(dw);
            for (int k = 0; k < m; ++k)
                svec += popw(s, k, ev[k]) * (ev[k].th * omega.omega_inv[j](k, l));
            svec *= own[j][l].resid;
            acc += gammahat_at(t0) * bhat_at(t0).partialPivLu().solve(svec);
        }
        psi2[j] = acc;
    }

    Eigen::MatrixXd middle = Eigen::MatrixXd::Zero(db, db);
    for (int i = 0; i < n; ++i)
        middle += psi1[i] * psi1[i].transpose() + psi2[i] * psi2[i].transpose() +
                  psi3[i] * psi3[i].transpose();
    middle /= n;
    const Eigen::MatrixXd finv = fhat.partialPivLu().inverse();
    sigma_raw = finv * middle * finv.transpose();
    Eigen::MatrixXd sym = 0.5 * (sigma_raw + sigma_raw.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    sigma_repaired = es.eigenvectors() *
                     es.eigenvalues().cwiseMax(0.0).asDiagonal() *
                     es.eigenvectors().transpose();
}

void InferenceEngine::Impl::build_xi(int threads) {
    // xi_j = n^{-1} sum_{ik} a_ik (zvec_ik' s_j^K(T_ik)); the outer product
    // sum over j feeds the weight-uncertainty part of the Theorem-3 variance.
    const int nv = data->total_visits();
    std::vector<Eigen::VectorXd> avec(nv);
    std::vector<Eigen::VectorXd> zvec(nv);
    std::vector<double> vtime(nv);
    std::vector<int> vsub(nv);
    {
        int row = 0;
        for (int i = 0; i < n; ++i) {
            const model::Subject& s = data->subjects[i];
            const int m = s.visits();
            const Eigen::MatrixXd& oi = omega.omega_inv[i];
            for (int k = 0; k < m; ++k, ++row) {
                Eigen::VectorXd a = Eigen::VectorXd::Zero(dl);
                for (int v = 0; v < m; ++v) {
                    const auto& sp = own[i][v].span;
                    const double c = oi(k, v) * own[i][v].th;
                    for (int aa = 0; aa < sp.count; ++aa)
                        a[sp.first + aa] += c * sp.value[aa];
                }
                avec[row] = a * (own[i][k].th * own[i][k].gprime);
                const double t = data->subjects[i].times[k];
                const Eigen::MatrixXd bf = bhat_at(t) * f_t(t);
                zvec[row] = bf.partialPivLu().solve(Eigen::MatrixXd::Identity(dw, dw))
                                .transpose() *
                            s.z.row(k).transpose();
                vtime[row] = t;
                vsub[row] = i;
            }
        }
    }
    const double radius = fit->kernel.support_radius() * fit->kernel.bandwidth;
    std::vector<Eigen::VectorXd> xi(n);
    parallel_for(n, threads, [&](int j) {
        const model::Subject& s = data->subjects[j];
        Eigen::VectorXd x = Eigen::VectorXd::Zero(dl);
        for (int row = 0; row < nv; ++row) {
            bool near = false;
            for (int l = 0; l < s.visits(); ++l)
                if (std::abs(s.times[l] - vtime[row]) <= radius) {
                    near = true;
                    break;
                }
            if (!near) continue;
            const Eigen::VectorXd sj = local_score(j, vtime[row], true);
            x += avec[row] * zvec[row].dot(sj);
        }
        xi[j] = x / n;
    });
    xi_outer = Eigen::MatrixXd::Zero(dl, dl);
    for (int j = 0; j < n; ++j) {
        const Eigen::VectorXd vx = vhat_ldlt.solve(xi[j]);
        xi_outer += vx * vx.transpose();
    }
    xi_outer /= n;
}

// ---------------------------------------------------------------------------

InferenceEngine::InferenceEngine(const estimator::ModelFit& fit,
                                 const model::LongitudinalDataset& dataset,
                                 const EngineOptions& options)
    : impl_(std::make_unique<Impl>()) {
    dataset.validate();
    impl_->fit = &fit;
    impl_->data = &dataset;
    impl_->build(options);
}

InferenceEngine::~InferenceEngine() = default;
InferenceEngine::InferenceEngine(InferenceEngine&&) noexcept = default;
InferenceEngine& InferenceEngine::operator=(InferenceEngine&&) noexcept = default;

const ProjectionEstimates& InferenceEngine::projections() const { return impl_->proj; }

Eigen::MatrixXd InferenceEngine::beta_covariance() const {
    if (impl_->db == 0) return Eigen::MatrixXd();
    return impl_->sigma_repaired / impl_->n;
}

Eigen::MatrixXd InferenceEngine::beta_covariance_raw() const {
    if (impl_->db == 0) return Eigen::MatrixXd();
    return impl_->sigma_raw / impl_->n;
}

double InferenceEngine::f_t_at(double t) const { return impl_->f_t(t); }

Eigen::MatrixXd InferenceEngine::w_covariance_at(double t0) const {
    auto& im = *impl_;
    const int dw = im.dw;
    // exact relocated assembly of B-hat at the query point
    Eigen::MatrixXd bh = Eigen::MatrixXd::Zero(dw, dw);
    const Eigen::VectorXd w = im.fit->weights.at(t0);
    std::vector<VisitEval> ev;
    for (int i = 0; i < im.n; ++i) {
        const model::Subject& s = im.data->subjects[i];
        const int m = s.visits();
        internal::eval_subject_relocated(im.engine, im.fit->lambda, im.fit->beta, i, w, 1, ev);
        Eigen::MatrixXd p(dw, m);
        Eigen::MatrixXd gz(m, dw);
        for (int k = 0; k < m; ++k) {
            p.col(k) = im.popw(s, k, ev[k]) * ev[k].th;
            gz.row(k) = ev[k].th * ev[k].gprime * s.z.row(k);
        }
        bh.noalias() += p * im.omega.omega_inv[i] * gz;
    }
    bh /= im.n;
    const double ft = im.f_t(t0);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(bh * ft);
    if (std::abs(lu.determinant()) < 1e-300)
        throw DegenerateDesign("B-hat(t0) is singular; no usable design at t0", t0);

    Eigen::MatrixXd mid = Eigen::MatrixXd::Zero(dw, dw);
    for (int j = 0; j < im.n; ++j) {
        const Eigen::VectorXd sj = im.local_score(j, t0, true);
        mid.noalias() += sj * sj.transpose();
    }
    const Eigen::MatrixXd left = lu.solve(mid);
    const Eigen::MatrixXd sigma =
        lu.solve(left.transpose()).transpose() / (static_cast<double>(im.n) * im.n);
    return 0.5 * (sigma + sigma.transpose());
}

double InferenceEngine::m_sigma2_at(double u) const {
    auto& im = *impl_;
    if (!(u > 0.0 && u < 1.0)) throw OutOfDomain("m variance requires u in (0,1)");
    const Eigen::VectorXd b = splines::eval_basis(im.fit->basis, u);
    const Eigen::VectorXd vb = im.vhat_ldlt.solve(b);
    return vb.dot(im.mhat_lambda * vb) / im.n;
}

double InferenceEngine::m_variance_at(double u) const {
    auto& im = *impl_;
    if (!(u > 0.0 && u < 1.0)) throw OutOfDomain("m variance requires u in (0,1)");
    double total = m_sigma2_at(u);
    if (im.has_m_variance) {
        const Eigen::VectorXd b = splines::eval_basis(im.fit->basis, u);
        total += b.dot(im.xi_outer * b) / im.n;
    }
    return total;
}

ConfidenceBand InferenceEngine::band(BandTarget target, const Eigen::VectorXd& grid,
                                     double level, int w_component,
                                     const std::optional<Eigen::VectorXd>& x_ref) const {
    auto& im = *impl_;
    ConfidenceBand out;
    out.grid = grid;
    out.level = level;
    const int g = static_cast<int>(grid.size());
    out.estimate.resize(g);
    out.se.resize(g);
    out.lower.resize(g);
    out.upper.resize(g);
    const double z = model::normal_quantile(0.5 + level / 2.0);
    model::LinkFunction link{im.fit->link};

    Eigen::VectorXd xref = Eigen::VectorXd::Zero(im.db);
    if (x_ref) {
        xref = *x_ref;
    } else if (im.db > 0) {
        long count = 0;
        for (const auto& s : im.data->subjects) {
            for (int k = 0; k < s.visits(); ++k) {
                xref += s.x.row(k).transpose();
                ++count;
            }
        }
        xref /= count;
    }

    for (int gi = 0; gi < g; ++gi) {
        switch (target) {
            case BandTarget::m: {
                const double u = estimator::clamp_unit(grid[gi]);
                out.estimate[gi] = im.fit->m_hat(u);
                out.se[gi] = std::sqrt(std::max(0.0, m_variance_at(u)));
                out.lower[gi] = out.estimate[gi] - z * out.se[gi];
                out.upper[gi] = out.estimate[gi] + z * out.se[gi];
                break;
            }
            case BandTarget::w_component: {
                const Eigen::MatrixXd sw = w_covariance_at(grid[gi]);
                out.estimate[gi] = im.fit->weights.at(grid[gi])[w_component];
                out.se[gi] = std::sqrt(std::max(0.0, sw(w_component, w_component)));
                out.lower[gi] = out.estimate[gi] - z * out.se[gi];
                out.upper[gi] = out.estimate[gi] + z * out.se[gi];
                break;
            }
            case BandTarget::risk: {
                const double u = estimator::clamp_unit(grid[gi]);
                const double ell = im.fit->m_hat(u) + (im.db > 0 ? im.fit->beta.dot(xref) : 0.0);
                const double p = link.h(ell);
                const double se_m = std::sqrt(std::max(0.0, m_variance_at(u)));
                const double se_p = link.theta(ell) * se_m;  // delta method
                out.estimate[gi] = p;
                out.se[gi] = se_p;
                double lo = p - z * se_p, hi = p + z * se_p;
                if (im.fit->link == model::LinkFamily::logit) {
                    lo = std::max(0.0, lo);
                    hi = std::min(1.0, hi);
                }
                out.lower[gi] = lo;
                out.upper[gi] = hi;
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

ProjectionEstimates estimate_projections(const estimator::ModelFit& fit,
                                         const model::LongitudinalDataset& dataset) {
    InferenceEngine engine(fit, dataset);
    return engine.projections();
}

Eigen::MatrixXd beta_covariance(const estimator::ModelFit& fit,
                                const model::LongitudinalDataset& dataset) {
    InferenceEngine engine(fit, dataset);
    return engine.beta_covariance();
}

Eigen::MatrixXd w_covariance_at(const estimator::ModelFit& fit,
                                const model::LongitudinalDataset& dataset, double t0) {
    InferenceEngine engine(fit, dataset);
    return engine.w_covariance_at(t0);
}

double m_variance_at(const estimator::ModelFit& fit, const model::LongitudinalDataset& dataset,
                     double u) {
    EngineOptions opts;
    opts.build_m_variance = true;
    InferenceEngine engine(fit, dataset, opts);
    return engine.m_variance_at(u);
}

ConfidenceBand band(const estimator::ModelFit& fit, const model::LongitudinalDataset& dataset,
                    BandTarget target, const Eigen::VectorXd& grid, double level,
                    int w_component, const std::optional<Eigen::VectorXd>& x_ref) {
    EngineOptions opts;
    opts.build_m_variance = target != BandTarget::w_component;
    InferenceEngine engine(fit, dataset, opts);
    return engine.band(target, grid, level, w_component, x_ref);
}

}  // namespace indexfuse::inference
