#include "indexfuse/splines.hpp"

#include <algorithm>
#include <cmath>

#include "indexfuse/errors.hpp"

namespace indexfuse::splines {

double SplineBasis::greville(int j) const {
    if (order < 2) return 0.5 * (lo + hi);
    double s = 0.0;
    for (int i = 1; i < order; ++i) s += knots[j + i];
    return s / (order - 1);
}

SplineBasis build_basis(int order, int interior_knot_count, double lo, double hi) {
    if (order < 1) throw InvalidArgument("spline order must be >= 1");
    if (order > 8) throw InvalidArgument("spline order above 8 is not supported");
    if (interior_knot_count < 0) throw InvalidArgument("interior knot count must be >= 0");
    if (!(lo < hi)) throw InvalidArgument("degenerate spline domain: lo >= hi");
    SplineBasis b;
    b.order = order;
    b.interior_knot_count = interior_knot_count;
    b.lo = lo;
    b.hi = hi;
    const int n_knots = interior_knot_count + 2 * order;
    b.knots.resize(n_knots);
    for (int i = 0; i < order; ++i) b.knots[i] = lo;
    for (int i = 1; i <= interior_knot_count; ++i)
        b.knots[order - 1 + i] = lo + (hi - lo) * i / (interior_knot_count + 1);
    for (int i = 0; i < order; ++i) b.knots[n_knots - order + i] = hi;
    return b;
}

int knot_count_rule(std::int64_t n) {
    if (n < 2) throw InvalidArgument("knot_count_rule requires n >= 2");
    const double ln = std::log(static_cast<double>(n));
    const double value = std::pow(static_cast<double>(n), 0.2) * ln * ln / 5.0;
    return std::max(1, static_cast<int>(std::floor(value)));
}

namespace {

// Knot span [knots[s], knots[s+1]) containing u; the last span is treated as
// closed so u == hi evaluates to the left limit.
int find_span(const SplineBasis& b, double u) {
    const int r = b.order;
    const int last = b.interior_knot_count + r - 1;
    if (u >= b.hi) return last;
    int s = static_cast<int>(std::upper_bound(b.knots.data() + r - 1,
                                              b.knots.data() + last + 1, u) -
                             b.knots.data()) -
            1;
    return std::clamp(s, r - 1, last);
}

// Cox-de Boor triangle at span s: tri[k-1][j] = B_{s-k+1+j, k}(u), j = 0..k-1.
void deboor_triangle(const SplineBasis& b, double u, int s, int upto_order,
                     double tri[8][8]) {
    tri[0][0] = 1.0;
    for (int k = 2; k <= upto_order; ++k) {
        const int m = k - 1;
        double saved = 0.0;
        for (int j = 0; j < m; ++j) {
            const int idx = s - m + 1 + j;  // global index of B_{idx, m}
            const double denom = b.knots[idx + m] - b.knots[idx];
            const double term = denom > 0.0 ? tri[m - 1][j] / denom : 0.0;
            tri[k - 1][j] = saved + (b.knots[idx + m] - u) * term;
            saved = (u - b.knots[idx]) * term;
        }
        tri[k - 1][m] = saved;
    }
}

// One application of the derivative recurrence
//   B'_{i,k+1} = k [ B_{i,k}/(t_{i+k}-t_i) - B_{i+1,k}/(t_{i+k+1}-t_{i+1}) ],
// mapping `m` order-(k=m) values starting at global index first+1 to m+1
// derivative values starting at global index `first`.
void derivative_step(const SplineBasis& b, const double* lower, int m, int first,
                     double* upper) {
    for (int j = 0; j <= m; ++j) {
        const int i = first + j;
        double left = 0.0, right = 0.0;
        if (j > 0) {
            const double denom = b.knots[i + m] - b.knots[i];
            if (denom > 0.0) left = lower[j - 1] / denom;
        }
        if (j < m) {
            const double denom = b.knots[i + m + 1] - b.knots[i + 1];
            if (denom > 0.0) right = lower[j] / denom;
        }
        upper[j] = m * (left - right);
    }
}

}  // namespace

BasisSpan eval_basis_span(const SplineBasis& basis, double u, int max_deriv) {
    if (u < basis.lo || u > basis.hi)
        throw OutOfDomain("spline evaluation point outside basis domain");
    const int r = basis.order;
    const int s = find_span(basis, u);
    double tri[8][8];
    deboor_triangle(basis, u, s, r, tri);

    BasisSpan out;
    out.first = s - r + 1;
    out.count = r;
    for (int j = 0; j < r; ++j) {
        out.value[j] = tri[r - 1][j];
        out.deriv[j] = 0.0;
        out.deriv2[j] = 0.0;
    }
    if (max_deriv >= 1 && r >= 2) {
        derivative_step(basis, tri[r - 2], r - 1, out.first, out.deriv);
        if (max_deriv >= 2 && r >= 3) {
            double mid[8];  // first derivatives of the order r-1 functions
            derivative_step(basis, tri[r - 3], r - 2, out.first + 1, mid);
            derivative_step(basis, mid, r - 1, out.first, out.deriv2);
        }
    }
    return out;
}

Eigen::VectorXd eval_basis(const SplineBasis& basis, double u) {
    const BasisSpan sp = eval_basis_span(basis, u, 0);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(basis.dim());
    for (int j = 0; j < sp.count; ++j) out[sp.first + j] = sp.value[j];
    return out;
}

Eigen::VectorXd eval_basis_deriv(const SplineBasis& basis, double u) {
    const BasisSpan sp = eval_basis_span(basis, u, 1);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(basis.dim());
    for (int j = 0; j < sp.count; ++j) out[sp.first + j] = sp.deriv[j];
    return out;
}

Eigen::VectorXd eval_basis_deriv2(const SplineBasis& basis, double u) {
    const BasisSpan sp = eval_basis_span(basis, u, 2);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(basis.dim());
    for (int j = 0; j < sp.count; ++j) out[sp.first + j] = sp.deriv2[j];
    return out;
}

}  // namespace indexfuse::splines
