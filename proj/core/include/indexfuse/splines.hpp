#pragma once

#include <Eigen/Core>
#include <cstdint>

namespace indexfuse::splines {

/// Order-r B-spline basis on [lo, hi] with uniform interior knots and
/// r-fold boundary knots. Immutable after construction; basis dimension
/// is interior_knot_count + order.
struct SplineBasis {
    int order = 0;
    int interior_knot_count = 0;
    double lo = 0.0;
    double hi = 1.0;
    Eigen::VectorXd knots;  // length interior_knot_count + 2*order, nondecreasing

    int dim() const { return interior_knot_count + order; }

    /// Greville abscissa of coefficient j; coefficients lambda_j = a + b*greville(j)
    /// represent the linear function a + b*u exactly (order >= 2).
    double greville(int j) const;
};

SplineBasis build_basis(int order, int interior_knot_count, double lo, double hi);

/// floor(n^{1/5} (ln n)^2 / 5), clamped to >= 1.
int knot_count_rule(std::int64_t n);

Eigen::VectorXd eval_basis(const SplineBasis& basis, double u);
Eigen::VectorXd eval_basis_deriv(const SplineBasis& basis, double u);
Eigen::VectorXd eval_basis_deriv2(const SplineBasis& basis, double u);

/// Nonzero-band evaluation: values of the (at most `order`) active basis
/// functions at u together with the index of the first one. The workhorse
/// behind the dense wrappers; exposed for hot loops.
struct BasisSpan {
    int first = 0;
    int count = 0;
    double value[8];
    double deriv[8];
    double deriv2[8];
};
BasisSpan eval_basis_span(const SplineBasis& basis, double u, int max_deriv);

}  // namespace indexfuse::splines
