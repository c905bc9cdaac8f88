#pragma once

#include <Eigen/Dense>

#include "trace_diag/parallel.hpp"
#include "trace_diag/tensor_file.hpp"

namespace trace_diag {

// Column-centered copy of X.
Eigen::MatrixXd center_columns(const Eigen::MatrixXd& x, exec mode = exec::serial);

// exp of the entropy of the normalized singular mass of centered X.
// Singular values below 1e-10 * sigma_max are dropped first.
double effective_rank(const Eigen::MatrixXd& x, exec mode = exec::serial);

// (1/nd) * sum_ij (x_ij - colmean_j)^2
double feature_variance(const Eigen::MatrixXd& x, exec mode = exec::serial);

// ||X'Y||_F^2 / (||X'X||_F * ||Y'Y||_F) on column-centered operands.
double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, exec mode = exec::serial);

struct geometry_report_t {
    double eff_rank_pre = 0.0;
    double eff_rank_post = 0.0;
    double eff_rank_delta_pct = 0.0;
    double var_pre = 0.0;
    double var_post = 0.0;
    double var_delta_pct = 0.0;
    double cka = 0.0;
};

// Rows of pre/post must be aligned by example.
geometry_report_t geometry_report(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& post,
                                  exec mode = exec::serial);

// 100 * (post - pre) / pre.
double delta_pct(double pre, double post);

// Round-half-away-from-zero to one decimal, for display fields.
double round1(double v);

Eigen::MatrixXd to_eigen(const tensor& t);
tensor from_eigen(const Eigen::MatrixXd& m);

}  // namespace trace_diag
