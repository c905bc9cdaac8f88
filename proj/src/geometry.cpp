#include "trace_diag/geometry.hpp"

#include <cmath>

#include "trace_diag/errors.hpp"

namespace trace_diag {

Eigen::MatrixXd to_eigen(const tensor& t) {
    if (t.shape.size() != 2) throw validation_error("expected a rank-2 tensor");
    Eigen::MatrixXd m(t.shape[0], t.shape[1]);
    for (std::size_t r = 0; r < t.shape[0]; ++r)
        for (std::size_t c = 0; c < t.shape[1]; ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
    return m;
}

tensor from_eigen(const Eigen::MatrixXd& m) {
    tensor t = tensor::matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
                static_cast<float>(m(r, c));
    return t;
}

Eigen::MatrixXd center_columns(const Eigen::MatrixXd& x, exec mode) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    Eigen::MatrixXd out(n, d);
    parallel_for(d, mode, [&](std::int64_t j) {
        const double mean = blocked_sum(n, exec::serial, [&](std::int64_t i) {
                                return x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                            }) /
                            static_cast<double>(n);
        for (Eigen::Index i = 0; i < n; ++i)
            out(i, static_cast<Eigen::Index>(j)) = x(i, static_cast<Eigen::Index>(j)) - mean;
    });
    return out;
}

double effective_rank(const Eigen::MatrixXd& x, exec mode) {
    if (x.rows() < 2) throw validation_error("effective rank needs at least 2 rows");
    const Eigen::MatrixXd c = center_columns(x, mode);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(c);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double smax = sv.size() > 0 ? sv(0) : 0.0;
    if (!(smax > 0.0))
        throw computation_error("effective rank undefined: matrix is constant after centering");

    const double cutoff = 1e-10 * smax;
    double total = 0.0;
    int kept = 0;
    for (Eigen::Index k = 0; k < sv.size(); ++k) {
        if (sv(k) < cutoff) break;
        total += sv(k);
        ++kept;
    }
    double entropy = 0.0;
    for (int k = 0; k < kept; ++k) {
        const double p = sv(k) / total;
        entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

double feature_variance(const Eigen::MatrixXd& x, exec mode) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    if (n < 1 || d < 1) throw validation_error("feature variance needs a nonempty matrix");
    std::vector<double> col_ss(static_cast<std::size_t>(d), 0.0);
    parallel_for(d, mode, [&](std::int64_t j) {
        const double mean = blocked_sum(n, exec::serial, [&](std::int64_t i) {
                                return x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                            }) /
                            static_cast<double>(n);
        col_ss[static_cast<std::size_t>(j)] = blocked_sum(n, exec::serial, [&](std::int64_t i) {
            const double v = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - mean;
            return v * v;
        });
    });
    double total = 0.0;
    for (double s : col_ss) total += s;
    return total / (static_cast<double>(n) * static_cast<double>(d));
}

namespace {

// ||A'B||_F^2 over column-centered operands, blocked per output entry.
double cross_gram_sq_norm(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, exec mode) {
    const Eigen::Index n = a.rows();
    const Eigen::Index da = a.cols();
    const Eigen::Index db = b.cols();
    std::vector<double> per_col(static_cast<std::size_t>(da), 0.0);
    parallel_for(da, mode, [&](std::int64_t i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < db; ++j) {
            const double dot = blocked_sum(n, exec::serial, [&](std::int64_t r) {
                return a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) *
                       b(static_cast<Eigen::Index>(r), j);
            });
            acc += dot * dot;
        }
        per_col[static_cast<std::size_t>(i)] = acc;
    });
    double total = 0.0;
    for (double v : per_col) total += v;
    return total;
}

}  // namespace

double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, exec mode) {
    if (x.rows() != y.rows())
        throw validation_error("CKA operands must have the same row count (got " +
                               std::to_string(x.rows()) + " and " + std::to_string(y.rows()) + ")");
    const Eigen::MatrixXd cx = center_columns(x, mode);
    const Eigen::MatrixXd cy = center_columns(y, mode);
    const double xx = std::sqrt(cross_gram_sq_norm(cx, cx, mode));
    const double yy = std::sqrt(cross_gram_sq_norm(cy, cy, mode));
    if (!(xx > 0.0) || !(yy > 0.0))
        throw computation_error("CKA undefined: an operand is zero after centering");
    return cross_gram_sq_norm(cx, cy, mode) / (xx * yy);
}

double delta_pct(double pre, double post) {
    if (pre == 0.0) throw computation_error("percentage delta undefined for a zero baseline");
    return 100.0 * (post - pre) / pre;
}

double round1(double v) {
    return (v < 0.0 ? -1.0 : 1.0) * std::floor(std::fabs(v) * 10.0 + 0.5) / 10.0;
}

geometry_report_t geometry_report(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& post,
                                  exec mode) {
    if (pre.rows() != post.rows())
        throw validation_error("pre/post matrices must have aligned rows");
    geometry_report_t rep;
    rep.eff_rank_pre = effective_rank(pre, mode);
    rep.eff_rank_post = effective_rank(post, mode);
    rep.eff_rank_delta_pct = delta_pct(rep.eff_rank_pre, rep.eff_rank_post);
    rep.var_pre = feature_variance(pre, mode);
    rep.var_post = feature_variance(post, mode);
    rep.var_delta_pct = delta_pct(rep.var_pre, rep.var_post);
    rep.cka = linear_cka(pre, post, mode);
    return rep;
}

}  // namespace trace_diag
