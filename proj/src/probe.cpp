#include "trace_diag/probe.hpp"

#include <algorithm>
#include <cmath>

#include "trace_diag/errors.hpp"
#include "trace_diag/rng.hpp"

namespace trace_diag {

std::string to_string(probe_kind k) {
    return k == probe_kind::linear ? "linear" : "mlp";
}

probe_kind probe_kind_from_string(const std::string& s) {
    if (s == "linear") return probe_kind::linear;
    if (s == "mlp") return probe_kind::mlp;
    throw validation_error("unknown probe kind: '" + s + "'");
}

std::string to_string(label_family f) {
    switch (f) {
        case label_family::attribute_type: return "attribute_type";
        case label_family::edited_slot: return "edited_slot";
        case label_family::target_value_color: return "target_value_color";
        case label_family::target_value_material: return "target_value_material";
        case label_family::target_value_action: return "target_value_action";
        case label_family::edited_object: return "edited_object";
        case label_family::reference_object: return "reference_object";
    }
    throw validation_error("invalid label family value");
}

label_family family_from_string(const std::string& s) {
    for (label_family f : kLabelFamilies)
        if (to_string(f) == s) return f;
    throw validation_error("unknown label family: '" + s + "'");
}

int family_cardinality(label_family f, const pools& p) {
    switch (f) {
        case label_family::attribute_type: return 3;
        case label_family::edited_slot: return 4;
        case label_family::target_value_color: return static_cast<int>(p.colors.size());
        case label_family::target_value_material: return static_cast<int>(p.materials.size());
        case label_family::target_value_action: return static_cast<int>(p.actions.size());
        case label_family::edited_object:
        case label_family::reference_object: return static_cast<int>(p.objects.size());
    }
    throw validation_error("invalid label family value");
}

double chance_level(label_family f, const pools& p) {
    return 1.0 / static_cast<double>(family_cardinality(f, p));
}

int family_label(label_family f, const relation_example& ex, const pools& p) {
    switch (f) {
        case label_family::attribute_type: return static_cast<int>(ex.attribute);
        case label_family::edited_slot: return static_cast<int>(ex.edited_slot);
        case label_family::target_value_color:
            return ex.attribute == attribute_type::color
                       ? p.value_index(attribute_type::color, ex.target_value)
                       : -1;
        case label_family::target_value_material:
            return ex.attribute == attribute_type::material
                       ? p.value_index(attribute_type::material, ex.target_value)
                       : -1;
        case label_family::target_value_action:
            return ex.attribute == attribute_type::action
                       ? p.value_index(attribute_type::action, ex.target_value)
                       : -1;
        case label_family::edited_object: return p.object_index(ex.edited_object_name);
        case label_family::reference_object: return p.object_index(ex.reference_object_name);
    }
    throw validation_error("invalid label family value");
}

// ---- feature map --------------------------------------------------------------

Eigen::MatrixXd feature_map::apply(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd z = (x.rowwise() - mean.transpose()).array().rowwise() *
                        inv_std.transpose().array();
    return z * basis;
}

Eigen::VectorXd feature_map::apply_vec(const Eigen::VectorXd& h) const {
    return basis.transpose() * ((h - mean).cwiseProduct(inv_std));
}

Eigen::VectorXd feature_map::linear_part(const Eigen::VectorXd& h) const {
    return basis.transpose() * h.cwiseProduct(inv_std);
}

Eigen::VectorXd feature_map::offset() const {
    return -(basis.transpose() * mean.cwiseProduct(inv_std));
}

feature_map fit_feature_map(const Eigen::MatrixXd& train_x, int pca_dim, bool standardize) {
    const Eigen::Index n = train_x.rows();
    const Eigen::Index d = train_x.cols();
    if (pca_dim < 1) throw validation_error("pca_dim must be >= 1");
    if (pca_dim > d)
        throw validation_error("pca_dim " + std::to_string(pca_dim) + " exceeds feature dim " +
                               std::to_string(d));
    if (n <= pca_dim)
        throw validation_error("need more than pca_dim=" + std::to_string(pca_dim) +
                               " training rows, got " + std::to_string(n));

    feature_map fm;
    fm.mean = train_x.colwise().mean();
    Eigen::MatrixXd centered = train_x.rowwise() - fm.mean.transpose();
    if (standardize) {
        Eigen::VectorXd var = centered.array().square().colwise().mean();
        fm.inv_std = Eigen::VectorXd(d);
        for (Eigen::Index j = 0; j < d; ++j) {
            const double sd = std::sqrt(var(j));
            fm.inv_std(j) = sd > 1e-12 ? 1.0 / sd : 0.0;  // constant dims map to 0
        }
    } else {
        fm.inv_std = Eigen::VectorXd::Ones(d);
    }

    Eigen::MatrixXd z = centered.array().rowwise() * fm.inv_std.transpose().array();
    Eigen::MatrixXd cov = (z.transpose() * z) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success)
        throw computation_error("PCA eigendecomposition failed to converge");

    // Eigenvalues ascend; take the top pca_dim, largest first, with a sign
    // convention so repeated fits are bit-identical.
    fm.basis = Eigen::MatrixXd(d, pca_dim);
    for (int k = 0; k < pca_dim; ++k) {
        Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
        Eigen::Index imax = 0;
        v.cwiseAbs().maxCoeff(&imax);
        if (v(imax) < 0.0) v = -v;
        fm.basis.col(k) = v;
    }
    return fm;
}

// ---- probes ---------------------------------------------------------------------

namespace {

int argmax_row(const Eigen::VectorXd& v) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i)
        if (v(i) > v(best)) best = i;
    return best;
}

// Row-wise softmax in place, numerically stable.
void softmax_rows(Eigen::MatrixXd& logits) {
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        logits.row(i) = (logits.row(i).array() - m).exp();
        logits.row(i) /= logits.row(i).sum();
    }
}

double split_accuracy(const Eigen::MatrixXd& logits, const std::vector<int>& y) {
    if (y.empty()) return 0.0;
    std::int64_t hit = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (argmax_row(logits.row(static_cast<Eigen::Index>(i)).transpose()) == y[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(y.size());
}

struct split_view {
    Eigen::MatrixXd x_train, x_val;
    std::vector<int> y_train, y_val;
};

split_view take_splits(const Eigen::MatrixXd& x, const std::vector<int>& y,
                       const std::vector<split_label>& splits) {
    if (static_cast<std::size_t>(x.rows()) != y.size() || y.size() != splits.size())
        throw validation_error("features, labels, and splits must align");
    std::vector<Eigen::Index> tr, va;
    for (std::size_t i = 0; i < splits.size(); ++i) {
        if (splits[i] == split_label::train) tr.push_back(static_cast<Eigen::Index>(i));
        if (splits[i] == split_label::val) va.push_back(static_cast<Eigen::Index>(i));
    }
    if (tr.empty()) throw validation_error("empty training split");
    split_view sv;
    sv.x_train.resize(static_cast<Eigen::Index>(tr.size()), x.cols());
    sv.x_val.resize(static_cast<Eigen::Index>(va.size()), x.cols());
    for (std::size_t i = 0; i < tr.size(); ++i) {
        sv.x_train.row(static_cast<Eigen::Index>(i)) = x.row(tr[i]);
        sv.y_train.push_back(y[static_cast<std::size_t>(tr[i])]);
    }
    for (std::size_t i = 0; i < va.size(); ++i) {
        sv.x_val.row(static_cast<Eigen::Index>(i)) = x.row(va[i]);
        sv.y_val.push_back(y[static_cast<std::size_t>(va[i])]);
    }
    return sv;
}

int class_count(const std::vector<int>& y_train) {
    int c = 0;
    std::vector<bool> seen;
    for (int v : y_train) {
        if (v < 0) throw validation_error("negative class label");
        if (v >= static_cast<int>(seen.size())) seen.resize(static_cast<std::size_t>(v) + 1, false);
        seen[static_cast<std::size_t>(v)] = true;
    }
    int distinct = 0;
    for (bool b : seen)
        if (b) ++distinct;
    c = static_cast<int>(seen.size());
    if (distinct < 2) throw validation_error("training split holds fewer than 2 classes");
    return c;
}

Eigen::MatrixXd one_hot(const std::vector<int>& y, int classes) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(y.size()), classes);
    for (std::size_t i = 0; i < y.size(); ++i) m(static_cast<Eigen::Index>(i), y[i]) = 1.0;
    return m;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475));
}

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865475)) +
           x * 0.3989422804014327 * std::exp(-0.5 * x * x);
}

}  // namespace

Eigen::VectorXd linear_probe::scores(const Eigen::VectorXd& h) const {
    return w * phi.apply_vec(h) + b;
}

int linear_probe::predict(const Eigen::VectorXd& h) const {
    return argmax_row(scores(h));
}

Eigen::VectorXd mlp_probe::scores(const Eigen::VectorXd& h) const {
    Eigen::VectorXd a1 = w1 * phi.apply_vec(h) + b1;
    for (Eigen::Index i = 0; i < a1.size(); ++i) a1(i) = gelu(a1(i));
    return w2 * a1 + b2;
}

int mlp_probe::predict(const Eigen::VectorXd& h) const {
    return argmax_row(scores(h));
}

linear_probe train_linear_probe(const Eigen::MatrixXd& x, const std::vector<int>& y,
                                const std::vector<split_label>& splits, const probe_config& cfg,
                                std::uint64_t seed, train_outcome* outcome) {
    split_view sv = take_splits(x, y, splits);
    const int classes = class_count(sv.y_train);

    linear_probe probe;
    probe.phi = fit_feature_map(sv.x_train, std::min<int>(cfg.pca_dim, static_cast<int>(x.cols())),
                                cfg.standardize);
    const Eigen::MatrixXd zt = probe.phi.apply(sv.x_train);
    const Eigen::MatrixXd zv = probe.phi.apply(sv.x_val);
    const Eigen::MatrixXd yt = one_hot(sv.y_train, classes);
    const auto n = static_cast<double>(zt.rows());
    const int k = probe.phi.out_dim();

    rng init(derive_seed(seed, "linear_probe_init"));
    Eigen::MatrixXd w(classes, k);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = 0.01 * init.normal();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(classes);
    Eigen::MatrixXd vel_w = Eigen::MatrixXd::Zero(classes, k);
    Eigen::VectorXd vel_b = Eigen::VectorXd::Zero(classes);

    Eigen::MatrixXd best_w = w;
    Eigen::VectorXd best_b = b;
    double best_val = -1.0;
    int stale = 0;
    int epoch = 0;
    for (; epoch < cfg.linear_max_epochs; ++epoch) {
        Eigen::MatrixXd p = zt * w.transpose();
        p.rowwise() += b.transpose();
        softmax_rows(p);
        p -= yt;
        Eigen::MatrixXd grad_w = (p.transpose() * zt) / n + cfg.linear_weight_decay * w;
        Eigen::VectorXd grad_b = p.colwise().sum().transpose() / n;
        vel_w = cfg.linear_momentum * vel_w - cfg.linear_lr * grad_w;
        vel_b = cfg.linear_momentum * vel_b - cfg.linear_lr * grad_b;
        w += vel_w;
        b += vel_b;

        Eigen::MatrixXd lv = zv * w.transpose();
        lv.rowwise() += b.transpose();
        const double val_acc = split_accuracy(lv, sv.y_val);
        if (val_acc > best_val) {
            best_val = val_acc;
            best_w = w;
            best_b = b;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            ++epoch;
            break;
        }
    }

    probe.w = best_w;
    probe.b = best_b;
    if (outcome) {
        outcome->val_acc = best_val;
        outcome->epochs_run = epoch;
    }
    return probe;
}

mlp_probe train_mlp_probe(const Eigen::MatrixXd& x, const std::vector<int>& y,
                          const std::vector<split_label>& splits, const probe_config& cfg,
                          std::uint64_t seed, train_outcome* outcome) {
    split_view sv = take_splits(x, y, splits);
    const int classes = class_count(sv.y_train);

    mlp_probe probe;
    probe.phi = fit_feature_map(sv.x_train, std::min<int>(cfg.pca_dim, static_cast<int>(x.cols())),
                                cfg.standardize);
    const Eigen::MatrixXd zt = probe.phi.apply(sv.x_train);
    const Eigen::MatrixXd zv = probe.phi.apply(sv.x_val);
    const int k = probe.phi.out_dim();
    const int hidden = cfg.mlp_hidden;

    rng init(derive_seed(seed, "mlp_probe_init"));
    auto gaussian_matrix = [&](Eigen::Index rows, Eigen::Index cols, double scale) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * init.normal();
        return m;
    };
    Eigen::MatrixXd w1 = gaussian_matrix(hidden, k, std::sqrt(2.0 / k));
    Eigen::VectorXd b1 = Eigen::VectorXd::Zero(hidden);
    Eigen::MatrixXd w2 = gaussian_matrix(classes, hidden, std::sqrt(2.0 / hidden));
    Eigen::VectorXd b2 = Eigen::VectorXd::Zero(classes);

    // AdamW state.
    Eigen::MatrixXd m_w1 = Eigen::MatrixXd::Zero(hidden, k), v_w1 = m_w1;
    Eigen::VectorXd m_b1 = Eigen::VectorXd::Zero(hidden), v_b1 = m_b1;
    Eigen::MatrixXd m_w2 = Eigen::MatrixXd::Zero(classes, hidden), v_w2 = m_w2;
    Eigen::VectorXd m_b2 = Eigen::VectorXd::Zero(classes), v_b2 = m_b2;
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t step = 0;

    rng order(derive_seed(seed, "mlp_probe_batches"));
    rng drop(derive_seed(seed, "mlp_probe_dropout"));
    const double keep = 1.0 - cfg.mlp_dropout;

    std::vector<Eigen::Index> idx(static_cast<std::size_t>(zt.rows()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);

    Eigen::MatrixXd best_w1 = w1, best_w2 = w2;
    Eigen::VectorXd best_b1 = b1, best_b2 = b2;
    double best_val = -1.0;
    int stale = 0;
    int epoch = 0;

    auto adamw = [&](Eigen::MatrixXd& p, Eigen::MatrixXd& m, Eigen::MatrixXd& v,
                     const Eigen::MatrixXd& g, bool decay) {
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        if (decay) p -= cfg.mlp_lr * cfg.mlp_weight_decay * p;
        p.array() -= cfg.mlp_lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    };
    auto adamw_vec = [&](Eigen::VectorXd& p, Eigen::VectorXd& m, Eigen::VectorXd& v,
                         const Eigen::VectorXd& g) {
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        p.array() -= cfg.mlp_lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    };

    for (; epoch < cfg.mlp_max_epochs; ++epoch) {
        order.shuffle(idx);
        for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg.mlp_batch)) {
            const std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(cfg.mlp_batch));
            const auto bsz = static_cast<Eigen::Index>(stop - start);
            Eigen::MatrixXd zb(bsz, k);
            Eigen::MatrixXd yb = Eigen::MatrixXd::Zero(bsz, classes);
            for (Eigen::Index i = 0; i < bsz; ++i) {
                zb.row(i) = zt.row(idx[start + static_cast<std::size_t>(i)]);
                yb(i, sv.y_train[static_cast<std::size_t>(idx[start + static_cast<std::size_t>(i)])]) = 1.0;
            }

            Eigen::MatrixXd a1 = zb * w1.transpose();
            a1.rowwise() += b1.transpose();
            Eigen::MatrixXd g = a1.unaryExpr([](double v_) { return gelu(v_); });
            Eigen::MatrixXd mask(bsz, hidden);
            for (Eigen::Index i = 0; i < bsz; ++i)
                for (Eigen::Index j = 0; j < hidden; ++j)
                    mask(i, j) = drop.bernoulli(keep) ? 1.0 / keep : 0.0;
            Eigen::MatrixXd gd = g.cwiseProduct(mask);

            Eigen::MatrixXd logits = gd * w2.transpose();
            logits.rowwise() += b2.transpose();
            softmax_rows(logits);
            logits -= yb;
            logits /= static_cast<double>(bsz);

            Eigen::MatrixXd grad_w2 = logits.transpose() * gd;
            Eigen::VectorXd grad_b2 = logits.colwise().sum().transpose();
            Eigen::MatrixXd dgd = (logits * w2).cwiseProduct(mask);
            Eigen::MatrixXd da1 = dgd.cwiseProduct(a1.unaryExpr([](double v_) { return gelu_grad(v_); }));
            Eigen::MatrixXd grad_w1 = da1.transpose() * zb;
            Eigen::VectorXd grad_b1 = da1.colwise().sum().transpose();

            ++step;
            adamw(w1, m_w1, v_w1, grad_w1, true);
            adamw_vec(b1, m_b1, v_b1, grad_b1);
            adamw(w2, m_w2, v_w2, grad_w2, true);
            adamw_vec(b2, m_b2, v_b2, grad_b2);
        }

        // Validation pass, dropout off.
        Eigen::MatrixXd a1 = zv * w1.transpose();
        a1.rowwise() += b1.transpose();
        Eigen::MatrixXd lv = a1.unaryExpr([](double v_) { return gelu(v_); }) * w2.transpose();
        lv.rowwise() += b2.transpose();
        const double val_acc = split_accuracy(lv, sv.y_val);
        if (val_acc > best_val) {
            best_val = val_acc;
            best_w1 = w1;
            best_b1 = b1;
            best_w2 = w2;
            best_b2 = b2;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            ++epoch;
            break;
        }
    }

    probe.w1 = best_w1;
    probe.b1 = best_b1;
    probe.w2 = best_w2;
    probe.b2 = best_b2;
    if (outcome) {
        outcome->val_acc = best_val;
        outcome->epochs_run = epoch;
    }
    return probe;
}

// ---- suite ------------------------------------------------------------------------

labeled_features build_labeled_features(const std::vector<relation_example>& meta,
                                        const feature_set& feats, stage st, feature_view view,
                                        label_family family, const pools& p) {
    std::vector<std::vector<float>> rows;
    labeled_features out;
    int max_label = -1;
    for (const auto& ex : meta) {
        const int label = family_label(family, ex, p);
        if (label < 0) continue;
        const example_features* ef = feats.find(ex.example_id, st);
        if (!ef) continue;
        rows.push_back(pool_tokens(select_view(*ef, view)));
        out.y.push_back(label);
        out.group_ids.push_back(ex.split_group_id);
        out.example_ids.push_back(ex.example_id);
        max_label = std::max(max_label, label);
    }
    out.n_classes = max_label + 1;
    if (rows.empty()) return out;
    out.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size())
            throw validation_error("inconsistent feature dims across examples");
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            out.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    return out;
}

namespace {

std::vector<split_label> per_row_splits(const std::vector<std::string>& group_ids,
                                        std::array<double, 3> ratios, std::uint64_t seed) {
    const auto assignment = split_groups(group_ids, ratios, seed);
    std::vector<split_label> out;
    out.reserve(group_ids.size());
    for (const auto& g : group_ids) out.push_back(assignment.at(g));
    return out;
}

struct cell_task {
    std::size_t family_idx;
    stage st;
    std::uint64_t seed;
    const labeled_features* data;
};

}  // namespace

probe_report run_probe_suite(const std::vector<relation_example>& meta, const feature_set& feats,
                             const probe_config& cfg, probe_kind kind, const pools& p,
                             feature_view view, exec mode) {
    probe_report report;
    report.kind = kind;
    report.view = view;

    std::vector<labeled_features> data_pre, data_post;
    for (label_family f : kLabelFamilies) {
        data_pre.push_back(build_labeled_features(meta, feats, stage::pre, view, f, p));
        data_post.push_back(build_labeled_features(meta, feats, stage::post, view, f, p));
        probe_family_result fr;
        fr.family = f;
        fr.chance = chance_level(f, p);
        report.families.push_back(fr);
    }

    std::vector<cell_task> tasks;
    for (std::size_t fi = 0; fi < report.families.size(); ++fi) {
        for (stage st : {stage::pre, stage::post}) {
            const labeled_features& data = st == stage::pre ? data_pre[fi] : data_post[fi];
            if (data.y.empty()) {
                report.gaps.push_back("family " + to_string(report.families[fi].family) +
                                      " stage " + to_string(st) + ": no labeled features");
                continue;
            }
            for (std::uint64_t seed : cfg.seeds) tasks.push_back({fi, st, seed, &data});
        }
    }

    std::vector<probe_cell> cells(tasks.size());
    std::vector<std::string> cell_errors(tasks.size());
    parallel_for(static_cast<std::int64_t>(tasks.size()), mode, [&](std::int64_t ti) {
        const cell_task& task = tasks[static_cast<std::size_t>(ti)];
        const labeled_features& data = *task.data;
        probe_cell cell;
        cell.family = report.families[task.family_idx].family;
        cell.probe_stage = task.st;
        cell.seed = task.seed;
        try {
            const auto splits = per_row_splits(data.group_ids, cfg.split_ratios, task.seed);
            int n_train = 0, n_val = 0, n_test = 0;
            for (split_label s : splits) {
                if (s == split_label::train) ++n_train;
                else if (s == split_label::val) ++n_val;
                else ++n_test;
            }
            cell.n_train = n_train;
            cell.n_val = n_val;
            cell.n_test = n_test;

            probe_config local = cfg;
            local.pca_dim = std::min({cfg.pca_dim, static_cast<int>(data.x.cols()), n_train - 1});
            cell.pca_dim_used = local.pca_dim;

            train_outcome outcome;
            double acc = 0.0;
            if (kind == probe_kind::linear) {
                linear_probe probe =
                    train_linear_probe(data.x, data.y, splits, local, task.seed, &outcome);
                acc = probe_accuracy(probe, data.x, data.y, splits, split_label::test);
            } else {
                mlp_probe probe =
                    train_mlp_probe(data.x, data.y, splits, local, task.seed, &outcome);
                acc = probe_accuracy(probe, data.x, data.y, splits, split_label::test);
            }
            cell.test_acc = acc;
            cell.val_acc = outcome.val_acc;
            cell.epochs_run = outcome.epochs_run;
        } catch (const std::exception& e) {
            cell_errors[static_cast<std::size_t>(ti)] = e.what();
        }
        cells[static_cast<std::size_t>(ti)] = cell;
    });

    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
        if (!cell_errors[ti].empty()) {
            report.gaps.push_back("family " + to_string(cells[ti].family) + " stage " +
                                  to_string(cells[ti].probe_stage) + " seed " +
                                  std::to_string(cells[ti].seed) + ": " + cell_errors[ti]);
            continue;
        }
        auto& fr = report.families[tasks[ti].family_idx];
        auto& summary = tasks[ti].st == stage::pre ? fr.pre : fr.post;
        summary.cells.push_back(cells[ti]);
    }

    for (auto& fr : report.families) {
        for (auto* summary : {&fr.pre, &fr.post}) {
            if (summary->cells.empty()) continue;
            summary->available = true;
            double mean = 0.0;
            for (const auto& c : summary->cells) mean += c.test_acc;
            mean /= static_cast<double>(summary->cells.size());
            double var = 0.0;
            for (const auto& c : summary->cells) var += (c.test_acc - mean) * (c.test_acc - mean);
            var /= static_cast<double>(summary->cells.size());
            summary->mean_acc = mean;
            summary->std_acc = std::sqrt(var);
        }
    }

    // Unweighted target-value average over the three attribute families.
    auto target_mean = [&](bool pre) -> std::optional<double> {
        double acc = 0.0;
        int found = 0;
        for (const auto& fr : report.families) {
            if (fr.family != label_family::target_value_color &&
                fr.family != label_family::target_value_material &&
                fr.family != label_family::target_value_action)
                continue;
            const auto& s = pre ? fr.pre : fr.post;
            if (!s.available) return std::nullopt;
            acc += s.mean_acc;
            ++found;
        }
        if (found != 3) return std::nullopt;
        return acc / 3.0;
    };
    report.target_value_mean_pre = target_mean(true);
    report.target_value_mean_post = target_mean(false);
    return report;
}

}  // namespace trace_diag
