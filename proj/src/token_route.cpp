#include "trace_diag/token_route.hpp"

#include <algorithm>
#include <cmath>

#include "trace_diag/errors.hpp"

namespace trace_diag {

margin_decomposition token_margins(const linear_probe& probe, const tensor& tokens,
                                   int true_class) {
    if (probe.n_classes() < 2) throw validation_error("margin decomposition needs >= 2 classes");
    if (tokens.shape.size() != 2) throw validation_error("token matrix must be rank 2");
    const std::size_t t = tokens.shape[0];
    const std::size_t d = tokens.shape[1];
    if (t < 1) throw validation_error("margin decomposition needs at least one token");
    if (true_class < 0 || true_class >= probe.n_classes())
        throw validation_error("true class out of range");

    Eigen::VectorXd pooled = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j)
            pooled(static_cast<Eigen::Index>(j)) += tokens.at(i, j);
    pooled /= static_cast<double>(t);

    const Eigen::VectorXd scores = probe.scores(pooled);
    int runner = -1;
    for (int c = 0; c < probe.n_classes(); ++c) {
        if (c == true_class) continue;
        if (runner < 0 || scores(c) > scores(runner)) runner = c;
    }
    int predicted = 0;
    for (int c = 1; c < probe.n_classes(); ++c)
        if (scores(c) > scores(predicted)) predicted = c;

    const Eigen::VectorXd dw = (probe.w.row(true_class) - probe.w.row(runner)).transpose();

    margin_decomposition md;
    md.true_class = true_class;
    md.runner_up = runner;
    md.predicted = predicted;
    md.pooled_margin = scores(true_class) - scores(runner);
    md.margins.resize(t);
    const double inv_t = 1.0 / static_cast<double>(t);
    Eigen::VectorXd h(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < d; ++j) h(static_cast<Eigen::Index>(j)) = tokens.at(i, j);
        md.margins[i] = inv_t * dw.dot(probe.phi.linear_part(h));
    }
    md.bias_offset = dw.dot(probe.phi.offset()) + probe.b(true_class) - probe.b(runner);
    return md;
}

std::optional<std::vector<double>> positive_shares(const std::vector<double>& margins) {
    double total = 0.0;
    for (double m : margins) total += std::max(m, 0.0);
    if (total <= 0.0) return std::nullopt;
    std::vector<double> q(margins.size());
    for (std::size_t i = 0; i < margins.size(); ++i) q[i] = std::max(margins[i], 0.0) / total;
    return q;
}

std::optional<double> positive_entropy(const std::vector<double>& margins) {
    if (margins.size() < 2)
        throw validation_error("positive entropy needs at least 2 tokens");
    const auto q = positive_shares(margins);
    if (!q) return std::nullopt;
    double h = 0.0;
    for (double v : *q)
        if (v > 0.0) h -= v * std::log(v);
    return h / std::log(static_cast<double>(margins.size()));
}

route_masses_t route_masses(const std::vector<double>& margins,
                            const std::vector<token_group>& groups) {
    if (margins.size() != groups.size())
        throw validation_error("margins and token groups must align");
    route_masses_t out;
    const auto q = positive_shares(margins);
    if (!q) return out;
    out.defined = true;
    for (std::size_t i = 0; i < q->size(); ++i) {
        out.top1 = std::max(out.top1, (*q)[i]);
        if (groups[i] == token_group::query) out.query_mass += (*q)[i];
    }
    return out;
}

namespace {

struct seed_margin_stats {
    std::int64_t n = 0, n_undef = 0, n_correct = 0;
    double sum_h = 0.0, sum_top1 = 0.0, sum_query = 0.0;
    double sum_h_c = 0.0, sum_top1_c = 0.0, sum_query_c = 0.0;
    double max_err = 0.0;
};

struct route_task {
    std::size_t view_idx;
    stage st;
    std::uint64_t seed;
    const labeled_features* data;
};

}  // namespace

token_route_report token_route_suite(const std::vector<relation_example>& meta,
                                     const feature_set& feats, const probe_config& cfg,
                                     const pools& p,
                                     const std::vector<feature_view>& views, exec mode) {
    token_route_report report;
    report.pca_dim = cfg.pca_dim;

    std::vector<labeled_features> data_pre(views.size()), data_post(views.size());
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
        route_view_result vr;
        vr.view = views[vi];
        report.views.push_back(vr);
        try {
            data_pre[vi] = build_labeled_features(meta, feats, stage::pre, views[vi],
                                                  label_family::edited_slot, p);
        } catch (const std::exception& e) {
            report.gaps.push_back("view " + to_string(views[vi]) + " stage pre: " + e.what());
        }
        try {
            data_post[vi] = build_labeled_features(meta, feats, stage::post, views[vi],
                                                   label_family::edited_slot, p);
        } catch (const std::exception& e) {
            report.gaps.push_back("view " + to_string(views[vi]) + " stage post: " + e.what());
        }
    }

    std::vector<route_task> tasks;
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
        for (stage st : {stage::pre, stage::post}) {
            const labeled_features& data = st == stage::pre ? data_pre[vi] : data_post[vi];
            if (data.y.empty()) {
                report.gaps.push_back("view " + to_string(views[vi]) + " stage " + to_string(st) +
                                      ": no labeled features");
                continue;
            }
            for (std::uint64_t seed : cfg.seeds) tasks.push_back({vi, st, seed, &data});
        }
    }

    std::vector<probe_cell> cells(tasks.size());
    std::vector<seed_margin_stats> stats(tasks.size());
    std::vector<std::string> errors(tasks.size());

    parallel_for(static_cast<std::int64_t>(tasks.size()), mode, [&](std::int64_t ti) {
        const route_task& task = tasks[static_cast<std::size_t>(ti)];
        const labeled_features& data = *task.data;
        probe_cell& cell = cells[static_cast<std::size_t>(ti)];
        cell.family = label_family::edited_slot;
        cell.probe_stage = task.st;
        cell.seed = task.seed;
        try {
            const auto assignment = split_groups(data.group_ids, cfg.split_ratios, task.seed);
            std::vector<split_label> splits;
            splits.reserve(data.group_ids.size());
            for (const auto& g : data.group_ids) splits.push_back(assignment.at(g));
            int n_train = 0;
            for (split_label s : splits)
                if (s == split_label::train) ++n_train;

            probe_config local = cfg;
            local.pca_dim = std::min({cfg.pca_dim, static_cast<int>(data.x.cols()), n_train - 1});
            cell.pca_dim_used = local.pca_dim;

            train_outcome outcome;
            linear_probe probe =
                train_linear_probe(data.x, data.y, splits, local, task.seed, &outcome);
            cell.val_acc = outcome.val_acc;
            cell.epochs_run = outcome.epochs_run;
            cell.test_acc = probe_accuracy(probe, data.x, data.y, splits, split_label::test);
            for (split_label s : splits) {
                if (s == split_label::train) ++cell.n_train;
                else if (s == split_label::val) ++cell.n_val;
                else ++cell.n_test;
            }

            seed_margin_stats& ms = stats[static_cast<std::size_t>(ti)];
            for (std::size_t i = 0; i < data.y.size(); ++i) {
                if (splits[i] != split_label::test) continue;
                const example_features* ef = feats.find(data.example_ids[i], task.st);
                if (!ef) continue;
                const tensor tokens = select_view(*ef, report.views[task.view_idx].view);
                const auto groups = select_view_groups(*ef, report.views[task.view_idx].view);
                const margin_decomposition md = token_margins(probe, tokens, data.y[i]);

                double msum = md.bias_offset;
                for (double m : md.margins) msum += m;
                ms.max_err = std::max(ms.max_err, std::fabs(msum - md.pooled_margin));

                const auto h = tokens.shape[0] >= 2 ? positive_entropy(md.margins)
                                                    : std::optional<double>{};
                const route_masses_t masses = route_masses(md.margins, groups);
                if (!masses.defined || !h) {
                    ++ms.n_undef;
                    continue;
                }
                ++ms.n;
                ms.sum_h += *h;
                ms.sum_top1 += masses.top1;
                ms.sum_query += masses.query_mass;
                if (md.predicted == data.y[i]) {
                    ++ms.n_correct;
                    ms.sum_h_c += *h;
                    ms.sum_top1_c += masses.top1;
                    ms.sum_query_c += masses.query_mass;
                }
            }
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(ti)] = e.what();
        }
    });

    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
        if (!errors[ti].empty()) {
            report.gaps.push_back("view " + to_string(report.views[tasks[ti].view_idx].view) +
                                  " stage " + to_string(tasks[ti].st) + " seed " +
                                  std::to_string(tasks[ti].seed) + ": " + errors[ti]);
            continue;
        }
        auto& vr = report.views[tasks[ti].view_idx];
        auto& sr = tasks[ti].st == stage::pre ? vr.pre : vr.post;
        sr.cells.push_back(cells[ti]);

        const seed_margin_stats& ms = stats[ti];
        auto& agg = sr.margins;
        agg.n_examples += ms.n;
        agg.n_undefined += ms.n_undef;
        agg.n_correct += ms.n_correct;
        agg.mean_pos_entropy += ms.sum_h;
        agg.mean_top1 += ms.sum_top1;
        agg.mean_query_mass += ms.sum_query;
        agg.mean_pos_entropy_correct += ms.sum_h_c;
        agg.mean_top1_correct += ms.sum_top1_c;
        agg.mean_query_mass_correct += ms.sum_query_c;
        agg.completeness_max_err = std::max(agg.completeness_max_err, ms.max_err);
    }

    for (auto& vr : report.views) {
        for (auto* sr : {&vr.pre, &vr.post}) {
            if (sr->cells.empty()) continue;
            sr->available = true;
            double mean = 0.0;
            for (const auto& c : sr->cells) mean += c.test_acc;
            mean /= static_cast<double>(sr->cells.size());
            double var = 0.0;
            for (const auto& c : sr->cells) var += (c.test_acc - mean) * (c.test_acc - mean);
            sr->std_acc = std::sqrt(var / static_cast<double>(sr->cells.size()));
            sr->mean_acc = mean;

            auto& agg = sr->margins;
            if (agg.n_examples > 0) {
                agg.mean_pos_entropy /= static_cast<double>(agg.n_examples);
                agg.mean_top1 /= static_cast<double>(agg.n_examples);
                agg.mean_query_mass /= static_cast<double>(agg.n_examples);
            }
            if (agg.n_correct > 0) {
                agg.mean_pos_entropy_correct /= static_cast<double>(agg.n_correct);
                agg.mean_top1_correct /= static_cast<double>(agg.n_correct);
                agg.mean_query_mass_correct /= static_cast<double>(agg.n_correct);
            }
        }
    }
    return report;
}

}  // namespace trace_diag
