#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trace_diag/probe.hpp"

namespace trace_diag {

struct margin_decomposition {
    std::vector<double> margins;  // one per token
    double bias_offset = 0.0;     // centering terms of phi plus the bias gap
    int true_class = 0;
    int runner_up = 0;
    double pooled_margin = 0.0;  // score(c*) - score(c_hat) on the pooled feature
    int predicted = 0;
};

// Per-token margin contributions of a fitted linear probe under mean pooling.
// sum(margins) + bias_offset reproduces pooled_margin.
margin_decomposition token_margins(const linear_probe& probe, const tensor& tokens,
                                   int true_class);

// q_t = max(m_t, 0) / sum_j max(m_j, 0); nullopt when no margin is positive.
std::optional<std::vector<double>> positive_shares(const std::vector<double>& margins);

// Normalized positive-contribution entropy: -(1/ln T) * sum q ln q in [0, 1].
// Requires T >= 2; nullopt when the positive mass is zero.
std::optional<double> positive_entropy(const std::vector<double>& margins);

struct route_masses_t {
    bool defined = false;
    double top1 = 0.0;
    double query_mass = 0.0;
};

route_masses_t route_masses(const std::vector<double>& margins,
                            const std::vector<token_group>& groups);

// Margin statistics for one (view, stage, seed) cell, averaged over the
// test-split examples whose positive mass is defined.
struct margin_aggregate {
    std::int64_t n_examples = 0;   // margin-evaluated examples
    std::int64_t n_undefined = 0;  // all margins <= 0, excluded
    std::int64_t n_correct = 0;
    double mean_pos_entropy = 0.0;
    double mean_top1 = 0.0;
    double mean_query_mass = 0.0;
    // Same three means over correctly classified examples only.
    double mean_pos_entropy_correct = 0.0;
    double mean_top1_correct = 0.0;
    double mean_query_mass_correct = 0.0;
    double completeness_max_err = 0.0;
};

struct route_stage_result {
    bool available = false;
    double mean_acc = 0.0;  // edited-slot probe accuracy, mean over seeds
    double std_acc = 0.0;
    std::vector<probe_cell> cells;
    margin_aggregate margins;  // averaged over seeds
};

struct route_view_result {
    feature_view view = feature_view::mixed;
    route_stage_result pre;
    route_stage_result post;
};

struct token_route_report {
    std::vector<route_view_result> views;
    std::vector<std::string> gaps;
    int pca_dim = 256;
};

// Edited-slot probes per view with the wide feature map, plus the margin
// concentration statistics.
token_route_report token_route_suite(const std::vector<relation_example>& meta,
                                     const feature_set& feats, const probe_config& cfg,
                                     const pools& p,
                                     const std::vector<feature_view>& views,
                                     exec mode = exec::serial);

}  // namespace trace_diag
