#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trace_diag/compose.hpp"
#include "trace_diag/feature_store.hpp"
#include "trace_diag/parallel.hpp"
#include "trace_diag/pools.hpp"

namespace trace_diag {

// ---- configuration ----------------------------------------------------------

struct probe_config {
    int pca_dim = 128;
    bool standardize = true;

    double linear_lr = 0.1;
    double linear_weight_decay = 1e-4;
    double linear_momentum = 0.9;
    int linear_max_epochs = 1000;

    double mlp_lr = 1e-3;
    double mlp_weight_decay = 1e-4;
    int mlp_hidden = 256;
    double mlp_dropout = 0.2;
    int mlp_batch = 512;
    int mlp_max_epochs = 300;

    int patience = 30;
    std::array<double, 3> split_ratios{0.7, 0.15, 0.15};
    std::vector<std::uint64_t> seeds{0, 1, 42};
};

enum class probe_kind { linear, mlp };
std::string to_string(probe_kind k);
probe_kind probe_kind_from_string(const std::string& s);

// ---- label families ----------------------------------------------------------

enum class label_family {
    attribute_type,
    edited_slot,
    target_value_color,
    target_value_material,
    target_value_action,
    edited_object,
    reference_object,
};

inline constexpr label_family kLabelFamilies[] = {
    label_family::attribute_type,     label_family::edited_slot,
    label_family::target_value_color, label_family::target_value_material,
    label_family::target_value_action, label_family::edited_object,
    label_family::reference_object,
};

std::string to_string(label_family f);
label_family family_from_string(const std::string& s);
int family_cardinality(label_family f, const pools& p);
double chance_level(label_family f, const pools& p);

// Class index for one example, or -1 when the family does not apply
// (target-value families skip examples of other attribute types).
int family_label(label_family f, const relation_example& ex, const pools& p);

// ---- feature map: standardize on train, then PCA ------------------------------

struct feature_map {
    Eigen::VectorXd mean;     // d
    Eigen::VectorXd inv_std;  // d; 0 for constant dims
    Eigen::MatrixXd basis;    // d x k, orthonormal columns

    int in_dim() const { return static_cast<int>(mean.size()); }
    int out_dim() const { return static_cast<int>(basis.cols()); }

    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;    // n x d -> n x k
    Eigen::VectorXd apply_vec(const Eigen::VectorXd& h) const;

    // phi(h) = linear_part(h) + offset(); the split is what the token-margin
    // decomposition needs.
    Eigen::VectorXd linear_part(const Eigen::VectorXd& h) const;  // basis' * (h .* inv_std)
    Eigen::VectorXd offset() const;                               // -basis' * (mean .* inv_std)
};

feature_map fit_feature_map(const Eigen::MatrixXd& train_x, int pca_dim, bool standardize = true);

// ---- probes -------------------------------------------------------------------

struct linear_probe {
    feature_map phi;
    Eigen::MatrixXd w;  // C x k
    Eigen::VectorXd b;  // C

    int n_classes() const { return static_cast<int>(w.rows()); }
    Eigen::VectorXd scores(const Eigen::VectorXd& h) const;  // raw feature vector in
    int predict(const Eigen::VectorXd& h) const;
};

struct mlp_probe {
    feature_map phi;
    Eigen::MatrixXd w1;  // hidden x k
    Eigen::VectorXd b1;
    Eigen::MatrixXd w2;  // C x hidden
    Eigen::VectorXd b2;

    int n_classes() const { return static_cast<int>(w2.rows()); }
    Eigen::VectorXd scores(const Eigen::VectorXd& h) const;
    int predict(const Eigen::VectorXd& h) const;
};

struct train_outcome {
    double val_acc = 0.0;
    int epochs_run = 0;
};

// x is raw (pre-phi) features, one row per example; splits align with rows.
// phi is fit on the train rows only. Returns the best-val checkpoint.
linear_probe train_linear_probe(const Eigen::MatrixXd& x, const std::vector<int>& y,
                                const std::vector<split_label>& splits, const probe_config& cfg,
                                std::uint64_t seed, train_outcome* outcome = nullptr);

mlp_probe train_mlp_probe(const Eigen::MatrixXd& x, const std::vector<int>& y,
                          const std::vector<split_label>& splits, const probe_config& cfg,
                          std::uint64_t seed, train_outcome* outcome = nullptr);

template <typename Probe>
double probe_accuracy(const Probe& p, const Eigen::MatrixXd& x, const std::vector<int>& y,
                      const std::vector<split_label>& splits, split_label which) {
    std::int64_t hit = 0, total = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (splits[i] != which) continue;
        ++total;
        if (p.predict(x.row(static_cast<Eigen::Index>(i)).transpose()) == y[i]) ++hit;
    }
    return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

// ---- suite --------------------------------------------------------------------

// Pooled per-example features for one (stage, view), labeled for one family.
struct labeled_features {
    Eigen::MatrixXd x;  // n x d
    std::vector<int> y;
    std::vector<std::string> group_ids;
    std::vector<std::string> example_ids;
    int n_classes = 0;
};

labeled_features build_labeled_features(const std::vector<relation_example>& meta,
                                        const feature_set& feats, stage st, feature_view view,
                                        label_family family, const pools& p);

struct probe_cell {
    label_family family;
    stage probe_stage;
    std::uint64_t seed = 0;
    double test_acc = 0.0;
    double val_acc = 0.0;
    int n_train = 0;
    int n_val = 0;
    int n_test = 0;
    int pca_dim_used = 0;
    int epochs_run = 0;
};

struct family_stage_summary {
    bool available = false;
    double mean_acc = 0.0;
    double std_acc = 0.0;
    std::vector<probe_cell> cells;
};

struct probe_family_result {
    label_family family;
    double chance = 0.0;
    family_stage_summary pre;
    family_stage_summary post;
};

struct probe_report {
    probe_kind kind = probe_kind::linear;
    feature_view view = feature_view::mixed;
    std::vector<probe_family_result> families;
    std::vector<std::string> gaps;  // human-readable reasons for missing cells
    // Unweighted mean over the three target-value families, when all present.
    std::optional<double> target_value_mean_pre;
    std::optional<double> target_value_mean_post;
};

probe_report run_probe_suite(const std::vector<relation_example>& meta, const feature_set& feats,
                             const probe_config& cfg, probe_kind kind, const pools& p,
                             feature_view view = feature_view::mixed, exec mode = exec::serial);

}  // namespace trace_diag
