#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "trace_diag/errors.hpp"
#include "trace_diag/probe.hpp"
#include "trace_diag/rng.hpp"
#include "trace_diag/synth.hpp"

using namespace trace_diag;

namespace {

struct toy_data {
    Eigen::MatrixXd x;
    std::vector<int> y;
    std::vector<split_label> splits;
};

// Well-separated Gaussian clusters along the first `classes` axes.
toy_data separable_data(int n, int d, int classes, double sep, double noise, std::uint64_t seed) {
    toy_data td;
    td.x = Eigen::MatrixXd(n, d);
    td.y.resize(static_cast<std::size_t>(n));
    td.splits.resize(static_cast<std::size_t>(n));
    rng r(seed);
    for (int i = 0; i < n; ++i) {
        const int c = i % classes;
        td.y[static_cast<std::size_t>(i)] = c;
        for (int j = 0; j < d; ++j) td.x(i, j) = noise * r.normal();
        td.x(i, c) += sep;
        const double u = static_cast<double>(i) / n;
        td.splits[static_cast<std::size_t>(i)] = u < 0.7    ? split_label::train
                                                 : u < 0.85 ? split_label::val
                                                            : split_label::test;
    }
    return td;
}

probe_config fast_config() {
    probe_config cfg;
    cfg.pca_dim = 8;
    return cfg;
}

}  // namespace

TEST_CASE("label family metadata matches the pools") {
    const pools p = pools::builtin();
    for (label_family f : kLabelFamilies) CHECK(family_from_string(to_string(f)) == f);
    CHECK_THROWS_AS(family_from_string("verb"), validation_error);

    CHECK(family_cardinality(label_family::attribute_type, p) == 3);
    CHECK(family_cardinality(label_family::edited_slot, p) == 4);
    CHECK(family_cardinality(label_family::target_value_color, p) == 9);
    CHECK(family_cardinality(label_family::target_value_material, p) == 10);
    CHECK(family_cardinality(label_family::target_value_action, p) == 9);
    CHECK(family_cardinality(label_family::edited_object, p) == 15);
    CHECK(family_cardinality(label_family::reference_object, p) == 15);

    int total = 0;
    for (label_family f : kLabelFamilies) total += family_cardinality(f, p);
    CHECK(total == 65);

    CHECK(chance_level(label_family::attribute_type, p) == doctest::Approx(1.0 / 3));
    CHECK(chance_level(label_family::edited_slot, p) == doctest::Approx(0.25));
    CHECK(chance_level(label_family::edited_object, p) == doctest::Approx(1.0 / 15));
}

TEST_CASE("family_label indexes examples and skips non-applicable families") {
    const pools p = pools::builtin();
    relation_example ex;
    ex.attribute = attribute_type::material;
    ex.edited_slot = slot::tr;
    ex.reference_slot = slot::bl;
    ex.target_value = "ceramic";
    ex.edited_object_name = "cup";
    ex.reference_object_name = "vase";

    CHECK(family_label(label_family::attribute_type, ex, p) == 1);
    CHECK(family_label(label_family::edited_slot, ex, p) == 1);
    CHECK(family_label(label_family::target_value_material, ex, p) ==
          p.value_index(attribute_type::material, "ceramic"));
    CHECK(family_label(label_family::target_value_color, ex, p) == -1);
    CHECK(family_label(label_family::target_value_action, ex, p) == -1);
    CHECK(family_label(label_family::edited_object, ex, p) == 0);
    CHECK(family_label(label_family::reference_object, ex, p) == 1);
}

TEST_CASE("fit_feature_map recovers planted principal axes") {
    const int n = 500, d = 10;
    rng r(77);
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) x(i, j) = 0.05 * r.normal();
        x(i, 0) += 3.0 * r.normal();
        x(i, 1) += 2.0 * r.normal();
        x(i, 2) += 1.0 * r.normal();
    }
    const feature_map fm = fit_feature_map(x, 3, false);
    REQUIRE(fm.out_dim() == 3);
    for (int k = 0; k < 3; ++k) {
        Eigen::VectorXd axis = Eigen::VectorXd::Zero(d);
        axis(k) = 1.0;
        CHECK(std::abs(fm.basis.col(k).dot(axis)) >= 0.99);
    }
}

TEST_CASE("full-dimensional PCA reconstructs the input") {
    const int n = 80, d = 6;
    rng r(5);
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) x(i, j) = r.normal() + 0.3 * j;
    const feature_map fm = fit_feature_map(x, d, false);
    double max_err = 0.0;
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd h = x.row(i).transpose();
        const Eigen::VectorXd recon = fm.basis * fm.apply_vec(h) + fm.mean;
        max_err = std::max(max_err, (recon - h).cwiseAbs().maxCoeff());
    }
    CHECK(max_err < 1e-5);
}

TEST_CASE("constant feature dimensions contribute nothing after standardization") {
    const int n = 60, d = 5;
    rng r(6);
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) x(i, j) = r.normal();
    x.col(3).setConstant(5.0);

    const feature_map fm = fit_feature_map(x, 3, true);
    CHECK(fm.inv_std(3) == 0.0);

    Eigen::VectorXd h1 = x.row(0).transpose();
    Eigen::VectorXd h2 = h1;
    h2(3) = -42.0;
    CHECK((fm.apply_vec(h1) - fm.apply_vec(h2)).norm() == 0.0);
}

TEST_CASE("feature map rejects out-of-range configurations") {
    const Eigen::MatrixXd x = Eigen::MatrixXd::Random(20, 6);
    CHECK_THROWS_AS(fit_feature_map(x, 0, true), validation_error);
    CHECK_THROWS_AS(fit_feature_map(x, 7, true), validation_error);
    CHECK_THROWS_AS(fit_feature_map(x, 20, true), validation_error);  // needs n > pca_dim
}

TEST_CASE("linear_part plus offset equals the applied map") {
    const Eigen::MatrixXd x = Eigen::MatrixXd::Random(50, 7);
    const feature_map fm = fit_feature_map(x, 4, true);
    for (int i = 0; i < 5; ++i) {
        const Eigen::VectorXd h = x.row(i * 7).transpose();
        const Eigen::VectorXd direct = fm.apply_vec(h);
        const Eigen::VectorXd split = fm.linear_part(h) + fm.offset();
        CHECK((direct - split).cwiseAbs().maxCoeff() < 1e-12);
    }
    const Eigen::MatrixXd all = fm.apply(x);
    CHECK((all.row(0).transpose() - fm.apply_vec(x.row(0).transpose())).norm() < 1e-12);

    // Applying phi to its own training rows yields zero-mean components.
    CHECK(all.colwise().mean().cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("linear probe separates planted clusters") {
    const toy_data td = separable_data(600, 12, 3, 3.0, 0.3, 1);
    train_outcome out;
    const linear_probe probe = train_linear_probe(td.x, td.y, td.splits, fast_config(), 0, &out);
    CHECK(probe.n_classes() == 3);
    CHECK(out.epochs_run >= 1);
    CHECK(out.val_acc >= 0.95);
    CHECK(probe_accuracy(probe, td.x, td.y, td.splits, split_label::test) >= 0.99);
}

TEST_CASE("linear probe on shuffled labels stays at chance") {
    const int n = 2000;
    toy_data td;
    td.x = Eigen::MatrixXd(n, 8);
    rng r(2);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 8; ++j) td.x(i, j) = r.normal();
    td.y.resize(n);
    td.splits.resize(n);
    for (int i = 0; i < n; ++i) {
        td.y[static_cast<std::size_t>(i)] = static_cast<int>(r.uniform_u64(4));
        td.splits[static_cast<std::size_t>(i)] = i < 1000   ? split_label::train
                                                 : i < 1200 ? split_label::val
                                                            : split_label::test;  // 800 test rows
    }
    const linear_probe probe = train_linear_probe(td.x, td.y, td.splits, fast_config(), 0);
    const double acc = probe_accuracy(probe, td.x, td.y, td.splits, split_label::test);
    CHECK(acc > 0.25 - 0.05);
    CHECK(acc < 0.25 + 0.05);
}

TEST_CASE("duplicating training rows leaves test predictions unchanged") {
    const toy_data td = separable_data(300, 10, 3, 3.0, 0.3, 3);
    const linear_probe p1 = train_linear_probe(td.x, td.y, td.splits, fast_config(), 0);

    const Eigen::Index n = td.x.rows();
    Eigen::Index extra = 0;
    for (auto s : td.splits) extra += s == split_label::train ? 1 : 0;
    Eigen::MatrixXd x2(n + extra, td.x.cols());
    x2.topRows(n) = td.x;
    std::vector<int> y2 = td.y;
    std::vector<split_label> s2 = td.splits;
    Eigen::Index at = n;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (td.splits[static_cast<std::size_t>(i)] != split_label::train) continue;
        x2.row(at++) = td.x.row(i);
        y2.push_back(td.y[static_cast<std::size_t>(i)]);
        s2.push_back(split_label::train);
    }
    const linear_probe p2 = train_linear_probe(x2, y2, s2, fast_config(), 0);

    for (Eigen::Index i = 0; i < n; ++i) {
        if (td.splits[static_cast<std::size_t>(i)] != split_label::test) continue;
        CHECK(p1.predict(td.x.row(i).transpose()) == p2.predict(td.x.row(i).transpose()));
    }
}

TEST_CASE("the feature map is fit on training rows only") {
    const int n = 200, d = 6;
    rng r(4);
    Eigen::MatrixXd x(n, d);
    std::vector<int> y(n);
    std::vector<split_label> splits(n);
    for (int i = 0; i < n; ++i) {
        const bool train = i < 120;
        for (int j = 0; j < d; ++j) x(i, j) = r.normal() + (train ? 0.0 : 5.0);
        x(i, 0) += (i % 2) * 3.0;
        y[static_cast<std::size_t>(i)] = i % 2;
        splits[static_cast<std::size_t>(i)] = train          ? split_label::train
                                              : i < 160      ? split_label::val
                                                             : split_label::test;
    }
    probe_config cfg = fast_config();
    cfg.pca_dim = 4;
    const linear_probe probe = train_linear_probe(x, y, splits, cfg, 0);

    const Eigen::VectorXd train_mean = x.topRows(120).colwise().mean();
    const Eigen::VectorXd full_mean = x.colwise().mean();
    CHECK((probe.phi.mean - train_mean).norm() < 1e-12);
    CHECK((probe.phi.mean - full_mean).norm() > 1.0);  // the shifted eval rows never leak in
}

TEST_CASE("training is deterministic per seed") {
    const toy_data td = separable_data(240, 8, 3, 2.0, 0.5, 8);
    const linear_probe a = train_linear_probe(td.x, td.y, td.splits, fast_config(), 42);
    const linear_probe b = train_linear_probe(td.x, td.y, td.splits, fast_config(), 42);
    CHECK((a.w - b.w).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.b - b.b).cwiseAbs().maxCoeff() == 0.0);
    const linear_probe c = train_linear_probe(td.x, td.y, td.splits, fast_config(), 43);
    CHECK((a.w - c.w).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("degenerate label sets are rejected") {
    const toy_data td = separable_data(120, 6, 2, 3.0, 0.2, 9);
    std::vector<int> flat(td.y.size(), 0);
    CHECK_THROWS_AS(train_linear_probe(td.x, flat, td.splits, fast_config(), 0),
                    validation_error);
    std::vector<int> holey = td.y;
    holey[0] = -1;
    CHECK_THROWS_AS(train_linear_probe(td.x, holey, td.splits, fast_config(), 0),
                    validation_error);
}

TEST_CASE("XOR labels defeat the linear probe but not the MLP") {
    const labeled_features xr = plant_xor_dataset(900, 12, 3.0, 0.1, 5);
    REQUIRE(xr.x.rows() == 900);
    REQUIRE(xr.n_classes == 2);
    std::vector<split_label> splits(900);
    for (int i = 0; i < 900; ++i)
        splits[static_cast<std::size_t>(i)] = i < 630   ? split_label::train
                                              : i < 765 ? split_label::val
                                                        : split_label::test;
    probe_config cfg = fast_config();
    cfg.mlp_max_epochs = 400;

    const linear_probe lin = train_linear_probe(xr.x, xr.y, splits, cfg, 0);
    const double lin_acc = probe_accuracy(lin, xr.x, xr.y, splits, split_label::test);
    CHECK(lin_acc <= 0.6);

    const mlp_probe mlp = train_mlp_probe(xr.x, xr.y, splits, cfg, 0);
    const double mlp_acc = probe_accuracy(mlp, xr.x, xr.y, splits, split_label::test);
    CHECK(mlp_acc >= 0.95);
}

TEST_CASE("probe suite runs planted families and reports gaps") {
    plant_spec spec;
    spec.examples = 160;
    spec.dims = 72;
    spec.noise = 0.2;
    spec.seed = 12;
    spec.families = {{label_family::attribute_type, 1.0, token_group::text},
                     {label_family::edited_slot, 1.0, token_group::query}};
    const pools p = pools::builtin();
    planted_dataset ds = plant_dataset(spec, p);

    probe_config cfg = fast_config();
    cfg.pca_dim = 32;

    // Pre-only features: every post cell is reported as a gap.
    const probe_report pre_only =
        run_probe_suite(ds.meta.examples, ds.features, cfg, probe_kind::linear, p);
    CHECK_FALSE(pre_only.gaps.empty());

    double attr_acc = 0.0, slot_acc = 0.0;
    for (const auto& fam : pre_only.families) {
        if (fam.family == label_family::attribute_type) {
            REQUIRE(fam.pre.available);
            attr_acc = fam.pre.mean_acc;
            CHECK_FALSE(fam.post.available);
            REQUIRE(fam.pre.cells.size() == cfg.seeds.size());
            for (const auto& cell : fam.pre.cells) {
                CHECK(cell.pca_dim_used >= 1);
                CHECK(cell.pca_dim_used <= 32);
                CHECK(cell.epochs_run >= 1);
                CHECK(cell.n_train + cell.n_val + cell.n_test == spec.examples);
            }
        }
        if (fam.family == label_family::edited_slot) slot_acc = fam.pre.mean_acc;
        CHECK(fam.chance == doctest::Approx(chance_level(fam.family, p)));
    }
    CHECK(attr_acc >= 0.9);
    CHECK(slot_acc >= 0.9);

    // Identical pre and post features produce identical statistics.
    std::vector<example_features> both = ds.features.examples;
    for (example_features ef : ds.features.examples) {
        ef.feature_stage = stage::post;
        both.push_back(std::move(ef));
    }
    const feature_set dup = make_feature_set(std::move(both));
    const probe_report mirrored =
        run_probe_suite(ds.meta.examples, dup, cfg, probe_kind::linear, p);
    for (const auto& fam : mirrored.families) {
        if (!fam.pre.available || !fam.post.available) continue;
        CHECK(fam.pre.mean_acc == fam.post.mean_acc);
        CHECK(fam.pre.std_acc == fam.post.std_acc);
    }

    // Determinism across repeated runs.
    const probe_report rerun =
        run_probe_suite(ds.meta.examples, ds.features, cfg, probe_kind::linear, p);
    REQUIRE(rerun.families.size() == pre_only.families.size());
    for (std::size_t i = 0; i < rerun.families.size(); ++i) {
        CHECK(rerun.families[i].pre.mean_acc == pre_only.families[i].pre.mean_acc);
        CHECK(rerun.families[i].pre.std_acc == pre_only.families[i].pre.std_acc);
    }

    // Serial and parallel suite execution agree exactly.
    const probe_report par =
        run_probe_suite(ds.meta.examples, ds.features, cfg, probe_kind::linear, p,
                        feature_view::mixed, exec::parallel);
    for (std::size_t i = 0; i < par.families.size(); ++i)
        CHECK(par.families[i].pre.mean_acc == pre_only.families[i].pre.mean_acc);
}
