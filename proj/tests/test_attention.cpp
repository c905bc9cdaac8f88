#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "trace_diag/attention.hpp"
#include "trace_diag/errors.hpp"
#include "trace_diag/rng.hpp"

using namespace trace_diag;

namespace {

attention_trace make_trace(int layers, int steps, int heads, int q, std::size_t k,
                           std::vector<cond_group> groups,
                           std::vector<attn_layer_class> classes,
                           const std::function<float(int, int, int, int, std::size_t)>& w) {
    attention_trace t;
    t.layers = layers;
    t.steps = steps;
    t.heads = heads;
    t.k_c = k;
    t.group_map = std::move(groups);
    t.layer_classes = std::move(classes);
    for (int l = 0; l < layers; ++l)
        for (int s = 0; s < steps; ++s)
            for (int h = 0; h < heads; ++h) {
                tensor m = tensor::matrix(static_cast<std::size_t>(q), k);
                for (int r = 0; r < q; ++r)
                    for (std::size_t c = 0; c < k; ++c) m.at(static_cast<std::size_t>(r), c) = w(l, s, h, r, c);
                t.weights.push_back(std::move(m));
            }
    return t;
}

attention_trace random_trace(int layers, int steps, int heads, int q, std::size_t k,
                             std::uint64_t seed) {
    rng r(seed);
    std::vector<cond_group> groups(k);
    for (std::size_t c = 0; c < k; ++c) groups[c] = kCondGroups[c % 4];
    std::vector<attn_layer_class> classes(static_cast<std::size_t>(layers));
    for (int l = 0; l < layers; ++l)
        classes[static_cast<std::size_t>(l)] =
            l % 2 == 0 ? attn_layer_class::dual : attn_layer_class::single;
    attention_trace t = make_trace(layers, steps, heads, q, k, groups, classes,
                                   [](int, int, int, int, std::size_t) { return 0.0f; });
    for (auto& m : t.weights)
        for (std::size_t row = 0; row < m.shape[0]; ++row) {
            double sum = 0.0;
            std::vector<double> vals(k);
            for (std::size_t c = 0; c < k; ++c) {
                vals[c] = 0.01 + r.uniform();
                sum += vals[c];
            }
            for (std::size_t c = 0; c < k; ++c)
                m.at(row, c) = static_cast<float>(vals[c] / sum);
        }
    return t;
}

std::vector<cond_group> half_half(std::size_t k) {
    std::vector<cond_group> g(k, cond_group::text);
    for (std::size_t c = k / 2; c < k; ++c) g[c] = cond_group::query;
    return g;
}

double brute_group_share(const attention_trace& t, cond_group g) {
    double hit = 0.0, total = 0.0;
    for (int l = 0; l < t.layers; ++l)
        for (int s = 0; s < t.steps; ++s)
            for (int h = 0; h < t.heads; ++h) {
                const tensor& w = t.at(l, s, h);
                for (std::size_t r = 0; r < w.shape[0]; ++r)
                    for (std::size_t c = 0; c < t.k_c; ++c) {
                        total += w.at(r, c);
                        if (t.group_map[c] == g) hit += w.at(r, c);
                    }
            }
    return hit / total;
}

}  // namespace

TEST_CASE("group share matches a brute-force loop over every index") {
    const attention_trace t = random_trace(2, 3, 2, 4, 8, 31);
    t.validate();
    for (cond_group g : kCondGroups)
        CHECK(group_share(t, g) == doctest::Approx(brute_group_share(t, g)).epsilon(1e-9));
    const auto dist = condition_distribution(t);
    double s = 0.0;
    for (double v : dist) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("uniform rows split mass evenly between two equal groups") {
    const attention_trace t =
        make_trace(1, 2, 2, 3, 8, half_half(8), {attn_layer_class::dual},
                   [](int, int, int, int, std::size_t) { return 0.125f; });
    CHECK(group_share(t, cond_group::text) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(group_share(t, cond_group::query) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(group_share(t, cond_group::vision), validation_error);

    const auto dist = condition_distribution(t);
    CHECK(attention_entropy(dist) == doctest::Approx(std::log(8.0)).epsilon(1e-12));
    CHECK(gini(dist) <= 1e-12);
    CHECK(topk_mass(dist, 8) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(topk_mass(dist, 4) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(topk_mass(dist, 9), validation_error);
    CHECK_THROWS_AS(topk_mass(dist, 0), validation_error);
}

TEST_CASE("a one-hot distribution is maximally concentrated") {
    const attention_trace t =
        make_trace(1, 1, 2, 4, 8, half_half(8), {attn_layer_class::single},
                   [](int, int, int, int, std::size_t c) { return c == 2 ? 1.0f : 0.0f; });
    const auto dist = condition_distribution(t);
    CHECK(attention_entropy(dist) == 0.0);
    CHECK(topk_mass(dist, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(gini(dist) == doctest::Approx(7.0 / 8.0).epsilon(1e-12));
}

TEST_CASE("entropy of a dyadic three-way split") {
    CHECK(attention_entropy({0.5, 0.25, 0.25}) ==
          doctest::Approx(1.0397207708399179).epsilon(1e-12));
}

TEST_CASE("gini agrees with the pairwise mean absolute difference") {
    rng r(55);
    std::vector<double> dist(17);
    double total = 0.0;
    for (auto& v : dist) {
        v = r.uniform() + 0.001;
        total += v;
    }
    double abs_sum = 0.0;
    for (double a : dist)
        for (double b : dist) abs_sum += std::fabs(a - b);
    const double oracle = abs_sum / (2.0 * static_cast<double>(dist.size()) * total);
    CHECK(gini(dist) == doctest::Approx(oracle).epsilon(1e-12));
    CHECK_THROWS_AS(gini({}), validation_error);
    CHECK_THROWS_AS(gini({0.0, 0.0}), computation_error);
}

TEST_CASE("head agreement on crafted top-k sets") {
    // Two heads sharing one trace; per-head mass is shaped by the head index.
    auto trace_for = [&](const std::function<float(int, std::size_t)>& mass_of) {
        attention_trace t = make_trace(
            1, 1, 2, 1, 32, std::vector<cond_group>(32, cond_group::text),
            {attn_layer_class::dual}, [&](int, int, int h, int, std::size_t c) {
                return mass_of(h, c);
            });
        return t;
    };

    // Identical concentration: both heads favour the same 16 tokens.
    const attention_trace same = trace_for([](int, std::size_t c) {
        return c < 16 ? 0.0575f : 0.005f;  // 16*0.0575 + 16*0.005 = 1
    });
    CHECK(head_jaccard(same, 16) == doctest::Approx(1.0).epsilon(1e-12));

    // Disjoint halves.
    const attention_trace split = trace_for([](int h, std::size_t c) {
        const bool mine = h == 0 ? c < 16 : c >= 16;
        return mine ? 0.0575f : 0.005f;
    });
    CHECK(head_jaccard(split, 16) == doctest::Approx(0.0).epsilon(1e-12));

    // {0..15} vs {8..23}: 8 shared of 24 distinct.
    const attention_trace shifted = trace_for([](int h, std::size_t c) {
        const std::size_t lo = h == 0 ? 0 : 8;
        const bool mine = c >= lo && c < lo + 16;
        return mine ? 0.0575f : 0.005f;
    });
    CHECK(head_jaccard(shifted, 16) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    CHECK_THROWS_AS(head_jaccard(same, 33), validation_error);
    const attention_trace lone = make_trace(
        1, 1, 1, 1, 8, half_half(8), {attn_layer_class::dual},
        [](int, int, int, int, std::size_t) { return 0.125f; });
    CHECK_THROWS_AS(head_jaccard(lone, 4), validation_error);
}

TEST_CASE("ties in the head top-k resolve toward the lowest condition index") {
    // All tokens tied: the top-16 of each head must be {0..15} for both heads.
    const attention_trace t = make_trace(
        1, 1, 2, 2, 32, std::vector<cond_group>(32, cond_group::text),
        {attn_layer_class::single}, [](int, int, int, int, std::size_t) { return 0.03125f; });
    CHECK(head_jaccard(t, 16) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("temporal split with dyadic step weights recombines to the overall share") {
    // One layer, one head, one generated token, two condition tokens.
    const float query_by_step[4] = {0.25f, 0.5f, 0.5f, 0.5f};
    const attention_trace t = make_trace(
        1, 4, 1, 1, 2, {cond_group::text, cond_group::query}, {attn_layer_class::dual},
        [&](int, int s, int, int, std::size_t c) {
            const float q = query_by_step[s];
            return c == 1 ? q : 1.0f - q;
        });
    const temporal_shares ts = temporal_split(t);
    REQUIRE(ts.available);
    CHECK(ts.early.value.at(cond_group::query) == doctest::Approx(0.375).epsilon(1e-12));
    CHECK(ts.late.value.at(cond_group::query) == doctest::Approx(0.5).epsilon(1e-12));
    const double overall = group_share(t, cond_group::query);
    CHECK(overall == doctest::Approx(0.4375).epsilon(1e-12));
    CHECK((2.0 * ts.early.value.at(cond_group::query) +
           2.0 * ts.late.value.at(cond_group::query)) /
              4.0 ==
          doctest::Approx(overall).epsilon(1e-12));
}

TEST_CASE("temporal recombination holds on random traces") {
    for (std::uint64_t seed : {7ull, 8ull}) {
        const attention_trace t = random_trace(2, 6, 2, 3, 8, seed);
        const temporal_shares ts = temporal_split(t);
        REQUIRE(ts.available);
        const int early_steps = t.steps / 2;
        const int late_steps = t.steps - early_steps;
        for (cond_group g : kCondGroups) {
            const double mix = (early_steps * ts.early.value.at(g) +
                                late_steps * ts.late.value.at(g)) /
                               t.steps;
            CHECK(mix == doctest::Approx(group_share(t, g)).epsilon(1e-9));
        }
    }
}

TEST_CASE("temporal split needs at least two steps") {
    const attention_trace t = make_trace(
        1, 1, 1, 1, 2, {cond_group::text, cond_group::query}, {attn_layer_class::dual},
        [](int, int, int, int, std::size_t c) { return c == 0 ? 0.75f : 0.25f; });
    CHECK_FALSE(temporal_split(t).available);
}

TEST_CASE("time-symmetric traces have equal early and late shares") {
    const attention_trace t = make_trace(
        1, 4, 1, 2, 4, half_half(4), {attn_layer_class::single},
        [](int, int s, int, int, std::size_t c) {
            const float base[4] = {0.125f, 0.25f, 0.375f, 0.25f};
            return base[(c + static_cast<std::size_t>(s % 2)) % 4];
        });
    const temporal_shares ts = temporal_split(t);
    REQUIRE(ts.available);
    CHECK(ts.early.value.at(cond_group::text) == ts.late.value.at(cond_group::text));
    CHECK(ts.early.value.at(cond_group::query) == ts.late.value.at(cond_group::query));
}

TEST_CASE("layer split separates dual and single stacks") {
    const attention_trace t = make_trace(
        2, 2, 1, 1, 2, {cond_group::text, cond_group::query},
        {attn_layer_class::dual, attn_layer_class::single},
        [](int l, int, int, int, std::size_t c) {
            const float q = l == 0 ? 0.25f : 0.75f;
            return c == 1 ? q : 1.0f - q;
        });
    const layer_class_shares lc = layer_split(t);
    REQUIRE(lc.dual.has_value());
    REQUIRE(lc.single.has_value());
    CHECK(lc.dual->value.at(cond_group::query) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(lc.single->value.at(cond_group::query) == doctest::Approx(0.75).epsilon(1e-12));

    attention_trace only_single = t;
    only_single.layer_classes = {attn_layer_class::single, attn_layer_class::single};
    const layer_class_shares lc2 = layer_split(only_single);
    CHECK_FALSE(lc2.dual.has_value());
    REQUIRE(lc2.single.has_value());
    CHECK(lc2.single->value.at(cond_group::query) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("routing suite over one trace echoes the per-trace metrics") {
    const attention_trace t = random_trace(2, 4, 2, 3, 8, 91);
    const routing_report rep = routing_suite({t});
    CHECK(rep.n_examples == 1);
    for (cond_group g : kCondGroups)
        CHECK(rep.overall.value.at(g) == doctest::Approx(group_share(t, g)).epsilon(1e-12));
    const auto dist = condition_distribution(t);
    CHECK(rep.entropy == doctest::Approx(attention_entropy(dist)).epsilon(1e-12));
    CHECK(rep.gini_coeff == doctest::Approx(gini(dist)).epsilon(1e-12));
    CHECK(rep.top16 == doctest::Approx(topk_mass(dist, 8)).epsilon(1e-12));
    CHECK(rep.head_jaccard16 == doctest::Approx(head_jaccard(t, 8)).epsilon(1e-12));
    REQUIRE(rep.temporal.available);
}

TEST_CASE("routing suite averages across traces") {
    const attention_trace a = random_trace(1, 2, 2, 2, 8, 101);
    const attention_trace b = random_trace(1, 2, 2, 2, 8, 102);
    const routing_report rep = routing_suite({a, b});
    CHECK(rep.n_examples == 2);
    for (cond_group g : kCondGroups) {
        const double mean = 0.5 * (group_share(a, g) + group_share(b, g));
        CHECK(rep.overall.value.at(g) == doctest::Approx(mean).epsilon(1e-12));
    }
    const routing_report twin = routing_suite({a, a});
    for (cond_group g : kCondGroups)
        CHECK(twin.overall.value.at(g) == doctest::Approx(group_share(a, g)).epsilon(1e-12));
    CHECK_THROWS_AS(routing_suite({}), validation_error);
}

TEST_CASE("trace save and load round trips dyadic weights bit for bit") {
    const auto dir = test_util::temp_dir("attn_round");
    const attention_trace t = make_trace(
        2, 2, 2, 3, 4, half_half(4), {attn_layer_class::dual, attn_layer_class::single},
        [](int l, int s, int h, int r, std::size_t c) {
            const float grid[4] = {0.5f, 0.25f, 0.125f, 0.125f};
            return grid[(c + static_cast<std::size_t>(l + s + h + r)) % 4];
        });
    save_trace(dir, t);
    const attention_trace back = load_trace(dir);
    CHECK(back.layers == t.layers);
    CHECK(back.steps == t.steps);
    CHECK(back.heads == t.heads);
    CHECK(back.k_c == t.k_c);
    CHECK(back.group_map == t.group_map);
    CHECK(back.layer_classes == t.layer_classes);
    REQUIRE(back.weights.size() == t.weights.size());
    for (std::size_t i = 0; i < t.weights.size(); ++i) {
        REQUIRE(back.weights[i].data.size() == t.weights[i].data.size());
        CHECK(std::memcmp(back.weights[i].data.data(), t.weights[i].data.data(),
                          t.weights[i].data.size() * sizeof(float)) == 0);
    }
}

TEST_CASE("row sums near one are renormalized on load, far ones rejected") {
    const auto dir = test_util::temp_dir("attn_norm");
    attention_trace t = make_trace(
        1, 1, 1, 2, 4, half_half(4), {attn_layer_class::dual},
        [](int, int, int, int, std::size_t) { return 0.25f; });
    t.at(0, 0, 0).at(0, 0) = 0.25f + 5e-5f;
    save_trace(dir, t);
    const attention_trace back = load_trace(dir);
    for (std::size_t r = 0; r < 2; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 4; ++c) sum += back.at(0, 0, 0).at(r, c);
        CHECK(std::fabs(sum - 1.0) <= 1e-6);
    }

    const auto dir2 = test_util::temp_dir("attn_norm_bad");
    t.at(0, 0, 0).at(0, 0) = 0.25f + 2e-4f;
    save_trace(dir2, t);
    CHECK_THROWS_WITH_AS(load_trace(dir2), doctest::Contains("row"), validation_error);
}

TEST_CASE("trace validation rejects inconsistent structure") {
    attention_trace good = random_trace(1, 2, 2, 2, 4, 5);
    CHECK_NOTHROW(good.validate());

    attention_trace missing = good;
    missing.weights.pop_back();
    CHECK_THROWS_AS(missing.validate(), validation_error);

    attention_trace badmap = good;
    badmap.group_map.pop_back();
    CHECK_THROWS_AS(badmap.validate(), validation_error);

    attention_trace badclass = good;
    badclass.layer_classes.push_back(attn_layer_class::dual);
    CHECK_THROWS_AS(badclass.validate(), validation_error);

    attention_trace negative = good;
    negative.weights[0].at(0, 0) = -0.1f;
    CHECK_THROWS_AS(negative.validate(), validation_error);

    attention_trace misshapen = good;
    misshapen.weights[0] = tensor::matrix(2, 5);
    CHECK_THROWS_AS(misshapen.validate(), validation_error);

    attention_trace empty;
    CHECK_THROWS_AS(empty.validate(), validation_error);
}

TEST_CASE("attention kernels agree across execution modes") {
    const attention_trace t = random_trace(2, 4, 2, 3, 8, 77);
    for (cond_group g : kCondGroups)
        CHECK(group_share(t, g, exec::serial) == group_share(t, g, exec::parallel));
    CHECK(condition_distribution(t, exec::serial) == condition_distribution(t, exec::parallel));
    CHECK(head_jaccard(t, 4, exec::serial) == head_jaccard(t, 4, exec::parallel));
    const temporal_shares a = temporal_split(t, exec::serial);
    const temporal_shares b = temporal_split(t, exec::parallel);
    REQUIRE(a.available == b.available);
    for (cond_group g : kCondGroups) {
        CHECK(a.early.value.at(g) == b.early.value.at(g));
        CHECK(a.late.value.at(g) == b.late.value.at(g));
    }
}
