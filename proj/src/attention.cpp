#include "trace_diag/attention.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>

#include "json.hpp"
#include "trace_diag/errors.hpp"

namespace trace_diag {

std::string to_string(cond_group g) {
    switch (g) {
        case cond_group::text: return "text";
        case cond_group::query: return "query";
        case cond_group::vision: return "vision";
        case cond_group::learnable: return "learnable";
    }
    throw validation_error("invalid condition group value");
}

cond_group cond_group_from_string(const std::string& s) {
    for (cond_group g : kCondGroups)
        if (to_string(g) == s) return g;
    throw validation_error("unknown condition group: '" + s + "'");
}

std::string to_string(attn_layer_class c) {
    return c == attn_layer_class::dual ? "dual" : "single";
}

attn_layer_class layer_class_from_string(const std::string& s) {
    if (s == "dual") return attn_layer_class::dual;
    if (s == "single") return attn_layer_class::single;
    throw validation_error("unknown layer class: '" + s + "'");
}

void attention_trace::validate() const {
    if (layers < 1 || steps < 1 || heads < 1 || k_c < 1)
        throw validation_error("attention trace has empty dimensions");
    if (weights.size() != static_cast<std::size_t>(layers) * static_cast<std::size_t>(steps) *
                              static_cast<std::size_t>(heads))
        throw validation_error("attention trace holds " + std::to_string(weights.size()) +
                               " matrices, expected layers*steps*heads");
    if (group_map.size() != k_c)
        throw validation_error("group map length does not match condition token count");
    if (layer_classes.size() != static_cast<std::size_t>(layers))
        throw validation_error("layer class list length does not match layer count");
    for (const auto& w : weights) {
        if (w.shape.size() != 2 || w.shape[1] != k_c)
            throw validation_error("attention matrix is not Q x K_c");
        for (float v : w.data)
            if (v < 0.0f) throw validation_error("attention weights must be nonnegative");
    }
}

namespace {

// Rows must sum to 1 within 1e-4; matching rows are renormalized exactly.
void normalize_rows(tensor& w, int layer, int step, int head) {
    const std::size_t q = w.shape[0];
    const std::size_t k = w.shape[1];
    for (std::size_t r = 0; r < q; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < k; ++c) sum += w.at(r, c);
        if (std::fabs(sum - 1.0) > 1e-4)
            throw validation_error("attention row sum " + std::to_string(sum) + " at layer " +
                                   std::to_string(layer) + " step " + std::to_string(step) +
                                   " head " + std::to_string(head) + " row " + std::to_string(r) +
                                   " is outside the 1e-4 tolerance");
        for (std::size_t c = 0; c < k; ++c)
            w.at(r, c) = static_cast<float>(w.at(r, c) / sum);
    }
}

}  // namespace

attention_trace load_trace(const std::filesystem::path& dir) {
    const auto sidecar = dir / "trace.json";
    std::ifstream in(sidecar);
    if (!in) throw validation_error("cannot open trace sidecar: " + sidecar.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(sidecar.string() + " is not valid JSON: " + e.what());
    }

    attention_trace trace;
    try {
        trace.layers = j.at("layers").get<int>();
        trace.steps = j.at("steps").get<int>();
        trace.heads = j.at("heads").get<int>();
        trace.k_c = j.at("condition_tokens").get<std::size_t>();
        for (const auto& g : j.at("group_map"))
            trace.group_map.push_back(cond_group_from_string(g.get<std::string>()));
        for (const auto& c : j.at("layer_classes"))
            trace.layer_classes.push_back(layer_class_from_string(c.get<std::string>()));

        trace.weights.resize(static_cast<std::size_t>(trace.layers) *
                             static_cast<std::size_t>(trace.steps) *
                             static_cast<std::size_t>(trace.heads));
        std::vector<bool> seen(trace.weights.size(), false);
        for (const auto& f : j.at("files")) {
            const int l = f.at("layer").get<int>();
            const int s = f.at("step").get<int>();
            const int h = f.at("head").get<int>();
            if (l < 0 || l >= trace.layers || s < 0 || s >= trace.steps || h < 0 ||
                h >= trace.heads)
                throw validation_error("trace file entry indexes out of range");
            tensor w = read_tensor(dir / f.at("tensor").get<std::string>());
            if (w.shape.size() != 2 || w.shape[1] != trace.k_c)
                throw validation_error("attention matrix " + f.at("tensor").get<std::string>() +
                                       " is not Q x K_c");
            normalize_rows(w, l, s, h);
            const auto idx = static_cast<std::size_t>((l * trace.steps + s) * trace.heads + h);
            seen[idx] = true;
            trace.weights[idx] = std::move(w);
        }
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (!seen[i])
                throw validation_error("trace is missing a matrix for flattened index " +
                                       std::to_string(i));
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(sidecar.string() + ": missing or mistyped field: " + e.what());
    }
    trace.validate();
    return trace;
}

void save_trace(const std::filesystem::path& dir, const attention_trace& trace) {
    trace.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json files = nlohmann::json::array();
    for (int l = 0; l < trace.layers; ++l)
        for (int s = 0; s < trace.steps; ++s)
            for (int h = 0; h < trace.heads; ++h) {
                const std::string name = "l" + std::to_string(l) + "_s" + std::to_string(s) +
                                         "_h" + std::to_string(h) + ".trcf";
                write_tensor(dir / name, trace.at(l, s, h));
                files.push_back(
                    {{"layer", l}, {"step", s}, {"head", h}, {"tensor", name}});
            }
    nlohmann::json groups = nlohmann::json::array();
    for (cond_group g : trace.group_map) groups.push_back(to_string(g));
    nlohmann::json classes = nlohmann::json::array();
    for (attn_layer_class c : trace.layer_classes) classes.push_back(to_string(c));
    nlohmann::json j = {{"layers", trace.layers},
                        {"steps", trace.steps},
                        {"heads", trace.heads},
                        {"condition_tokens", trace.k_c},
                        {"group_map", groups},
                        {"layer_classes", classes},
                        {"files", files}};
    std::ofstream out(dir / "trace.json", std::ios::binary);
    if (!out) throw validation_error("cannot write trace sidecar under " + dir.string());
    out << j.dump(2) << '\n';
}

namespace {

// Mass per group and total mass over the matrices selected by `keep(l, s)`.
group_shares subset_shares(const attention_trace& trace,
                           const std::function<bool(int, int)>& keep, exec mode) {
    const auto n_mats = static_cast<std::int64_t>(trace.weights.size());
    std::vector<std::array<double, 4>> per_mat(static_cast<std::size_t>(n_mats),
                                               {0.0, 0.0, 0.0, 0.0});
    std::vector<double> mat_total(static_cast<std::size_t>(n_mats), 0.0);
    parallel_for(n_mats, mode, [&](std::int64_t mi) {
        const int layer = static_cast<int>(mi) / (trace.steps * trace.heads);
        const int step = (static_cast<int>(mi) / trace.heads) % trace.steps;
        if (!keep(layer, step)) return;
        const tensor& w = trace.weights[static_cast<std::size_t>(mi)];
        const std::size_t q = w.shape[0];
        std::array<double, 4> acc{0.0, 0.0, 0.0, 0.0};
        double total = 0.0;
        for (std::size_t r = 0; r < q; ++r)
            for (std::size_t c = 0; c < trace.k_c; ++c) {
                const double v = w.at(r, c);
                acc[static_cast<std::size_t>(trace.group_map[c])] += v;
                total += v;
            }
        per_mat[static_cast<std::size_t>(mi)] = acc;
        mat_total[static_cast<std::size_t>(mi)] = total;
    });

    std::array<double, 4> mass{0.0, 0.0, 0.0, 0.0};
    double total = 0.0;
    for (std::size_t mi = 0; mi < per_mat.size(); ++mi) {
        for (std::size_t g = 0; g < 4; ++g) mass[g] += per_mat[mi][g];
        total += mat_total[mi];
    }
    if (total <= 0.0) throw computation_error("attention subset carries no mass");

    group_shares out;
    for (cond_group g : kCondGroups) {
        bool present = false;
        for (cond_group mapped : trace.group_map)
            if (mapped == g) present = true;
        if (present) out.value[g] = mass[static_cast<std::size_t>(g)] / total;
    }
    return out;
}

}  // namespace

double group_share(const attention_trace& trace, cond_group g, exec mode) {
    bool present = false;
    for (cond_group mapped : trace.group_map)
        if (mapped == g) present = true;
    if (!present)
        throw validation_error("condition group '" + to_string(g) + "' is empty in this trace");
    const auto shares = subset_shares(trace, [](int, int) { return true; }, mode);
    return shares.value.at(g);
}

std::vector<double> condition_distribution(const attention_trace& trace, exec mode) {
    trace.validate();
    const auto n_mats = static_cast<std::int64_t>(trace.weights.size());
    std::vector<std::vector<double>> per_mat(static_cast<std::size_t>(n_mats));
    parallel_for(n_mats, mode, [&](std::int64_t mi) {
        const tensor& w = trace.weights[static_cast<std::size_t>(mi)];
        std::vector<double> acc(trace.k_c, 0.0);
        for (std::size_t r = 0; r < w.shape[0]; ++r)
            for (std::size_t c = 0; c < trace.k_c; ++c) acc[c] += w.at(r, c);
        per_mat[static_cast<std::size_t>(mi)] = std::move(acc);
    });
    std::vector<double> mass(trace.k_c, 0.0);
    for (const auto& acc : per_mat)
        for (std::size_t c = 0; c < trace.k_c; ++c) mass[c] += acc[c];
    double total = 0.0;
    for (double v : mass) total += v;
    if (total <= 0.0) throw computation_error("attention trace carries no mass");
    for (double& v : mass) v /= total;
    return mass;
}

double attention_entropy(const std::vector<double>& dist) {
    double h = 0.0;
    for (double p : dist)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

double topk_mass(const std::vector<double>& dist, int k) {
    if (k < 1 || static_cast<std::size_t>(k) > dist.size())
        throw validation_error("top-K with K=" + std::to_string(k) + " on " +
                               std::to_string(dist.size()) + " condition tokens");
    std::vector<double> sorted = dist;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    double m = 0.0;
    for (int i = 0; i < k; ++i) m += sorted[static_cast<std::size_t>(i)];
    return m;
}

double gini(const std::vector<double>& dist) {
    const std::size_t n = dist.size();
    if (n == 0) throw validation_error("Gini of an empty distribution");
    double total = 0.0;
    for (double v : dist) total += v;
    if (total <= 0.0) throw computation_error("Gini undefined for zero total mass");
    std::vector<double> sorted = dist;
    std::sort(sorted.begin(), sorted.end());
    // sum_{i<j} (a_j - a_i) via prefix sums; the double sum is twice that.
    double pair_sum = 0.0, prefix = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        pair_sum += static_cast<double>(j) * sorted[j] - prefix;
        prefix += sorted[j];
    }
    return 2.0 * pair_sum / (2.0 * static_cast<double>(n) * total);
}

double head_jaccard(const attention_trace& trace, int k, exec mode) {
    if (trace.heads < 2) throw validation_error("head agreement needs at least 2 heads");
    if (k < 1 || static_cast<std::size_t>(k) > trace.k_c)
        throw validation_error("head top-K with K=" + std::to_string(k) + " on " +
                               std::to_string(trace.k_c) + " condition tokens");

    // Per-head mass over all layers, steps, and generated tokens.
    std::vector<std::vector<double>> head_mass(static_cast<std::size_t>(trace.heads),
                                               std::vector<double>(trace.k_c, 0.0));
    parallel_for(trace.heads, mode, [&](std::int64_t h) {
        auto& acc = head_mass[static_cast<std::size_t>(h)];
        for (int l = 0; l < trace.layers; ++l)
            for (int s = 0; s < trace.steps; ++s) {
                const tensor& w = trace.at(l, s, static_cast<int>(h));
                for (std::size_t r = 0; r < w.shape[0]; ++r)
                    for (std::size_t c = 0; c < trace.k_c; ++c) acc[c] += w.at(r, c);
            }
    });

    std::vector<std::vector<std::size_t>> top_sets;
    for (const auto& mass : head_mass) {
        std::vector<std::size_t> order(trace.k_c);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (mass[a] != mass[b]) return mass[a] > mass[b];
            return a < b;
        });
        order.resize(static_cast<std::size_t>(k));
        std::sort(order.begin(), order.end());
        top_sets.push_back(std::move(order));
    }

    double total = 0.0;
    int pairs = 0;
    for (std::size_t a = 0; a < top_sets.size(); ++a)
        for (std::size_t b = a + 1; b < top_sets.size(); ++b) {
            std::vector<std::size_t> inter;
            std::set_intersection(top_sets[a].begin(), top_sets[a].end(), top_sets[b].begin(),
                                  top_sets[b].end(), std::back_inserter(inter));
            const double uni = static_cast<double>(2 * k) - static_cast<double>(inter.size());
            total += static_cast<double>(inter.size()) / uni;
            ++pairs;
        }
    return total / static_cast<double>(pairs);
}

temporal_shares temporal_split(const attention_trace& trace, exec mode) {
    temporal_shares out;
    const int boundary = trace.steps / 2;
    if (boundary < 1 || trace.steps - boundary < 1) return out;
    out.available = true;
    out.early = subset_shares(trace, [&](int, int s) { return s < boundary; }, mode);
    out.late = subset_shares(trace, [&](int, int s) { return s >= boundary; }, mode);
    return out;
}

layer_class_shares layer_split(const attention_trace& trace, exec mode) {
    layer_class_shares out;
    bool has_dual = false, has_single = false;
    for (attn_layer_class c : trace.layer_classes) {
        if (c == attn_layer_class::dual) has_dual = true;
        if (c == attn_layer_class::single) has_single = true;
    }
    if (has_dual)
        out.dual = subset_shares(
            trace,
            [&](int l, int) { return trace.layer_classes[static_cast<std::size_t>(l)] ==
                                     attn_layer_class::dual; },
            mode);
    if (has_single)
        out.single = subset_shares(
            trace,
            [&](int l, int) { return trace.layer_classes[static_cast<std::size_t>(l)] ==
                                     attn_layer_class::single; },
            mode);
    return out;
}

namespace {

void accumulate_shares(group_shares& acc, const group_shares& one) {
    for (const auto& [g, v] : one.value) acc.value[g] += v;
}

void scale_shares(group_shares& acc, double factor) {
    for (auto& [g, v] : acc.value) v *= factor;
}

}  // namespace

routing_report routing_suite(const std::vector<attention_trace>& traces, exec mode) {
    if (traces.empty()) throw validation_error("routing suite needs at least one trace");
    routing_report rep;
    rep.n_examples = static_cast<int>(traces.size());

    int n_temporal = 0, n_dual = 0, n_single = 0;
    group_shares dual_acc, single_acc;
    for (const auto& trace : traces) {
        trace.validate();
        accumulate_shares(rep.overall, subset_shares(trace, [](int, int) { return true; }, mode));

        const auto dist = condition_distribution(trace, mode);
        rep.entropy += attention_entropy(dist);
        rep.gini_coeff += gini(dist);
        rep.top16 += topk_mass(dist, std::min<int>(16, static_cast<int>(dist.size())));
        rep.top32 += topk_mass(dist, std::min<int>(32, static_cast<int>(dist.size())));
        rep.head_jaccard16 +=
            head_jaccard(trace, std::min<int>(16, static_cast<int>(trace.k_c)), mode);

        const auto temp = temporal_split(trace, mode);
        if (temp.available) {
            rep.temporal.available = true;
            accumulate_shares(rep.temporal.early, temp.early);
            accumulate_shares(rep.temporal.late, temp.late);
            ++n_temporal;
        }
        const auto lc = layer_split(trace, mode);
        if (lc.dual) {
            accumulate_shares(dual_acc, *lc.dual);
            ++n_dual;
        }
        if (lc.single) {
            accumulate_shares(single_acc, *lc.single);
            ++n_single;
        }
    }

    const double inv_n = 1.0 / static_cast<double>(traces.size());
    scale_shares(rep.overall, inv_n);
    rep.entropy *= inv_n;
    rep.gini_coeff *= inv_n;
    rep.top16 *= inv_n;
    rep.top32 *= inv_n;
    rep.head_jaccard16 *= inv_n;
    if (rep.temporal.available) {
        scale_shares(rep.temporal.early, 1.0 / n_temporal);
        scale_shares(rep.temporal.late, 1.0 / n_temporal);
    }
    if (n_dual > 0) {
        scale_shares(dual_acc, 1.0 / n_dual);
        rep.per_layer_class.dual = dual_acc;
    }
    if (n_single > 0) {
        scale_shares(single_acc, 1.0 / n_single);
        rep.per_layer_class.single = single_acc;
    }
    return rep;
}

}  // namespace trace_diag
