#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trace_diag/parallel.hpp"
#include "trace_diag/tensor_file.hpp"

namespace trace_diag {

enum class cond_group { text, query, vision, learnable };
enum class attn_layer_class { dual, single };

inline constexpr cond_group kCondGroups[] = {cond_group::text, cond_group::query,
                                             cond_group::vision, cond_group::learnable};

std::string to_string(cond_group g);
cond_group cond_group_from_string(const std::string& s);
std::string to_string(attn_layer_class c);
attn_layer_class layer_class_from_string(const std::string& s);

// Attention weights alpha indexed (layer, step, head, generated token q,
// condition token k), stored as one Q x K_c matrix per (layer, step, head).
// Rows are probability rows: each sums to 1 within 1e-4 (renormalized on
// load; rejected beyond the tolerance).
struct attention_trace {
    int layers = 0;
    int steps = 0;  // earliest first
    int heads = 0;
    std::size_t k_c = 0;
    std::vector<tensor> weights;  // index = (layer * steps + step) * heads + head
    std::vector<cond_group> group_map;           // length k_c
    std::vector<attn_layer_class> layer_classes;  // length layers

    const tensor& at(int layer, int step, int head) const {
        return weights[static_cast<std::size_t>((layer * steps + step) * heads + head)];
    }
    tensor& at(int layer, int step, int head) {
        return weights[static_cast<std::size_t>((layer * steps + step) * heads + head)];
    }
    void validate() const;
};

// Directory layout: trace.json sidecar naming per-(layer,step,head) .trcf
// files, all relative to the directory.
attention_trace load_trace(const std::filesystem::path& dir);
void save_trace(const std::filesystem::path& dir, const attention_trace& trace);

// A_g = attention mass landing on group g, over all (layer, step, head, q).
double group_share(const attention_trace& trace, cond_group g, exec mode = exec::serial);

// Aggregated per-condition-token distribution, normalized to sum 1.
std::vector<double> condition_distribution(const attention_trace& trace,
                                           exec mode = exec::serial);

double attention_entropy(const std::vector<double>& dist);
double topk_mass(const std::vector<double>& dist, int k);
double gini(const std::vector<double>& dist);

// Mean Jaccard overlap of per-head top-k condition sets; head mass is
// aggregated over all layers, steps, and generated tokens. Ties break
// toward the lowest condition index.
double head_jaccard(const attention_trace& trace, int k = 16, exec mode = exec::serial);

struct group_shares {
    std::map<cond_group, double> value;  // only groups present in the map
};

// Early = steps [0, floor(S/2)), late = the rest. Unavailable when the
// boundary is 0.
struct temporal_shares {
    bool available = false;
    group_shares early;
    group_shares late;
};

temporal_shares temporal_split(const attention_trace& trace, exec mode = exec::serial);

struct layer_class_shares {
    std::optional<group_shares> dual;
    std::optional<group_shares> single;
};

layer_class_shares layer_split(const attention_trace& trace, exec mode = exec::serial);

struct routing_report {
    int n_examples = 0;
    group_shares overall;
    temporal_shares temporal;
    layer_class_shares per_layer_class;
    double entropy = 0.0;
    double gini_coeff = 0.0;
    double top16 = 0.0;
    double top32 = 0.0;
    double head_jaccard16 = 0.0;
};

// Per-trace metrics averaged over traces.
routing_report routing_suite(const std::vector<attention_trace>& traces,
                             exec mode = exec::serial);

}  // namespace trace_diag
