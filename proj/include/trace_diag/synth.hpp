#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "trace_diag/attention.hpp"
#include "trace_diag/compose.hpp"
#include "trace_diag/feature_store.hpp"
#include "trace_diag/probe.hpp"

namespace trace_diag {

// ---- planted feature datasets --------------------------------------------------

// One label family carried by one token group at a chosen strength.
struct family_plant {
    label_family family = label_family::edited_slot;
    double strength = 1.0;
    token_group carrier = token_group::text;  // text or query
};

struct plant_spec {
    int examples = 240;  // even; two directed examples per scene
    int dims = 96;       // >= sum of family cardinalities (65 for builtin pools)
    int text_tokens = 8;
    int query_tokens = 8;
    double noise = 0.25;
    std::uint64_t seed = 0;
    std::vector<family_plant> families;
};

struct planted_dataset {
    composed_dataset meta;
    feature_set features;  // stage pre
    // Orthonormal carrier direction per (family, class), the analytic truth.
    std::map<label_family, std::vector<std::vector<double>>> directions;
};

planted_dataset plant_dataset(const plant_spec& spec, const pools& p = pools::builtin());

// ---- connector simulation -------------------------------------------------------

// Y = scale * (X * P_r) + noise, P_r a seeded random rank-r orthogonal
// projector (identity when rank == dims). scramble_query additionally applies
// a per-example dimension permutation to query-group tokens, destroying
// linearly decodable structure carried there while preserving norms.
struct connector_sim {
    int rank = 0;  // 1..d; 0 means full rank
    double scale = 1.0;
    double noise = 0.0;
    bool scramble_query = false;
    std::uint64_t seed = 0;
};

std::vector<example_features> apply_connector(const std::vector<example_features>& pre,
                                              const connector_sim& sim);

// ---- planted attention traces ----------------------------------------------------

struct attention_plant {
    int layers = 2;
    int steps = 4;
    int heads = 4;
    int queries = 8;
    std::vector<std::pair<cond_group, int>> group_sizes;  // condition-token blocks
    std::map<cond_group, double> shares;                  // sums to 1
    double concentration = 1.0;  // within-group weight of rank k is exp(-c*k)
    bool rank_shuffle = false;   // per-row shuffle of which member holds which rank
    int dual_layers = -1;        // -1: layers / 2
    std::uint64_t seed = 0;
};

// Every row realizes the target group shares exactly.
attention_trace plant_attention(const attention_plant& spec);

// ---- nonlinear control ------------------------------------------------------------

// XOR-style 2-class control (linearly inseparable): concentric shells in a
// 3-dim planted subspace. No halfspace beats 0.55, while a one-hidden-layer
// MLP picks up the radial boundary quickly.
labeled_features plant_xor_dataset(int n, int d, double strength, double noise_sd,
                                   std::uint64_t seed);

// ---- CLI config --------------------------------------------------------------------

struct synth_config {
    plant_spec dataset;
    std::optional<connector_sim> connector;
    std::optional<attention_plant> attention;
};

// root_seed_override replaces the file's top-level seed; per-section seeds
// spelled out in the file still win.
synth_config read_synth_config(const std::filesystem::path& file,
                               std::optional<std::uint64_t> root_seed_override = std::nullopt);

// Writes metadata, a feature manifest with pre (and post, when a connector is
// configured) tensors, an attention trace dir when configured, and
// truth.json echoing the planted ground truth.
void write_synth_bundle(const std::filesystem::path& out_dir, const synth_config& cfg,
                        const pools& p = pools::builtin());

}  // namespace trace_diag
