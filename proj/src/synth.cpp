#include "trace_diag/synth.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "trace_diag/errors.hpp"
#include "trace_diag/parallel.hpp"
#include "trace_diag/rng.hpp"

namespace trace_diag {

namespace {

Eigen::MatrixXd seeded_gaussian(int rows, int cols, std::uint64_t seed) {
    rng r(seed);
    Eigen::MatrixXd g(rows, cols);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = r.normal();
    return g;
}

// Thin Q factor: `cols` orthonormal columns of a seeded Gaussian matrix.
Eigen::MatrixXd orthonormal_columns(int dim, int cols, std::uint64_t seed) {
    const Eigen::MatrixXd g = seeded_gaussian(dim, cols, seed);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, cols);
    // Sign convention: first entry of each column nonnegative, so the basis
    // does not depend on QR internals.
    for (Eigen::Index c = 0; c < q.cols(); ++c)
        if (q(0, c) < 0.0) q.col(c) = -q.col(c);
    return q;
}

}  // namespace

planted_dataset plant_dataset(const plant_spec& spec, const pools& p) {
    if (spec.examples < 2 || spec.examples % 2 != 0)
        throw validation_error("plant spec needs an even example count of at least 2");
    if (spec.text_tokens < 1 || spec.query_tokens < 1)
        throw validation_error("plant spec needs at least one text and one query token");
    if (spec.noise < 0.0) throw validation_error("plant spec noise must be nonnegative");

    int total_card = 0;
    for (label_family f : kLabelFamilies) total_card += family_cardinality(f, p);
    if (spec.dims < total_card)
        throw validation_error("plant spec dims " + std::to_string(spec.dims) +
                               " is below the " + std::to_string(total_card) +
                               " planted directions the label families need");

    std::map<label_family, int> offsets;
    int off = 0;
    for (label_family f : kLabelFamilies) {
        offsets[f] = off;
        off += family_cardinality(f, p);
    }
    for (const auto& fp : spec.families) {
        if (fp.carrier != token_group::text && fp.carrier != token_group::query)
            throw validation_error("family " + to_string(fp.family) +
                                   " carrier must be text or query");
        if (fp.strength < 0.0)
            throw validation_error("family " + to_string(fp.family) +
                                   " strength must be nonnegative");
    }

    planted_dataset out;
    compose_options opts;
    opts.scenes = spec.examples / 2;
    opts.seed = spec.seed;
    out.meta = compose_dataset(p, opts);

    const Eigen::MatrixXd dirs =
        orthonormal_columns(spec.dims, total_card, derive_seed(spec.seed, "directions"));
    for (const auto& fp : spec.families) {
        const int card = family_cardinality(fp.family, p);
        auto& block = out.directions[fp.family];
        block.resize(static_cast<std::size_t>(card));
        for (int c = 0; c < card; ++c) {
            const auto col = dirs.col(offsets[fp.family] + c);
            block[static_cast<std::size_t>(c)].assign(col.data(), col.data() + col.size());
        }
    }

    const int t_total = spec.text_tokens + spec.query_tokens;
    std::vector<token_group> groups(static_cast<std::size_t>(t_total), token_group::text);
    for (int t = spec.text_tokens; t < t_total; ++t)
        groups[static_cast<std::size_t>(t)] = token_group::query;

    std::vector<example_features> feats(out.meta.examples.size());
    parallel_for(out.meta.examples.size(), exec::parallel, [&](std::size_t i) {
        const relation_example& ex = out.meta.examples[i];
        rng r(derive_seed(spec.seed, "tokens", i));
        Eigen::MatrixXd x(t_total, spec.dims);
        for (int t = 0; t < t_total; ++t)
            for (int j = 0; j < spec.dims; ++j) x(t, j) = spec.noise * r.normal();
        for (const auto& fp : spec.families) {
            const int label = family_label(fp.family, ex, p);
            if (label < 0) continue;
            const auto dir = dirs.col(offsets.at(fp.family) + label);
            for (int t = 0; t < t_total; ++t)
                if (groups[static_cast<std::size_t>(t)] == fp.carrier)
                    x.row(t) += fp.strength * dir.transpose();
        }
        example_features ef;
        ef.example_id = ex.example_id;
        ef.feature_stage = stage::pre;
        ef.tokens = tensor::matrix(static_cast<std::uint32_t>(t_total),
                                   static_cast<std::uint32_t>(spec.dims));
        for (int t = 0; t < t_total; ++t)
            for (int j = 0; j < spec.dims; ++j)
                ef.tokens.at(static_cast<std::size_t>(t), static_cast<std::size_t>(j)) =
                    static_cast<float>(x(t, j));
        ef.groups = groups;
        ef.pooled = pool_tokens(ef.tokens);
        feats[i] = std::move(ef);
    });
    out.features = make_feature_set(std::move(feats));
    return out;
}

std::vector<example_features> apply_connector(const std::vector<example_features>& pre,
                                              const connector_sim& sim) {
    if (pre.empty()) throw validation_error("connector needs at least one example");
    const int d = static_cast<int>(pre.front().dim());
    for (const auto& ef : pre)
        if (static_cast<int>(ef.dim()) != d)
            throw validation_error("connector input dims differ across examples");
    const int r = sim.rank == 0 ? d : sim.rank;
    if (r < 1 || r > d)
        throw validation_error("connector rank " + std::to_string(sim.rank) +
                               " is outside 1.." + std::to_string(d));
    if (sim.scale <= 0.0) throw validation_error("connector scale must be positive");
    if (sim.noise < 0.0) throw validation_error("connector noise must be nonnegative");

    Eigen::MatrixXd q_r;
    if (r < d) q_r = orthonormal_columns(d, r, derive_seed(sim.seed, "projector"));

    std::vector<example_features> post(pre.size());
    parallel_for(pre.size(), exec::parallel, [&](std::size_t i) {
        const example_features& in = pre[i];
        const int t_total = static_cast<int>(in.token_count());
        Eigen::MatrixXd x(t_total, d);
        for (int t = 0; t < t_total; ++t)
            for (int j = 0; j < d; ++j)
                x(t, j) = in.tokens.at(static_cast<std::size_t>(t), static_cast<std::size_t>(j));

        Eigen::MatrixXd y = r < d ? Eigen::MatrixXd((x * q_r) * q_r.transpose()) : x;
        y *= sim.scale;
        if (sim.noise > 0.0) {
            rng nr(derive_seed(sim.seed, "noise", i));
            for (int t = 0; t < t_total; ++t)
                for (int j = 0; j < d; ++j) y(t, j) += sim.noise * nr.normal();
        }
        if (sim.scramble_query) {
            rng sr(derive_seed(sim.seed, "scramble", i));
            std::vector<int> perm(static_cast<std::size_t>(d));
            std::iota(perm.begin(), perm.end(), 0);
            sr.shuffle(perm);
            Eigen::VectorXd tmp(d);
            for (int t = 0; t < t_total; ++t) {
                if (in.groups[static_cast<std::size_t>(t)] != token_group::query) continue;
                tmp = y.row(t);
                for (int j = 0; j < d; ++j) y(t, j) = tmp(perm[static_cast<std::size_t>(j)]);
            }
        }

        example_features ef;
        ef.example_id = in.example_id;
        ef.feature_stage = stage::post;
        ef.tokens = tensor::matrix(static_cast<std::uint32_t>(t_total),
                                   static_cast<std::uint32_t>(d));
        for (int t = 0; t < t_total; ++t)
            for (int j = 0; j < d; ++j)
                ef.tokens.at(static_cast<std::size_t>(t), static_cast<std::size_t>(j)) =
                    static_cast<float>(y(t, j));
        ef.groups = in.groups;
        ef.pooled = pool_tokens(ef.tokens);
        post[i] = std::move(ef);
    });
    return post;
}

attention_trace plant_attention(const attention_plant& spec) {
    if (spec.layers < 1 || spec.steps < 1 || spec.heads < 1 || spec.queries < 1)
        throw validation_error("attention plant shape values must be positive");
    if (spec.group_sizes.empty()) throw validation_error("attention plant needs token groups");
    if (spec.concentration < 0.0)
        throw validation_error("attention plant concentration must be nonnegative");

    std::set<cond_group> seen;
    std::size_t k_c = 0;
    for (const auto& [g, size] : spec.group_sizes) {
        if (size < 1)
            throw validation_error("attention plant group " + to_string(g) +
                                   " needs a positive size");
        if (!seen.insert(g).second)
            throw validation_error("attention plant group " + to_string(g) + " listed twice");
        k_c += static_cast<std::size_t>(size);
    }
    double share_sum = 0.0;
    for (const auto& [g, share] : spec.shares) {
        if (share < 0.0)
            throw validation_error("attention plant share for " + to_string(g) +
                                   " must be nonnegative");
        if (!seen.count(g))
            throw validation_error("attention plant share names unknown group " + to_string(g));
        share_sum += share;
    }
    if (std::abs(share_sum - 1.0) > 1e-9)
        throw validation_error("attention plant shares sum to " + std::to_string(share_sum) +
                               ", expected 1");
    const int dual = spec.dual_layers < 0 ? spec.layers / 2 : spec.dual_layers;
    if (dual > spec.layers)
        throw validation_error("attention plant dual layer count exceeds layer count");

    attention_trace tr;
    tr.layers = spec.layers;
    tr.steps = spec.steps;
    tr.heads = spec.heads;
    tr.k_c = k_c;
    tr.group_map.reserve(k_c);
    for (const auto& [g, size] : spec.group_sizes)
        tr.group_map.insert(tr.group_map.end(), static_cast<std::size_t>(size), g);
    tr.layer_classes.resize(static_cast<std::size_t>(spec.layers), attn_layer_class::single);
    for (int l = 0; l < dual; ++l)
        tr.layer_classes[static_cast<std::size_t>(l)] = attn_layer_class::dual;

    tr.weights.resize(static_cast<std::size_t>(spec.layers * spec.steps * spec.heads));
    std::uint64_t flat_row = 0;
    for (int l = 0; l < spec.layers; ++l)
        for (int s = 0; s < spec.steps; ++s)
            for (int h = 0; h < spec.heads; ++h) {
                tensor m = tensor::matrix(static_cast<std::uint32_t>(spec.queries),
                                          static_cast<std::uint32_t>(k_c));
                for (int q = 0; q < spec.queries; ++q, ++flat_row) {
                    rng row_rng(derive_seed(spec.seed, "row", flat_row));
                    std::size_t base = 0;
                    for (const auto& [g, size] : spec.group_sizes) {
                        const auto it = spec.shares.find(g);
                        const double share = it == spec.shares.end() ? 0.0 : it->second;
                        std::vector<double> profile(static_cast<std::size_t>(size));
                        double total = 0.0;
                        for (int k = 0; k < size; ++k) {
                            profile[static_cast<std::size_t>(k)] =
                                std::exp(-spec.concentration * k);
                            total += profile[static_cast<std::size_t>(k)];
                        }
                        std::vector<int> member(static_cast<std::size_t>(size));
                        std::iota(member.begin(), member.end(), 0);
                        if (spec.rank_shuffle) row_rng.shuffle(member);
                        for (int k = 0; k < size; ++k) {
                            const std::size_t col =
                                base + static_cast<std::size_t>(member[static_cast<std::size_t>(k)]);
                            m.at(static_cast<std::size_t>(q), col) = static_cast<float>(
                                share * profile[static_cast<std::size_t>(k)] / total);
                        }
                        base += static_cast<std::size_t>(size);
                    }
                }
                tr.at(l, s, h) = std::move(m);
            }
    tr.validate();
    return tr;
}

labeled_features plant_xor_dataset(int n, int d, double strength, double noise_sd,
                                   std::uint64_t seed) {
    if (n < 4) throw validation_error("xor dataset needs at least 4 examples");
    if (d < 2) throw validation_error("xor dataset needs at least 2 dims");
    if (strength < 0.0 || noise_sd < 0.0)
        throw validation_error("xor strength and noise must be nonnegative");

    // Concentric shells in a 3-dim planted subspace. A four-quadrant layout
    // would leave a 3/4-accuracy halfspace (one class brackets the other along
    // the diagonal); with nested shells at radius ratio 0.8 no halfspace
    // beats 0.55, while the radial boundary is easy for one hidden layer.
    const Eigen::MatrixXd dirs = orthonormal_columns(d, 3, derive_seed(seed, "xor_dirs"));
    labeled_features out;
    out.x.resize(n, d);
    out.y.resize(static_cast<std::size_t>(n));
    out.group_ids.resize(static_cast<std::size_t>(n));
    out.example_ids.resize(static_cast<std::size_t>(n));
    out.n_classes = 2;
    char buf[32];
    for (int i = 0; i < n; ++i) {
        rng r(derive_seed(seed, "xor", static_cast<std::uint64_t>(i)));
        const int label = r.bernoulli(0.5) ? 1 : 0;
        Eigen::Vector3d u(r.normal(), r.normal(), r.normal());
        while (u.norm() < 1e-9) u = Eigen::Vector3d(r.normal(), r.normal(), r.normal());
        u.normalize();
        const double radius = (label == 1 ? 1.0 : 0.8) * strength;
        Eigen::VectorXd x = radius * (dirs * u);
        for (int j = 0; j < d; ++j) x(j) += noise_sd * r.normal();
        out.x.row(i) = x.transpose();
        out.y[static_cast<std::size_t>(i)] = label;
        std::snprintf(buf, sizeof buf, "xor_%06d", i);
        out.example_ids[static_cast<std::size_t>(i)] = buf;
        out.group_ids[static_cast<std::size_t>(i)] = buf;
    }
    return out;
}

namespace {

template <typename T>
T json_get(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw validation_error(std::string("synth config field '") + key + "' has the wrong type");
    }
}

}  // namespace

synth_config read_synth_config(const std::filesystem::path& file,
                               std::optional<std::uint64_t> root_seed_override) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw validation_error("cannot open synth config " + file.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw validation_error("synth config " + file.string() + " is not a JSON object");

    synth_config cfg;
    const std::uint64_t root_seed =
        root_seed_override ? *root_seed_override : json_get<std::uint64_t>(j, "seed", 0);
    cfg.dataset.seed = root_seed;
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        cfg.dataset.examples = json_get<int>(d, "examples", cfg.dataset.examples);
        cfg.dataset.dims = json_get<int>(d, "dims", cfg.dataset.dims);
        cfg.dataset.text_tokens = json_get<int>(d, "text_tokens", cfg.dataset.text_tokens);
        cfg.dataset.query_tokens = json_get<int>(d, "query_tokens", cfg.dataset.query_tokens);
        cfg.dataset.noise = json_get<double>(d, "noise", cfg.dataset.noise);
        cfg.dataset.seed = json_get<std::uint64_t>(d, "seed", root_seed);
        if (d.contains("families")) {
            if (!d.at("families").is_array())
                throw validation_error("synth config dataset.families must be an array");
            for (const auto& f : d.at("families")) {
                family_plant fp;
                if (!f.contains("family"))
                    throw validation_error("synth config family entry lacks 'family'");
                fp.family = family_from_string(f.at("family").get<std::string>());
                fp.strength = json_get<double>(f, "strength", 1.0);
                fp.carrier =
                    token_group_from_string(json_get<std::string>(f, "carrier", "text"));
                cfg.dataset.families.push_back(fp);
            }
        }
    }
    if (j.contains("connector")) {
        const auto& c = j.at("connector");
        connector_sim sim;
        sim.rank = json_get<int>(c, "rank", 0);
        sim.scale = json_get<double>(c, "scale", 1.0);
        sim.noise = json_get<double>(c, "noise", 0.0);
        sim.scramble_query = json_get<bool>(c, "scramble_query", false);
        sim.seed = json_get<std::uint64_t>(c, "seed", derive_seed(root_seed, "connector"));
        cfg.connector = sim;
    }
    if (j.contains("attention")) {
        const auto& a = j.at("attention");
        attention_plant ap;
        ap.layers = json_get<int>(a, "layers", ap.layers);
        ap.steps = json_get<int>(a, "steps", ap.steps);
        ap.heads = json_get<int>(a, "heads", ap.heads);
        ap.queries = json_get<int>(a, "queries", ap.queries);
        ap.concentration = json_get<double>(a, "concentration", ap.concentration);
        ap.rank_shuffle = json_get<bool>(a, "rank_shuffle", ap.rank_shuffle);
        ap.dual_layers = json_get<int>(a, "dual_layers", ap.dual_layers);
        ap.seed = json_get<std::uint64_t>(a, "seed", derive_seed(root_seed, "attention"));
        if (!a.contains("groups") || !a.at("groups").is_array())
            throw validation_error("synth config attention.groups must be an array");
        for (const auto& g : a.at("groups")) {
            if (!g.contains("group") || !g.contains("size"))
                throw validation_error("synth config attention group entry needs group and size");
            const cond_group cg = cond_group_from_string(g.at("group").get<std::string>());
            ap.group_sizes.emplace_back(cg, g.at("size").get<int>());
            if (g.contains("share")) ap.shares[cg] = g.at("share").get<double>();
        }
        cfg.attention = ap;
    }
    return cfg;
}

void write_synth_bundle(const std::filesystem::path& out_dir, const synth_config& cfg,
                        const pools& p) {
    std::filesystem::create_directories(out_dir);
    planted_dataset planted = plant_dataset(cfg.dataset, p);
    write_dataset(out_dir, planted.meta);

    const auto feature_dir = out_dir / "features";
    std::filesystem::create_directories(feature_dir);
    std::vector<manifest_entry> entries;
    for (const auto& ef : planted.features.examples)
        entries.push_back(store_example(feature_dir, ef));
    if (cfg.connector) {
        for (const auto& ef : apply_connector(planted.features.examples, *cfg.connector))
            entries.push_back(store_example(feature_dir, ef));
    }
    write_manifest(feature_dir / "manifest.jsonl", entries);

    nlohmann::json truth;
    truth["seed"] = cfg.dataset.seed;
    truth["examples"] = cfg.dataset.examples;
    truth["dims"] = cfg.dataset.dims;
    truth["noise"] = cfg.dataset.noise;
    truth["families"] = nlohmann::json::array();
    for (const auto& fp : cfg.dataset.families) {
        truth["families"].push_back({{"family", to_string(fp.family)},
                                     {"strength", fp.strength},
                                     {"carrier", to_string(fp.carrier)},
                                     {"cardinality", family_cardinality(fp.family, p)},
                                     {"chance", chance_level(fp.family, p)}});
    }
    if (cfg.connector) {
        truth["connector"] = {{"rank", cfg.connector->rank},
                              {"scale", cfg.connector->scale},
                              {"noise", cfg.connector->noise},
                              {"scramble_query", cfg.connector->scramble_query},
                              {"seed", cfg.connector->seed}};
    }
    if (cfg.attention) {
        attention_trace tr = plant_attention(*cfg.attention);
        save_trace(out_dir / "attention", tr);
        nlohmann::json shares = nlohmann::json::object();
        for (const auto& [g, share] : cfg.attention->shares) shares[to_string(g)] = share;
        truth["attention"] = {{"layers", cfg.attention->layers},
                              {"steps", cfg.attention->steps},
                              {"heads", cfg.attention->heads},
                              {"queries", cfg.attention->queries},
                              {"concentration", cfg.attention->concentration},
                              {"shares", shares}};
    }
    std::ofstream truth_out(out_dir / "truth.json", std::ios::binary);
    if (!truth_out) throw validation_error("cannot write truth.json under " + out_dir.string());
    truth_out << truth.dump(2) << "\n";
}

}  // namespace trace_diag
