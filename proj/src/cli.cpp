#include "trace_diag/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "trace_diag/errors.hpp"
#include "trace_diag/report.hpp"
#include "trace_diag/synth.hpp"

namespace trace_diag {

namespace {

namespace fs = std::filesystem;

// TRACE_DIAG_OUT redirects output locations only: files keep their basename,
// directory outputs move wholesale.
fs::path resolve_out_file(const std::string& out) {
    const char* env = std::getenv("TRACE_DIAG_OUT");
    fs::path p(out);
    if (env && *env) return fs::path(env) / p.filename();
    return p;
}

fs::path resolve_out_dir(const std::string& out) {
    const char* env = std::getenv("TRACE_DIAG_OUT");
    if (env && *env) return fs::path(env);
    return fs::path(out);
}

pools load_pools(const std::string& pools_file) {
    return pools_file.empty() ? pools::builtin() : pools::from_json_file(pools_file);
}

void overlay_probe_config(probe_config& cfg, const std::string& config_file) {
    if (config_file.empty()) return;
    const nlohmann::json j = read_json_file(config_file);
    if (!j.is_object()) throw validation_error(config_file + " must hold a JSON object");
    if (j.contains("pca_dim")) cfg.pca_dim = j.at("pca_dim").get<int>();
    if (j.contains("standardize")) cfg.standardize = j.at("standardize").get<bool>();
    if (j.contains("linear_lr")) cfg.linear_lr = j.at("linear_lr").get<double>();
    if (j.contains("linear_weight_decay"))
        cfg.linear_weight_decay = j.at("linear_weight_decay").get<double>();
    if (j.contains("linear_momentum")) cfg.linear_momentum = j.at("linear_momentum").get<double>();
    if (j.contains("linear_max_epochs"))
        cfg.linear_max_epochs = j.at("linear_max_epochs").get<int>();
    if (j.contains("mlp_lr")) cfg.mlp_lr = j.at("mlp_lr").get<double>();
    if (j.contains("mlp_weight_decay"))
        cfg.mlp_weight_decay = j.at("mlp_weight_decay").get<double>();
    if (j.contains("mlp_hidden")) cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
    if (j.contains("mlp_dropout")) cfg.mlp_dropout = j.at("mlp_dropout").get<double>();
    if (j.contains("mlp_batch")) cfg.mlp_batch = j.at("mlp_batch").get<int>();
    if (j.contains("mlp_max_epochs")) cfg.mlp_max_epochs = j.at("mlp_max_epochs").get<int>();
    if (j.contains("patience")) cfg.patience = j.at("patience").get<int>();
    if (j.contains("split_ratios")) {
        const auto r = j.at("split_ratios").get<std::vector<double>>();
        if (r.size() != 3) throw validation_error("split_ratios needs exactly 3 entries");
        cfg.split_ratios = {r[0], r[1], r[2]};
    }
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
}

nlohmann::json probe_config_json(const probe_config& cfg) {
    return {{"pca_dim", cfg.pca_dim},
            {"standardize", cfg.standardize},
            {"linear_lr", cfg.linear_lr},
            {"linear_weight_decay", cfg.linear_weight_decay},
            {"linear_momentum", cfg.linear_momentum},
            {"linear_max_epochs", cfg.linear_max_epochs},
            {"mlp_lr", cfg.mlp_lr},
            {"mlp_weight_decay", cfg.mlp_weight_decay},
            {"mlp_hidden", cfg.mlp_hidden},
            {"mlp_dropout", cfg.mlp_dropout},
            {"mlp_batch", cfg.mlp_batch},
            {"mlp_max_epochs", cfg.mlp_max_epochs},
            {"patience", cfg.patience},
            {"split_ratios", cfg.split_ratios},
            {"seeds", cfg.seeds}};
}

std::vector<std::string> split_csv_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// geometry inputs: either two pooled-feature tensors or a manifest whose
// pre/post examples are pooled under a view.
Eigen::MatrixXd pooled_matrix(const feature_set& feats, stage st, feature_view view,
                              const std::vector<std::string>& ids) {
    Eigen::MatrixXd m;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const example_features* ef = feats.find(ids[i], st);
        const tensor sel = select_view(*ef, view);
        const std::vector<float> pooled = pool_tokens(sel);
        if (m.size() == 0) m.resize(static_cast<Eigen::Index>(ids.size()), pooled.size());
        if (static_cast<Eigen::Index>(pooled.size()) != m.cols())
            throw validation_error("pooled width differs across examples");
        for (std::size_t j = 0; j < pooled.size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = pooled[j];
    }
    return m;
}

struct compose_args {
    std::string pools_file, out;
    int scenes = 0, atomics = 0;
    std::uint64_t seed = 0;
};

int do_compose(const compose_args& a) {
    const fs::path out_dir = resolve_out_dir(a.out);
    pools p = load_pools(a.pools_file);
    compose_options opts;
    opts.scenes = a.scenes;
    opts.atomics = a.atomics;
    opts.seed = a.seed;
    composed_dataset ds = compose_dataset(p, opts);
    write_dataset(out_dir, ds);
    const nlohmann::json config = {{"pools", a.pools_file.empty() ? "builtin" : a.pools_file},
                                   {"scenes", a.scenes},
                                   {"atomics", a.atomics},
                                   {"seed", a.seed},
                                   {"out", out_dir.string()}};
    write_json_file(out_dir / "compose_report.json",
                    envelope("compose", config, {a.seed}, compose_summary_json(ds)));
    std::cout << "composed " << ds.scenes.size() << " scenes / " << ds.examples.size()
              << " examples -> " << out_dir.string() << "\n";
    return 0;
}

int do_import(const std::string& manifest, const std::string& out) {
    feature_set feats = load_feature_set(manifest);
    std::size_t pre = feats.index_pre.size(), post = feats.index_post.size();
    std::cout << "manifest ok: " << feats.examples.size() << " tensors (" << pre << " pre, "
              << post << " post)\n";
    if (!out.empty()) {
        const nlohmann::json config = {{"manifest", manifest}};
        nlohmann::json body = {{"tensors", feats.examples.size()},
                               {"pre", pre},
                               {"post", post}};
        if (!feats.examples.empty()) {
            body["dims"] = feats.examples.front().dim();
            body["tokens"] = feats.examples.front().token_count();
        }
        write_json_file(resolve_out_file(out), envelope("import", config, {}, body));
    }
    return 0;
}

struct geometry_args {
    std::string pre, post, manifest, view = "mixed", out;
};

int do_geometry(const geometry_args& a) {
    Eigen::MatrixXd pre_m, post_m;
    nlohmann::json config;
    if (!a.manifest.empty()) {
        feature_set feats = load_feature_set(a.manifest);
        std::vector<std::string> ids;
        for (const auto& [id, idx] : feats.index_pre)
            if (feats.index_post.count(id)) ids.push_back(id);
        if (ids.empty())
            throw validation_error("manifest has no example with both pre and post tensors");
        const feature_view view = view_from_string(a.view);
        pre_m = pooled_matrix(feats, stage::pre, view, ids);
        post_m = pooled_matrix(feats, stage::post, view, ids);
        config = {{"manifest", a.manifest}, {"view", a.view}, {"examples", ids.size()}};
    } else {
        if (a.pre.empty() || a.post.empty())
            throw validation_error("geometry needs --pre and --post tensors or --manifest");
        pre_m = to_eigen(read_tensor(a.pre));
        post_m = to_eigen(read_tensor(a.post));
        config = {{"pre", a.pre}, {"post", a.post}};
    }
    const geometry_report_t rep = geometry_report(pre_m, post_m, exec::parallel);
    write_json_file(resolve_out_file(a.out), envelope("geometry", config, {}, geometry_json(rep)));
    std::cout << "geometry: eff_rank " << rep.eff_rank_pre << " -> " << rep.eff_rank_post << " ("
              << fixed_display(rep.eff_rank_delta_pct, 1) << "%), cka "
              << fixed_display(rep.cka, 2) << "\n";
    return 0;
}

struct probe_args {
    std::string manifest, meta, config_file, probe = "linear", view = "mixed", pools_file, out;
};

int do_probe(const probe_args& a) {
    const std::vector<relation_example> meta = read_metadata_jsonl(a.meta);
    feature_set feats = load_feature_set(a.manifest);
    pools p = load_pools(a.pools_file);
    probe_config cfg;
    overlay_probe_config(cfg, a.config_file);
    const probe_kind kind = probe_kind_from_string(a.probe);
    const feature_view view = view_from_string(a.view);
    const probe_report rep = run_probe_suite(meta, feats, cfg, kind, p, view, exec::parallel);
    const nlohmann::json config = {{"manifest", a.manifest},
                                   {"meta", a.meta},
                                   {"probe", a.probe},
                                   {"view", a.view},
                                   {"pools", a.pools_file.empty() ? "builtin" : a.pools_file},
                                   {"probe_config", probe_config_json(cfg)}};
    write_json_file(resolve_out_file(a.out),
                    envelope("probe", config, cfg.seeds, probe_json(rep)));
    std::cout << "probe (" << a.probe << ", " << a.view << "): " << rep.families.size()
              << " families, " << rep.gaps.size() << " gaps\n";
    return 0;
}

struct route_args {
    std::string manifest, meta, views = "mixed,text,query", config_file, pools_file, out;
};

int do_token_route(const route_args& a) {
    const std::vector<relation_example> meta = read_metadata_jsonl(a.meta);
    feature_set feats = load_feature_set(a.manifest);
    pools p = load_pools(a.pools_file);
    probe_config cfg;
    cfg.pca_dim = 256;
    overlay_probe_config(cfg, a.config_file);
    std::vector<feature_view> views;
    for (const auto& v : split_csv_list(a.views)) views.push_back(view_from_string(v));
    if (views.empty()) throw validation_error("--views must name at least one view");
    const token_route_report rep = token_route_suite(meta, feats, cfg, p, views, exec::parallel);
    const nlohmann::json config = {{"manifest", a.manifest},
                                   {"meta", a.meta},
                                   {"views", a.views},
                                   {"pools", a.pools_file.empty() ? "builtin" : a.pools_file},
                                   {"probe_config", probe_config_json(cfg)}};
    write_json_file(resolve_out_file(a.out),
                    envelope("token-route", config, cfg.seeds, token_route_json(rep)));
    std::cout << "token-route: " << rep.views.size() << " views, " << rep.gaps.size()
              << " gaps\n";
    return 0;
}

int do_attention(const std::string& traces_dir, const std::string& out) {
    std::vector<attention_trace> traces;
    std::vector<std::string> loaded;
    if (fs::exists(fs::path(traces_dir) / "trace.json")) {
        traces.push_back(load_trace(traces_dir));
        loaded.push_back(traces_dir);
    } else if (fs::is_directory(traces_dir)) {
        std::vector<fs::path> subdirs;
        for (const auto& e : fs::directory_iterator(traces_dir))
            if (e.is_directory() && fs::exists(e.path() / "trace.json"))
                subdirs.push_back(e.path());
        std::sort(subdirs.begin(), subdirs.end());
        for (const auto& d : subdirs) {
            traces.push_back(load_trace(d));
            loaded.push_back(d.string());
        }
    }
    if (traces.empty())
        throw validation_error("no attention trace (trace.json) found under " + traces_dir);
    const routing_report rep = routing_suite(traces, exec::parallel);
    const nlohmann::json config = {{"traces", traces_dir}, {"loaded", loaded}};
    write_json_file(resolve_out_file(out), envelope("attention", config, {}, routing_json(rep)));
    std::cout << "attention: " << traces.size() << " traces";
    for (const auto& [g, share] : rep.overall.value)
        std::cout << ", " << to_string(g) << " " << fixed_display(share, 3);
    std::cout << "\n";
    return 0;
}

struct audit_args {
    std::string verdicts, meta, emit_prompts, out;
};

int do_audit(const audit_args& a) {
    if (!a.emit_prompts.empty()) {
        if (a.meta.empty())
            throw validation_error("--emit-prompts needs --meta for the example metadata");
        const std::vector<relation_example> meta = read_metadata_jsonl(a.meta);
        const std::map<std::string, grid_scene> scenes = read_scene_specs(a.meta);
        std::vector<std::string> scene_texts;
        scene_texts.reserve(meta.size());
        for (const auto& ex : meta) {
            const auto it = scenes.find(ex.scene_id);
            if (it == scenes.end())
                throw validation_error("metadata row " + ex.example_id +
                                       " lacks a scene_spec; cannot render the scene text");
            scene_texts.push_back(render_scene_text(it->second));
        }
        emit_judge_prompts(resolve_out_dir(a.emit_prompts), meta, scene_texts);
        std::cout << "emitted " << 2 * meta.size() << " judge prompts -> "
                  << resolve_out_dir(a.emit_prompts).string() << "\n";
        return 0;
    }

    if (a.verdicts.empty()) throw validation_error("audit needs --verdicts <dir>");
    std::vector<std::string> ids;
    if (!a.meta.empty()) {
        for (const auto& ex : read_metadata_jsonl(a.meta)) ids.push_back(ex.example_id);
    } else {
        const std::string suffix = ".stage1.json";
        std::vector<std::string> found;
        if (!fs::is_directory(a.verdicts))
            throw validation_error("verdict dir not found: " + a.verdicts);
        for (const auto& e : fs::directory_iterator(a.verdicts)) {
            const std::string name = e.path().filename().string();
            if (name.size() > suffix.size() &&
                name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
                found.push_back(name.substr(0, name.size() - suffix.size()));
        }
        std::sort(found.begin(), found.end());
        ids = std::move(found);
    }
    if (ids.empty()) throw validation_error("no verdict files and no metadata ids to audit");
    const audit_run run = audit_verdict_dir(a.verdicts, ids);
    const nlohmann::json config = {{"verdicts", a.verdicts},
                                   {"meta", a.meta.empty() ? "scan" : a.meta}};
    write_json_file(resolve_out_file(a.out), envelope("audit", config, {}, audit_json(run)));
    std::cout << "audit: n_eval " << run.report.n_eval << ", pass "
              << fixed_display(100.0 * run.report.pass_rate, 1) << "%, struct "
              << fixed_display(100.0 * run.report.struct_err, 1) << "%, under "
              << fixed_display(100.0 * run.report.under_edit, 1) << "%\n";
    return 0;
}

int do_synth(const std::string& spec_file, const std::string& out,
             std::optional<std::uint64_t> seed) {
    const synth_config cfg = read_synth_config(spec_file, seed);
    const fs::path out_dir = resolve_out_dir(out);
    write_synth_bundle(out_dir, cfg);
    nlohmann::json config = {{"spec", spec_file}, {"out", out_dir.string()}};
    if (seed) config["seed"] = *seed;
    write_json_file(out_dir / "synth_report.json",
                    envelope("synth", config, {cfg.dataset.seed},
                             {{"examples", cfg.dataset.examples},
                              {"dims", cfg.dataset.dims},
                              {"connector", cfg.connector.has_value()},
                              {"attention", cfg.attention.has_value()}}));
    std::cout << "synth bundle (" << cfg.dataset.examples << " examples) -> "
              << out_dir.string() << "\n";
    return 0;
}

int do_report(const std::string& in, const std::string& out, const std::string& format) {
    for (const auto& f : split_csv_list(format))
        if (f != "csv" && f != "json")
            throw validation_error("unknown report format '" + f + "'");
    const auto written = write_report_csvs(in, resolve_out_dir(out));
    std::cout << "report: wrote " << written.size() << " csv file(s) -> "
              << resolve_out_dir(out).string() << "\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"diagnostics for relation-editing metadata and connector features"};
    app.require_subcommand(1);

    std::uint64_t global_seed = 0;
    std::string global_out, global_format = "csv";
    app.add_option("--seed", global_seed, "root seed for generating subcommands");
    app.add_option("--out", global_out, "default output path");
    app.add_option("--format", global_format, "report output formats (csv,json)");

    compose_args ca;
    auto* compose_cmd = app.add_subcommand("compose", "generate a benchmark dataset");
    compose_cmd->add_option("--pools", ca.pools_file, "pool JSON file (default: builtin)");
    compose_cmd->add_option("--scenes", ca.scenes, "scene count")->required();
    compose_cmd->add_option("--atomics", ca.atomics, "atomic count (default: max(60, scenes))");
    compose_cmd->add_option("--out", ca.out, "output directory");

    std::string import_manifest, import_out;
    auto* import_cmd = app.add_subcommand("import", "validate a feature manifest");
    import_cmd->add_option("--manifest", import_manifest, "manifest.jsonl path")->required();
    import_cmd->add_option("--out", import_out, "optional validation report path");

    geometry_args ga;
    auto* geometry_cmd = app.add_subcommand("geometry", "rank/variance/cka report");
    geometry_cmd->add_option("--pre", ga.pre, "pre-stage matrix (.trcf)");
    geometry_cmd->add_option("--post", ga.post, "post-stage matrix (.trcf)");
    geometry_cmd->add_option("--manifest", ga.manifest, "pool a manifest instead of raw tensors");
    geometry_cmd->add_option("--view", ga.view, "token view for --manifest mode");
    geometry_cmd->add_option("--out", ga.out, "report path");

    probe_args pa;
    auto* probe_cmd = app.add_subcommand("probe", "decodability probes per label family");
    probe_cmd->add_option("--manifest", pa.manifest, "manifest.jsonl path")->required();
    probe_cmd->add_option("--meta", pa.meta, "metadata.jsonl path")->required();
    probe_cmd->add_option("--config", pa.config_file, "probe config JSON");
    probe_cmd->add_option("--probe", pa.probe, "linear or mlp");
    probe_cmd->add_option("--view", pa.view, "token view");
    probe_cmd->add_option("--pools", pa.pools_file, "pool JSON file");
    probe_cmd->add_option("--out", pa.out, "report path");

    route_args ra;
    auto* route_cmd = app.add_subcommand("token-route", "margin decomposition per view");
    route_cmd->add_option("--manifest", ra.manifest, "manifest.jsonl path")->required();
    route_cmd->add_option("--meta", ra.meta, "metadata.jsonl path")->required();
    route_cmd->add_option("--views", ra.views, "comma list of views");
    route_cmd->add_option("--config", ra.config_file, "probe config JSON");
    route_cmd->add_option("--pools", ra.pools_file, "pool JSON file");
    route_cmd->add_option("--out", ra.out, "report path");

    std::string attn_traces, attn_out;
    auto* attn_cmd = app.add_subcommand("attention", "routing statistics over traces");
    attn_cmd->add_option("--traces", attn_traces, "trace dir (or dir of trace dirs)")->required();
    attn_cmd->add_option("--out", attn_out, "report path");

    audit_args aa;
    auto* audit_cmd = app.add_subcommand("audit", "two-stage judge prompts and rates");
    audit_cmd->add_option("--verdicts", aa.verdicts, "verdict JSON dir");
    audit_cmd->add_option("--meta", aa.meta, "metadata.jsonl path");
    audit_cmd->add_option("--emit-prompts", aa.emit_prompts, "write judge prompts to this dir");
    audit_cmd->add_option("--out", aa.out, "report path");

    std::string synth_spec, synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "planted dataset + trace bundle");
    synth_cmd->add_option("--spec", synth_spec, "synth config JSON")->required();
    synth_cmd->add_option("--out", synth_out, "output directory");

    std::string report_in, report_out;
    auto* report_cmd = app.add_subcommand("report", "join report JSONs into table csvs");
    report_cmd->add_option("--in", report_in, "directory of report JSON files")->required();
    report_cmd->add_option("--out", report_out, "csv output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    auto fallback = [&](std::string& field) {
        if (field.empty()) field = global_out;
        if (field.empty()) throw validation_error("no output path: pass --out");
    };

    try {
        if (*compose_cmd) {
            ca.seed = global_seed;
            fallback(ca.out);
            return do_compose(ca);
        }
        if (*import_cmd) return do_import(import_manifest, import_out);
        if (*geometry_cmd) {
            fallback(ga.out);
            return do_geometry(ga);
        }
        if (*probe_cmd) {
            fallback(pa.out);
            return do_probe(pa);
        }
        if (*route_cmd) {
            fallback(ra.out);
            return do_token_route(ra);
        }
        if (*attn_cmd) {
            fallback(attn_out);
            return do_attention(attn_traces, attn_out);
        }
        if (*audit_cmd) {
            if (aa.emit_prompts.empty()) fallback(aa.out);
            return do_audit(aa);
        }
        if (*synth_cmd) {
            fallback(synth_out);
            std::optional<std::uint64_t> seed;
            if (app.count("--seed") > 0) seed = global_seed;
            return do_synth(synth_spec, synth_out, seed);
        }
        if (*report_cmd) {
            fallback(report_out);
            return do_report(report_in, report_out, global_format);
        }
    } catch (const computation_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const validation_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<std::string> full;
    full.reserve(args.size() + 1);
    full.push_back("trace-diag");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const auto& s : full) argv.push_back(s.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace trace_diag
