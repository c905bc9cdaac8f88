#include "trace_diag/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "trace_diag/errors.hpp"
#include "trace_diag/rng.hpp"

namespace trace_diag {

std::string fixed_display(double v, int decimals) {
    const double scale = std::pow(10.0, decimals);
    double r = std::round(std::abs(v) * scale) / scale;
    if (v < 0.0) r = -r;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, r);
    // snprintf may render -0.0; normalize it.
    if (std::string(buf).find_first_not_of("-0.") == std::string::npos &&
        std::string(buf).front() == '-')
        return std::string(buf).substr(1);
    return buf;
}

std::string config_hash(const nlohmann::json& config) {
    const std::uint64_t h = fnv1a64(config.dump());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

nlohmann::json envelope(const std::string& subcommand, const nlohmann::json& config,
                        const std::vector<std::uint64_t>& seeds, nlohmann::json body) {
    return {{"tool", kToolName},        {"version", kToolVersion},
            {"subcommand", subcommand}, {"config", config},
            {"config_hash", config_hash(config)}, {"seeds", seeds},
            {"report", std::move(body)}};
}

nlohmann::json compose_summary_json(const composed_dataset& ds) {
    std::int64_t forward = 0, inverted = 0;
    std::map<std::string, std::int64_t> split_counts;
    std::map<std::string, std::int64_t> attr_counts;
    std::set<std::string> groups;
    for (const auto& ex : ds.examples) {
        (ex.direction_tag == direction::forward ? forward : inverted) += 1;
        if (ex.split) ++split_counts[to_string(*ex.split)];
        ++attr_counts[to_string(ex.attribute)];
        groups.insert(ex.split_group_id);
    }
    return {{"atomics", ds.atomics.size()},
            {"scenes", ds.scenes.size()},
            {"examples", ds.examples.size()},
            {"directions", {{"forward", forward}, {"inverted", inverted}}},
            {"splits", split_counts},
            {"attributes", attr_counts},
            {"split_groups", groups.size()}};
}

nlohmann::json geometry_json(const geometry_report_t& g) {
    return {{"eff_rank",
             {{"pre", g.eff_rank_pre},
              {"post", g.eff_rank_post},
              {"delta_pct", g.eff_rank_delta_pct}}},
            {"feature_variance",
             {{"pre", g.var_pre}, {"post", g.var_post}, {"delta_pct", g.var_delta_pct}}},
            {"cka", g.cka},
            {"display",
             {{"eff_rank_delta_pct", fixed_display(g.eff_rank_delta_pct, 1)},
              {"var_delta_pct", fixed_display(g.var_delta_pct, 1)},
              {"cka", fixed_display(g.cka, 2)}}}};
}

namespace {

nlohmann::json cell_json(const probe_cell& c) {
    return {{"seed", c.seed},         {"test_acc", c.test_acc},
            {"val_acc", c.val_acc},   {"n_train", c.n_train},
            {"n_val", c.n_val},       {"n_test", c.n_test},
            {"pca_dim_used", c.pca_dim_used}, {"epochs_run", c.epochs_run}};
}

nlohmann::json stage_summary_json(const family_stage_summary& s) {
    nlohmann::json j = {{"available", s.available}};
    if (!s.available) return j;
    j["mean_acc"] = s.mean_acc;
    j["std_acc"] = s.std_acc;
    j["display"] = fixed_display(s.mean_acc, 3);
    j["cells"] = nlohmann::json::array();
    for (const auto& c : s.cells) j["cells"].push_back(cell_json(c));
    return j;
}

}  // namespace

nlohmann::json probe_json(const probe_report& r) {
    nlohmann::json fams = nlohmann::json::array();
    for (const auto& f : r.families) {
        fams.push_back({{"family", to_string(f.family)},
                        {"chance", f.chance},
                        {"pre", stage_summary_json(f.pre)},
                        {"post", stage_summary_json(f.post)}});
    }
    nlohmann::json j = {{"kind", to_string(r.kind)},
                        {"view", to_string(r.view)},
                        {"families", fams},
                        {"gaps", r.gaps}};
    if (r.target_value_mean_pre) j["target_value_mean_pre"] = *r.target_value_mean_pre;
    if (r.target_value_mean_post) j["target_value_mean_post"] = *r.target_value_mean_post;
    return j;
}

namespace {

nlohmann::json margin_json(const margin_aggregate& m) {
    return {{"n_examples", m.n_examples},
            {"n_undefined", m.n_undefined},
            {"n_correct", m.n_correct},
            {"mean_pos_entropy", m.mean_pos_entropy},
            {"mean_top1", m.mean_top1},
            {"mean_query_mass", m.mean_query_mass},
            {"mean_pos_entropy_correct", m.mean_pos_entropy_correct},
            {"mean_top1_correct", m.mean_top1_correct},
            {"mean_query_mass_correct", m.mean_query_mass_correct},
            {"completeness_max_err", m.completeness_max_err}};
}

nlohmann::json route_stage_json(const route_stage_result& s) {
    nlohmann::json j = {{"available", s.available}};
    if (!s.available) return j;
    j["mean_acc"] = s.mean_acc;
    j["std_acc"] = s.std_acc;
    j["display"] = fixed_display(s.mean_acc, 3);
    j["cells"] = nlohmann::json::array();
    for (const auto& c : s.cells) j["cells"].push_back(cell_json(c));
    j["margins"] = margin_json(s.margins);
    return j;
}

}  // namespace

nlohmann::json token_route_json(const token_route_report& r) {
    nlohmann::json views = nlohmann::json::array();
    for (const auto& v : r.views) {
        views.push_back({{"view", to_string(v.view)},
                         {"pre", route_stage_json(v.pre)},
                         {"post", route_stage_json(v.post)}});
    }
    return {{"pca_dim", r.pca_dim}, {"views", views}, {"gaps", r.gaps}};
}

namespace {

nlohmann::json shares_json(const group_shares& s) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [g, share] : s.value) j[to_string(g)] = share;
    return j;
}

}  // namespace

nlohmann::json routing_json(const routing_report& r) {
    nlohmann::json j = {{"n_examples", r.n_examples},
                        {"overall", shares_json(r.overall)},
                        {"entropy", r.entropy},
                        {"gini", r.gini_coeff},
                        {"top16", r.top16},
                        {"top32", r.top32},
                        {"head_jaccard16", r.head_jaccard16}};
    j["temporal"] = {{"available", r.temporal.available}};
    if (r.temporal.available) {
        j["temporal"]["early"] = shares_json(r.temporal.early);
        j["temporal"]["late"] = shares_json(r.temporal.late);
    }
    j["layer_class"] = nlohmann::json::object();
    if (r.per_layer_class.dual) j["layer_class"]["dual"] = shares_json(*r.per_layer_class.dual);
    if (r.per_layer_class.single)
        j["layer_class"]["single"] = shares_json(*r.per_layer_class.single);
    nlohmann::json display = nlohmann::json::object();
    for (const auto& [g, share] : r.overall.value)
        display[to_string(g) + "_share"] = fixed_display(share, 3);
    j["display"] = display;
    return j;
}

nlohmann::json audit_json(const audit_run& r) {
    const audit_report& rep = r.report;
    nlohmann::json counts = nlohmann::json::object();
    for (failure_label l : kFailureLabels)
        counts[to_string(l)] = rep.count[static_cast<int>(l)];
    nlohmann::json examples = nlohmann::json::array();
    for (const auto& e : r.examples) {
        nlohmann::json ej = {{"example_id", e.example_id}, {"warnings", e.warnings}};
        if (e.label)
            ej["label"] = to_string(*e.label);
        else
            ej["excluded"] = true;
        examples.push_back(std::move(ej));
    }
    return {{"n_eval", rep.n_eval},
            {"n_excluded", rep.n_excluded},
            {"counts", counts},
            {"n_under_family", rep.n_under_family},
            {"rates",
             {{"pass_rate", rep.pass_rate},
              {"struct_err", rep.struct_err},
              {"under_edit", rep.under_edit}}},
            {"display",
             {{"pass_rate_pct", fixed_display(100.0 * rep.pass_rate, 1)},
              {"struct_err_pct", fixed_display(100.0 * rep.struct_err, 1)},
              {"under_edit_pct", fixed_display(100.0 * rep.under_edit, 1)}}},
            {"examples", examples}};
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw validation_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw validation_error("cannot open " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw validation_error(path.string() + " is not valid JSON");
    return j;
}

namespace {

std::string num(const nlohmann::json& j) {
    std::ostringstream ss;
    ss.precision(17);
    if (j.is_number_integer())
        ss << j.get<std::int64_t>();
    else
        ss << j.get<double>();
    return ss.str();
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw validation_error("cannot write " + path.string());
    for (const auto& l : lines) out << l << "\n";
}

void join_geometry(const nlohmann::json& rep, const std::filesystem::path& out,
                   std::vector<std::filesystem::path>& written) {
    std::vector<std::string> lines;
    lines.push_back(
        "eff_rank_pre,eff_rank_post,eff_rank_delta_pct,eff_rank_delta_display,"
        "var_pre,var_post,var_delta_pct,var_delta_display,cka,cka_display");
    const auto& er = rep.at("eff_rank");
    const auto& fv = rep.at("feature_variance");
    const auto& d = rep.at("display");
    lines.push_back(num(er.at("pre")) + "," + num(er.at("post")) + "," +
                    num(er.at("delta_pct")) + "," + d.at("eff_rank_delta_pct").get<std::string>() +
                    "," + num(fv.at("pre")) + "," + num(fv.at("post")) + "," +
                    num(fv.at("delta_pct")) + "," + d.at("var_delta_pct").get<std::string>() +
                    "," + num(rep.at("cka")) + "," + d.at("cka").get<std::string>());
    write_lines(out, lines);
    written.push_back(out);
}

void join_probes(const std::vector<nlohmann::json>& reports, const std::filesystem::path& out,
                 std::vector<std::filesystem::path>& written) {
    std::vector<std::string> lines;
    lines.push_back(
        "kind,view,family,chance,pre_mean,pre_std,post_mean,post_std,pre_display,post_display");
    for (const auto& rep : reports) {
        const std::string kind = rep.at("kind").get<std::string>();
        const std::string view = rep.at("view").get<std::string>();
        for (const auto& f : rep.at("families")) {
            std::string row = kind + "," + view + "," + f.at("family").get<std::string>() + "," +
                              num(f.at("chance"));
            for (const char* st : {"pre", "post"}) {
                const auto& s = f.at(st);
                if (s.at("available").get<bool>())
                    row += "," + num(s.at("mean_acc")) + "," + num(s.at("std_acc"));
                else
                    row += ",,";
            }
            for (const char* st : {"pre", "post"}) {
                const auto& s = f.at(st);
                row += ",";
                if (s.at("available").get<bool>()) row += s.at("display").get<std::string>();
            }
            lines.push_back(row);
        }
    }
    write_lines(out, lines);
    written.push_back(out);
}

void join_token_route(const nlohmann::json& rep, const std::filesystem::path& out,
                      std::vector<std::filesystem::path>& written) {
    std::vector<std::string> lines;
    lines.push_back(
        "view,stage,mean_acc,std_acc,acc_display,n_examples,n_undefined,mean_pos_entropy,"
        "mean_top1,mean_query_mass,mean_pos_entropy_correct,mean_top1_correct,"
        "mean_query_mass_correct,completeness_max_err");
    for (const auto& v : rep.at("views")) {
        for (const char* st : {"pre", "post"}) {
            const auto& s = v.at(st);
            if (!s.at("available").get<bool>()) continue;
            const auto& m = s.at("margins");
            lines.push_back(v.at("view").get<std::string>() + "," + st + "," +
                            num(s.at("mean_acc")) + "," + num(s.at("std_acc")) + "," +
                            s.at("display").get<std::string>() + "," + num(m.at("n_examples")) +
                            "," + num(m.at("n_undefined")) + "," + num(m.at("mean_pos_entropy")) +
                            "," + num(m.at("mean_top1")) + "," + num(m.at("mean_query_mass")) +
                            "," + num(m.at("mean_pos_entropy_correct")) + "," +
                            num(m.at("mean_top1_correct")) + "," +
                            num(m.at("mean_query_mass_correct")) + "," +
                            num(m.at("completeness_max_err")));
        }
    }
    write_lines(out, lines);
    written.push_back(out);
}

std::string share_cell(const nlohmann::json& shares, const char* group) {
    return shares.contains(group) ? num(shares.at(group)) : std::string();
}

void join_attention(const nlohmann::json& rep, const std::filesystem::path& out,
                    std::vector<std::filesystem::path>& written) {
    std::vector<std::string> lines;
    lines.push_back(
        "section,text,query,vision,learnable,entropy,gini,top16,top32,head_jaccard16");
    auto shares_row = [&](const std::string& section, const nlohmann::json& shares,
                          bool with_metrics) {
        std::string row = section;
        for (const char* g : {"text", "query", "vision", "learnable"})
            row += "," + share_cell(shares, g);
        if (with_metrics)
            row += "," + num(rep.at("entropy")) + "," + num(rep.at("gini")) + "," +
                   num(rep.at("top16")) + "," + num(rep.at("top32")) + "," +
                   num(rep.at("head_jaccard16"));
        else
            row += ",,,,,";
        lines.push_back(row);
    };
    shares_row("overall", rep.at("overall"), true);
    if (rep.at("temporal").at("available").get<bool>()) {
        shares_row("early", rep.at("temporal").at("early"), false);
        shares_row("late", rep.at("temporal").at("late"), false);
    }
    for (const char* cls : {"dual", "single"})
        if (rep.at("layer_class").contains(cls))
            shares_row(cls, rep.at("layer_class").at(cls), false);
    write_lines(out, lines);
    written.push_back(out);
}

void join_audit(const nlohmann::json& rep, const std::filesystem::path& out,
                std::vector<std::filesystem::path>& written) {
    std::vector<std::string> lines;
    lines.push_back(
        "n_eval,n_excluded,pass,no_visible_change,partial_or_non_target_change,"
        "object_missing_or_unreadable,under_edit,wrong_slot,wrong_object_or_binding,"
        "wrong_target_value,undetermined,pass_rate,struct_err,under_edit_rate,"
        "pass_rate_pct,struct_err_pct,under_edit_pct");
    const auto& counts = rep.at("counts");
    const auto& rates = rep.at("rates");
    const auto& disp = rep.at("display");
    std::string row = num(rep.at("n_eval")) + "," + num(rep.at("n_excluded"));
    for (const char* label :
         {"pass", "no_visible_change", "partial_or_non_target_change",
          "object_missing_or_unreadable", "under_edit", "wrong_slot", "wrong_object_or_binding",
          "wrong_target_value", "undetermined"})
        row += "," + num(counts.at(label));
    row += "," + num(rates.at("pass_rate")) + "," + num(rates.at("struct_err")) + "," +
           num(rates.at("under_edit"));
    row += "," + disp.at("pass_rate_pct").get<std::string>() + "," +
           disp.at("struct_err_pct").get<std::string>() + "," +
           disp.at("under_edit_pct").get<std::string>();
    lines.push_back(row);
    write_lines(out, lines);
    written.push_back(out);
}

}  // namespace

std::vector<std::filesystem::path> write_report_csvs(const std::filesystem::path& in_dir,
                                                     const std::filesystem::path& out_dir) {
    if (!std::filesystem::is_directory(in_dir))
        throw validation_error("report input dir not found: " + in_dir.string());
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;

    auto body = [&](const std::filesystem::path& p) {
        const nlohmann::json j = read_json_file(p);
        if (!j.contains("report"))
            throw validation_error(p.string() + " lacks a report body");
        return j.at("report");
    };

    if (std::filesystem::exists(in_dir / "geometry.json"))
        join_geometry(body(in_dir / "geometry.json"), out_dir / "geometry.csv", written);

    std::vector<nlohmann::json> probe_reports;
    for (const char* name : {"probe_linear.json", "probe_mlp.json", "probe.json"})
        if (std::filesystem::exists(in_dir / name)) probe_reports.push_back(body(in_dir / name));
    if (!probe_reports.empty()) join_probes(probe_reports, out_dir / "probes.csv", written);

    if (std::filesystem::exists(in_dir / "token_route.json"))
        join_token_route(body(in_dir / "token_route.json"), out_dir / "token_route.csv", written);
    if (std::filesystem::exists(in_dir / "attention.json"))
        join_attention(body(in_dir / "attention.json"), out_dir / "attention.csv", written);
    if (std::filesystem::exists(in_dir / "audit.json"))
        join_audit(body(in_dir / "audit.json"), out_dir / "audit.csv", written);

    if (written.empty())
        throw validation_error("no joinable report JSON found in " + in_dir.string());
    return written;
}

}  // namespace trace_diag
