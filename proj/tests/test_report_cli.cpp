#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "trace_diag/cli.hpp"
#include "trace_diag/errors.hpp"
#include "trace_diag/report.hpp"
#include "trace_diag/rng.hpp"
#include "trace_diag/synth.hpp"
#include "trace_diag/tensor_file.hpp"

using namespace trace_diag;

namespace {

tensor noise_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    tensor t = tensor::matrix(rows, cols);
    rng r(seed);
    for (auto& v : t.data) v = static_cast<float>(r.normal());
    return t;
}

std::map<std::string, std::string> dir_contents(const std::filesystem::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        out[std::filesystem::relative(e.path(), root).generic_string()] =
            test_util::read_file(e.path());
    }
    return out;
}

}  // namespace

TEST_CASE("fixed display rounds half away from zero and keeps trailing zeros") {
    CHECK(fixed_display(-59.77, 1) == "-59.8");
    CHECK(fixed_display(0.25, 1) == "0.3");
    CHECK(fixed_display(-0.25, 1) == "-0.3");
    CHECK(fixed_display(1.25, 1) == "1.3");
    CHECK(fixed_display(-1.25, 1) == "-1.3");
    CHECK(fixed_display(-0.04, 1) == "0.0");
    CHECK(fixed_display(0.985, 3) == "0.985");
    CHECK(fixed_display(0.5, 0) == "1");
    CHECK(fixed_display(2.5, 0) == "3");
    CHECK(fixed_display(-2.5, 0) == "-3");
    CHECK(fixed_display(0.0, 2) == "0.00");
    CHECK(fixed_display(1.0, 3) == "1.000");
}

TEST_CASE("config hash is stable, key-order independent, and honest fnv") {
    const nlohmann::json a = {{"alpha", 1}, {"beta", "two"}};
    nlohmann::json b;
    b["beta"] = "two";
    b["alpha"] = 1;
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);
    CHECK(config_hash(a) != config_hash(nlohmann::json{{"alpha", 2}, {"beta", "two"}}));

    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(a.dump())));
    CHECK(config_hash(a) == std::string(buf));
}

TEST_CASE("envelope wraps a report body with tool identity") {
    const nlohmann::json env =
        envelope("geometry", {{"pre", "a.trcf"}}, {0, 1, 42}, {{"cka", 0.5}});
    CHECK(env.at("tool") == "trace-diag");
    CHECK(env.at("version") == std::string(kToolVersion));
    CHECK(env.at("subcommand") == "geometry");
    CHECK(env.at("config").at("pre") == "a.trcf");
    CHECK(env.at("config_hash") == config_hash(env.at("config")));
    CHECK(env.at("seeds") == nlohmann::json({0, 1, 42}));
    CHECK(env.at("report").at("cka") == 0.5);
}

TEST_CASE("json files round trip with a trailing newline") {
    const auto dir = test_util::temp_dir("report_json");
    const nlohmann::json j = {{"k", "v"}, {"n", 3}};
    write_json_file(dir / "x.json", j);
    CHECK(read_json_file(dir / "x.json") == j);
    const std::string raw = test_util::read_file(dir / "x.json");
    REQUIRE_FALSE(raw.empty());
    CHECK(raw.back() == '\n');
    CHECK_THROWS_AS(read_json_file(dir / "absent.json"), validation_error);
    test_util::write_file(dir / "broken.json", "{nope");
    CHECK_THROWS_AS(read_json_file(dir / "broken.json"), validation_error);
}

TEST_CASE("compose summary counts directions and splits") {
    compose_options opts;
    opts.scenes = 10;
    opts.seed = 5;
    const composed_dataset ds = compose_dataset(pools::builtin(), opts);
    const nlohmann::json j = compose_summary_json(ds);
    CHECK(j.at("scenes") == 10);
    CHECK(j.at("examples") == 20);
    CHECK(j.at("directions").at("forward") == 10);
    CHECK(j.at("directions").at("inverted") == 10);
    std::int64_t split_total = 0;
    for (const auto& [name, count] : j.at("splits").items())
        split_total += count.get<std::int64_t>();
    CHECK(split_total == 20);
    CHECK(j.at("split_groups").get<std::int64_t>() <= 10);
}

TEST_CASE("geometry json carries rounded display strings") {
    geometry_report_t g;
    g.eff_rank_pre = 871.3;
    g.eff_rank_post = 350.5;
    g.eff_rank_delta_pct = delta_pct(871.3, 350.5);
    g.var_pre = 2.0;
    g.var_post = 1.0;
    g.var_delta_pct = delta_pct(2.0, 1.0);
    g.cka = 0.7071;
    const nlohmann::json j = geometry_json(g);
    CHECK(j.at("display").at("eff_rank_delta_pct") == "-59.8");
    CHECK(j.at("display").at("var_delta_pct") == "-50.0");
    CHECK(j.at("display").at("cka") == "0.71");
    CHECK(j.at("eff_rank").at("pre") == 871.3);
}

TEST_CASE("cli maps error families to exit codes") {
    const auto dir = test_util::temp_dir("cli_codes");
    const auto out = (dir / "rep.json").string();

    CHECK(run_cli({"geometry", "--pre", (dir / "ghost.trcf").string(), "--post",
                   (dir / "ghost.trcf").string(), "--out", out}) == 1);

    tensor flat = tensor::matrix(4, 3);
    for (auto& v : flat.data) v = 2.5f;
    write_tensor(dir / "flat.trcf", flat);
    CHECK(run_cli({"geometry", "--pre", (dir / "flat.trcf").string(), "--post",
                   (dir / "flat.trcf").string(), "--out", out}) == 2);

    write_tensor(dir / "pre.trcf", noise_tensor(8, 4, 1));
    write_tensor(dir / "post.trcf", noise_tensor(8, 4, 2));
    CHECK(run_cli({"geometry", "--pre", (dir / "pre.trcf").string(), "--post",
                   (dir / "post.trcf").string(), "--out", out}) == 0);
    CHECK(std::filesystem::exists(dir / "rep.json"));

    CHECK(run_cli({"geometry", "--frobnicate"}) == 1);
    CHECK(run_cli({}) == 1);
    CHECK(run_cli({"geometry", "--out", out}) == 1);

    // Unparsable verdicts everywhere: judgeable set is empty.
    const auto verdicts = test_util::temp_dir("cli_verdicts");
    test_util::write_file(verdicts / "e1.stage1.json", "not json");
    CHECK(run_cli({"audit", "--verdicts", verdicts.string(), "--out", out}) == 2);
}

TEST_CASE("TRACE_DIAG_OUT redirects report files") {
    const auto dir = test_util::temp_dir("cli_env_in");
    const auto redirect = test_util::temp_dir("cli_env_out");
    write_tensor(dir / "pre.trcf", noise_tensor(8, 4, 3));
    write_tensor(dir / "post.trcf", noise_tensor(8, 4, 4));

    setenv("TRACE_DIAG_OUT", redirect.string().c_str(), 1);
    const int code = run_cli({"geometry", "--pre", (dir / "pre.trcf").string(), "--post",
                              (dir / "post.trcf").string(), "--out",
                              (dir / "deep" / "geometry.json").string()});
    unsetenv("TRACE_DIAG_OUT");
    CHECK(code == 0);
    CHECK(std::filesystem::exists(redirect / "geometry.json"));
    CHECK_FALSE(std::filesystem::exists(dir / "deep" / "geometry.json"));
}

TEST_CASE("report subcommand joins envelope jsons into csv tables") {
    const auto in_dir = test_util::temp_dir("report_in");
    const auto out_dir = test_util::temp_dir("report_out");

    geometry_report_t g;
    g.eff_rank_pre = 10.0;
    g.eff_rank_post = 4.0;
    g.eff_rank_delta_pct = delta_pct(10.0, 4.0);
    g.var_pre = 1.0;
    g.var_post = 0.25;
    g.var_delta_pct = delta_pct(1.0, 0.25);
    g.cka = 0.5;
    write_json_file(in_dir / "geometry.json",
                    envelope("geometry", {{"pre", "p"}}, {}, geometry_json(g)));

    attention_plant ap;
    ap.layers = 2;
    ap.steps = 4;
    ap.heads = 2;
    ap.queries = 4;
    ap.group_sizes = {{cond_group::text, 8}, {cond_group::query, 8}};
    ap.shares = {{cond_group::text, 0.25}, {cond_group::query, 0.75}};
    const routing_report rr = routing_suite({plant_attention(ap)});
    write_json_file(in_dir / "attention.json",
                    envelope("attention", {{"traces", "t"}}, {}, routing_json(rr)));

    const auto written = write_report_csvs(in_dir, out_dir);
    CHECK(written.size() == 2);
    const std::string geo_csv = test_util::read_file(out_dir / "geometry.csv");
    CHECK(geo_csv.rfind("eff_rank_pre,eff_rank_post,eff_rank_delta_pct,", 0) == 0);
    CHECK(geo_csv.find("-60.0") != std::string::npos);
    CHECK(geo_csv.find("-75.0") != std::string::npos);
    const std::string attn_csv = test_util::read_file(out_dir / "attention.csv");
    CHECK(attn_csv.rfind("section,text,query,vision,learnable,", 0) == 0);
    CHECK(attn_csv.find("overall,") != std::string::npos);
    CHECK(attn_csv.find("early,") != std::string::npos);
    CHECK(attn_csv.find("dual,") != std::string::npos);

    const auto empty_dir = test_util::temp_dir("report_empty");
    CHECK_THROWS_AS(write_report_csvs(empty_dir, out_dir), validation_error);
    CHECK_THROWS_AS(write_report_csvs(empty_dir / "missing", out_dir), validation_error);

    CHECK(run_cli({"report", "--in", in_dir.string(), "--out",
                   (out_dir / "cli").string()}) == 0);
    CHECK(std::filesystem::exists(out_dir / "cli" / "geometry.csv"));
    CHECK(run_cli({"--format", "xml", "report", "--in", in_dir.string(), "--out",
                   (out_dir / "cli2").string()}) == 1);
}

TEST_CASE("synth runs are byte-identical across working directories") {
    const auto root = test_util::temp_dir("cli_synth");
    const auto spec = root / "spec.json";
    test_util::write_file(spec, R"({
        "seed": 17,
        "dataset": {
            "examples": 20, "dims": 70, "noise": 0.2,
            "families": [{"family": "edited_slot", "carrier": "query"}]
        },
        "connector": {"scale": 0.5},
        "attention": {
            "layers": 1, "steps": 2, "heads": 2, "queries": 2,
            "groups": [
                {"group": "text", "size": 6, "share": 0.4},
                {"group": "query", "size": 2, "share": 0.6}
            ]
        }
    })");

    CHECK(run_cli({"synth", "--spec", spec.string(), "--out", (root / "a").string()}) == 0);
    CHECK(run_cli({"synth", "--spec", spec.string(), "--out", (root / "b").string()}) == 0);

    const auto a = dir_contents(root / "a");
    const auto b = dir_contents(root / "b");
    REQUIRE_FALSE(a.empty());
    REQUIRE(a.size() == b.size());
    for (const auto& [rel, bytes] : a) {
        CAPTURE(rel);
        REQUIRE(b.count(rel) == 1);
        // The report envelope echoes the --out path, which differs by design.
        if (rel != "synth_report.json") CHECK(bytes == b.at(rel));
    }
    CHECK(a.count("metadata.jsonl") == 1);
    CHECK(a.count("truth.json") == 1);
    CHECK(a.count("synth_report.json") == 1);

    // Root-seed override flows into the bundle.
    CHECK(run_cli({"--seed", "23", "synth", "--spec", spec.string(), "--out",
                   (root / "c").string()}) == 0);
    const std::string truth = test_util::read_file(root / "c" / "truth.json");
    CHECK(truth.find("\"seed\": 23") != std::string::npos);
}
