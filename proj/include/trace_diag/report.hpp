#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "trace_diag/attention.hpp"
#include "trace_diag/audit.hpp"
#include "trace_diag/compose.hpp"
#include "trace_diag/geometry.hpp"
#include "trace_diag/probe.hpp"
#include "trace_diag/token_route.hpp"

namespace trace_diag {

inline constexpr const char* kToolName = "trace-diag";
inline constexpr const char* kToolVersion = "0.1.0";

// Round-half-away-from-zero at `decimals` places, rendered with trailing
// zeros kept ("-59.8", "0.985").
std::string fixed_display(double v, int decimals);

// FNV-1a of the canonical (sorted-key) dump, as 16 hex chars.
std::string config_hash(const nlohmann::json& config);

// Common wrapper: tool identity, echoed config, config hash, seeds, body.
nlohmann::json envelope(const std::string& subcommand, const nlohmann::json& config,
                        const std::vector<std::uint64_t>& seeds, nlohmann::json body);

nlohmann::json compose_summary_json(const composed_dataset& ds);
nlohmann::json geometry_json(const geometry_report_t& g);
nlohmann::json probe_json(const probe_report& r);
nlohmann::json token_route_json(const token_route_report& r);
nlohmann::json routing_json(const routing_report& r);
nlohmann::json audit_json(const audit_run& r);

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::filesystem::path& path);

// Joins the per-module report JSONs found in in_dir (geometry.json,
// probe_linear.json, probe_mlp.json, token_route.json, attention.json,
// audit.json) into table-shaped CSVs. Returns the files written.
std::vector<std::filesystem::path> write_report_csvs(const std::filesystem::path& in_dir,
                                                     const std::filesystem::path& out_dir);

}  // namespace trace_diag
