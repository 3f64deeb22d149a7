#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "vlmopt/core.hpp"

namespace vlmopt {

using ConfigMap = std::map<std::string, std::string>;

// Flat `key = value` lines; '#' starts a comment. Throws on a line without '='.
ConfigMap parse_config(std::istream& in);
ConfigMap load_config_file(const std::filesystem::path& path);

// Applies keys named after RunConfig fields. Unknown keys are returned, not
// applied, so callers can consume their own (e.g. endpoints).
ConfigMap apply_run_config(RunConfig& config, const ConfigMap& values);

std::string render_run_config(const RunConfig& config);

}  // namespace vlmopt
