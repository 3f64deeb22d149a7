#include "vlmopt/config.hpp"

#include <fstream>
#include <sstream>

namespace vlmopt {

ConfigMap parse_config(std::istream& in) {
  ConfigMap out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidArgument("config line " + std::to_string(lineno) + " lacks '='");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw InvalidArgument("config line " + std::to_string(lineno) + " has an empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

ConfigMap load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config " + path.string());
  return parse_config(in);
}

namespace {

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int n = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw InvalidArgument("config key " + key + " expects an integer, got \"" + v + "\"");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw InvalidArgument("config key " + key + " expects a number, got \"" + v + "\"");
  }
}

}  // namespace

ConfigMap apply_run_config(RunConfig& c, const ConfigMap& values) {
  ConfigMap rest;
  for (const auto& [key, v] : values) {
    if (key == "n_restart") c.n_restart = to_int(key, v);
    else if (key == "n_reset") c.n_reset = to_int(key, v);
    else if (key == "n_iter") c.n_iter = to_int(key, v);
    else if (key == "m") c.m = to_int(key, v);
    else if (key == "k") c.k = to_int(key, v);
    else if (key == "feedback_mode") c.feedback_mode = feedback_mode_from_string(v);
    else if (key == "conversation_mode") c.conversation_mode = conversation_mode_from_string(v);
    else if (key == "proposer_temperature") c.proposer_temperature = to_double(key, v);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(std::stoull(v));
    else if (key == "shots") c.shots = to_int(key, v);
    else if (key == "history_limit") c.history_limit = to_int(key, v);
    else if (key == "folds") {
      c.folds.clear();
      std::stringstream ss(v);
      for (std::string item; std::getline(ss, item, ',');)
        if (!trim(item).empty()) c.folds.push_back(to_int(key, trim(item)));
    } else {
      rest[key] = v;
    }
  }
  return rest;
}

std::string render_run_config(const RunConfig& c) {
  std::ostringstream os;
  os << "n_restart = " << c.n_restart << '\n'
     << "n_reset = " << c.n_reset << '\n'
     << "n_iter = " << c.n_iter << '\n'
     << "m = " << c.m << '\n'
     << "k = " << c.k << '\n'
     << "feedback_mode = " << to_string(c.feedback_mode) << '\n'
     << "conversation_mode = " << to_string(c.conversation_mode) << '\n'
     << "proposer_temperature = " << c.proposer_temperature << '\n'
     << "seed = " << c.seed << '\n'
     << "shots = " << c.shots << '\n'
     << "history_limit = " << c.history_limit << '\n'
     << "folds = ";
  for (std::size_t i = 0; i < c.folds.size(); ++i) os << (i ? "," : "") << c.folds[i];
  os << '\n';
  return os.str();
}

}  // namespace vlmopt
