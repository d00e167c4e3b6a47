#include "ctxr/run_config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace ctxr {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size())
    throw ConfigError("bad numeric value for key '" + key + "': " + value);
  return v;
}

int64_t parse_int(const std::string& key, const std::string& value) {
  int64_t v = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size())
    throw ConfigError("bad integer value for key '" + key + "': " + value);
  return v;
}

uint64_t parse_uint(const std::string& key, const std::string& value) {
  uint64_t v = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size())
    throw ConfigError("bad unsigned value for key '" + key + "': " + value);
  return v;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace

std::string serialize_config(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "seed=" << cfg.seed << "\n";
  os << "image_height=" << cfg.image_height << "\n";
  os << "image_width=" << cfg.image_width << "\n";
  os << "noise_sigma=" << format_double(cfg.noise_sigma) << "\n";
  os << "batch_size=" << cfg.batch_size << "\n";
  os << "total_iterations=" << cfg.total_iterations << "\n";
  os << "base_lr=" << format_double(cfg.base_lr) << "\n";
  os << "momentum=" << format_double(cfg.momentum) << "\n";
  os << "power=" << format_double(cfg.power) << "\n";
  os << "mode=" << to_string(cfg.mode) << "\n";
  os << "tau=" << format_double(cfg.contrast.tau) << "\n";
  os << "alpha=" << format_double(cfg.contrast.alpha) << "\n";
  for (size_t i = 0; i < cfg.contrast.lambda.size(); ++i)
    os << "lambda_" << i + 1 << "=" << format_double(cfg.contrast.lambda[i]) << "\n";
  os << "w_l=" << format_double(cfg.contrast.w_low) << "\n";
  os << "w_h=" << format_double(cfg.contrast.w_high) << "\n";
  os << "k_percent=" << format_double(cfg.contrast.k_percent) << "\n";
  os << "positive_budget=" << cfg.contrast.positive_budget << "\n";
  os << "negative_cap=" << cfg.contrast.negative_cap << "\n";
  os << "eval_samples=" << cfg.eval_samples << "\n";
  return os.str();
}

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));

    if (key == "seed") cfg.seed = parse_uint(key, value);
    else if (key == "image_height") cfg.image_height = int(parse_int(key, value));
    else if (key == "image_width") cfg.image_width = int(parse_int(key, value));
    else if (key == "noise_sigma") cfg.noise_sigma = parse_double(key, value);
    else if (key == "batch_size") cfg.batch_size = int(parse_int(key, value));
    else if (key == "total_iterations") cfg.total_iterations = parse_int(key, value);
    else if (key == "base_lr") cfg.base_lr = parse_double(key, value);
    else if (key == "momentum") cfg.momentum = parse_double(key, value);
    else if (key == "power") cfg.power = parse_double(key, value);
    else if (key == "mode") cfg.mode = parse_mode(value);
    else if (key == "tau") cfg.contrast.tau = parse_double(key, value);
    else if (key == "alpha") cfg.contrast.alpha = parse_double(key, value);
    else if (key == "lambda_1") cfg.contrast.lambda[0] = parse_double(key, value);
    else if (key == "lambda_2") cfg.contrast.lambda[1] = parse_double(key, value);
    else if (key == "lambda_3") cfg.contrast.lambda[2] = parse_double(key, value);
    else if (key == "lambda_4") cfg.contrast.lambda[3] = parse_double(key, value);
    else if (key == "w_l") cfg.contrast.w_low = parse_double(key, value);
    else if (key == "w_h") cfg.contrast.w_high = parse_double(key, value);
    else if (key == "k_percent") cfg.contrast.k_percent = parse_double(key, value);
    else if (key == "positive_budget") cfg.contrast.positive_budget = int(parse_int(key, value));
    else if (key == "negative_cap") cfg.contrast.negative_cap = int(parse_int(key, value));
    else if (key == "eval_samples") cfg.eval_samples = int(parse_int(key, value));
    else throw ConfigError("unknown config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace ctxr
