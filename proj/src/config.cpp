#include "cbswr/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "cbswr/errors.hpp"
#include "cbswr/rng.hpp"

namespace cbswr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid integer for '" + key + "': '" + value + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid number for '" + key + "': '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("invalid boolean for '" + key + "': '" + value + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_integer<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError("empty list for '" + key + "'");
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T, typename Member>
Field size_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_integer<T>(key, v); }};
}

template <typename Member>
Field double_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_double(key, v); }};
}

template <typename Member>
Field bool_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"run.name", [](const RunConfig& c) { return c.run_name; },
                 [](RunConfig& c, const std::string& v) { c.run_name = v; }});
    f.push_back({"run.out_dir", [](const RunConfig& c) { return c.out_dir; },
                 [](RunConfig& c, const std::string& v) { c.out_dir = v; }});
    f.push_back(size_field<std::uint64_t>("run.seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));

    f.push_back(size_field<std::size_t>("data.num_classes", [](RunConfig& c) -> std::size_t& { return c.data.num_classes; }));
    f.push_back(size_field<std::size_t>("data.train_classes", [](RunConfig& c) -> std::size_t& { return c.data.train_classes; }));
    f.push_back(size_field<std::size_t>("data.samples_per_class",
                                        [](RunConfig& c) -> std::size_t& { return c.data.samples_per_class; }));
    f.push_back(size_field<std::size_t>("data.channels", [](RunConfig& c) -> std::size_t& { return c.data.channels; }));
    f.push_back(size_field<std::size_t>("data.height", [](RunConfig& c) -> std::size_t& { return c.data.height; }));
    f.push_back(size_field<std::size_t>("data.width", [](RunConfig& c) -> std::size_t& { return c.data.width; }));
    f.push_back(double_field("data.noise_level", [](RunConfig& c) -> double& { return c.data.noise_level; }));
    f.push_back(double_field("data.crop_fraction", [](RunConfig& c) -> double& { return c.data.crop_fraction; }));
    f.push_back({"data.split_rule",
                 [](const RunConfig& c) { return std::string(c.data.split_rule == SplitRule::kFirst ? "first" : "seeded"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "first") c.data.split_rule = SplitRule::kFirst;
                   else if (v == "seeded") c.data.split_rule = SplitRule::kSeeded;
                   else throw ConfigError("invalid value for 'data.split_rule': '" + v + "' (first|seeded)");
                 }});
    f.push_back(size_field<std::uint64_t>("data.split_seed", [](RunConfig& c) -> std::uint64_t& { return c.data.split_seed; }));

    f.push_back(size_field<std::size_t>("model.conv1_channels",
                                        [](RunConfig& c) -> std::size_t& { return c.model.conv1_channels; }));
    f.push_back(size_field<std::size_t>("model.conv2_channels",
                                        [](RunConfig& c) -> std::size_t& { return c.model.conv2_channels; }));
    f.push_back(size_field<std::size_t>("model.rep_dim", [](RunConfig& c) -> std::size_t& { return c.model.rep_dim; }));
    f.push_back(size_field<std::size_t>("model.embed_dim", [](RunConfig& c) -> std::size_t& { return c.model.embed_dim; }));
    f.push_back(bool_field("model.embed_bias", [](RunConfig& c) -> bool& { return c.model.embed_bias; }));
    f.push_back(size_field<std::size_t>("model.num_clusters",
                                        [](RunConfig& c) -> std::size_t& { return c.model.num_clusters; }));
    f.push_back(double_field("model.head_init_scale", [](RunConfig& c) -> double& { return c.model.head_init_scale; }));

    f.push_back(size_field<std::size_t>("train.epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; }));
    f.push_back(size_field<std::size_t>("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    f.push_back(double_field("train.learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; }));
    f.push_back(double_field("train.momentum", [](RunConfig& c) -> double& { return c.train.momentum; }));
    f.push_back({"train.mode", [](const RunConfig& c) { return to_string(c.train.mode); },
                 [](RunConfig& c, const std::string& v) { c.train.mode = parse_ablation_mode(v); }});
    f.push_back(size_field<std::size_t>("train.checkpoint_interval",
                                        [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_interval; }));
    f.push_back(bool_field("train.record_wall_time", [](RunConfig& c) -> bool& { return c.train.record_wall_time; }));

    f.push_back(double_field("loss.alpha", [](RunConfig& c) -> double& { return c.train.weights.alpha; }));
    f.push_back(double_field("loss.beta", [](RunConfig& c) -> double& { return c.train.weights.beta; }));
    f.push_back(double_field("loss.gamma", [](RunConfig& c) -> double& { return c.train.weights.gamma; }));
    f.push_back(double_field("loss.tau", [](RunConfig& c) -> double& { return c.train.weights.tau; }));
    f.push_back(double_field("rim.lambda", [](RunConfig& c) -> double& { return c.train.rim.lambda; }));
    f.push_back(double_field("rim.weight_decay", [](RunConfig& c) -> double& { return c.train.rim.weight_decay; }));

    f.push_back({"eval.ks",
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.eval_ks.size(); ++i) s += (i ? "," : "") + std::to_string(c.eval_ks[i]);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) { c.eval_ks = parse_list("eval.ks", v); }});
    f.push_back(size_field<std::size_t>("gradcheck.batches", [](RunConfig& c) -> std::size_t& { return c.gradcheck_batches; }));
    return f;
  }();
  return table;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::uint64_t RunConfig::data_seed() const { return derive_seed(seed, 1); }

void RunConfig::finalize() {
  model.channels = data.channels;
  model.height = data.height;
  model.width = data.width;
  model.init_seed = derive_seed(seed, 2);
  train.seed = derive_seed(seed, 3);
  train.rim.num_clusters = model.num_clusters;
  train.crop_fraction = data.crop_fraction;
  if (run_name.empty() || run_name.find('/') != std::string::npos) {
    throw ConfigError("run.name must be a non-empty name without '/'");
  }
  if (gradcheck_batches < 1) throw ConfigError("gradcheck.batches must be >= 1");
  data.validate();
  model.validate();
  train.validate();
  const std::size_t train_size = data.train_classes * data.samples_per_class;
  if (train.batch_size > train_size) {
    throw ConfigError("train.batch_size " + std::to_string(train.batch_size) + " exceeds the " +
                      std::to_string(train_size) + " training images");
  }
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    try {
      set_key(base, key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::move(base));
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace cbswr
