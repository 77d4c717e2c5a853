#pragma once

// Hyperparameters for model, losses and optimizer, with a line-oriented
// "key = value" text form that is embedded verbatim in checkpoints.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvm/io.hpp"
#include "mvm/losses.hpp"

namespace mvm {

inline constexpr int kConfigSchemaVersion = 1;

struct ModelConfig {
  // Vocabulary: visual tokens are |V| viseme tokens plus |P| sub-tokens.
  int visemes = 4;
  int phonemes = 10;
  int words = 20;

  int dim = 32;
  int frames = 24;
  int slots = 16;
  int heads = 4;
  double alpha = 16.0;
  // Number of memory placements; 0 is the memory-free baseline. Level i sits
  // in front of back-end block i.
  int levels = 3;
  int backend_blocks = 3;
  std::vector<int> dilations{1, 2, 4};
  int frontend_kernel = 5;
  int backend_kernel = 3;

  double rec_weight = 1.0;
  double cont_weight = 1.0;
  bool literal_rec_sum = false;
  bool literal_cont_sum = false;

  std::string precision = "f64";
  std::uint64_t seed = 1;

  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  int batch = 32;
  int steps = 2000;

  int visual_vocab() const { return visemes + phonemes; }
  int audio_vocab() const { return phonemes; }
  bool has_memory() const { return levels > 0; }

  LossWeights loss_weights() const {
    return {rec_weight, cont_weight, literal_rec_sum, literal_cont_sum};
  }

  void validate() const {
    auto fail = [](const std::string& why) { throw std::invalid_argument("ModelConfig: " + why); };
    if (visemes < 1 || phonemes < 1 || words < 2) fail("vocabulary sizes must be positive and K >= 2");
    if (dim < 1 || frames < 1) fail("D and T must be positive");
    if (slots < 1 || heads < 1) fail("N and h must be positive");
    if (dim % heads != 0) fail("D=" + std::to_string(dim) + " is not divisible by h=" + std::to_string(heads));
    if (alpha < 0) fail("alpha must be non-negative");
    if (levels < 0) fail("levels must be >= 0");
    if (backend_blocks < 0) fail("backend_blocks must be >= 0");
    if (levels > backend_blocks + 1) fail("levels must not exceed backend_blocks + 1");
    if (static_cast<int>(dilations.size()) != backend_blocks) fail("need one dilation per back-end block");
    for (int d : dilations)
      if (d < 1) fail("dilations must be positive");
    if (frontend_kernel % 2 == 0 || backend_kernel % 2 == 0) fail("kernel sizes must be odd");
    if (precision != "f32" && precision != "f64") fail("precision must be f32 or f64");
    if (batch < 1 || steps < 0) fail("batch must be positive and steps non-negative");
    if (lr <= 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || adam_eps <= 0 || weight_decay < 0)
      fail("optimizer settings out of range");
  }

  bool operator==(const ModelConfig&) const = default;
};

namespace detail {

template <class Fn>
void for_each_config_field(ModelConfig& c, Fn&& fn) {
  fn("visemes", c.visemes);
  fn("phonemes", c.phonemes);
  fn("words", c.words);
  fn("dim", c.dim);
  fn("frames", c.frames);
  fn("slots", c.slots);
  fn("heads", c.heads);
  fn("alpha", c.alpha);
  fn("levels", c.levels);
  fn("backend_blocks", c.backend_blocks);
  fn("dilations", c.dilations);
  fn("frontend_kernel", c.frontend_kernel);
  fn("backend_kernel", c.backend_kernel);
  fn("rec_weight", c.rec_weight);
  fn("cont_weight", c.cont_weight);
  fn("literal_rec_sum", c.literal_rec_sum);
  fn("literal_cont_sum", c.literal_cont_sum);
  fn("precision", c.precision);
  fn("seed", c.seed);
  fn("lr", c.lr);
  fn("beta1", c.beta1);
  fn("beta2", c.beta2);
  fn("adam_eps", c.adam_eps);
  fn("weight_decay", c.weight_decay);
  fn("batch", c.batch);
  fn("steps", c.steps);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct FieldWriter {
  std::ostringstream& os;
  void operator()(const char* key, int v) { os << key << " = " << v << '\n'; }
  void operator()(const char* key, std::uint64_t v) { os << key << " = " << v << '\n'; }
  void operator()(const char* key, bool v) { os << key << " = " << (v ? "true" : "false") << '\n'; }
  void operator()(const char* key, const std::string& v) { os << key << " = " << v << '\n'; }
  void operator()(const char* key, double v) {
    std::ostringstream tmp;
    tmp.precision(17);
    tmp << v;
    os << key << " = " << tmp.str() << '\n';
  }
  void operator()(const char* key, const std::vector<int>& v) {
    os << key << " = ";
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << '\n';
  }
};

struct FieldParser {
  const std::string& key;
  const std::string& value;
  bool& matched;

  void fail() const { throw std::invalid_argument("config: bad value for " + key + ": '" + value + "'"); }

  template <class V>
  void parse_number(V& out) const {
    std::istringstream is(value);
    V v{};
    if (!(is >> v) || !is.eof()) fail();
    out = v;
  }
  void operator()(const char* k, int& v) { if (key == k) { matched = true; parse_number(v); } }
  void operator()(const char* k, std::uint64_t& v) { if (key == k) { matched = true; parse_number(v); } }
  void operator()(const char* k, double& v) { if (key == k) { matched = true; parse_number(v); } }
  void operator()(const char* k, std::string& v) { if (key == k) { matched = true; v = value; } }
  void operator()(const char* k, bool& v) {
    if (key != k) return;
    matched = true;
    if (value == "true" || value == "1") v = true;
    else if (value == "false" || value == "0") v = false;
    else fail();
  }
  void operator()(const char* k, std::vector<int>& v) {
    if (key != k) return;
    matched = true;
    v.clear();
    if (value.empty()) return;
    std::istringstream is(value);
    std::string item;
    while (std::getline(is, item, ',')) {
      int x = 0;
      std::istringstream xs(trim(item));
      if (!(xs >> x) || !xs.eof()) fail();
      v.push_back(x);
    }
  }
};

}  // namespace detail

inline std::string to_text(const ModelConfig& config) {
  std::ostringstream os;
  os << "schema_version = " << kConfigSchemaVersion << '\n';
  auto copy = config;
  detail::for_each_config_field(copy, detail::FieldWriter{os});
  return os.str();
}

/// Applies "key = value" lines on top of `base`. Blank lines and '#'
/// comments are ignored; unknown keys are errors.
inline ModelConfig parse_config_text(const std::string& text, ModelConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (key == "schema_version") {
      if (value != std::to_string(kConfigSchemaVersion))
        throw std::invalid_argument("config: unsupported schema_version " + value);
      continue;
    }
    bool matched = false;
    detail::for_each_config_field(base, detail::FieldParser{key, value, matched});
    if (!matched) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return base;
}

inline ModelConfig load_config(const std::filesystem::path& path, ModelConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

/// Micro model used for gradient checks.
inline ModelConfig micro_config() {
  ModelConfig c;
  c.visemes = 3;
  c.phonemes = 5;
  c.words = 4;
  c.dim = 8;
  c.slots = 4;
  c.heads = 2;
  c.frames = 5;
  c.levels = 2;
  c.backend_blocks = 2;
  c.dilations = {1, 2};
  c.batch = 2;
  c.precision = "f64";
  return c;
}

/// Settings for the desk-scale ablation: the default architecture in f32 with
/// a step size that converges within the 2000-step budget.
inline ModelConfig ablation_config() {
  ModelConfig c;
  c.precision = "f32";
  c.lr = 1e-3;
  c.steps = 2000;
  return c;
}

}  // namespace mvm
