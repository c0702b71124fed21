// Copyright 2026 The qbprf authors
//
// Licensed under the Apache License, Version 2.0 (the "License"); you may not use this file except in compliance
// with the License. You may obtain a copy of the License at
//
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software distributed under the License
// is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express
// or implied. See the License for the specific language governing permissions and limitations under the License.

#include "qbprf/config.hpp"

#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "qbprf/errors.hpp"
#include "qbprf/serialize.hpp"

namespace qbprf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_quotes(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

std::string quoted_if_needed(const std::string& s) {
  if (s.empty() || s.find_first_of(" #") != std::string::npos) return "\"" + s + "\"";
  return s;
}

int64_t parse_integer(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw UserError("key '" + key + "': '" + value + "' is not an integer");
  }
}

uint64_t parse_unsigned(const std::string& key, const std::string& value) {
  if (!value.empty() && value[0] == '-')
    throw UserError("key '" + key + "': '" + value + "' must be non-negative");
  try {
    size_t pos = 0;
    const uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw UserError("key '" + key + "': '" + value + "' is not an unsigned integer");
  }
}

double parse_floating(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw UserError("key '" + key + "': '" + value + "' is not a number");
  }
}

bool parse_boolean(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw UserError("key '" + key + "': '" + value + "' is not a boolean (true/false)");
}

// Shortest representation that parses back to the same double ("0.1", "1.0").
std::string floating_text(double v) { return nlohmann::json(v).dump(); }

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) items.push_back(trim(item));
  if (!text.empty() && text.back() == ',') items.push_back("");
  return items;
}

// One configuration key: how to assign it from text and how to print its
// current value. The table below is the single source of truth for the file
// parser, the flag overrides, and the canonical echo.
struct KeySpec {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// The get() side only reads through the shared accessor; the const_cast
// exists because one lambda serves both directions.
template <class F>
KeySpec int_key(const char* name, F field) {
  return {name,
          [name, field](RunConfig& c, const std::string& v) {
            const int64_t x = parse_integer(name, v);
            if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
              throw UserError(std::string("key '") + name + "': value out of range");
            field(c) = static_cast<int>(x);
          },
          [field](const RunConfig& c) {
            return std::to_string(field(const_cast<RunConfig&>(c)));
          }};
}

template <class F>
KeySpec float_key(const char* name, F field) {
  return {name,
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_floating(name, v); },
          [field](const RunConfig& c) {
            return floating_text(field(const_cast<RunConfig&>(c)));
          }};
}

template <class F>
KeySpec bool_key(const char* name, F field) {
  return {name,
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_boolean(name, v); },
          [field](const RunConfig& c) {
            return field(const_cast<RunConfig&>(c)) ? "true" : "false";
          }};
}

template <class F>
KeySpec string_key(const char* name, F field) {
  return {name, [field](RunConfig& c, const std::string& v) { field(c) = v; },
          [field](const RunConfig& c) {
            return quoted_if_needed(field(const_cast<RunConfig&>(c)));
          }};
}

template <class F>
KeySpec unsigned_key(const char* name, F field) {
  return {name,
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_unsigned(name, v); },
          [field](const RunConfig& c) {
            return std::to_string(field(const_cast<RunConfig&>(c)));
          }};
}

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = [] {
    std::vector<KeySpec> t;

    // Master seed: assigning it re-seeds both stages in one stroke.
    t.push_back({"seed",
                 [](RunConfig& c, const std::string& v) {
                   c.seed = parse_unsigned("seed", v);
                   c.stage1.rng_seed = c.seed;
                   c.stage2.rng_seed = c.seed;
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});

    t.push_back(string_key("out", [](RunConfig& c) -> std::string& { return c.out; }));
    t.push_back(string_key("corpus", [](RunConfig& c) -> std::string& { return c.corpus; }));
    t.push_back(string_key("bags", [](RunConfig& c) -> std::string& { return c.bags; }));
    t.push_back(string_key("pairs", [](RunConfig& c) -> std::string& { return c.pairs; }));
    t.push_back(string_key("stage1_checkpoint",
                           [](RunConfig& c) -> std::string& { return c.stage1_checkpoint; }));
    t.push_back(string_key("index", [](RunConfig& c) -> std::string& { return c.index; }));
    t.push_back(string_key("stage2_checkpoint",
                           [](RunConfig& c) -> std::string& { return c.stage2_checkpoint; }));

    t.push_back(
        float_key("valid_fraction", [](RunConfig& c) -> double& { return c.valid_fraction; }));
    t.push_back(
        float_key("test_fraction", [](RunConfig& c) -> double& { return c.test_fraction; }));
    t.push_back(int_key("eval_k", [](RunConfig& c) -> int& { return c.eval_k; }));
    t.push_back({"sweep_k",
                 [](RunConfig& c, const std::string& v) { c.sweep_k = parse_int_list(v); },
                 [](const RunConfig& c) {
                   std::string s;
                   for (size_t i = 0; i < c.sweep_k.size(); ++i)
                     s += (i ? "," : "") + std::to_string(c.sweep_k[i]);
                   return s;
                 }});
    t.push_back({"ablation_modes",
                 [](RunConfig& c, const std::string& v) { c.ablation_modes = parse_ablation_list(v); },
                 [](const RunConfig& c) {
                   std::string s;
                   for (size_t i = 0; i < c.ablation_modes.size(); ++i)
                     s += std::string(i ? "," : "") + ablation_name(c.ablation_modes[i]);
                   return s;
                 }});

    t.push_back(int_key("synth.clusters", [](RunConfig& c) -> int& { return c.synth.clusters; }));
    t.push_back(
        int_key("synth.paraphrases", [](RunConfig& c) -> int& { return c.synth.paraphrases; }));
    t.push_back(
        int_key("synth.vocab_size", [](RunConfig& c) -> int& { return c.synth.vocab_size; }));

    t.push_back(int_key("stage1.max_len", [](RunConfig& c) -> int& { return c.stage1.max_len; }));
    t.push_back(int_key("stage1.emb_dim", [](RunConfig& c) -> int& { return c.stage1.emb_dim; }));
    t.push_back(
        int_key("stage1.enc_hidden", [](RunConfig& c) -> int& { return c.stage1.enc_hidden; }));
    t.push_back(
        int_key("stage1.enc_layers", [](RunConfig& c) -> int& { return c.stage1.enc_layers; }));
    t.push_back(
        int_key("stage1.dec_hidden", [](RunConfig& c) -> int& { return c.stage1.dec_hidden; }));
    t.push_back(int_key("stage1.d_z", [](RunConfig& c) -> int& { return c.stage1.d_z; }));
    t.push_back(float_key("stage1.beta", [](RunConfig& c) -> double& { return c.stage1.beta; }));
    t.push_back(bool_key("stage1.beta_warmup",
                         [](RunConfig& c) -> bool& { return c.stage1.beta_warmup; }));
    t.push_back(float_key("stage1.alpha", [](RunConfig& c) -> double& { return c.stage1.alpha; }));
    t.push_back(float_key("stage1.tau", [](RunConfig& c) -> double& { return c.stage1.tau; }));
    t.push_back(
        int_key("stage1.batch_size", [](RunConfig& c) -> int& { return c.stage1.batch_size; }));
    t.push_back(
        float_key("stage1.mask_ratio", [](RunConfig& c) -> double& { return c.stage1.mask_ratio; }));
    t.push_back(float_key("stage1.learning_rate",
                          [](RunConfig& c) -> double& { return c.stage1.learning_rate; }));
    t.push_back(
        int_key("stage1.max_epochs", [](RunConfig& c) -> int& { return c.stage1.max_epochs; }));
    t.push_back(unsigned_key("stage1.rng_seed",
                             [](RunConfig& c) -> uint64_t& { return c.stage1.rng_seed; }));

    t.push_back(float_key("stage2.lambda1", [](RunConfig& c) -> double& { return c.stage2.lambda1; }));
    t.push_back(float_key("stage2.lambda2", [](RunConfig& c) -> double& { return c.stage2.lambda2; }));
    t.push_back(float_key("stage2.learning_rate",
                          [](RunConfig& c) -> double& { return c.stage2.learning_rate; }));
    t.push_back(
        int_key("stage2.batch_size", [](RunConfig& c) -> int& { return c.stage2.batch_size; }));
    t.push_back(int_key("stage2.k", [](RunConfig& c) -> int& { return c.stage2.k; }));
    t.push_back(int_key("stage2.bag_size", [](RunConfig& c) -> int& { return c.stage2.bag_size; }));
    t.push_back(float_key("stage2.validation_interval",
                          [](RunConfig& c) -> double& { return c.stage2.validation_interval; }));
    t.push_back(
        int_key("stage2.max_epochs", [](RunConfig& c) -> int& { return c.stage2.max_epochs; }));
    t.push_back({"stage2.ablation",
                 [](RunConfig& c, const std::string& v) { c.stage2.ablation = ablation_from_name(v); },
                 [](const RunConfig& c) { return std::string(ablation_name(c.stage2.ablation)); }});
    t.push_back(unsigned_key("stage2.rng_seed",
                             [](RunConfig& c) -> uint64_t& { return c.stage2.rng_seed; }));
    t.push_back(bool_key("stage2.rebuild_index_on_validation", [](RunConfig& c) -> bool& {
      return c.stage2.rebuild_index_on_validation;
    }));

    t.push_back(int_key("qbs.bilstm_hidden",
                        [](RunConfig& c) -> int& { return c.stage2.qbs.bilstm_hidden; }));
    t.push_back(
        float_key("qbs.dropout", [](RunConfig& c) -> double& { return c.stage2.qbs.dropout; }));
    t.push_back(float_key("qbs.tau", [](RunConfig& c) -> double& { return c.stage2.qbs.tau; }));
    t.push_back(float_key("qbs.tau1", [](RunConfig& c) -> double& { return c.stage2.qbs.tau1; }));
    t.push_back(float_key("qbs.tau2", [](RunConfig& c) -> double& { return c.stage2.qbs.tau2; }));
    t.push_back(bool_key("qbs.in_batch_negatives",
                         [](RunConfig& c) -> bool& { return c.stage2.qbs.in_batch_negatives; }));

    t.push_back(int_key("qbf.d_model", [](RunConfig& c) -> int& { return c.stage2.qbf.d_model; }));
    t.push_back(int_key("qbf.heads", [](RunConfig& c) -> int& { return c.stage2.qbf.heads; }));
    t.push_back(int_key("qbf.layers", [](RunConfig& c) -> int& { return c.stage2.qbf.layers; }));
    t.push_back(
        float_key("qbf.dropout", [](RunConfig& c) -> double& { return c.stage2.qbf.dropout; }));
    t.push_back({"qbf.aggregation",
                 [](RunConfig& c, const std::string& v) {
                   c.stage2.qbf.aggregation = aggregation_from_name(v);
                 },
                 [](const RunConfig& c) {
                   return std::string(aggregation_name(c.stage2.qbf.aggregation));
                 }});
    t.push_back(int_key("qbf.ffn_dim", [](RunConfig& c) -> int& { return c.stage2.qbf.ffn_dim; }));

    t.push_back(
        int_key("matcher.d_model", [](RunConfig& c) -> int& { return c.stage2.matcher.d_model; }));
    t.push_back(
        int_key("matcher.heads", [](RunConfig& c) -> int& { return c.stage2.matcher.heads; }));
    t.push_back(
        int_key("matcher.layers", [](RunConfig& c) -> int& { return c.stage2.matcher.layers; }));
    t.push_back(float_key("matcher.dropout",
                          [](RunConfig& c) -> double& { return c.stage2.matcher.dropout; }));
    t.push_back(
        int_key("matcher.ffn_dim", [](RunConfig& c) -> int& { return c.stage2.matcher.ffn_dim; }));

    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  stage1.validate();
  stage2.validate();
  if (!(valid_fraction >= 0.0) || !(test_fraction >= 0.0) ||
      !(valid_fraction + test_fraction < 1.0))
    throw UserError("config: bag split fractions must be non-negative and sum below 1");
  if (eval_k < 0) throw UserError("config: eval_k must be >= 0 (0 = checkpoint default)");
  if (sweep_k.empty()) throw UserError("config: sweep_k must not be empty");
  for (int k : sweep_k)
    if (k < 1) throw UserError("config: sweep_k entries must be >= 1");
  if (ablation_modes.empty()) throw UserError("config: ablation_modes must not be empty");
  if (synth.clusters < 1 || synth.paraphrases < 2 || synth.vocab_size < 1)
    throw UserError("config: synthetic corpus needs >= 1 cluster, >= 2 paraphrases, >= 1 word");
}

RunConfig desk_preset() {
  RunConfig c;
  c.synth = {200, 8, 2000};
  c.valid_fraction = 0.1;
  c.test_fraction = 0.2;

  c.stage1.max_len = 16;
  c.stage1.emb_dim = 24;
  c.stage1.enc_hidden = 16;
  c.stage1.enc_layers = 1;
  c.stage1.dec_hidden = 16;
  c.stage1.d_z = 16;
  c.stage1.batch_size = 32;
  c.stage1.learning_rate = 1e-3;
  c.stage1.max_epochs = 3;

  c.stage2.learning_rate = 1e-3;
  c.stage2.batch_size = 16;
  c.stage2.k = 10;
  c.stage2.bag_size = 5;
  c.stage2.validation_interval = 0.25;
  c.stage2.max_epochs = 1;
  c.stage2.qbs.bilstm_hidden = 16;
  c.stage2.qbf.d_model = 32;
  c.stage2.qbf.heads = 2;
  c.stage2.qbf.layers = 1;
  c.stage2.qbf.ffn_dim = 64;
  c.stage2.matcher.d_model = 32;
  c.stage2.matcher.heads = 2;
  c.stage2.matcher.layers = 1;
  c.stage2.matcher.ffn_dim = 64;
  return c;
}

void apply_config_key(RunConfig& config, const std::string& key, const std::string& value) {
  for (const KeySpec& spec : key_table()) {
    if (spec.name == key) {
      spec.set(config, strip_quotes(value));
      return;
    }
  }
  throw UserError("unknown config key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
  std::istringstream is(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3)
          throw UserError("malformed section header '" + t + "'");
        section = trim(t.substr(1, t.size() - 2));
        if (section.empty()) throw UserError("empty section header");
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw UserError("expected 'key = value', got '" + t + "'");
      std::string key = trim(t.substr(0, eq));
      const std::string value = trim(t.substr(eq + 1));
      if (key.empty()) throw UserError("missing key before '='");
      if (!section.empty()) key = section + "." + key;
      apply_config_key(base, key, value);
    } catch (const UserError& e) {
      throw UserError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw UserError("config file " + path + ": " + e.what());
  }
  try {
    return parse_config_text(text, std::move(base));
  } catch (const UserError& e) {
    throw UserError(path + ": " + e.what());
  }
}

std::string config_echo(const RunConfig& config) {
  std::string out = "# effective configuration\n";
  for (const KeySpec& spec : key_table()) out += spec.name + " = " + spec.get(config) + "\n";
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  const auto items = split_list(text);
  if (items.empty()) throw UserError("expected a comma-separated list of integers, got ''");
  std::vector<int> out;
  for (const std::string& item : items) {
    const int64_t v = parse_integer("list item", item);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
      throw UserError("list item '" + item + "' out of range");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

std::vector<Ablation> parse_ablation_list(const std::string& text) {
  const auto items = split_list(text);
  if (items.empty()) throw UserError("expected a comma-separated list of ablation modes, got ''");
  std::vector<Ablation> out;
  for (const std::string& item : items) out.push_back(ablation_from_name(item));
  return out;
}

}  // namespace qbprf
