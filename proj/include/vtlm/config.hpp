#pragma once

#include <nlohmann/json.hpp>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vtlm/corpus.hpp"
#include "vtlm/encoder.hpp"
#include "vtlm/masking.hpp"
#include "vtlm/seq2seq.hpp"
#include "vtlm/trainer.hpp"

namespace vtlm {

/// Every knob of the pipeline. Keys are "section.name"; the config file uses
/// [section] headers followed by name = value lines.
struct RunConfig {
  // [run]
  std::uint64_t seed = 1;

  // [data]
  int train_examples = 20000;
  int valid_examples = 1000;
  int test_examples = 1000;
  int labels = 40;
  int attributes = 12;
  int regions = 8;
  int feat_dim = 64;
  double sigma = 0.5;
  int min_objects = 2;
  int max_objects = 4;
  int bpe_merges = 2000;

  // [model]
  int d_model = 64;
  int ffn = 256;
  int layers = 2;
  int heads = 4;
  int max_positions = 64;
  int max_len = 256;

  // [mask]
  double select_ratio = 0.15;
  double mask_frac = 0.80;
  double random_frac = 0.10;
  double keep_frac = 0.10;
  double visual_select_ratio = 0.15;
  double visual_target_ratio = 0.15;

  // [pretrain]
  std::string objective = "vtlm";

  // [finetune]
  std::string init = "scratch";
  std::string task = "mmt";
  bool copy_cross_attn = true;
  /// Fine-tuning uses the first N training triplets; 0 = all.
  int train_limit = 0;

  // [train] unset values fall back to the phase defaults
  std::optional<double> lr;
  std::optional<double> dropout;
  std::optional<long> max_steps;
  std::optional<long> warmup_steps;
  std::optional<long> eval_interval;
  int batch_size = 64;
  long log_interval = 100;
  int val_limit = 0;

  // [decode]
  int beam = 8;
  int decode_max_len = 64;
  double alpha = 1.0;

  void set(const std::string& key, const std::string& value);
  nlohmann::json to_json() const;
  static std::vector<std::string> keys();

  GenConfig gen_config() const {
    GenConfig g;
    g.examples = train_examples + valid_examples + test_examples;
    g.num_labels = labels;
    g.num_attributes = attributes;
    g.regions = regions;
    g.feat_dim = feat_dim;
    g.sigma = sigma;
    g.min_objects = min_objects;
    g.max_objects = max_objects;
    return g;
  }

  EncoderConfig encoder_config(int vocab_size, double dropout_rate) const {
    EncoderConfig c;
    c.d_model = d_model;
    c.ffn = ffn;
    c.layers = layers;
    c.heads = heads;
    c.dropout = dropout_rate;
    c.max_positions = max_positions;
    c.vocab_size = vocab_size;
    c.label_vocab = labels;
    c.feat_dim = feat_dim;
    return c;
  }

  MaskPolicy mask_policy() const {
    MaskPolicy p;
    p.select_ratio = select_ratio;
    p.mask_frac = mask_frac;
    p.random_frac = random_frac;
    p.keep_frac = keep_frac;
    p.visual_select_ratio = visual_select_ratio;
    p.visual_target_ratio = visual_target_ratio;
    if (std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9) throw ConfigError("mask fractions must sum to 1");
    return p;
  }

  Objective pretrain_objective() const {
    if (objective == "tlm") return Objective::TLM;
    if (objective == "vtlm") return Objective::VTLM;
    throw ConfigError("objective must be tlm or vtlm, got '" + objective + "'");
  }

  MtTask mt_task() const {
    if (task == "nmt") return MtTask::NMT;
    if (task == "mmt") return MtTask::MMT;
    throw ConfigError("task must be nmt or mmt, got '" + task + "'");
  }

  TrainConfig train_config(Phase phase) const {
    TrainConfig t = TrainConfig::defaults(phase);
    if (lr) t.lr = *lr;
    if (dropout) t.dropout = *dropout;
    if (max_steps) t.max_steps = *max_steps;
    if (warmup_steps) t.warmup_steps = *warmup_steps;
    if (eval_interval) t.eval_interval = *eval_interval;
    t.batch_size = batch_size;
    t.log_interval = log_interval;
    t.val_limit = val_limit;
    t.seed = seed;
    t.validate();
    return t;
  }

  BeamOptions beam_options() const {
    if (beam < 1) throw ConfigError("beam must be >= 1");
    return {beam, decode_max_len, alpha};
  }
};

namespace detail {

template <class V>
V parse_value(const std::string& key, const std::string& s) {
  if constexpr (std::is_same_v<V, std::string>) {
    return s;
  } else if constexpr (std::is_same_v<V, bool>) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + s + "'");
  } else {
    V v{};
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + s + "'");
    return v;
  }
}

template <class V>
nlohmann::json value_json(const V& v) {
  return v;
}

template <class V>
nlohmann::json value_json(const std::optional<V>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

template <class V>
Field field(std::string key, V RunConfig::*member) {
  auto setter = [key, member](RunConfig& c, const std::string& s) {
    if constexpr (requires { typename V::value_type; } && !std::is_same_v<V, std::string>) {
      c.*member = parse_value<typename V::value_type>(key, s);
    } else {
      c.*member = parse_value<V>(key, s);
    }
  };
  return {key, setter, [member](const RunConfig& c) { return value_json(c.*member); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      field("run.seed", &RunConfig::seed),
      field("data.train_examples", &RunConfig::train_examples),
      field("data.valid_examples", &RunConfig::valid_examples),
      field("data.test_examples", &RunConfig::test_examples),
      field("data.labels", &RunConfig::labels),
      field("data.attributes", &RunConfig::attributes),
      field("data.regions", &RunConfig::regions),
      field("data.feat_dim", &RunConfig::feat_dim),
      field("data.sigma", &RunConfig::sigma),
      field("data.min_objects", &RunConfig::min_objects),
      field("data.max_objects", &RunConfig::max_objects),
      field("data.bpe_merges", &RunConfig::bpe_merges),
      field("model.d_model", &RunConfig::d_model),
      field("model.ffn", &RunConfig::ffn),
      field("model.layers", &RunConfig::layers),
      field("model.heads", &RunConfig::heads),
      field("model.max_positions", &RunConfig::max_positions),
      field("model.max_len", &RunConfig::max_len),
      field("mask.select_ratio", &RunConfig::select_ratio),
      field("mask.mask_frac", &RunConfig::mask_frac),
      field("mask.random_frac", &RunConfig::random_frac),
      field("mask.keep_frac", &RunConfig::keep_frac),
      field("mask.visual_select_ratio", &RunConfig::visual_select_ratio),
      field("mask.visual_target_ratio", &RunConfig::visual_target_ratio),
      field("pretrain.objective", &RunConfig::objective),
      field("finetune.init", &RunConfig::init),
      field("finetune.task", &RunConfig::task),
      field("finetune.copy_cross_attn", &RunConfig::copy_cross_attn),
      field("finetune.train_limit", &RunConfig::train_limit),
      field("train.lr", &RunConfig::lr),
      field("train.dropout", &RunConfig::dropout),
      field("train.max_steps", &RunConfig::max_steps),
      field("train.warmup_steps", &RunConfig::warmup_steps),
      field("train.eval_interval", &RunConfig::eval_interval),
      field("train.batch_size", &RunConfig::batch_size),
      field("train.log_interval", &RunConfig::log_interval),
      field("train.val_limit", &RunConfig::val_limit),
      field("decode.beam", &RunConfig::beam),
      field("decode.max_len", &RunConfig::decode_max_len),
      field("decode.alpha", &RunConfig::alpha),
  };
  return f;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields()) {
    if (f.key == key) {
      f.set(*this, detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : detail::fields()) j[f.key] = f.get(*this);
  return j;
}

inline std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : detail::fields()) k.push_back(f.key);
  return k;
}

/// Applies "key = value" lines grouped under [section] headers. '#' and ';'
/// start comments.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto c = line.find_first_of("#;"); c != std::string::npos) line.resize(c);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(line_no) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    try {
      cfg.set(full, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  apply_config_text(cfg, text, path);
}

}  // namespace vtlm
