#pragma once

// JSON run configuration: strict parsing (unknown keys are errors, reported
// with their field path), full serialization of every default, and dotted
// `key=value` overrides.

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyseg/network.hpp"
#include "hyseg/synthetic.hpp"
#include "hyseg/trainer.hpp"

namespace hyseg {

using Json = nlohmann::ordered_json;

struct RunConfig {
  ModelConfig model = ModelConfig::defaults();
  TrainConfig train;
  SyntheticDataSpec data;

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
    if (data.channels != model.in_channels) {
      throw ConfigError("data.channels (" + std::to_string(data.channels) + ") != model.in_channels (" +
                        std::to_string(model.in_channels) + ")");
    }
    if (data.num_classes != model.num_classes) {
      throw ConfigError("data.num_classes (" + std::to_string(data.num_classes) + ") != model.num_classes (" +
                        std::to_string(model.num_classes) + ")");
    }
    model.stage_grids(data.extent);
  }
};

namespace detail {

// Reads fields out of one JSON object and remembers which keys were used so
// leftovers can be rejected.
class FieldReader {
 public:
  FieldReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(at(key) + " has the wrong type: " + j_.at(key).dump());
    }
  }

  void get_size(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(at(key) + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }

  void get_u64(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(at(key) + " must be a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }

  void get_double(const std::string& key, double& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(at(key) + " must be a number");
    out = v.get<double>();
  }

  // Either a single extent or three per-axis extents.
  void get_triple(const std::string& key, Triple& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    auto one = [&](const Json& e) {
      if (!e.is_number_integer() || e.get<long long>() < 0) throw ConfigError(at(key) + " entries must be non-negative integers");
      return e.get<std::size_t>();
    };
    if (v.is_array()) {
      if (v.size() != 3) throw ConfigError(at(key) + " must list 3 extents");
      out = {one(v[0]), one(v[1]), one(v[2])};
    } else {
      const std::size_t s = one(v);
      out = {s, s, s};
    }
  }

  const Json& child(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown key " + at(key));
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline Json triple_json(const Triple& t) { return Json::array({t[0], t[1], t[2]}); }

}  // namespace detail

inline Json to_json(const ModelConfig& m) {
  Json stages = Json::array();
  for (const auto& s : m.stages) {
    stages.push_back({{"embed_dim", s.embed_dim},
                      {"depth", s.depth},
                      {"mixer", to_string(s.mixer)},
                      {"heads", s.heads},
                      {"reduction", s.reduction},
                      {"kernel", detail::triple_json(s.kernel)},
                      {"stride", detail::triple_json(s.stride)},
                      {"padding", detail::triple_json(s.padding)}});
  }
  return {{"in_channels", m.in_channels},
          {"num_classes", m.num_classes},
          {"stages", stages},
          {"decoder_dim", m.decoder_dim},
          {"deep_supervision", m.deep_supervision},
          {"ds_weights", m.ds_weights},
          {"ssm",
           {{"state_dim", m.ssm.state_dim},
            {"expand", m.ssm.expand},
            {"conv_width", m.ssm.conv_width},
            {"dt_min", m.ssm.dt_min},
            {"dt_max", m.ssm.dt_max}}},
          {"mlp_ratio", m.mlp_ratio},
          {"use_rope", m.use_rope},
          {"rope_base", m.rope_base}};
}

// With materialize=false an unset warmup stays null, so it keeps tracking
// total_steps when an override changes the latter.
inline Json to_json(const TrainConfig& t, bool materialize = true) {
  Json warmup = nullptr;
  if (materialize || t.warmup_steps) warmup = t.effective_warmup();
  return {{"base_lr", t.base_lr},
          {"min_lr", t.min_lr},
          {"warmup_steps", warmup},
          {"total_steps", t.total_steps},
          {"batch_size", t.batch_size},
          {"dice_weight", t.dice_weight},
          {"ce_weight", t.ce_weight},
          {"weight_decay", t.weight_decay},
          {"seed", t.seed},
          {"num_train", t.num_train},
          {"num_val", t.num_val},
          {"eval_every", t.eval_every},
          {"checkpoint_every", t.checkpoint_every},
          {"val_index_offset", t.val_index_offset}};
}

inline Json to_json(const SyntheticDataSpec& d) {
  return {{"extent", detail::triple_json(d.extent)},
          {"channels", d.channels},
          {"num_classes", d.num_classes},
          {"noise_sigma", d.noise_sigma},
          {"outer_radius_min", d.outer_radius_min},
          {"outer_radius_max", d.outer_radius_max},
          {"inner_scale_min", d.inner_scale_min},
          {"inner_scale_max", d.inner_scale_max},
          {"center_jitter", d.center_jitter},
          {"seed", d.seed}};
}

inline Json to_json(const RunConfig& c, bool materialize = true) {
  return {{"model", to_json(c.model)}, {"train", to_json(c.train, materialize)}, {"data", to_json(c.data)}};
}

inline ModelConfig model_from_json(const Json& j, const std::string& path = "model") {
  ModelConfig m = ModelConfig::defaults();
  detail::FieldReader r(j, path);
  r.get_size("in_channels", m.in_channels);
  r.get_size("num_classes", m.num_classes);
  if (r.has("stages")) {
    const Json& arr = r.child("stages");
    if (!arr.is_array() || arr.size() != 4) throw ConfigError(r.at("stages") + " must list exactly 4 stages");
    for (std::size_t i = 0; i < 4; ++i) {
      auto& s = m.stages[i];
      detail::FieldReader sr(arr[i], r.at("stages") + "[" + std::to_string(i) + "]");
      sr.get_size("embed_dim", s.embed_dim);
      sr.get_size("depth", s.depth);
      if (sr.has("mixer")) {
        std::string kind;
        sr.get("mixer", kind);
        if (kind == "mamba") s.mixer = MixerKind::kMamba;
        else if (kind == "attention") s.mixer = MixerKind::kAttention;
        else throw ConfigError(sr.at("mixer") + " must be \"mamba\" or \"attention\", got \"" + kind + "\"");
      }
      sr.get_size("heads", s.heads);
      sr.get_size("reduction", s.reduction);
      sr.get_triple("kernel", s.kernel);
      sr.get_triple("stride", s.stride);
      sr.get_triple("padding", s.padding);
      sr.finish();
    }
  }
  r.get_size("decoder_dim", m.decoder_dim);
  r.get("deep_supervision", m.deep_supervision);
  r.get("ds_weights", m.ds_weights);
  if (r.has("ssm")) {
    detail::FieldReader sr(r.child("ssm"), r.at("ssm"));
    sr.get_size("state_dim", m.ssm.state_dim);
    sr.get_size("expand", m.ssm.expand);
    sr.get_size("conv_width", m.ssm.conv_width);
    sr.get_double("dt_min", m.ssm.dt_min);
    sr.get_double("dt_max", m.ssm.dt_max);
    sr.finish();
  }
  r.get_size("mlp_ratio", m.mlp_ratio);
  r.get("use_rope", m.use_rope);
  r.get_double("rope_base", m.rope_base);
  r.finish();
  return m;
}

inline TrainConfig train_from_json(const Json& j, const std::string& path = "train") {
  TrainConfig t;
  detail::FieldReader r(j, path);
  r.get_double("base_lr", t.base_lr);
  r.get_double("min_lr", t.min_lr);
  if (r.has("warmup_steps") && !j.at("warmup_steps").is_null()) {
    std::size_t w = 0;
    r.get_size("warmup_steps", w);
    t.warmup_steps = w;
  }
  r.get_size("total_steps", t.total_steps);
  r.get_size("batch_size", t.batch_size);
  r.get_double("dice_weight", t.dice_weight);
  r.get_double("ce_weight", t.ce_weight);
  r.get_double("weight_decay", t.weight_decay);
  r.get_u64("seed", t.seed);
  r.get_size("num_train", t.num_train);
  r.get_size("num_val", t.num_val);
  r.get_size("eval_every", t.eval_every);
  r.get_size("checkpoint_every", t.checkpoint_every);
  r.get_u64("val_index_offset", t.val_index_offset);
  r.finish();
  return t;
}

inline SyntheticDataSpec data_from_json(const Json& j, const std::string& path = "data") {
  SyntheticDataSpec d;
  detail::FieldReader r(j, path);
  r.get_triple("extent", d.extent);
  r.get_size("channels", d.channels);
  r.get_size("num_classes", d.num_classes);
  r.get_double("noise_sigma", d.noise_sigma);
  r.get_double("outer_radius_min", d.outer_radius_min);
  r.get_double("outer_radius_max", d.outer_radius_max);
  r.get_double("inner_scale_min", d.inner_scale_min);
  r.get_double("inner_scale_max", d.inner_scale_max);
  r.get_double("center_jitter", d.center_jitter);
  r.get_u64("seed", d.seed);
  r.finish();
  return d;
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::FieldReader r(j, "");
  if (r.has("model")) c.model = model_from_json(r.child("model"));
  if (r.has("train")) c.train = train_from_json(r.child("train"));
  if (r.has("data")) c.data = data_from_json(r.child("data"));
  r.finish();
  return c;
}

// Applies `a.b.c=value` to a JSON document. Numeric path segments index arrays.
// The value is parsed as JSON when possible, otherwise taken as a string.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + assignment + "\" is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  Json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string& p = parts[i];
    const bool last = i + 1 == parts.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(p);
      } catch (const std::exception&) {
        throw ConfigError("override " + key + ": \"" + p + "\" is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("override " + key + ": index " + p + " out of range");
      node = &(*node)[idx];
    } else {
      if (node->is_null()) *node = Json::object();
      if (!node->is_object()) throw ConfigError("override " + key + ": \"" + p + "\" is not inside an object");
      node = &(*node)[p];
    }
    if (last) *node = value;
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return Json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// File (optional, empty path = defaults) + overrides -> validated config.
// Overrides are applied on top of the fully materialized defaults so that
// indexed paths such as model.stages.0.depth always resolve.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  RunConfig base;
  if (!path.empty()) base = run_config_from_json(read_json_file(path));
  Json doc = to_json(base, false);
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = run_config_from_json(doc);
  c.validate();
  return c;
}

}  // namespace hyseg
