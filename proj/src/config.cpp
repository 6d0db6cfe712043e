// SPDX-License-Identifier: Apache-2.0
#include "echoedm/config.hpp"

#include <cstdlib>
#include <set>

#include "json.hpp"

#include "io_util.hpp"

namespace echoedm {

using nlohmann::json;

namespace {

/// Collects field errors so one message can name all of them.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {}

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      const json& v = obj_.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("bool");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("int");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("number");
      } else {
        if (!v.is_string()) throw std::invalid_argument("string");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      errors_.push_back(prefix_ + key + " has the wrong type");
    }
  }

  void pair(const char* key, double& lo, double& hi) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
      errors_.push_back(prefix_ + key + " must be a two-element number array");
      return;
    }
    lo = v[0].get<double>();
    hi = v[1].get<double>();
  }

  const json* object(const char* key) {
    seen_.insert(key);
    if (!obj_.contains(key)) return nullptr;
    if (!obj_.at(key).is_object()) {
      errors_.push_back(prefix_ + key + " must be an object");
      return nullptr;
    }
    return &obj_.at(key);
  }

  void merge(const FieldReader& child) {
    errors_.insert(errors_.end(), child.errors_.begin(), child.errors_.end());
    for (const auto& k : child.unknown()) errors_.push_back("unknown field " + k);
  }

  std::vector<std::string> unknown() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) out.push_back(prefix_ + k);
    return out;
  }

  void finish(const char* what) {
    for (const auto& k : unknown()) errors_.push_back("unknown field " + k);
    if (errors_.empty()) return;
    std::string msg = std::string("invalid ") + what + " config: ";
    for (std::size_t i = 0; i < errors_.size(); ++i) msg += (i ? "; " : "") + errors_[i];
    throw ValidationError(msg);
  }

 private:
  const json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
  std::vector<std::string> errors_;
};

json parse_section(const std::string& text, const char* section) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed ") + section + " config: " + e.what());
  }
  if (!j.is_object()) throw ValidationError(std::string(section) + " config must be a JSON object");
  if (j.contains(section)) {
    if (!j.at(section).is_object()) throw ValidationError(std::string(section) + " must be an object");
    return j.at(section);
  }
  return j;
}

}  // namespace

std::string data_config_to_json(const DataGenConfig& c) {
  json j = {{"height", c.height},
            {"width", c.width},
            {"fps", c.fps},
            {"duration_s", c.duration_s},
            {"n_train", c.n_train},
            {"n_val", c.n_val},
            {"n_test", c.n_test},
            {"ef_distribution", to_string(c.ef_distribution)},
            {"ef_range", {c.ef_min, c.ef_max}},
            {"skew", {{"weight", c.skew_weight}, {"mean", c.skew_mean}, {"std", c.skew_std}}},
            {"heart_rate_range", {c.hr_min, c.hr_max}},
            {"cone_angle_deg", c.cone_angle_deg},
            {"speckle",
             {{"enabled", c.speckle.enabled},
              {"strength", c.speckle.strength},
              {"decorrelation", c.speckle.decorrelation},
              {"smooth", c.speckle.smooth}}},
            {"seed", c.seed}};
  return j.dump(2);
}

DataGenConfig data_config_from_json(const std::string& text, DataGenConfig c) {
  const json j = parse_section(text, "data");
  FieldReader r(j, "data.");
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("fps", c.fps);
  r.get("duration_s", c.duration_s);
  r.get("n_train", c.n_train);
  r.get("n_val", c.n_val);
  r.get("n_test", c.n_test);
  std::string dist = to_string(c.ef_distribution);
  r.get("ef_distribution", dist);
  r.pair("ef_range", c.ef_min, c.ef_max);
  r.pair("heart_rate_range", c.hr_min, c.hr_max);
  r.get("cone_angle_deg", c.cone_angle_deg);
  r.get("seed", c.seed);
  if (const json* s = r.object("skew")) {
    FieldReader sr(*s, "data.skew.");
    sr.get("weight", c.skew_weight);
    sr.get("mean", c.skew_mean);
    sr.get("std", c.skew_std);
    r.merge(sr);
  }
  if (const json* s = r.object("speckle")) {
    FieldReader sr(*s, "data.speckle.");
    sr.get("enabled", c.speckle.enabled);
    sr.get("strength", c.speckle.strength);
    sr.get("decorrelation", c.speckle.decorrelation);
    sr.get("smooth", c.speckle.smooth);
    r.merge(sr);
  }
  r.finish("data");
  c.ef_distribution = ef_distribution_from_string(dist);
  c.validate();
  return c;
}

std::string train_config_to_json(const TrainConfig& c) {
  json j = {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"grad_accum", c.grad_accum},
            {"ema_decay", c.ema_decay},
            {"time_layer_drop_prob", c.time_layer_drop_prob},
            {"cond_noise_max", c.cond_noise_max},
            {"max_steps", c.max_steps},
            {"seed", c.seed},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps}};
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text, TrainConfig c) {
  const json j = parse_section(text, "train");
  FieldReader r(j, "train.");
  r.get("learning_rate", c.learning_rate);
  r.get("batch_size", c.batch_size);
  r.get("grad_accum", c.grad_accum);
  r.get("ema_decay", c.ema_decay);
  r.get("time_layer_drop_prob", c.time_layer_drop_prob);
  r.get("cond_noise_max", c.cond_noise_max);
  r.get("max_steps", c.max_steps);
  r.get("seed", c.seed);
  r.get("adam_beta1", c.adam_beta1);
  r.get("adam_beta2", c.adam_beta2);
  r.get("adam_eps", c.adam_eps);
  r.finish("train");
  c.validate();
  return c;
}

std::filesystem::path default_config_dir() {
  const char* v = std::getenv("ECHOEDM_CONFIG_DIR");
  return v ? std::filesystem::path(v) : std::filesystem::path();
}

std::filesystem::path resolve_config_path(const std::string& name) {
  namespace fs = std::filesystem;
  if (fs::exists(name)) return name;
  const fs::path dir = default_config_dir();
  if (!dir.empty()) {
    if (fs::exists(dir / name)) return dir / name;
    if (fs::exists(dir / (name + ".json"))) return dir / (name + ".json");
  }
  throw IoError("config '" + name + "' not found" +
                (dir.empty() ? std::string() : " (also looked in " + dir.string() + ")"));
}

std::string read_text_file(const std::filesystem::path& p) { return io::read_text(p); }

void write_text_file(const std::filesystem::path& p, const std::string& text) { io::write_text(p, text); }

std::uint32_t text_hash(const std::string& text) { return io::crc32_bytes(text.data(), text.size()); }

}  // namespace echoedm
