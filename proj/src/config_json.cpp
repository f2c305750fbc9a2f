// SPDX-License-Identifier: Apache-2.0
#include "config_json.hpp"

#include <string>

namespace reseg {
namespace detail {

using nlohmann::json;

namespace {

std::size_t positive(const json& v, const std::string& field) {
  if (!v.is_number_integer() || v.get<long long>() < 1) {
    throw ConfigError("field '" + field + "' must be a positive integer");
  }
  return v.get<std::size_t>();
}

std::size_t non_negative(const json& v, const std::string& field) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("field '" + field + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

// Accepts either a scalar n (meaning n x n) or a two-element array.
std::array<std::size_t, 2> pair_of(const json& v, const std::string& field) {
  if (v.is_array()) {
    if (v.size() != 2) throw ConfigError("field '" + field + "' must have two entries");
    return {positive(v[0], field), positive(v[1], field)};
  }
  const std::size_t n = positive(v, field);
  return {n, n};
}

const json& required(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ConfigError(where + ": missing field '" + key + "'");
  return *it;
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
  json frontend = json::array();
  for (const auto& st : c.frontend) {
    if (st.kind == FrontendStage::Kind::pool) {
      frontend.push_back({{"type", "pool"}});
      continue;
    }
    const auto& s = st.conv;
    frontend.push_back({{"type", "conv"},
                        {"kernel", {s.kernel_h, s.kernel_w}},
                        {"channels", s.out_channels},
                        {"stride", {s.stride_h, s.stride_w}},
                        {"padding", {s.padding.top, s.padding.bottom, s.padding.left, s.padding.right}}});
  }
  json renet = json::array();
  for (const auto& r : c.renet) renet.push_back({{"patch", {r.patch_h, r.patch_w}}, {"units", r.units}});
  json upsample = json::array();
  for (const auto& u : c.upsample) upsample.push_back({{"filter", {u.filter_h, u.filter_w}}, {"channels", u.channels}});
  return {{"input", {{"height", c.input_h}, {"width", c.input_w}, {"channels", c.input_channels}}},
          {"frontend", frontend},
          {"frontend_frozen", c.frontend_frozen},
          {"renet", renet},
          {"upsample", upsample},
          {"classes", c.classes},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  const json& input = required(doc, "input", "model");
  if (input.is_array()) {
    if (input.size() < 2 || input.size() > 3) throw ConfigError("field 'input' must be [height, width(, channels)]");
    c.input_h = positive(input[0], "input");
    c.input_w = positive(input[1], "input");
    c.input_channels = input.size() == 3 ? positive(input[2], "input") : 3;
  } else {
    c.input_h = positive(required(input, "height", "model.input"), "input.height");
    c.input_w = positive(required(input, "width", "model.input"), "input.width");
    c.input_channels = input.contains("channels") ? positive(input["channels"], "input.channels") : 3;
  }
  c.classes = positive(required(doc, "classes", "model"), "classes");

  std::size_t channels = c.input_channels;
  if (doc.contains("frontend")) {
    const json& stages = doc["frontend"];
    if (!stages.is_array()) throw ConfigError("field 'frontend' must be an array");
    for (std::size_t n = 0; n < stages.size(); ++n) {
      const json& st = stages[n];
      const std::string where = "frontend[" + std::to_string(n) + "]";
      const std::string type = st.is_string() ? st.get<std::string>() : st.value("type", std::string{});
      if (type == "pool") {
        c.frontend.push_back(FrontendStage::pool());
        continue;
      }
      if (type != "conv") throw ConfigError(where + ": type must be 'conv' or 'pool'");
      ConvSpec s;
      const auto k = pair_of(required(st, "kernel", where), where + ".kernel");
      s.kernel_h = k[0];
      s.kernel_w = k[1];
      s.in_channels = channels;
      s.out_channels = positive(required(st, "channels", where), where + ".channels");
      if (st.contains("stride")) {
        const auto sd = pair_of(st["stride"], where + ".stride");
        s.stride_h = sd[0];
        s.stride_w = sd[1];
      }
      if (st.contains("padding")) {
        const json& p = st["padding"];
        if (p.is_array()) {
          if (p.size() != 4) throw ConfigError(where + ".padding must be [top, bottom, left, right]");
          s.padding = {non_negative(p[0], where + ".padding"), non_negative(p[1], where + ".padding"),
                       non_negative(p[2], where + ".padding"), non_negative(p[3], where + ".padding")};
        } else {
          s.padding = Padding::uniform(non_negative(p, where + ".padding"));
        }
      }
      channels = s.out_channels;
      c.frontend.push_back(FrontendStage::convolution(s));
    }
  }
  c.frontend_frozen = doc.value("frontend_frozen", false);

  if (doc.contains("renet")) {
    for (std::size_t l = 0; l < doc["renet"].size(); ++l) {
      const json& r = doc["renet"][l];
      const std::string where = "renet[" + std::to_string(l) + "]";
      const auto p = pair_of(required(r, "patch", where), where + ".patch");
      c.renet.push_back({p[0], p[1], positive(required(r, "units", where), where + ".units")});
    }
  }
  if (doc.contains("upsample")) {
    for (std::size_t l = 0; l < doc["upsample"].size(); ++l) {
      const json& u = doc["upsample"][l];
      const std::string where = "upsample[" + std::to_string(l) + "]";
      const auto f = pair_of(required(u, "filter", where), where + ".filter");
      c.upsample.push_back({f[0], f[1], positive(required(u, "channels", where), where + ".channels")});
    }
  }
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned() && !doc["seed"].is_number_integer()) {
      throw ConfigError("field 'seed' must be an integer");
    }
    c.seed = doc["seed"].get<std::uint64_t>();
  }
  return c;
}

}  // namespace detail

std::string to_json_text(const ModelConfig& config) {
  return detail::model_config_to_json(config).dump(2);
}

ModelConfig model_config_from_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  try {
    return detail::model_config_from_json(doc);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config has a malformed field: ") + e.what());
  }
}

}  // namespace reseg
