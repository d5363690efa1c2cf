#include "q4fg/serialize.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace q4fg {

std::string to_string(Mapping m) { return m == Mapping::symmetric ? "sym" : "asym"; }

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::per_tensor: return "per_tensor";
    case Granularity::per_group: return "per_group";
    case Granularity::per_channel: return "per_channel";
    case Granularity::per_token: return "per_token";
  }
  return "?";
}

Mapping mapping_from_string(const std::string& s) {
  if (s == "sym" || s == "symmetric") return Mapping::symmetric;
  if (s == "asym" || s == "asymmetric") return Mapping::asymmetric;
  throw std::invalid_argument("unknown mapping '" + s + "' (expected sym or asym)");
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "per_tensor") return Granularity::per_tensor;
  if (s == "per_group") return Granularity::per_group;
  if (s == "per_channel" || s == "row") return Granularity::per_channel;
  if (s == "per_token") return Granularity::per_token;
  throw std::invalid_argument("unknown granularity '" + s + "'");
}

Json to_json(const QuantScheme& s) {
  Json j;
  j["bits"] = s.bits;
  j["mapping"] = to_string(s.mapping);
  j["granularity"] = to_string(s.granularity);
  j["groups"] = s.groups;
  j["rounding"] = "half_to_even";
  j["clip"] = s.clip ? Json::array({s.clip->lo, s.clip->hi}) : Json(nullptr);
  return j;
}

QuantScheme scheme_from_json(const Json& j) {
  QuantScheme s;
  s.bits = j.at("bits").get<int>();
  s.mapping = mapping_from_string(j.at("mapping").get<std::string>());
  s.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  s.groups = j.at("groups").get<std::size_t>();
  if (j.contains("rounding") && j["rounding"] != "half_to_even") {
    throw std::invalid_argument("unsupported rounding mode " + j["rounding"].dump());
  }
  if (j.contains("clip") && !j["clip"].is_null()) {
    const auto& c = j["clip"];
    if (!c.is_array() || c.size() != 2) throw std::invalid_argument("clip must be [lo, hi]");
    s.clip = ClipRange{c[0].get<float>(), c[1].get<float>()};
  }
  s.validate();
  return s;
}

Json to_json(const QuantStrategy& s) {
  Json parts = Json::array();
  for (auto p : kLinearParts)
    if (s.on(p)) parts.push_back(to_string(p));
  return Json{{"parts", parts}, {"weight", to_json(s.weight_scheme)}, {"activation", to_json(s.activation_scheme)}};
}

QuantStrategy strategy_from_json(const Json& j) {
  QuantStrategy s;
  for (const auto& p : j.at("parts")) s.set(linear_part_from_string(p.get<std::string>()), true);
  s.weight_scheme = scheme_from_json(j.at("weight"));
  s.activation_scheme = scheme_from_json(j.at("activation"));
  s.validate();
  return s;
}

Json to_json(const ModelConfig& c) {
  return Json{{"arch", to_string(c.arch)},
              {"encoder_layers", c.encoder_layers},
              {"decoder_layers", c.decoder_layers},
              {"hidden", c.hidden},
              {"heads", c.heads},
              {"ffn_mult", c.ffn_mult},
              {"ln", to_string(c.ln)},
              {"vocab_size", c.vocab_size},
              {"max_seq", c.max_seq},
              {"num_classes", c.num_classes},
              {"dropout", c.dropout}};
}

ModelConfig config_from_json(const Json& j) {
  ModelConfig c;
  c.arch = arch_from_string(j.at("arch").get<std::string>());
  c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
  c.decoder_layers = j.at("decoder_layers").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_mult = j.value("ffn_mult", std::size_t{4});
  c.ln = ln_placement_from_string(j.value("ln", std::string("post")));
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.num_classes = j.value("num_classes", std::size_t{0});
  c.dropout = j.value("dropout", 0.0);
  c.validate();
  return c;
}

std::string canonical_dump(const Json& j) { return j.dump(); }

Json read_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return Json::parse(f);
  } catch (const Json::exception& e) {
    throw std::runtime_error("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_json_file(const std::string& path, const Json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << canonical_dump(j) << '\n';
  if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

}  // namespace q4fg
