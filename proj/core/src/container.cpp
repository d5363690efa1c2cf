#include "q4fg/container.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "q4fg/pack_gemm.hpp"
#include "q4fg/serialize.hpp"

namespace q4fg {

std::string to_string(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::i8: return "i8";
    case DType::u8: return "u8";
    case DType::i4: return "i4";
    case DType::u4: return "u4";
    case DType::u1: return "u1";
  }
  return "?";
}

DType dtype_from_string(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "i8") return DType::i8;
  if (s == "u8") return DType::u8;
  if (s == "i4") return DType::i4;
  if (s == "u4") return DType::u4;
  if (s == "u1") return DType::u1;
  throw ContainerError("unknown dtype '" + s + "'");
}

std::size_t payload_size(DType d, const Shape& shape) {
  const std::size_t n = shape_numel(shape);
  switch (d) {
    case DType::f32: return 4 * n;
    case DType::i8:
    case DType::u8: return n;
    case DType::i4:
    case DType::u4: {
      if (shape.empty() || n == 0) return 0;
      const std::size_t cols = shape.back();
      return (n / cols) * ((cols + 1) / 2);
    }
    case DType::u1: return (n + 7) / 8;
  }
  return 0;
}

namespace {

std::size_t align_up(std::size_t v) { return (v + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment; }

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> floats_le(std::span<const float> values) {
  std::vector<std::uint8_t> out;
  out.reserve(values.size() * 4);
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_le(out, bits, 4);
  }
  return out;
}

std::vector<float> floats_from_le(std::span<const std::uint8_t> bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto bits = static_cast<std::uint32_t>(get_le(bytes, 4 * i, 4));
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

DType code_dtype(const QuantScheme& s) {
  const bool sym = s.mapping == Mapping::symmetric;
  if (s.bits == 4) return sym ? DType::i4 : DType::u4;
  return sym ? DType::i8 : DType::u8;
}

std::vector<std::uint8_t> encode_codes(const QTensor& q) {
  if (q.scheme.bits != 4) return q.lanes;
  const std::size_t cols = q.shape.back(), rows = q.numel() / cols;
  std::vector<std::int8_t> codes(q.numel());
  for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = static_cast<std::int8_t>(q.code(i));
  const auto enc = q.scheme.mapping == Mapping::symmetric ? NibbleEncoding::twos_complement : NibbleEncoding::unsigned_int;
  const auto packed = pack_int4(rows, cols, codes, enc);
  return {packed.bytes().begin(), packed.bytes().end()};
}

std::vector<std::uint8_t> decode_codes(std::span<const std::uint8_t> payload, const Shape& shape,
                                       const QuantScheme& scheme) {
  if (scheme.bits != 4) return {payload.begin(), payload.end()};
  const std::size_t cols = shape.back(), rows = shape_numel(shape) / cols;
  const auto enc = scheme.mapping == Mapping::symmetric ? NibbleEncoding::twos_complement : NibbleEncoding::unsigned_int;
  const PackedInt4Matrix packed(rows, cols, {payload.begin(), payload.end()}, enc);
  const auto values = unpack_int4(packed);
  std::vector<std::uint8_t> lanes(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) lanes[i] = static_cast<std::uint8_t>(values[i]);
  return lanes;
}

struct Writer {
  Json index = Json::array();
  std::vector<std::uint8_t> data;

  void add(const std::string& name, DType dtype, const Shape& shape, std::vector<std::uint8_t> payload) {
    if (payload.size() != payload_size(dtype, shape)) {
      throw ContainerError("internal: payload size mismatch for '" + name + "'");
    }
    data.resize(align_up(data.size()), 0);
    index.push_back(Json{{"name", name},
                         {"dtype", to_string(dtype)},
                         {"shape", shape},
                         {"offset", data.size()},
                         {"nbytes", payload.size()}});
    data.insert(data.end(), payload.begin(), payload.end());
  }
};

struct Parsed {
  Json meta;
  std::vector<TensorEntry> entries;
  std::span<const std::uint8_t> data;
};

Parsed parse(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHeader = 4 + 2 + 2 + 8;
  if (bytes.size() < kHeader || !std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin())) {
    throw ContainerError("not a model container (bad magic)");
  }
  const auto version = static_cast<std::uint16_t>(get_le(bytes, 4, 2));
  if (version != kContainerVersion) {
    throw ContainerError("container format version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(kContainerVersion) + ")");
  }
  const std::uint64_t meta_len = get_le(bytes, 8, 8);
  if (meta_len > bytes.size() - kHeader) throw ContainerError("metadata length exceeds the file size");
  Parsed p;
  try {
    p.meta = Json::parse(bytes.begin() + kHeader, bytes.begin() + static_cast<std::ptrdiff_t>(kHeader + meta_len));
  } catch (const Json::exception& e) {
    throw ContainerError(std::string("container metadata is not valid JSON: ") + e.what());
  }
  const std::size_t data_start = align_up(kHeader + meta_len);
  if (data_start > bytes.size()) throw ContainerError("container truncated before the data section");
  p.data = bytes.subspan(data_start);
  try {
    for (const auto& t : p.meta.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = dtype_from_string(t.at("dtype").get<std::string>());
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.nbytes = t.at("nbytes").get<std::uint64_t>();
      p.entries.push_back(std::move(e));
    }
  } catch (const Json::exception& e) {
    throw ContainerError(std::string("malformed tensor index: ") + e.what());
  }
  std::vector<const TensorEntry*> sorted;
  for (const auto& e : p.entries) {
    if (e.nbytes != payload_size(e.dtype, e.shape)) {
      throw ContainerError("tensor '" + e.name + "' declares " + std::to_string(e.nbytes) + " bytes, expected " +
                           std::to_string(payload_size(e.dtype, e.shape)));
    }
    if (e.offset % kPayloadAlignment != 0) throw ContainerError("tensor '" + e.name + "' is not 64-byte aligned");
    if (e.offset > p.data.size() || e.nbytes > p.data.size() - e.offset) {
      throw ContainerError("tensor '" + e.name + "' has no payload (out of bounds)");
    }
    sorted.push_back(&e);
  }
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i - 1]->offset + sorted[i - 1]->nbytes > sorted[i]->offset) {
      throw ContainerError("tensors '" + sorted[i - 1]->name + "' and '" + sorted[i]->name + "' overlap");
    }
  }
  return p;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Transformer<float>& model, const std::optional<QuantStrategy>& strategy) {
  Writer w;
  Json quantized = Json::object();
  std::map<std::string, const Linear<float>*> frozen;
  for (const auto* l : model.linears())
    if (l->frozen) frozen[l->weight_name()] = l;

  for (const auto& p : model.parameters()) {
    auto it = frozen.find(p.name);
    if (it == frozen.end()) {
      w.add(p.name, DType::f32, p.tensor.shape(), floats_le(p.tensor.data()));
      continue;
    }
    const QTensor& q = *it->second->frozen;
    w.add(p.name, code_dtype(q.scheme), q.shape, encode_codes(q));
    const Shape groups{q.params.scales.size()};
    w.add(p.name + ".scales", DType::f32, groups, floats_le(q.params.scales));
    w.add(p.name + ".zeros", DType::f32, groups, floats_le(q.params.zero_points));
    quantized[p.name] = Json{{"scheme", to_json(q.scheme)}};
  }

  Json masks = Json::object();
  for (const auto& [name, m] : model.masks) {
    w.add(name + ".mask", DType::u1, m.shape, m.to_bits());
    masks[name] = Json{{"structure", to_string(m.structure)},
                       {"n", m.pattern.n},
                       {"m", m.pattern.m},
                       {"origin", to_string(m.origin)},
                       {"tensor", name + ".mask"}};
  }

  Json meta{{"config", to_json(model.config)},
            {"order", to_string(model.order)},
            {"quantized", quantized},
            {"masks", masks},
            {"strategy", strategy ? to_json(*strategy) : Json(nullptr)},
            {"tensors", w.index}};
  const std::string text = canonical_dump(meta);

  std::vector<std::uint8_t> out(kContainerMagic.begin(), kContainerMagic.end());
  put_le(out, kContainerVersion, 2);
  put_le(out, 0, 2);
  put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  out.resize(align_up(out.size()), 0);
  out.insert(out.end(), w.data.begin(), w.data.end());
  out.resize(align_up(out.size()), 0);
  return out;
}

std::vector<TensorEntry> container_index(std::span<const std::uint8_t> bytes) { return parse(bytes).entries; }

ContainerContents deserialize_model(std::span<const std::uint8_t> bytes) {
  const auto p = parse(bytes);
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : p.entries) {
    if (!by_name.emplace(e.name, &e).second) throw ContainerError("duplicate tensor '" + e.name + "'");
  }
  auto payload = [&](const std::string& name, std::optional<DType> want = std::nullopt) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContainerError("container has no tensor named '" + name + "'");
    if (want && it->second->dtype != *want) {
      throw ContainerError("tensor '" + name + "' has dtype " + to_string(it->second->dtype) + ", expected " +
                           to_string(*want));
    }
    return std::pair{it->second, p.data.subspan(it->second->offset, it->second->nbytes)};
  };

  ContainerContents c;
  try {
    const auto cfg = config_from_json(p.meta.at("config"));
    c.model = build_model<float>(cfg, 0);
    c.model.order = composition_order_from_string(p.meta.at("order").get<std::string>());
    if (!p.meta.at("strategy").is_null()) c.strategy = strategy_from_json(p.meta["strategy"]);
    const auto& quantized = p.meta.at("quantized");

    for (auto& param : c.model.parameters()) {
      if (quantized.contains(param.name)) continue;
      auto [entry, bytes_f] = payload(param.name, DType::f32);
      if (entry->shape != param.tensor.shape()) {
        throw ContainerError("tensor '" + param.name + "' has shape " + shape_str(entry->shape) + ", expected " +
                             shape_str(param.tensor.shape()));
      }
      const auto values = floats_from_le(bytes_f);
      std::copy(values.begin(), values.end(), param.tensor.mutable_data().begin());
    }

    for (const auto& [name, info] : quantized.items()) {
      auto& lin = c.model.linear(name);
      QTensor q;
      q.scheme = scheme_from_json(info.at("scheme"));
      auto [entry, code_bytes] = payload(name, code_dtype(q.scheme));
      if (entry->shape != lin.weight.shape()) throw ContainerError("quantized tensor '" + name + "' has the wrong shape");
      q.shape = entry->shape;
      q.lanes = decode_codes(code_bytes, q.shape, q.scheme);
      q.params.scales = floats_from_le(payload(name + ".scales", DType::f32).second);
      q.params.zero_points = floats_from_le(payload(name + ".zeros", DType::f32).second);
      if (q.params.scales.size() != q.layout().count || q.params.zero_points.size() != q.layout().count) {
        throw ContainerError("quantized tensor '" + name + "' has the wrong number of group parameters");
      }
      const auto d = dequantize(q);
      std::copy(d.data().begin(), d.data().end(), lin.weight.mutable_data().begin());
      lin.frozen = std::move(q);
    }

    for (const auto& [name, info] : p.meta.at("masks").items()) {
      const auto& lin = c.model.linear(name);
      auto [entry, bits] = payload(info.at("tensor").get<std::string>(), DType::u1);
      if (entry->shape != lin.weight.shape()) throw ContainerError("mask for '" + name + "' has the wrong shape");
      SparsityMask m;
      m.shape = entry->shape;
      m.keep = SparsityMask::keep_from_bits(bits, shape_numel(m.shape));
      m.structure = mask_structure_from_string(info.at("structure").get<std::string>());
      m.pattern = NmPattern{info.at("n").get<std::size_t>(), info.at("m").get<std::size_t>()};
      m.origin = mask_origin_from_string(info.at("origin").get<std::string>());
      c.model.masks.emplace(name, std::move(m));
    }
  } catch (const Json::exception& e) {
    throw ContainerError(std::string("malformed container metadata: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw ContainerError(e.what());
  }
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

void save_container(const std::string& path, const Transformer<float>& model,
                    const std::optional<QuantStrategy>& strategy) {
  write_file_bytes(path, serialize_model(model, strategy));
}

ContainerContents load_container(const std::string& path) { return deserialize_model(read_file_bytes(path)); }

void quantize_parts(Transformer<float>& model, const QuantScheme& weight_scheme, const std::array<bool, 4>& parts) {
  check_scheme(weight_scheme, QuantRole::weight);
  if (weight_scheme.passthrough()) throw SchemeError("cannot store weights with the passthrough scheme");
  auto linears = model.linears();
  for (auto* l : linears) {
    if (l->quantizable && parts[static_cast<std::size_t>(l->part)] && l->frozen) {
      throw ContainerError("part " + to_string(l->part) + " is already quantized ('" + l->weight_name() + "')");
    }
  }
  for (auto* l : linears) {
    if (!l->quantizable || !parts[static_cast<std::size_t>(l->part)]) continue;
    auto it = model.masks.find(l->weight_name());
    const SparsityMask* mask = it == model.masks.end() ? nullptr : &it->second;
    auto q = quantize_linear_weight(l->weight, mask, model.order, weight_scheme);
    const auto d = dequantize(q.codes);
    std::copy(d.data().begin(), d.data().end(), l->weight.mutable_data().begin());
    l->frozen = std::move(q.codes);
  }
}

std::vector<std::int32_t> read_tokens(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() % 4 != 0) throw std::runtime_error("token file '" + path + "' is not a whole number of u32 ids");
  std::vector<std::int32_t> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto v = get_le(bytes, 4 * i, 4);
    if (v > 0x7FFFFFFFull) throw std::runtime_error("token id " + std::to_string(v) + " is too large");
    out[i] = static_cast<std::int32_t>(v);
  }
  return out;
}

void write_tokens(const std::string& path, std::span<const std::int32_t> tokens) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(tokens.size() * 4);
  for (auto t : tokens) {
    if (t < 0) throw std::invalid_argument("token ids must be non-negative");
    put_le(bytes, static_cast<std::uint32_t>(t), 4);
  }
  write_file_bytes(path, bytes);
}

}  // namespace q4fg
