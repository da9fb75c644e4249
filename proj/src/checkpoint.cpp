#include "dexpr/checkpoint.hpp"

#include <zlib.h>

#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace dexpr {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'D', 'X', 'P', 'R'};

json shape_to_json(const Shape& s) { return s.dims(); }
Shape shape_from_json(const json& j) { return Shape(j.get<std::vector<std::size_t>>()); }

json params_to_json(const LayerParams& params) {
  return std::visit(
      [](const auto& p) -> json {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, ConvSpec>) {
          return {{"in_channels", p.in_channels}, {"out_channels", p.out_channels}, {"kernel_h", p.kernel_h},
                  {"kernel_w", p.kernel_w},       {"stride", p.stride},             {"padding", p.padding}};
        } else if constexpr (std::is_same_v<P, PoolSpec>) {
          return {{"window", p.window}, {"stride", p.stride}, {"padding", p.padding}};
        } else if constexpr (std::is_same_v<P, LrnSpec>) {
          return {{"local_size", p.local_size}, {"alpha", p.alpha}, {"beta", p.beta}, {"k", p.k}};
        } else if constexpr (std::is_same_v<P, FcSpec>) {
          return {{"in_dim", p.in_dim}, {"out_dim", p.out_dim}};
        } else {
          return json::object();
        }
      },
      params);
}

LayerParams params_from_json(LayerKind kind, const json& j) {
  switch (kind) {
    case LayerKind::conv:
      return ConvSpec{j.at("in_channels"), j.at("out_channels"), j.at("kernel_h"),
                      j.at("kernel_w"),    j.at("stride"),       j.at("padding")};
    case LayerKind::maxpool:
      return PoolSpec{j.at("window"), j.at("stride"), j.at("padding")};
    case LayerKind::lrn:
      return LrnSpec{j.at("local_size"), j.at("alpha"), j.at("beta"), j.at("k")};
    case LayerKind::fc:
      return FcSpec{j.at("in_dim"), j.at("out_dim")};
    default:
      return std::monostate{};
  }
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

json graph_to_json(const NetworkGraph& graph) {
  json layers = json::array();
  for (const LayerSpec& l : graph.layers()) {
    json entry = {{"name", l.name},
                  {"kind", std::string(to_string(l.kind))},
                  {"inputs", l.inputs},
                  {"params", params_to_json(l.params)}};
    if (l.declared_shape) entry["declared_shape"] = shape_to_json(*l.declared_shape);
    layers.push_back(std::move(entry));
  }
  return {{"input_shape", shape_to_json(graph.input_shape())},
          {"num_classes", graph.num_classes()},
          {"layers", std::move(layers)}};
}

NetworkGraph graph_from_json(const json& j) {
  try {
    std::vector<LayerSpec> layers;
    for (const json& entry : j.at("layers")) {
      LayerSpec l;
      l.name = entry.at("name").get<std::string>();
      l.kind = layer_kind_from_string(entry.at("kind").get<std::string>());
      l.inputs = entry.at("inputs").get<std::vector<std::string>>();
      l.params = params_from_json(l.kind, entry.at("params"));
      if (entry.contains("declared_shape")) l.declared_shape = shape_from_json(entry.at("declared_shape"));
      layers.push_back(std::move(l));
    }
    return NetworkGraph(shape_from_json(j.at("input_shape")), j.at("num_classes").get<std::size_t>(),
                        std::move(layers));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed graph description: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid graph description: ") + e.what());
  }
}

void validate_parameters(const NetworkGraph& graph, const Parameters<float>& params) {
  std::size_t expected = 0;
  for (const LayerSpec& l : graph.layers()) {
    Shape w, b;
    if (const auto* c = std::get_if<ConvSpec>(&l.params)) {
      w = c->weight_shape();
      b = c->bias_shape();
    } else if (const auto* f = std::get_if<FcSpec>(&l.params)) {
      w = f->weight_shape();
      b = f->bias_shape();
    } else {
      continue;
    }
    expected += 2;
    for (const auto& [key, shape] : {std::pair{Parameters<float>::weights_key(l.name), w},
                                     std::pair{Parameters<float>::bias_key(l.name), b}}) {
      if (!params.contains(key)) throw FormatError("missing tensor '" + key + "'");
      if (params.get(key).shape() != shape) {
        throw FormatError("tensor '" + key + "' has shape " + params.get(key).shape().to_string() + ", expected " +
                          shape.to_string());
      }
    }
  }
  if (params.tensors().size() != expected) throw FormatError("checkpoint holds tensors for unknown layers");
}

std::string encode_checkpoint(const NetworkGraph& graph, const Parameters<float>& params,
                              const CheckpointMeta& meta) {
  validate_parameters(graph, params);
  const json description = {
      {"graph", graph_to_json(graph)},
      {"meta",
       {{"epoch", meta.epoch}, {"seed", meta.seed}, {"class_names", meta.class_names}, {"config", meta.config}}}};
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, sizeof(kMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_string(out, description.dump(2));
  detail::put_u32(out, static_cast<std::uint32_t>(params.tensors().size()));
  for (const auto& [name, tensor] : params.tensors()) {
    detail::put_string(out, name);
    write_tensor(out, tensor);
  }
  std::string bytes = std::move(out).str();
  std::ostringstream tail(std::ios::binary);
  detail::put_u32(tail, crc32_of(bytes));
  return bytes + tail.str();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != std::string_view(kMagic, 4)) {
    throw FormatError("not a checkpoint file (bad magic or too short)");
  }
  std::istringstream crc_in(std::string(bytes.substr(bytes.size() - 4)), std::ios::binary);
  const std::uint32_t stored_crc = detail::get_u32(crc_in);
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  if (crc32_of(body) != stored_crc) throw FormatError("corrupt checkpoint: checksum mismatch");

  std::istringstream in(std::string(body.substr(4)), std::ios::binary);
  const std::uint32_t version = detail::get_u32(in);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  json description;
  try {
    description = json::parse(detail::get_string(in, body.size()));
    ck.graph = graph_from_json(description.at("graph"));
    const json& meta = description.at("meta");
    ck.meta.epoch = meta.at("epoch").get<std::size_t>();
    ck.meta.seed = meta.at("seed").get<std::uint64_t>();
    ck.meta.class_names = meta.at("class_names").get<std::vector<std::string>>();
    ck.meta.config = meta.at("config");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint description: ") + e.what());
  }
  const std::uint32_t records = detail::get_u32(in);
  for (std::uint32_t r = 0; r < records; ++r) {
    std::string name = detail::get_string(in, body.size());
    if (ck.params.contains(name)) throw FormatError("duplicate tensor '" + name + "'");
    ck.params.set(name, read_tensor(in));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after tensor records");
  validate_parameters(ck.graph, ck.params);
  if (!ck.meta.class_names.empty() && ck.meta.class_names.size() != ck.graph.num_classes()) {
    throw FormatError("class table does not match the classifier size");
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const NetworkGraph& graph, const Parameters<float>& params,
                     const CheckpointMeta& meta) {
  const std::string bytes = encode_checkpoint(graph, params, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_checkpoint(buffer.str());
}

void require_class_count(const Checkpoint& checkpoint, std::size_t num_classes) {
  if (checkpoint.graph.num_classes() != num_classes) {
    throw DatasetError("checkpoint was trained for " + std::to_string(checkpoint.graph.num_classes()) +
                       " classes but " + std::to_string(num_classes) + " were requested");
  }
}

}  // namespace dexpr
