#include "layertracer/weights.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace layertracer {

namespace {

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) {
      c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    }
    table[i] = c;
  }
  return table;
}

const std::array<uint32_t, 256>& crc_table() {
  static const std::array<uint32_t, 256> table = make_crc_table();
  return table;
}

struct Writer {
  std::vector<uint8_t> bytes;

  void u8(uint8_t v) { bytes.push_back(v); }
  void u16(uint16_t v) {
    bytes.push_back(static_cast<uint8_t>(v));
    bytes.push_back(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void raw(const void* data, size_t n) {
    const auto* p = static_cast<const uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }

  void tensor(const std::string& name, std::span<const uint32_t> dims,
              std::span<const float> values) {
    u16(static_cast<uint16_t>(name.size()));
    raw(name.data(), name.size());
    u8(static_cast<uint8_t>(dims.size()));
    for (uint32_t d : dims) u32(d);
    for (float v : values) f32(v);
  }
};

struct Reader {
  std::span<const uint8_t> bytes;
  size_t pos = 0;

  void need(size_t n) {
    if (pos + n > bytes.size()) {
      throw WeightsError(WeightsErrorKind::Truncated,
                         "weights: file truncated at offset " +
                             std::to_string(pos));
    }
  }
  uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(bytes[pos]) | uint16_t(bytes[pos + 1]) << 8;
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

struct TensorRef {
  std::string name;
  std::vector<uint32_t> dims;
  float* data;  // null when enumerating the layout without a model
  size_t count;
};

// The canonical tensor sequence; save order, load validation, and the
// size precheck all come from here. `model` may be null to enumerate names
// and shapes from the spec alone without allocating parameters.
std::vector<TensorRef> tensor_table(const ModelSpec& spec,
                                    LayeredModel* model) {
  const auto u = [](int v) { return static_cast<uint32_t>(v); };
  std::vector<TensorRef> refs;
  const auto add = [&refs](std::string name, std::vector<uint32_t> dims,
                           float* data) {
    size_t count = 1;
    for (uint32_t d : dims) count *= d;
    refs.push_back(TensorRef{std::move(name), std::move(dims), data, count});
  };

  add("embed", {u(spec.vocab_size), u(spec.d_model)},
      model ? model->embedding.values.data() : nullptr);
  for (int l = 0; l < spec.n_layers; ++l) {
    BlockParams* b = model ? &model->blocks[static_cast<size_t>(l)] : nullptr;
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "ln1.gain", {u(spec.d_model)}, b ? b->ln1_gain.data() : nullptr);
    add(p + "mixer.wq", {u(spec.d_model), u(spec.d_model)},
        b ? b->wq.values.data() : nullptr);
    add(p + "mixer.wk", {u(spec.d_model), u(spec.d_model)},
        b ? b->wk.values.data() : nullptr);
    add(p + "mixer.wv", {u(spec.d_model), u(spec.d_model)},
        b ? b->wv.values.data() : nullptr);
    add(p + "mixer.wo", {u(spec.d_model), u(spec.d_model)},
        b ? b->wo.values.data() : nullptr);
    add(p + "out_bias", {u(spec.d_model)}, b ? b->out_bias.data() : nullptr);
    add(p + "ln2.gain", {u(spec.d_model)}, b ? b->ln2_gain.data() : nullptr);
    add(p + "ff.w1", {u(spec.d_ff), u(spec.d_model)},
        b ? b->ff_w1.values.data() : nullptr);
    add(p + "ff.w2", {u(spec.d_model), u(spec.d_ff)},
        b ? b->ff_w2.values.data() : nullptr);
  }
  add("final_norm.gain", {u(spec.d_model)},
      model ? model->final_norm_gain.data() : nullptr);
  add("unembed", {u(spec.vocab_size), u(spec.d_model)},
      model ? model->unembedding.values.data() : nullptr);
  return refs;
}

// Bytes a tensor occupies in the table: name length + name + rank + dims
// + float32 values.
uint64_t tensor_bytes(const TensorRef& ref) {
  return 2 + ref.name.size() + 1 + 4 * ref.dims.size() + 4 * uint64_t(ref.count);
}

// Empty model with all parameter buffers sized per spec, ready to be filled.
LayeredModel shell_model(const ModelSpec& spec) {
  LayeredModel model;
  model.spec = spec;
  model.embedding = Matrix(spec.vocab_size, spec.d_model);
  model.blocks.resize(static_cast<size_t>(spec.n_layers));
  for (int l = 1; l <= spec.n_layers; ++l) {
    BlockParams& b = model.blocks[l - 1];
    b.kind = spec.kind_of(l);
    b.ln1_gain.resize(static_cast<size_t>(spec.d_model));
    b.wq = Matrix(spec.d_model, spec.d_model);
    b.wk = Matrix(spec.d_model, spec.d_model);
    b.wv = Matrix(spec.d_model, spec.d_model);
    b.wo = Matrix(spec.d_model, spec.d_model);
    b.out_bias.resize(static_cast<size_t>(spec.d_model));
    b.ln2_gain.resize(static_cast<size_t>(spec.d_model));
    b.ff_w1 = Matrix(spec.d_ff, spec.d_model);
    b.ff_w2 = Matrix(spec.d_model, spec.d_ff);
  }
  model.final_norm_gain.resize(static_cast<size_t>(spec.d_model));
  model.unembedding = Matrix(spec.vocab_size, spec.d_model);
  return model;
}

}  // namespace

uint32_t crc32(std::span<const uint8_t> data) {
  uint32_t c = 0xFFFFFFFFu;
  const auto& table = crc_table();
  for (uint8_t byte : data) c = table[(c ^ byte) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

std::vector<uint8_t> encode_weights(const LayeredModel& model) {
  model.spec.validate();
  Writer w;
  w.raw("LTRC", 4);
  w.u16(kWeightsFormatVersion);
  w.u8(static_cast<uint8_t>(model.spec.arch));
  for (int field : {model.spec.n_layers, model.spec.d_model, model.spec.n_heads,
                    model.spec.d_ff, model.spec.vocab_size, model.spec.max_seq}) {
    w.u32(static_cast<uint32_t>(field));
  }
  if (model.spec.arch == Arch::HybridSequence) {
    for (LayerKind kind : model.spec.layer_kinds) {
      w.u8(static_cast<uint8_t>(kind));
    }
  }
  auto refs = tensor_table(const_cast<LayeredModel&>(model));
  for (const TensorRef& ref : refs) {
    w.tensor(ref.name, ref.dims, std::span<const float>(ref.data, ref.count));
  }
  w.u32(crc32(w.bytes));
  return std::move(w.bytes);
}

LayeredModel decode_weights(std::span<const uint8_t> bytes) {
  // 4 magic + 2 version + 1 arch + 24 spec + 4 crc
  if (bytes.size() < 35) {
    throw WeightsError(WeightsErrorKind::Truncated,
                       "weights: file too short (" +
                           std::to_string(bytes.size()) + " bytes)");
  }
  const size_t body_len = bytes.size() - 4;
  Reader trailer{bytes.subspan(body_len), 0};
  const uint32_t stored_crc = trailer.u32();
  const uint32_t actual_crc = crc32(bytes.first(body_len));
  if (stored_crc != actual_crc) {
    throw WeightsError(WeightsErrorKind::BadChecksum,
                       "weights: checksum mismatch");
  }

  Reader r{bytes.first(body_len), 0};
  if (r.str(4) != "LTRC") {
    throw WeightsError(WeightsErrorKind::BadMagic, "weights: bad magic");
  }
  const uint16_t version = r.u16();
  if (version != kWeightsFormatVersion) {
    throw WeightsError(WeightsErrorKind::BadVersion,
                       "weights: unsupported format version " +
                           std::to_string(version));
  }
  const uint8_t arch_id = r.u8();
  if (arch_id > 2) {
    throw WeightsError(WeightsErrorKind::BadHeader,
                       "weights: unknown arch id " + std::to_string(arch_id));
  }
  ModelSpec spec;
  spec.arch = static_cast<Arch>(arch_id);
  spec.n_layers = static_cast<int>(r.u32());
  spec.d_model = static_cast<int>(r.u32());
  spec.n_heads = static_cast<int>(r.u32());
  spec.d_ff = static_cast<int>(r.u32());
  spec.vocab_size = static_cast<int>(r.u32());
  spec.max_seq = static_cast<int>(r.u32());
  if (spec.arch == Arch::HybridSequence) {
    spec.layer_kinds.reserve(static_cast<size_t>(spec.n_layers));
    for (int l = 0; l < spec.n_layers; ++l) {
      const uint8_t kind = r.u8();
      if (kind > 1) {
        throw WeightsError(WeightsErrorKind::BadHeader,
                           "weights: unknown layer kind " +
                               std::to_string(kind) + " at layer " +
                               std::to_string(l + 1));
      }
      spec.layer_kinds.push_back(static_cast<LayerKind>(kind));
    }
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw WeightsError(WeightsErrorKind::BadHeader,
                       std::string("weights: invalid spec: ") + e.what());
  }

  LayeredModel model = shell_model(spec);
  for (TensorRef& ref : tensor_table(model)) {
    const uint16_t name_len = r.u16();
    const std::string name = r.str(name_len);
    if (name != ref.name) {
      throw WeightsError(WeightsErrorKind::BadShape,
                         "weights: expected tensor '" + ref.name +
                             "', found '" + name + "'");
    }
    const uint8_t rank = r.u8();
    if (rank != ref.dims.size()) {
      throw WeightsError(WeightsErrorKind::BadShape,
                         "weights: tensor '" + name + "' rank " +
                             std::to_string(rank) + ", expected " +
                             std::to_string(ref.dims.size()));
    }
    for (size_t i = 0; i < ref.dims.size(); ++i) {
      const uint32_t dim = r.u32();
      if (dim != ref.dims[i]) {
        throw WeightsError(WeightsErrorKind::BadShape,
                           "weights: tensor '" + name + "' dim " +
                               std::to_string(i) + " is " +
                               std::to_string(dim) + ", expected " +
                               std::to_string(ref.dims[i]));
      }
    }
    r.need(ref.count * 4);
    for (size_t i = 0; i < ref.count; ++i) ref.data[i] = r.f32();
  }
  if (r.pos != body_len) {
    throw WeightsError(WeightsErrorKind::BadShape,
                       "weights: " + std::to_string(body_len - r.pos) +
                           " unexpected trailing bytes");
  }
  return model;
}

void save_weights(const LayeredModel& model, const std::string& path) {
  const std::vector<uint8_t> bytes = encode_weights(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw WeightsError(WeightsErrorKind::Io,
                       "weights: cannot open '" + path + "' for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw WeightsError(WeightsErrorKind::Io,
                       "weights: write failed for '" + path + "'");
  }
}

LayeredModel load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw WeightsError(WeightsErrorKind::Io,
                       "weights: cannot open '" + path + "'");
  }
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (in.bad()) {
    throw WeightsError(WeightsErrorKind::Io,
                       "weights: read failed for '" + path + "'");
  }
  return decode_weights(bytes);
}

}  // namespace layertracer
