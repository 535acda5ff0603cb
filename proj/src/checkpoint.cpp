#include "dystream/checkpoint.hpp"

#include <fstream>
#include <set>

#include "binio.hpp"

namespace dystream {

void save_checkpoint(const std::filesystem::path& path, const KeyValues& config, ParamStore& store) {
  store.round_to_float();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write("DYST", 4);
  binio::put<std::uint16_t>(os, kCheckpointVersion);
  binio::put_string32(os, config.format());
  const auto params = store.all();
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    binio::put<std::uint16_t>(os, static_cast<std::uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(p->value.shape.size()));
    for (auto d : p->value.shape) binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    binio::put_f32_array(os, p->value.values);
  }
  if (!os) throw CheckpointError("failed writing checkpoint " + path.string());
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  try {
    binio::expect_magic(is, "DYST");
    const auto version = binio::get<std::uint16_t>(is);
    if (version != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    CheckpointData d;
    d.config = KeyValues::parse(binio::get_string32(is));
    const auto count = binio::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = binio::get<std::uint16_t>(is);
      std::string name(len, '\0');
      if (len && !is.read(name.data(), len)) throw binio::FormatError("truncated tensor name");
      const auto ndim = binio::get<std::uint8_t>(is);
      std::vector<std::size_t> shape(ndim);
      for (auto& s : shape) s = binio::get<std::uint32_t>(is);
      const std::size_t n = shape_product(shape);
      d.tensors.emplace_back(std::move(name), Tensor(shape, binio::get_f32_array(is, n)));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw binio::FormatError("trailing bytes");
    return d;
  } catch (const binio::FormatError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

void apply_checkpoint(const CheckpointData& data, ParamStore& store) {
  std::set<std::string> seen;
  for (const auto& [name, t] : data.tensors) {
    if (!store.contains(name)) throw CheckpointError("checkpoint tensor '" + name + "' has no matching parameter");
    Parameter& p = store.get(name);
    if (p.value.shape != t.shape)
      throw CheckpointError("shape mismatch for '" + name + "': checkpoint " + shape_string(t.shape) +
                            ", model " + shape_string(p.value.shape));
    p.value.values = t.values;
    seen.insert(name);
  }
  for (const Parameter* p : store.all())
    if (!seen.contains(p->name)) throw CheckpointError("checkpoint lacks parameter '" + p->name + "'");
}

void save_model(const std::filesystem::path& path, MotionModel& model) {
  KeyValues kv;
  kv.set("checkpoint.kind", std::string("model"));
  model.config().to_kv(kv);
  save_checkpoint(path, kv, model.params());
}

std::unique_ptr<MotionModel> load_model(const std::filesystem::path& path) {
  const CheckpointData d = load_checkpoint(path);
  if (!d.config.has("checkpoint.kind") || d.config.raw("checkpoint.kind") != "model")
    throw CheckpointError(path.string() + " is not a generator checkpoint");
  Rng rng(0);
  auto model = std::make_unique<MotionModel>(ModelConfig::from_kv(d.config), rng);
  apply_checkpoint(d, model->params());
  return model;
}

void save_encoder(const std::filesystem::path& path, EncoderModel& encoder) {
  KeyValues kv;
  kv.set("checkpoint.kind", std::string("encoder"));
  encoder.encoder.config().to_kv(kv, "enc");
  save_checkpoint(path, kv, encoder.store);
}

std::unique_ptr<EncoderModel> load_encoder(const std::filesystem::path& path) {
  const CheckpointData d = load_checkpoint(path);
  if (!d.config.has("checkpoint.kind") || d.config.raw("checkpoint.kind") != "encoder")
    throw CheckpointError(path.string() + " is not an encoder checkpoint");
  Rng rng(0);
  auto enc = std::make_unique<EncoderModel>(EncoderConfig::from_kv(d.config, "enc"), rng);
  apply_checkpoint(d, enc->store);
  return enc;
}

}  // namespace dystream
