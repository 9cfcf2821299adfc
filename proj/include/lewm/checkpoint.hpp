#pragma once

// Checkpoint container:
//   "LEWMCKPT" | u32 version | str model-config text | u32 array count |
//   per array: str name | u32 rank | u64 dims[rank] | f64 values (LE)

#include <string>

#include "lewm/binary_io.hpp"
#include "lewm/worldmodel.hpp"

namespace lewm {

inline constexpr char kCheckpointMagic[9] = "LEWMCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> checkpoint_bytes(const WorldModel& model) {
  io::Writer w;
  w.bytes(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  KeyValues kv;
  model.config().write(kv);
  w.str(kv.serialize());
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.u64(d);
    for (double v : p.value.storage()) w.f64(v);
  }
  return w.buffer();
}

inline void save_checkpoint(const WorldModel& model, const std::string& path) {
  io::Writer w;
  const auto bytes = checkpoint_bytes(model);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline WorldModel load_checkpoint_bytes(std::vector<char> bytes) {
  io::Reader r(std::move(bytes));
  r.expect_magic(kCheckpointMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const KeyValues kv = KeyValues::parse(r.str());
  WorldModelConfig cfg;
  cfg.read(kv);
  kv.require_all_consumed();
  // Fresh layout supplies names, shapes and trainable flags; values are
  // overwritten from the file.
  WorldModel model(cfg, 0);
  const auto count = r.u32();
  if (count != model.params().size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " arrays, model expects " +
                      std::to_string(model.params().size()));
  }
  for (auto& p : model.params()) {
    const std::string name = r.str();
    if (name != p.name) throw FormatError("checkpoint array '" + name + "' where '" + p.name + "' was expected");
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    if (shape != p.value.shape()) {
      throw FormatError("checkpoint array '" + name + "' has shape " + shape_str(shape) + ", expected " +
                        shape_str(p.value.shape()));
    }
    for (double& v : p.value.storage()) v = r.f64();
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint");
  return model;
}

inline WorldModel load_checkpoint(const std::string& path) {
  return load_checkpoint_bytes(io::read_file(path));
}

}  // namespace lewm
