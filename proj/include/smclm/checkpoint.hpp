#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "smclm/binary_io.hpp"
#include "smclm/error.hpp"
#include "smclm/model.hpp"
#include "smclm/text.hpp"

// Layout (all integers u32 little-endian):
//   "SMCK" | version | blob_len | blob (UTF-8 JSON)
//   per tensor, in ModelParams::visit order:
//     name_len | name | rank | dims[rank] | float32 data (row-major)
namespace smclm {

inline constexpr std::string_view kCheckpointMagic = "SMCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  Vocabulary vocab;
  nlohmann::json encoder_spec;      // null for a plain CLM model
  std::string vocab_path;           // informational reference only
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json checkpoint_blob(const Checkpoint& ck) {
  return {{"model", ck.params.config},
          {"vocab", {{"path", ck.vocab_path}, {"tokens", ck.vocab.tokens()}}},
          {"encoder", ck.encoder_spec},
          {"extra", ck.extra}};
}

inline void write_checkpoint(const Checkpoint& ck, std::ostream& out) {
  require(ck.params.config.vocab_size == ck.vocab.size(), ErrorKind::dimension,
          "checkpoint: model vocab_size " + std::to_string(ck.params.config.vocab_size) + " != vocabulary size " +
              std::to_string(ck.vocab.size()));
  out.write(kCheckpointMagic.data(), 4);
  binio::put_u32(out, kCheckpointVersion);
  const std::string blob = checkpoint_blob(ck).dump();
  binio::put_u32(out, static_cast<std::uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  const auto tensors = const_cast<ModelParams<float>&>(ck.params).tensors();
  for (const auto* t : tensors) {
    binio::put_u32(out, static_cast<std::uint32_t>(t->name.size()));
    out.write(t->name.data(), static_cast<std::streamsize>(t->name.size()));
    binio::put_u32(out, static_cast<std::uint32_t>(t->shape.size()));
    for (auto d : t->shape) binio::put_u32(out, static_cast<std::uint32_t>(d));
    for (float x : t->data) binio::put_f32(out, x);
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  binio::write_atomically(path, [&](std::ostream& out) { write_checkpoint(ck, out); }, true);
}

inline Checkpoint read_checkpoint(std::istream& in) {
  binio::expect_magic(in, kCheckpointMagic);
  const auto version = binio::get_u32(in, "checkpoint version");
  require(version == kCheckpointVersion, ErrorKind::format,
          "checkpoint: unsupported version " + std::to_string(version));
  const auto blob_len = binio::get_u32(in, "checkpoint blob length");
  std::string blob(blob_len, '\0');
  binio::read_exact(in, blob.data(), blob.size(), "checkpoint blob");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint: malformed config blob: ") + e.what());
  }

  Checkpoint ck;
  const auto cfg = j.at("model").get<ModelConfig>();
  ck.params = ModelParams<float>::zeros(cfg);
  ck.vocab = Vocabulary(j.at("vocab").at("tokens").get<std::vector<std::string>>());
  ck.vocab_path = j.at("vocab").value("path", std::string{});
  ck.encoder_spec = j.value("encoder", nlohmann::json(nullptr));
  ck.extra = j.value("extra", nlohmann::json::object());
  require(cfg.vocab_size == ck.vocab.size(), ErrorKind::dimension, "checkpoint: vocab_size does not match token list");

  auto tensors = ck.params.tensors();
  for (auto* t : tensors) {
    std::string name(binio::get_u32(in, "tensor name length"), '\0');
    binio::read_exact(in, name.data(), name.size(), "tensor name");
    require(name == t->name, ErrorKind::format, "checkpoint: expected tensor '" + t->name + "', found '" + name + "'");
    const auto rank = binio::get_u32(in, "tensor rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = binio::get_u32(in, "tensor dim");
    require(shape == t->shape, ErrorKind::dimension, "checkpoint: shape mismatch for tensor '" + name + "'");
    for (auto& x : t->data) x = binio::get_f32(in, "tensor data");
  }
  require(in.peek() == std::char_traits<char>::eof(), ErrorKind::format, "checkpoint: trailing bytes");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open checkpoint: " + path.string());
  return read_checkpoint(in);
}

}  // namespace smclm
