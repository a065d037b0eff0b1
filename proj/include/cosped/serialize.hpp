#pragma once

// Checkpoint container shared by model and soft-prompt artifacts:
//
//   line 1  — JSON header (format tag, version, kind, shape/config metadata,
//             double count, FNV-1a digest of the payload)
//   rest    — the payload: raw 64-bit doubles, little-endian byte order,
//             written in the owner's canonical parameter order.
//
// The digest is verified on load, so a corrupted or truncated file is
// rejected instead of silently producing a slightly different model.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cosped/common.hpp"
#include "cosped/losses.hpp"
#include "cosped/model.hpp"

namespace cosped {

inline constexpr const char* kCheckpointFormat = "cosped-checkpoint";
inline constexpr int kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// Model config <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim},
                        {"layers", c.layers},         {"heads", c.heads},
                        {"ff_dim", c.ff_dim},         {"max_context", c.max_context},
                        {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Raw payload IO (explicit little-endian, independent of host order)
// ---------------------------------------------------------------------------

namespace detail {

inline void write_doubles_le(std::ostream& os, const std::vector<double>& v) {
  std::vector<unsigned char> buf(v.size() * 8);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &v[i], 8);
    for (int b = 0; b < 8; ++b)
      buf[i * 8 + static_cast<std::size_t>(b)] =
          static_cast<unsigned char>((bits >> (8 * b)) & 0xffu);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_doubles_le(std::istream& is, std::size_t count) {
  std::vector<unsigned char> buf(count * 8);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size())
    throw std::runtime_error("checkpoint: payload truncated");
  std::vector<double> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b)
      bits = (bits << 8) | buf[i * 8 + static_cast<std::size_t>(b)];
    std::memcpy(&v[i], &bits, 8);
  }
  return v;
}

inline nlohmann::json read_header(std::istream& is, const std::string& expect_kind) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("checkpoint: missing header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad header: ") + e.what());
  }
  if (!h.contains("format") || h.at("format") != kCheckpointFormat)
    throw std::runtime_error("checkpoint: not a recognized checkpoint file");
  if (h.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  if (h.at("kind").get<std::string>() != expect_kind)
    throw std::runtime_error("checkpoint: expected kind '" + expect_kind + "', found '" +
                             h.at("kind").get<std::string>() + "'");
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

inline void save_model(const std::filesystem::path& path, const VictimModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open " + path.string());

  std::vector<double> flat;
  for (const auto& p : m.parameters())
    flat.insert(flat.end(), p.values().begin(), p.values().end());

  nlohmann::json h;
  h["format"] = kCheckpointFormat;
  h["version"] = kCheckpointVersion;
  h["kind"] = "model";
  h["config"] = model_config_to_json(m.config());
  h["count"] = flat.size();
  h["digest"] = hex64(fnv1a64_doubles(flat));
  h["frozen"] = m.frozen();
  os << h.dump() << '\n';
  detail::write_doubles_le(os, flat);
  if (!os) throw std::runtime_error("save_model: write failed for " + path.string());
}

inline VictimModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open " + path.string());
  const auto h = detail::read_header(is, "model");
  const auto cfg = model_config_from_json(h.at("config"));
  const auto count = h.at("count").get<std::size_t>();
  auto flat = detail::read_doubles_le(is, count);
  if (hex64(fnv1a64_doubles(flat)) != h.at("digest").get<std::string>())
    throw std::runtime_error("load_model: digest mismatch (corrupted checkpoint)");

  VictimModel m = VictimModel::init(cfg);
  std::size_t off = 0;
  for (auto& p : m.parameters()) {
    auto dst = p.mutable_values();
    if (off + dst.size() > flat.size())
      throw std::runtime_error("load_model: payload does not match the configuration");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), dst.size(), dst.begin());
    off += dst.size();
  }
  if (off != flat.size())
    throw std::runtime_error("load_model: payload does not match the configuration");
  if (h.value("frozen", false)) m.freeze();
  return m;
}

// ---------------------------------------------------------------------------
// Soft-prompt checkpoints
// ---------------------------------------------------------------------------

// A saved prompt carries everything needed to reproduce or resume the attack:
// the matrix itself, the seed it was initialized from, and the loss stack it
// was trained under.
struct SoftPromptCheckpoint {
  SoftPrompt prompt;
  std::uint64_t seed = 0;
  LossStack stack;
};

inline void save_soft_prompt(const std::filesystem::path& path, const SoftPrompt& z,
                             std::uint64_t seed, const LossStack& stack) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_soft_prompt: cannot open " + path.string());
  const auto& v = z.z.values();
  std::vector<double> flat(v.begin(), v.end());
  nlohmann::json h;
  h["format"] = kCheckpointFormat;
  h["version"] = kCheckpointVersion;
  h["kind"] = "soft_prompt";
  h["k"] = z.rows();
  h["d"] = z.dim();
  h["seed"] = seed;
  h["stack"] = stack.to_json();
  h["count"] = flat.size();
  h["digest"] = hex64(fnv1a64_doubles(flat));
  os << h.dump() << '\n';
  detail::write_doubles_le(os, flat);
  if (!os) throw std::runtime_error("save_soft_prompt: write failed for " + path.string());
}

inline SoftPromptCheckpoint load_soft_prompt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_soft_prompt: cannot open " + path.string());
  const auto h = detail::read_header(is, "soft_prompt");
  const int k = h.at("k").get<int>();
  const int d = h.at("d").get<int>();
  const auto count = h.at("count").get<std::size_t>();
  if (count != static_cast<std::size_t>(k) * static_cast<std::size_t>(d))
    throw std::runtime_error("load_soft_prompt: count does not match k*d");
  auto flat = detail::read_doubles_le(is, count);
  if (hex64(fnv1a64_doubles(flat)) != h.at("digest").get<std::string>())
    throw std::runtime_error("load_soft_prompt: digest mismatch (corrupted checkpoint)");
  SoftPromptCheckpoint cp;
  cp.prompt.z = Tensor::leaf({k, d}, std::move(flat));
  cp.seed = h.at("seed").get<std::uint64_t>();
  cp.stack = LossStack::from_json(h.at("stack"));
  return cp;
}

// Convenience overload that also checks the prompt fits the given model.
inline SoftPromptCheckpoint load_soft_prompt(const std::filesystem::path& path,
                                             const VictimModel& m) {
  auto cp = load_soft_prompt(path);
  if (cp.prompt.dim() != m.config().model_dim)
    throw std::runtime_error("load_soft_prompt: prompt dimension " +
                             std::to_string(cp.prompt.dim()) + " does not match model dim " +
                             std::to_string(m.config().model_dim));
  return cp;
}

}  // namespace cosped
