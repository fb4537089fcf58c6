#pragma once

// Flat `key = value` run configuration. Blank lines and `#` comments are
// ignored; every other line must name a known key exactly once.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "tokfuse/flops.hpp"
#include "tokfuse/fusion.hpp"

namespace tokfuse {

enum class ReportFormat { text, csv };

inline ReportFormat parse_format(std::string_view s) {
  if (s == "text") return ReportFormat::text;
  if (s == "csv") return ReportFormat::csv;
  throw ConfigError("unknown format '" + std::string(s) +
                    "' (expected text or csv)");
}

struct RunConfig {
  FusionConfig fusion;
  std::optional<std::string> input;
  std::optional<std::uint64_t> synthetic_seed;
  std::string output;
  ReportFormat format = ReportFormat::text;
  ProjectorKind projector = ProjectorKind::stf;
  std::size_t repetitions = 10;
  std::size_t warmup = 1;
  double llm_params = flops::kDefaultLlmParams;
  double learning_rate = 1e-3;
  std::size_t steps = 200;
  std::size_t batch = 4;
  bool stf_hidden_explicit = false;

  // Sets k and E from the command line. stf_hidden follows the kernel unless
  // the config pinned it.
  void override_fusion(std::optional<std::size_t> k,
                       std::optional<std::size_t> e) {
    if (k) fusion.kernel = *k;
    if (e) fusion.fused_tokens = *e;
    if (!stf_hidden_explicit) fusion.stf_hidden = 4 * fusion.fused_width();
  }

  // Features come from exactly one source. With neither set the synthetic
  // generator is seeded from the fusion seed.
  void resolve_source() {
    if (input && synthetic_seed) {
      throw ConfigError("set either input or synthetic_seed, not both");
    }
    if (!input && !synthetic_seed) synthetic_seed = fusion.seed;
  }
};

namespace config_detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class U>
U parse_number(std::string_view key, std::string_view v) {
  U out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError("bad value '" + std::string(v) + "' for " +
                      std::string(key));
  }
  return out;
}

}  // namespace config_detail

// Applies one key. Aliases: M for blocks, k for kernel, E for fused_tokens.
inline void apply_key(RunConfig& rc, std::string_view key,
                      std::string_view value) {
  using config_detail::parse_number;
  FusionConfig& f = rc.fusion;
  auto size = [&] { return parse_number<std::size_t>(key, value); };
  if (key == "encoder_depth") f.encoder_depth = size();
  else if (key == "blocks" || key == "M") f.blocks = size();
  else if (key == "height") f.height = size();
  else if (key == "width") f.width = size();
  else if (key == "channels") f.channels = size();
  else if (key == "kernel" || key == "k") f.kernel = size();
  else if (key == "fused_tokens" || key == "E") f.fused_tokens = size();
  else if (key == "llm_width") f.llm_width = size();
  else if (key == "mbtf_hidden") f.mbtf_hidden = size();
  else if (key == "stf_hidden") f.stf_hidden = size();
  else if (key == "seed") f.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "activation") {
    if (value == "gelu") f.activation = Activation::gelu;
    else if (value == "identity") f.activation = Activation::identity;
    else throw ConfigError("unknown activation '" + std::string(value) + "'");
  }
  else if (key == "input") rc.input = std::string(value);
  else if (key == "synthetic_seed") {
    rc.synthetic_seed = parse_number<std::uint64_t>(key, value);
  }
  else if (key == "output") rc.output = std::string(value);
  else if (key == "format") rc.format = parse_format(value);
  else if (key == "projector") rc.projector = parse_projector(value);
  else if (key == "repetitions") rc.repetitions = size();
  else if (key == "warmup") rc.warmup = size();
  else if (key == "llm_params") {
    rc.llm_params = parse_number<double>(key, value);
  }
  else if (key == "learning_rate") {
    rc.learning_rate = parse_number<double>(key, value);
  }
  else if (key == "steps") rc.steps = size();
  else if (key == "batch") rc.batch = size();
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

// Parses config text on top of the defaults. When stf_hidden is not given it
// follows the kernel: 4 * k^2 * C1.
inline RunConfig parse_run_config(std::string_view text) {
  RunConfig rc;
  std::map<std::string, std::size_t, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{}
                                        : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected key = value");
    }
    const auto key = config_detail::trim(line.substr(0, eq));
    const auto value = config_detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    }
    if (auto [it, fresh] = seen.emplace(std::string(key), line_no); !fresh) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": duplicate key '" + std::string(key) +
                        "' (first on line " + std::to_string(it->second) +
                        ")");
    }
    apply_key(rc, key, value);
  }
  rc.stf_hidden_explicit = seen.contains("stf_hidden");
  if (!rc.stf_hidden_explicit) {
    rc.fusion.stf_hidden = 4 * rc.fusion.fused_width();
  }
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace tokfuse
