#include "imask/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>

#include "imask/errors.hpp"

namespace imask {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_commas(std::string_view s) {
  std::vector<std::string_view> out;
  while (true) {
    const auto c = s.find(',');
    out.push_back(trim(s.substr(0, c)));
    if (c == std::string_view::npos) break;
    s.remove_prefix(c + 1);
  }
  return out;
}

template <typename T>
T parse_unsigned(std::string_view s) {
  s = trim(s);
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw ConfigError("expected a non-negative integer, got '" + std::string(s) + "'");
  }
  return v;
}

double parse_double(std::string_view s) {
  s = trim(s);
  if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  std::string str(s);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(str, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != str.size()) throw ConfigError("expected a number, got '" + str + "'");
  return v;
}

int parse_int(std::string_view s) {
  const auto v = parse_unsigned<unsigned>(s);
  if (v > static_cast<unsigned>(std::numeric_limits<int>::max())) {
    throw ConfigError("integer out of range: '" + std::string(s) + "'");
  }
  return static_cast<int>(v);
}

using Setter = std::function<void(ExperimentConfig&, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      // [dataset]
      {"dataset.image_side", [](auto& c, auto v) { c.dataset.image_side = parse_unsigned<std::size_t>(v); }},
      {"dataset.count", [](auto& c, auto v) { c.dataset.count = parse_unsigned<std::size_t>(v); }},
      {"dataset.lesion_probability", [](auto& c, auto v) { c.dataset.lesion_probability = parse_double(v); }},
      {"dataset.radius_min", [](auto& c, auto v) { c.dataset.radius_min = parse_double(v); }},
      {"dataset.radius_max", [](auto& c, auto v) { c.dataset.radius_max = parse_double(v); }},
      {"dataset.texture_scale", [](auto& c, auto v) { c.dataset.texture_scale = parse_double(v); }},
      {"dataset.texture_amplitude", [](auto& c, auto v) { c.dataset.texture_amplitude = parse_double(v); }},
      {"dataset.background_level", [](auto& c, auto v) { c.dataset.background_level = parse_double(v); }},
      {"dataset.noise_sigma", [](auto& c, auto v) { c.dataset.noise_sigma = parse_double(v); }},
      {"dataset.lesion_intensity", [](auto& c, auto v) { c.dataset.lesion_intensity = parse_double(v); }},
      {"dataset.seed", [](auto& c, auto v) { c.dataset.seed = parse_unsigned<std::uint64_t>(v); }},
      {"dataset.fractions",
       [](auto& c, auto v) {
         const auto parts = split_commas(v);
         if (parts.size() != 3) throw ConfigError("fractions needs three comma-separated values");
         for (std::size_t i = 0; i < 3; ++i) c.fractions[i] = parse_double(parts[i]);
       }},
      {"dataset.split_seed", [](auto& c, auto v) { c.split_seed = parse_unsigned<std::uint64_t>(v); }},
      // [pretrain]
      {"pretrain.method", [](auto& c, auto v) { c.pretrain.method = parse_method(trim(v)); }},
      {"pretrain.channels",
       [](auto& c, auto v) {
         c.pretrain.encoder.channels.clear();
         for (auto p : split_commas(v)) c.pretrain.encoder.channels.push_back(parse_unsigned<std::size_t>(p));
       }},
      {"pretrain.kernel", [](auto& c, auto v) { c.pretrain.encoder.kernel = parse_unsigned<std::size_t>(v); }},
      {"pretrain.pool", [](auto& c, auto v) { c.pretrain.encoder.pool = parse_unsigned<std::size_t>(v); }},
      {"pretrain.epochs", [](auto& c, auto v) { c.pretrain.epochs = parse_int(v); }},
      {"pretrain.batch_size", [](auto& c, auto v) { c.pretrain.batch_size = parse_unsigned<std::size_t>(v); }},
      {"pretrain.base_lr", [](auto& c, auto v) { c.pretrain.base_lr = parse_double(v); }},
      {"pretrain.lr_decay", [](auto& c, auto v) { c.pretrain.lr_decay = parse_double(v); }},
      {"pretrain.k", [](auto& c, auto v) { c.pretrain.k = parse_unsigned<std::size_t>(v); }},
      {"pretrain.patch_side", [](auto& c, auto v) { c.pretrain.patch_side = parse_unsigned<std::size_t>(v); }},
      {"pretrain.temperature_start", [](auto& c, auto v) { c.pretrain.temperature_start = parse_double(v); }},
      {"pretrain.temperature_end", [](auto& c, auto v) { c.pretrain.temperature_end = parse_double(v); }},
      {"pretrain.gamma", [](auto& c, auto v) { c.pretrain.gamma = parse_double(v); }},
      {"pretrain.fill", [](auto& c, auto v) { c.pretrain.fill = parse_double(v); }},
      {"pretrain.n_swap", [](auto& c, auto v) { c.pretrain.n_swap = parse_unsigned<std::size_t>(v); }},
      {"pretrain.swap_patch", [](auto& c, auto v) { c.pretrain.swap_patch = parse_unsigned<std::size_t>(v); }},
      {"pretrain.q_head", [](auto& c, auto v) { c.pretrain.q_head = parse_q_head(std::string(trim(v))); }},
      {"pretrain.seed", [](auto& c, auto v) { c.pretrain.seed = parse_unsigned<std::uint64_t>(v); }},
      // [finetune]
      {"finetune.budgets", [](auto& c, auto v) { c.budgets = parse_size_list(v); }},
      {"finetune.seeds", [](auto& c, auto v) { c.seeds = parse_seed_list(v); }},
      {"finetune.epochs", [](auto& c, auto v) { c.finetune.epochs = parse_int(v); }},
      {"finetune.batch_size", [](auto& c, auto v) { c.finetune.batch_size = parse_unsigned<std::size_t>(v); }},
      {"finetune.base_lr", [](auto& c, auto v) { c.finetune.base_lr = parse_double(v); }},
      {"finetune.lr_decay", [](auto& c, auto v) { c.finetune.lr_decay = parse_double(v); }},
      {"finetune.dropout", [](auto& c, auto v) { c.finetune.dropout = parse_double(v); }},
      {"finetune.hidden", [](auto& c, auto v) { c.finetune.hidden = parse_unsigned<std::size_t>(v); }},
      // [output]
      {"output.dir", [](auto& c, auto v) { c.output_dir = std::string(trim(v)); }},
  };
  return table;
}

}  // namespace

std::vector<std::size_t> parse_size_list(std::string_view text) {
  std::vector<std::size_t> out;
  for (auto p : split_commas(text)) out.push_back(parse_unsigned<std::size_t>(p));
  return out;
}

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> out;
  for (auto p : split_commas(text)) {
    const auto dots = p.find("..");
    if (dots == std::string_view::npos) {
      out.push_back(parse_unsigned<std::uint64_t>(p));
      continue;
    }
    const auto lo = parse_unsigned<std::uint64_t>(p.substr(0, dots));
    const auto hi = parse_unsigned<std::uint64_t>(p.substr(dots + 2));
    if (hi < lo || hi - lo > 100000) throw ConfigError("bad seed range '" + std::string(p) + "'");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
  }
  return out;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("dataset.fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("dataset.fractions must sum to 1");
  PretrainConfig p = pretrain;
  p.encoder.image_side = dataset.image_side;
  p.validate();
  finetune.validate();
  if (budgets.empty()) throw ConfigError("finetune.budgets is empty");
  for (std::size_t b : budgets)
    if (b < 2) throw ConfigError("finetune.budgets entries must be at least 2");
  if (seeds.empty()) throw ConfigError("finetune.seeds is empty");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  std::string section;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find_first_of("#;");
    std::string_view line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "dataset" && section != "pretrain" && section != "finetune" &&
          section != "output") {
        throw ConfigError(where + "unknown section '" + section + "'");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside any section");
    const std::string key = section + "." + std::string(trim(line.substr(0, eq)));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + "unknown key '" + key + "'");
    try {
      it->second(cfg, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  cfg.pretrain.encoder.image_side = cfg.dataset.image_side;
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  return parse_config(std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()));
}

}  // namespace imask
