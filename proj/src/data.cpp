#include "imask/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>
#include <unordered_map>

#include "imask/errors.hpp"
#include "imask/rng.hpp"

namespace imask {
namespace {

enum Stream : std::uint64_t { kLabelStream = 1, kBackgroundStream = 2, kLesionStream = 3 };

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Value noise on a coarse lattice with smoothstep interpolation, in [-1, 1].
std::vector<double> smooth_field(std::size_t side, double scale, Rng& rng) {
  const std::size_t nodes = static_cast<std::size_t>(std::ceil(side / scale)) + 2;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> lattice(nodes * nodes);
  for (double& v : lattice) v = u(rng);
  const double off_r = u(rng) * 0.5 + 0.5, off_c = u(rng) * 0.5 + 0.5;
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  std::vector<double> field(side * side);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const double fr = static_cast<double>(r) / scale + off_r;
      const double fc = static_cast<double>(c) / scale + off_c;
      const auto r0 = static_cast<std::size_t>(fr), c0 = static_cast<std::size_t>(fc);
      const double tr = smooth(fr - static_cast<double>(r0));
      const double tc = smooth(fc - static_cast<double>(c0));
      const double a = lattice[r0 * nodes + c0], b = lattice[r0 * nodes + c0 + 1];
      const double cc = lattice[(r0 + 1) * nodes + c0], d = lattice[(r0 + 1) * nodes + c0 + 1];
      field[r * side + c] = (1 - tr) * ((1 - tc) * a + tc * b) + tr * ((1 - tc) * cc + tc * d);
    }
  return field;
}

void clip01(Image& img) {
  for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// PGM

std::string encode_pgm16(const Image& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n65535\n";
  out.reserve(out.size() + image.pixels.size() * 2);
  for (double v : image.pixels) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    out.push_back(static_cast<char>(q >> 8));
    out.push_back(static_cast<char>(q & 0xff));
  }
  return out;
}

Image decode_pgm16(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), v);
    if (ec != std::errc() || ptr == bytes.data() + pos) {
      throw ParseError(std::string("graymap: bad or missing ") + what);
    }
    pos = static_cast<std::size_t>(ptr - bytes.data());
    return v;
  };
  if (bytes.substr(0, 2) != "P5") throw ParseError("graymap: expected P5 magic");
  pos = 2;
  Image img;
  img.width = number("width");
  img.height = number("height");
  const std::size_t maxval = number("maxval");
  if (maxval != 65535) throw ParseError("graymap: expected maxval 65535, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ParseError("graymap: missing separator before raster");
  }
  ++pos;
  const std::size_t n = img.width * img.height;
  if (bytes.size() - pos != 2 * n) {
    throw ParseError("graymap: raster has " + std::to_string(bytes.size() - pos) +
                     " bytes, expected " + std::to_string(2 * n));
  }
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto hi = static_cast<unsigned char>(bytes[pos + 2 * i]);
    const auto lo = static_cast<unsigned char>(bytes[pos + 2 * i + 1]);
    img.pixels[i] = static_cast<double>((hi << 8) | lo) / 65535.0;
  }
  return img;
}

void write_pgm16(const std::filesystem::path& path, const Image& image) {
  write_file(path, encode_pgm16(image));
}

Image read_pgm16(const std::filesystem::path& path) {
  try {
    return decode_pgm16(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SyntheticConfig::validate() const {
  if (count == 0) throw DataError("synthetic dataset: count must be positive");
  if (!(lesion_probability > 0.0 && lesion_probability < 1.0)) {
    throw ConfigError("synthetic dataset: lesion probability must be in (0, 1)");
  }
  if (!(radius_min > 0.0 && radius_min <= radius_max)) {
    throw ConfigError("synthetic dataset: need 0 < radius_min <= radius_max");
  }
  if (2.0 * radius_max + 2.0 > static_cast<double>(image_side)) {
    throw ConfigError("synthetic dataset: lesion radius does not fit the image");
  }
  if (!(texture_scale > 0.0) || noise_sigma < 0.0 || texture_amplitude < 0.0) {
    throw ConfigError("synthetic dataset: texture scale must be positive, noise non-negative");
  }
}

RenderedSample render_sample(const SyntheticConfig& cfg, std::size_t index) {
  const std::size_t side = cfg.image_side;
  RenderedSample out;

  Rng label_rng(derive_seed(cfg.seed, kLabelStream, index));
  out.label = uniform01(label_rng) < cfg.lesion_probability ? 1 : 0;

  Rng bg_rng(derive_seed(cfg.seed, kBackgroundStream, index));
  const auto coarse = smooth_field(side, cfg.texture_scale, bg_rng);
  const auto fine = smooth_field(side, cfg.texture_scale / 2.0, bg_rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  out.background = Image{side, side, std::vector<double>(side * side)};
  for (std::size_t p = 0; p < side * side; ++p) {
    out.background.pixels[p] = cfg.background_level +
                               cfg.texture_amplitude * (0.7 * coarse[p] + 0.3 * fine[p]) +
                               cfg.noise_sigma * noise(bg_rng);
  }
  clip01(out.background);
  out.image = out.background;
  if (out.label == 0) return out;

  // Thresholded anisotropic Gaussian bump with a perturbed boundary.
  Rng les_rng(derive_seed(cfg.seed, kLesionStream, index));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double radius = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * u01(les_rng);
  const double lo = radius + 1.0, hi = static_cast<double>(side) - 1.0 - radius;
  const double cy = lo + (hi - lo) * u01(les_rng);
  const double cx = lo + (hi - lo) * u01(les_rng);
  const double aspect = 0.7 + 0.6 * u01(les_rng);
  const double theta = std::numbers::pi * u01(les_rng);
  std::array<double, 3> amp{}, phase{};
  for (std::size_t m = 0; m < 3; ++m) {
    amp[m] = 0.12 * u01(les_rng);
    phase[m] = 2.0 * std::numbers::pi * u01(les_rng);
  }
  const double ax = radius * std::sqrt(aspect), ay = radius / std::sqrt(aspect);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
      const double u = (dx * ct + dy * st) / ax, v = (-dx * st + dy * ct) / ay;
      const double phi = std::atan2(v, u);
      double boundary = 1.0;
      for (std::size_t m = 0; m < 3; ++m) boundary += amp[m] * std::sin((m + 2) * phi + phase[m]);
      // exp(-d^2/2) >= exp(-b^2/2)  <=>  d <= b
      if (u * u + v * v <= boundary * boundary) out.image.at(r, c) += cfg.lesion_intensity;
    }
  clip01(out.image);
  out.lesion = LesionInfo{true, cy, cx, radius};
  return out;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kNone: break;
  }
  return "none";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  if (name == "none") return Split::kNone;
  throw ParseError("unknown split '" + std::string(name) + "'");
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == s) out.push_back(i);
  return out;
}

Dataset generate_synthetic_dataset(const SyntheticConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.manifest.seed = cfg.seed;
  ds.manifest.image_side = cfg.image_side;
  for (std::size_t i = 0; i < cfg.count; ++i) {
    RenderedSample s = render_sample(cfg, i);
    std::ostringstream id;
    id << "s" << std::setw(6) << std::setfill('0') << i;
    ds.manifest.records.push_back({id.str(), "images/" + id.str() + ".pgm", s.label, Split::kNone});
    ds.images.push_back(std::move(s.image));
    ds.lesions.push_back(s.lesion);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

namespace {

// Shuffles each class independently, then merges so every contiguous block has
// nearly the global class ratio.
std::vector<std::size_t> stratified_order(const DatasetManifest& m,
                                          const std::vector<std::size_t>& pool,
                                          std::uint64_t seed) {
  std::vector<int> labels;
  for (std::size_t i : pool) {
    if (std::find(labels.begin(), labels.end(), m.records[i].label) == labels.end()) {
      labels.push_back(m.records[i].label);
    }
  }
  std::sort(labels.begin(), labels.end());
  Rng rng(seed);
  struct Keyed {
    double key;
    int label;
    std::size_t index;
  };
  std::vector<Keyed> keyed;
  for (int l : labels) {
    std::vector<std::size_t> cls;
    for (std::size_t i : pool)
      if (m.records[i].label == l) cls.push_back(i);
    std::shuffle(cls.begin(), cls.end(), rng);
    for (std::size_t j = 0; j < cls.size(); ++j) {
      keyed.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(cls.size()), l, cls[j]});
    }
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.key < b.key || (a.key == b.key && a.label < b.label);
  });
  std::vector<std::size_t> order;
  for (const auto& k : keyed) order.push_back(k.index);
  return order;
}

}  // namespace

DatasetManifest split(const DatasetManifest& manifest, std::array<double, 3> fractions,
                      std::uint64_t seed) {
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  const std::size_t n = manifest.records.size();
  const auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::llround(fractions[2] * static_cast<double>(n)));
  if (n_val < 1 || n_test < 1 || n_val + n_test >= n) {
    throw DataError("split of " + std::to_string(n) + " samples leaves a split empty");
  }
  DatasetManifest out = manifest;
  out.fractions = fractions;
  out.split_seed = seed;
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const auto order = stratified_order(manifest, all, seed);
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t j = 0; j < n; ++j) {
    out.records[order[j]].split =
        j < n_train ? Split::kTrain : (j < n_train + n_val ? Split::kVal : Split::kTest);
  }
  return out;
}

std::vector<std::size_t> limit_train_labels(const DatasetManifest& manifest, std::size_t n,
                                            std::uint64_t seed) {
  const auto train = manifest.indices(Split::kTrain);
  if (n == 0 || n > train.size()) {
    throw DataError("label budget " + std::to_string(n) + " exceeds the train split (" +
                    std::to_string(train.size()) + " samples)");
  }
  if (n == train.size()) return train;
  auto order = stratified_order(manifest, train, derive_seed(seed, 0x6c6162656cULL));
  order.resize(n);
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// Manifest text

std::string format_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "# imask-manifest v1\n";
  os << "# seed=" << m.seed << "\n";
  os << "# split_seed=" << m.split_seed << "\n";
  os << "# image_side=" << m.image_side << "\n";
  os << std::setprecision(17) << "# fractions=" << m.fractions[0] << "," << m.fractions[1]
     << "," << m.fractions[2] << "\n";
  for (const auto& r : m.records) {
    os << r.id << '\t' << r.path << '\t' << r.label << '\t' << split_name(r.split) << '\n';
  }
  return os.str();
}

DatasetManifest parse_manifest(std::string_view text) {
  DatasetManifest m;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw ParseError("manifest line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2);
      const std::string val = line.substr(eq + 1);
      try {
        if (key == "seed") m.seed = std::stoull(val);
        else if (key == "split_seed") m.split_seed = std::stoull(val);
        else if (key == "image_side") m.image_side = std::stoull(val);
        else if (key == "fractions") {
          std::istringstream fs(val);
          std::string part;
          for (double& f : m.fractions) {
            if (!std::getline(fs, part, ',')) fail("fractions needs three values");
            f = std::stod(part);
          }
        }
      } catch (const std::logic_error&) {
        fail("bad header value '" + val + "'");
      }
      continue;
    }
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, '\t')) fields.push_back(field);
    if (fields.size() != 4) fail("expected 4 tab-separated fields");
    ManifestRecord r;
    r.id = fields[0];
    r.path = fields[1];
    if (fields[2] != "0" && fields[2] != "1") fail("label must be 0 or 1");
    r.label = fields[2] == "1" ? 1 : 0;
    r.split = parse_split(fields[3]);
    m.records.push_back(std::move(r));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Dataset directories

void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
  std::filesystem::create_directories(root / "images");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_pgm16(root / ds.manifest.records[i].path, ds.images[i]);
  }
  write_file(root / kManifestFile, format_manifest(ds.manifest));
  std::ostringstream les;
  les << "# id\trow\tcol\tradius\n" << std::setprecision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const LesionInfo& l = ds.lesions[i];
    if (!l.present) continue;
    les << ds.manifest.records[i].id << '\t' << l.row << '\t' << l.col << '\t' << l.radius << '\n';
  }
  write_file(root / kLesionFile, les.str());
}

Dataset load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / kManifestFile;
  if (!std::filesystem::exists(manifest_path)) {
    throw DataError("no manifest at " + manifest_path.string());
  }
  Dataset ds;
  ds.manifest = parse_manifest(read_file(manifest_path));
  if (ds.manifest.records.empty()) throw DataError("manifest " + manifest_path.string() + " is empty");
  for (const auto& r : ds.manifest.records) {
    Image img = read_pgm16(root / r.path);
    if (img.width != img.height ||
        (ds.manifest.image_side != 0 && img.width != ds.manifest.image_side)) {
      throw DataError(r.path + ": image is " + std::to_string(img.height) + "x" +
                      std::to_string(img.width) + ", expected square side " +
                      std::to_string(ds.manifest.image_side));
    }
    ds.images.push_back(std::move(img));
  }
  if (ds.manifest.image_side == 0) ds.manifest.image_side = ds.images.front().width;
  ds.lesions.assign(ds.size(), LesionInfo{});
  const auto lesion_path = root / kLesionFile;
  if (std::filesystem::exists(lesion_path)) {
    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < ds.size(); ++i) by_id[ds.manifest.records[i].id] = i;
    std::istringstream in(read_file(lesion_path));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string id;
      LesionInfo l{true, 0, 0, 0};
      if (!(ls >> id >> l.row >> l.col >> l.radius)) {
        throw ParseError(lesion_path.string() + ": bad line '" + line + "'");
      }
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ParseError(lesion_path.string() + ": unknown id " + id);
      ds.lesions[it->second] = l;
    }
  }
  return ds;
}

Tensor stack_images(const std::vector<Image>& images, const std::vector<std::size_t>& which) {
  if (which.empty()) throw DataError("stack_images: empty selection");
  const std::size_t h = images[which.front()].height, w = images[which.front()].width;
  Tensor t(Shape{which.size(), 1, h, w});
  auto d = t.data();
  for (std::size_t i = 0; i < which.size(); ++i) {
    const Image& img = images.at(which[i]);
    std::copy(img.pixels.begin(), img.pixels.end(), d.begin() + static_cast<std::ptrdiff_t>(i * h * w));
  }
  return t;
}

}  // namespace imask
