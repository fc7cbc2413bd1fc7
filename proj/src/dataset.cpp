#include "taylorseg/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "taylorseg/errors.hpp"
#include "taylorseg/rng.hpp"

namespace taylorseg {

namespace {

struct Region {
  std::array<double, 3> lo{};
  std::array<double, 3> hi{};

  bool overlaps(const Region& o) const {
    for (int a = 0; a < 3; ++a) {
      if (hi[a] <= o.lo[a] || o.hi[a] <= lo[a]) return false;
    }
    return true;
  }
  double extent(int a) const { return hi[a] - lo[a]; }
  double center(int a) const { return 0.5 * (lo[a] + hi[a]); }
};

constexpr double kPlaneThickness = 0.02;
constexpr int kPlacementRetries = 100;

std::array<double, 3> region_extents(const ClassStyle& style, Rng& rng) {
  const double a = rng.uniform(style.min_size, style.max_size);
  switch (style.primitive) {
    case Primitive::Plane:
      return {a, rng.uniform(style.min_size, style.max_size), kPlaneThickness};
    case Primitive::Sphere:
      return {a, a, a};
    case Primitive::Box:
      return {a, rng.uniform(style.min_size, style.max_size),
              rng.uniform(style.min_size, style.max_size)};
    case Primitive::Cylinder:
      return {a, a, rng.uniform(style.min_size, style.max_size)};
  }
  return {a, a, a};
}

std::array<double, 3> sample_surface(Primitive prim, const Region& r, Rng& rng) {
  const double cx = r.center(0), cy = r.center(1), cz = r.center(2);
  const double ex = r.extent(0), ey = r.extent(1), ez = r.extent(2);
  switch (prim) {
    case Primitive::Plane:
      return {r.lo[0] + rng.uniform() * ex, r.lo[1] + rng.uniform() * ey, cz};
    case Primitive::Sphere: {
      const double radius = 0.5 * std::min({ex, ey, ez});
      double v[3];
      double norm = 0.0;
      while (norm < 1e-12) {
        norm = 0.0;
        for (double& c : v) {
          c = rng.normal();
          norm += c * c;
        }
      }
      norm = std::sqrt(norm);
      return {cx + radius * v[0] / norm, cy + radius * v[1] / norm, cz + radius * v[2] / norm};
    }
    case Primitive::Box: {
      const double areas[3] = {ey * ez, ex * ez, ex * ey};  // faces normal to x, y, z
      const double pick = rng.uniform(0.0, areas[0] + areas[1] + areas[2]);
      const int axis = pick < areas[0] ? 0 : (pick < areas[0] + areas[1] ? 1 : 2);
      std::array<double, 3> p{r.lo[0] + rng.uniform() * ex, r.lo[1] + rng.uniform() * ey,
                              r.lo[2] + rng.uniform() * ez};
      p[static_cast<std::size_t>(axis)] =
          rng.uniform() < 0.5 ? r.lo[static_cast<std::size_t>(axis)] : r.hi[static_cast<std::size_t>(axis)];
      return p;
    }
    case Primitive::Cylinder: {
      const double radius = 0.5 * std::min(ex, ey);
      const double side = kTwoPi * radius * ez;
      const double cap = kTwoPi * radius * radius * 0.5;
      const double theta = rng.uniform(0.0, kTwoPi);
      const double pick = rng.uniform(0.0, side + 2.0 * cap);
      if (pick < side) {
        return {cx + radius * std::cos(theta), cy + radius * std::sin(theta), r.lo[2] + rng.uniform() * ez};
      }
      const double rho = radius * std::sqrt(rng.uniform());
      return {cx + rho * std::cos(theta), cy + rho * std::sin(theta), pick < side + cap ? r.lo[2] : r.hi[2]};
    }
  }
  return {cx, cy, cz};
}

std::vector<int> parse_int_list(const std::string& text, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = item.find_last_not_of(" \t");
    const std::string token = item.substr(first, last - first + 1);
    int v = 0;
    const auto res = std::from_chars(token.data(), token.data() + token.size(), v);
    if (res.ec != std::errc{} || res.ptr != token.data() + token.size()) {
      throw ConfigError("split key '" + key + "' has a non-integer entry '" + token + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Fisher-Yates on our own generator so results do not depend on the
// standard library's shuffle.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

[[noreturn]] void parse_fail(const std::string& source, std::size_t line, const std::string& what) {
  throw DataError(source + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

const char* to_string(Primitive p) {
  switch (p) {
    case Primitive::Plane:
      return "plane";
    case Primitive::Sphere:
      return "sphere";
    case Primitive::Box:
      return "box";
    case Primitive::Cylinder:
      return "cylinder";
  }
  return "?";
}

void SceneSpec::validate(std::size_t k_neighbors) const {
  if (class_ids.size() < 2) throw ConfigError("a scene needs at least two classes");
  if (styles.size() != class_ids.size()) throw ConfigError("one style per scene class is required");
  if (points < 2 * k_neighbors) {
    throw ConfigError("a scene needs at least " + std::to_string(2 * k_neighbors) + " points");
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("noise must be finite and >= 0");
  for (int id : class_ids) {
    if (id < 0) throw ConfigError("class ids must be non-negative");
  }
  for (const ClassStyle& s : styles) {
    if (!(s.weight > 0.0)) throw ConfigError("class weights must be positive");
    if (!(s.min_size > 0.0 && s.min_size <= s.max_size && s.max_size < 1.0)) {
      throw ConfigError("class size range must satisfy 0 < min <= max < 1");
    }
    if (!(s.color_sigma >= 0.0)) throw ConfigError("color jitter must be >= 0");
  }
}

PointCloud synth_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed, Stream::Scene);
  const std::size_t nc = spec.class_ids.size();

  std::vector<Region> regions;
  for (std::size_t c = 0; c < nc; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
      const auto ext = region_extents(spec.styles[c], rng);
      Region r;
      for (std::size_t a = 0; a < 3; ++a) {
        r.lo[a] = rng.uniform(0.0, 1.0 - ext[a]);
        r.hi[a] = r.lo[a] + ext[a];
      }
      placed = std::none_of(regions.begin(), regions.end(),
                            [&](const Region& o) { return o.overlaps(r); });
      if (placed) regions.push_back(r);
    }
    if (!placed) {
      throw DataError("could not place " + std::string(to_string(spec.styles[c].primitive)) +
                      " without overlap after " + std::to_string(kPlacementRetries) + " retries");
    }
  }

  std::vector<double> cumulative(nc);
  double total = 0.0;
  for (std::size_t c = 0; c < nc; ++c) cumulative[c] = (total += spec.styles[c].weight);

  PointCloud cloud{Tensor::matrix(spec.points, 3), Tensor::matrix(spec.points, 3),
                   std::vector<int>(spec.points)};
  for (std::size_t i = 0; i < spec.points; ++i) {
    const double u = rng.uniform(0.0, total);
    std::size_t c = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    c = std::min(c, nc - 1);
    const ClassStyle& style = spec.styles[c];
    const auto p = sample_surface(style.primitive, regions[c], rng);
    for (std::size_t a = 0; a < 3; ++a) {
      cloud.coords(i, a) = spec.noise > 0.0 ? p[a] + rng.normal(0.0, spec.noise) : p[a];
      const double jitter = style.color_sigma > 0.0 ? rng.normal(0.0, style.color_sigma) : 0.0;
      cloud.colors(i, a) = std::clamp(style.color[a] + jitter, 0.0, 1.0);
    }
    cloud.labels[i] = spec.class_ids[c];
  }
  return cloud;
}

std::vector<ClassStyle> standard_palette() {
  return {
      {Primitive::Plane, {0.55, 0.50, 0.45}, 0.04, 1.0, 0.35, 0.5},
      {Primitive::Sphere, {0.85, 0.20, 0.20}, 0.05, 1.0, 0.2, 0.35},
      {Primitive::Box, {0.20, 0.70, 0.25}, 0.05, 1.0, 0.2, 0.35},
      {Primitive::Cylinder, {0.20, 0.30, 0.85}, 0.05, 1.0, 0.2, 0.35},
      {Primitive::Sphere, {0.90, 0.80, 0.15}, 0.05, 1.0, 0.2, 0.35},
      {Primitive::Box, {0.70, 0.30, 0.80}, 0.05, 1.0, 0.2, 0.35},
  };
}

void SuiteConfig::validate() const {
  const int palette = static_cast<int>(standard_palette().size());
  if (classes < 2 || classes > palette) {
    throw ConfigError("classes must lie in [2, " + std::to_string(palette) + "]");
  }
  if (scenes < 1) throw ConfigError("scenes must be >= 1");
  if (min_classes_per_scene < 2 || min_classes_per_scene > max_classes_per_scene) {
    throw ConfigError("classes per scene must satisfy 2 <= min <= max");
  }
}

Dataset synth_dataset(const SuiteConfig& cfg) {
  cfg.validate();
  const auto palette = standard_palette();
  const int per_scene_max = std::min(cfg.max_classes_per_scene, cfg.classes);
  const int per_scene_min = std::min(cfg.min_classes_per_scene, per_scene_max);
  Dataset data;
  for (std::size_t s = 0; s < cfg.scenes; ++s) {
    Rng rng(cfg.seed, Stream::Scene, s + 1);
    std::vector<int> ids(static_cast<std::size_t>(cfg.classes));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    shuffle(ids, rng);
    const auto count =
        per_scene_min + static_cast<int>(rng.index(static_cast<std::size_t>(per_scene_max - per_scene_min + 1)));
    ids.resize(static_cast<std::size_t>(count));
    std::sort(ids.begin(), ids.end());
    SceneSpec spec;
    spec.class_ids = ids;
    for (int id : ids) spec.styles.push_back(palette[static_cast<std::size_t>(id)]);
    spec.points = cfg.points;
    spec.noise = cfg.noise;
    data.scenes.push_back(synth_scene(spec, rng.engine()()));
  }
  return data;
}

std::vector<std::size_t> Dataset::scenes_with(int cls) const {
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& labels = scenes[s].labels;
    if (std::find(labels.begin(), labels.end(), cls) != labels.end()) out.push_back(s);
  }
  return out;
}

std::map<int, std::vector<std::size_t>> Dataset::class_index() const {
  std::map<int, std::vector<std::size_t>> index;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const std::set<int> present(scenes[s].labels.begin(), scenes[s].labels.end());
    for (int c : present) index[c].push_back(s);
  }
  return index;
}

// ---------------------------------------------------------------------------
// tspc-v1

void write_cloud(std::ostream& out, const PointCloud& cloud) {
  cloud.validate();
  out << "tspc-v1 " << cloud.size() << '\n';
  char buf[256];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int label = cloud.has_labels() ? cloud.labels[i] : 0;
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %.9g %.9g %.9g %d\n", cloud.coords(i, 0),
                  cloud.coords(i, 1), cloud.coords(i, 2), cloud.colors(i, 0), cloud.colors(i, 1),
                  cloud.colors(i, 2), label);
    out << buf;
  }
}

void write_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_cloud(out, cloud);
  if (!out) throw DataError("failed writing " + path.string());
}

PointCloud read_cloud(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) parse_fail(source, 1, "missing tspc-v1 header");
  std::istringstream header(line);
  std::string magic;
  long long declared = -1;
  std::string extra;
  if (!(header >> magic >> declared) || magic != "tspc-v1" || declared < 1 || (header >> extra)) {
    parse_fail(source, 1, "malformed header, expected 'tspc-v1 N' with N >= 1");
  }
  const auto n = static_cast<std::size_t>(declared);
  PointCloud cloud{Tensor::matrix(n, 3), Tensor::matrix(n, 3), std::vector<int>(n)};

  std::size_t row = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (row == n) parse_fail(source, line_no, "more points than the header's " + std::to_string(n));
    std::istringstream fields(line);
    std::string tok[8];
    int count = 0;
    while (count < 8 && fields >> tok[count]) ++count;
    if (count != 7) parse_fail(source, line_no, "expected 7 fields, found " + std::to_string(count));
    double v[6];
    for (int f = 0; f < 6; ++f) {
      const std::string& t = tok[f];
      const auto res = std::from_chars(t.data(), t.data() + t.size(), v[f]);
      if (res.ec != std::errc{} || res.ptr != t.data() + t.size()) {
        parse_fail(source, line_no, "field " + std::to_string(f + 1) + " is not a number");
      }
      if (!std::isfinite(v[f])) parse_fail(source, line_no, "non-finite value");
    }
    int label = 0;
    const auto res = std::from_chars(tok[6].data(), tok[6].data() + tok[6].size(), label);
    if (res.ec != std::errc{} || res.ptr != tok[6].data() + tok[6].size() || label < 0) {
      parse_fail(source, line_no, "label must be a non-negative integer");
    }
    for (std::size_t a = 0; a < 3; ++a) {
      cloud.coords(row, a) = v[a];
      cloud.colors(row, a) = v[3 + a];
    }
    cloud.labels[row] = label;
    ++row;
  }
  if (row != n) {
    throw DataError(source + ": header declares " + std::to_string(n) + " points but body has " +
                    std::to_string(row));
  }
  return cloud;
}

PointCloud read_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_cloud(in, path.string());
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  char name[32];
  for (std::size_t s = 0; s < data.scenes.size(); ++s) {
    std::snprintf(name, sizeof name, "scene_%05zu.tspc", s);
    write_cloud(dir / name, data.scenes[s]);
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".tspc") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .tspc files in " + dir.string());
  Dataset data;
  for (const auto& f : files) data.scenes.push_back(read_cloud(f));
  return data;
}

// ---------------------------------------------------------------------------
// Splits

SplitConfig SplitConfig::standard() { return {{0, 1, 2, 3}, {4, 5}}; }

void SplitConfig::validate() const {
  if (seen.empty() || unseen.empty()) throw ConfigError("seen and unseen splits must be non-empty");
  for (int c : seen) {
    if (std::find(unseen.begin(), unseen.end(), c) != unseen.end()) {
      throw ConfigError("class " + std::to_string(c) + " is in both splits");
    }
  }
}

SplitConfig parse_split(std::istream& in) {
  SplitConfig split;
  bool have_seen = false, have_unseen = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("split line " + std::to_string(line_no) + " is not key=value");
    }
    std::string key = line.substr(0, eq);
    key.erase(0, key.find_first_not_of(" \t"));
    key.erase(key.find_last_not_of(" \t") + 1);
    const std::string value = line.substr(eq + 1);
    if (key == "seen") {
      split.seen = parse_int_list(value, key);
      have_seen = true;
    } else if (key == "unseen") {
      split.unseen = parse_int_list(value, key);
      have_unseen = true;
    } else {
      throw ConfigError("unknown split key '" + key + "'");
    }
  }
  if (!have_seen || !have_unseen) throw ConfigError("split needs both 'seen' and 'unseen'");
  split.validate();
  return split;
}

SplitConfig load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split file " + path.string());
  return parse_split(in);
}

void save_split(const std::filesystem::path& path, const SplitConfig& split) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "seen=" << join(split.seen) << "\nunseen=" << join(split.unseen) << '\n';
}

Episode sample_episode(const Dataset& data, std::span<const int> classes, int n_way, int k_shot,
                       int n_query, std::uint64_t seed) {
  if (n_way < 1 || k_shot < 1 || n_query < 1) {
    throw ConfigError("n_way, k_shot and n_query must be >= 1");
  }
  if (classes.size() < static_cast<std::size_t>(n_way)) {
    throw DataError("split has " + std::to_string(classes.size()) + " classes, fewer than n_way " +
                    std::to_string(n_way));
  }
  Rng rng(seed);
  std::vector<int> pool(classes.begin(), classes.end());
  shuffle(pool, rng);
  pool.resize(static_cast<std::size_t>(n_way));

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.classes = pool;
  std::set<std::size_t> used;
  for (int cls : pool) {
    std::vector<std::size_t> candidates;
    for (std::size_t s : data.scenes_with(cls)) {
      if (!used.count(s)) candidates.push_back(s);
    }
    if (candidates.size() < static_cast<std::size_t>(k_shot)) {
      throw DataError("only " + std::to_string(candidates.size()) + " unused scenes contain class " +
                      std::to_string(cls) + ", k_shot is " + std::to_string(k_shot));
    }
    shuffle(candidates, rng);
    std::vector<SupportShot> shots;
    for (int k = 0; k < k_shot; ++k) {
      const std::size_t s = candidates[static_cast<std::size_t>(k)];
      used.insert(s);
      const PointCloud& scene = data.scenes[s];
      Mask mask(scene.size());
      for (std::size_t i = 0; i < scene.size(); ++i) mask[i] = scene.labels[i] == cls ? 1 : 0;
      shots.push_back(SupportShot{scene, std::move(mask), s});
    }
    ep.support.push_back(std::move(shots));
  }

  std::vector<std::size_t> candidates;
  for (std::size_t s = 0; s < data.scenes.size(); ++s) {
    if (used.count(s)) continue;
    const auto& labels = data.scenes[s].labels;
    const bool hit = std::any_of(pool.begin(), pool.end(), [&](int c) {
      return std::find(labels.begin(), labels.end(), c) != labels.end();
    });
    if (hit) candidates.push_back(s);
  }
  if (candidates.size() < static_cast<std::size_t>(n_query)) {
    throw DataError("only " + std::to_string(candidates.size()) +
                    " query scenes contain a sampled class, n_query is " + std::to_string(n_query));
  }
  shuffle(candidates, rng);
  for (int q = 0; q < n_query; ++q) {
    const std::size_t s = candidates[static_cast<std::size_t>(q)];
    const PointCloud& scene = data.scenes[s];
    std::vector<int> gt(scene.size(), 0);
    for (std::size_t i = 0; i < scene.size(); ++i) {
      for (int w = 0; w < n_way; ++w) {
        if (scene.labels[i] == pool[static_cast<std::size_t>(w)]) gt[i] = w + 1;
      }
    }
    ep.query.push_back(scene);
    ep.query_gt.push_back(std::move(gt));
    ep.query_scene.push_back(s);
  }
  return ep;
}

}  // namespace taylorseg
