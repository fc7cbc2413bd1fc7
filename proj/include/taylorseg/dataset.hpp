#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "taylorseg/fewshot.hpp"
#include "taylorseg/geometry.hpp"

namespace taylorseg {

enum class Primitive { Plane, Sphere, Box, Cylinder };

const char* to_string(Primitive p);

// Appearance and extent of one semantic class.
struct ClassStyle {
  Primitive primitive = Primitive::Sphere;
  std::array<double, 3> color{0.5, 0.5, 0.5};
  double color_sigma = 0.05;
  double weight = 1.0;    // relative share of the scene's points
  double min_size = 0.2;  // region edge length range, unit-cube fraction
  double max_size = 0.35;
};

// One scene: the classes present, their styles, and sampling settings.
struct SceneSpec {
  std::vector<int> class_ids;
  std::vector<ClassStyle> styles;  // parallel to class_ids
  std::size_t points = 2048;
  double noise = 0.01;

  // Throws ConfigError. `k_neighbors` bounds the minimum point count.
  void validate(std::size_t k_neighbors = 16) const;
};

// Samples every primitive inside its own non-overlapping box within the unit
// cube, draws each point's class from the weights, adds Gaussian noise.
PointCloud synth_scene(const SceneSpec& spec, std::uint64_t seed);

// The six-class palette of the standard suite.
std::vector<ClassStyle> standard_palette();

struct SuiteConfig {
  int classes = 6;
  std::size_t scenes = 120;
  std::size_t points = 2048;
  double noise = 0.01;
  std::uint64_t seed = 0;
  int min_classes_per_scene = 2;
  int max_classes_per_scene = 4;

  void validate() const;
};

struct Dataset {
  std::vector<PointCloud> scenes;

  // Scenes containing at least one point of `cls`, in ascending order.
  std::vector<std::size_t> scenes_with(int cls) const;
  std::map<int, std::vector<std::size_t>> class_index() const;
};

Dataset synth_dataset(const SuiteConfig& cfg);

// ---------------------------------------------------------------------------
// tspc-v1 files

void write_cloud(std::ostream& out, const PointCloud& cloud);
void write_cloud(const std::filesystem::path& path, const PointCloud& cloud);
// `source` names the stream in error messages.
PointCloud read_cloud(std::istream& in, const std::string& source = "<stream>");
PointCloud read_cloud(const std::filesystem::path& path);

void save_dataset(const std::filesystem::path& dir, const Dataset& data);
// Every *.tspc file of `dir`, in file name order.
Dataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Splits and episodes

struct SplitConfig {
  std::vector<int> seen;
  std::vector<int> unseen;

  static SplitConfig standard();
  void validate() const;
};

SplitConfig parse_split(std::istream& in);
SplitConfig load_split(const std::filesystem::path& path);
void save_split(const std::filesystem::path& path, const SplitConfig& split);

// Draws n_way classes from `classes`, k_shot distinct support scenes per
// class, and n_query further scenes containing at least one drawn class.
Episode sample_episode(const Dataset& data, std::span<const int> classes, int n_way, int k_shot,
                       int n_query, std::uint64_t seed);

}  // namespace taylorseg
