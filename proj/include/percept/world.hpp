#pragma once

// Procedural scenes, question/answer tasks, and deterministic synthetic
// experts standing in for frozen segmentation / depth / edge / patch models.

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "percept/autograd.hpp"

#include "percept/chain.hpp"
#include "percept/kinds.hpp"

namespace percept {

enum class Shape : std::uint8_t { circle = 0, square = 1, triangle = 2 };
enum class Color : std::uint8_t { red = 1, green = 2, blue = 3, yellow = 4, purple = 5, orange = 6 };

inline constexpr int kNumColors = 6;
inline constexpr int kColorChannels = kNumColors + 1;  // background is channel 0
inline constexpr int kMaxObjects = 6;
inline constexpr int kDepthLayers = 4;  // K_max: layer k maps to 1 - k / K_max

std::string_view to_string(Shape s);
std::string_view to_string(Color c);

struct SceneObject {
  Shape shape = Shape::circle;
  Color color = Color::red;
  int cx = 0;
  int cy = 0;
  int radius = 1;
  int depth_layer = 0;
  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  int grid_size = 32;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
  bool operator==(const Scene&) const = default;
};

// grid_size x grid_size colour indices, row-major, 0 = background.
struct Image {
  int size = 0;
  std::vector<std::uint8_t> pixels;
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y * size + x)]; }
  bool operator==(const Image&) const = default;
};

struct ExpertDims {
  int patch_grid = 4;  // P
  int patch_dim = 16;  // d_patch
};

struct ExpertFeatureBundle {
  std::vector<Vec> seg;  // one binary mask per visible object, in object order
  Vec depth;             // grid_size^2, 1 - layer / K_max on objects, 0 background
  Vec edge;              // binary boundary of the object union
  Mat patch;             // P^2 x d_patch
};

void validate_scene(const Scene& scene);
Image render_scene(const Scene& scene);

// Per-object visible pixels after occlusion (index into scene.objects).
std::vector<std::vector<int>> visible_pixels(const Scene& scene);

// The synthetic experts. Every call increments expert_call_count().
ExpertFeatureBundle expert_features(const Image& image, const Scene& scene,
                                    const ExpertDims& dims = {});
std::uint64_t expert_call_count();

// Fixed projection used by the patch expert (kColorChannels x d_patch).
const Mat& patch_projection(int patch_dim);

struct TaskSample {
  Scene scene;
  TaskKind task_kind = TaskKind::count;
  std::string question;
  std::string answer;
  TaskConstraintRule rule;
  bool operator==(const TaskSample&) const = default;
};

TaskConstraintRule rule_for(TaskKind kind);
TaskSample make_task(const Scene& scene, TaskKind kind, std::uint64_t rng_seed);

// Generates a scene that supports `kind` and builds the task on it.
TaskSample sample_task(TaskKind kind, std::uint64_t seed, int grid_size = 32);

// Closed answer vocabulary and the question/think word list.
const std::vector<std::string>& world_words();

enum class Split : std::uint8_t { train = 0, test = 1 };
std::string_view to_string(Split s);

// Scene seeds for the two splits come from disjoint halves of the seed space.
std::uint64_t scene_seed(std::uint64_t root, Split split, std::uint64_t index);

nlohmann::json to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TaskSample& task);
TaskSample task_from_json(const nlohmann::json& j);

}  // namespace percept
