#include "percept/world.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <mutex>
#include <set>

#include "percept/error.hpp"
#include "percept/rng.hpp"

namespace percept {
namespace {

std::atomic<std::uint64_t> g_expert_calls{0};

constexpr std::size_t kMinVisiblePixels = 4;

constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};
constexpr std::array<std::string_view, 7> kColorNames = {"background", "red",    "green", "blue",
                                                         "yellow",     "purple", "orange"};

bool covers(const SceneObject& o, int x, int y) {
  const int dx = x - o.cx;
  const int dy = y - o.cy;
  const int r = o.radius;
  switch (o.shape) {
    case Shape::square:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case Shape::circle:
      return dx * dx + dy * dy <= r * r + r;
    case Shape::triangle:
      return dy >= -r && dy <= r && 2 * std::abs(dx) <= dy + r;
  }
  return false;
}

// Index of the object visible at each pixel, or -1. Nearer layers win; within a
// layer the later object is drawn last.
std::vector<int> owners(const Scene& scene) {
  const int g = scene.grid_size;
  std::vector<int> owner(static_cast<std::size_t>(g * g), -1);
  std::vector<int> order(scene.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scene.objects[static_cast<std::size_t>(a)].depth_layer >
           scene.objects[static_cast<std::size_t>(b)].depth_layer;
  });
  for (int idx : order) {
    const auto& o = scene.objects[static_cast<std::size_t>(idx)];
    for (int y = std::max(0, o.cy - o.radius); y <= std::min(g - 1, o.cy + o.radius); ++y)
      for (int x = std::max(0, o.cx - o.radius); x <= std::min(g - 1, o.cx + o.radius); ++x)
        if (covers(o, x, y)) owner[static_cast<std::size_t>(y * g + x)] = idx;
  }
  return owner;
}

ExpertSet set_of(const nlohmann::json& arr) {
  ExpertSet out;
  for (const auto& name : arr) {
    auto e = expert_from_string(name.get<std::string>());
    if (!e) throw DataSchemaMismatch("unknown expert name " + name.dump());
    out.insert(*e);
  }
  return out;
}

nlohmann::json names_of(ExpertSet set) {
  auto arr = nlohmann::json::array();
  for (auto e : set.members()) arr.push_back(std::string(to_string(e)));
  return arr;
}

template <std::size_t N>
int index_in(const std::array<std::string_view, N>& names, const std::string& s, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<int>(i);
  throw DataSchemaMismatch(std::string("unknown ") + what + ": " + s);
}

std::vector<double> visible_centroid_x(const Scene& scene, const std::vector<std::vector<int>>& vis) {
  std::vector<double> out;
  for (const auto& pix : vis) {
    double sum = 0.0;
    for (int p : pix) sum += p % scene.grid_size;
    out.push_back(pix.empty() ? 0.0 : sum / static_cast<double>(pix.size()));
  }
  return out;
}

}  // namespace

std::string_view to_string(Shape s) { return kShapeNames[static_cast<int>(s)]; }
std::string_view to_string(Color c) { return kColorNames[static_cast<int>(c)]; }

void validate_scene(const Scene& scene) {
  const int g = scene.grid_size;
  if (g <= 0) throw InvalidScene("grid size must be positive");
  if (scene.objects.size() > static_cast<std::size_t>(kMaxObjects))
    throw InvalidScene("at most 6 objects per scene");
  std::set<std::pair<int, int>> centers;
  for (const auto& o : scene.objects) {
    if (o.radius < 1) throw InvalidScene("object radius must be >= 1");
    if (o.cx - o.radius < 0 || o.cy - o.radius < 0 || o.cx + o.radius >= g || o.cy + o.radius >= g)
      throw InvalidScene("object does not fit inside the grid");
    if (o.depth_layer < 0 || o.depth_layer >= kDepthLayers) throw InvalidScene("depth layer out of range");
    const int c = static_cast<int>(o.color);
    if (c < 1 || c > kNumColors) throw InvalidScene("invalid colour");
    if (static_cast<int>(o.shape) > 2) throw InvalidScene("invalid shape");
    if (!centers.insert({o.cx, o.cy}).second) throw InvalidScene("two objects share a center");
  }
}

Image render_scene(const Scene& scene) {
  validate_scene(scene);
  const auto owner = owners(scene);
  Image img;
  img.size = scene.grid_size;
  img.pixels.resize(owner.size(), 0);
  for (std::size_t p = 0; p < owner.size(); ++p)
    if (owner[p] >= 0) img.pixels[p] = static_cast<std::uint8_t>(scene.objects[static_cast<std::size_t>(owner[p])].color);
  return img;
}

std::vector<std::vector<int>> visible_pixels(const Scene& scene) {
  validate_scene(scene);
  const auto owner = owners(scene);
  std::vector<std::vector<int>> out(scene.objects.size());
  for (std::size_t p = 0; p < owner.size(); ++p)
    if (owner[p] >= 0) out[static_cast<std::size_t>(owner[p])].push_back(static_cast<int>(p));
  return out;
}

const Mat& patch_projection(int patch_dim) {
  static std::mutex mu;
  static std::map<int, Mat> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(patch_dim);
  if (it == cache.end()) {
    Rng rng(0x9a7c4e5eedULL);
    Mat m(kColorChannels, patch_dim);
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) m(i, j) = rng.normal();
    it = cache.emplace(patch_dim, std::move(m)).first;
  }
  return it->second;
}

ExpertFeatureBundle expert_features(const Image& image, const Scene& scene, const ExpertDims& dims) {
  g_expert_calls.fetch_add(1, std::memory_order_relaxed);
  const int g = scene.grid_size;
  if (image.size != g) throw ShapeMismatch("image size differs from scene grid");
  if (g % dims.patch_grid != 0) throw ShapeMismatch("grid size not divisible by patch grid");
  const auto owner = owners(scene);
  const std::size_t n = owner.size();

  ExpertFeatureBundle out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    Vec mask = Vec::Zero(static_cast<Eigen::Index>(n));
    bool any = false;
    for (std::size_t p = 0; p < n; ++p)
      if (owner[p] == static_cast<int>(i)) mask[static_cast<Eigen::Index>(p)] = 1.0, any = true;
    if (any) out.seg.push_back(std::move(mask));
  }

  out.depth = Vec::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t p = 0; p < n; ++p)
    if (owner[p] >= 0)
      out.depth[static_cast<Eigen::Index>(p)] =
          1.0 - static_cast<double>(scene.objects[static_cast<std::size_t>(owner[p])].depth_layer) / kDepthLayers;

  out.edge = Vec::Zero(static_cast<Eigen::Index>(n));
  auto inside = [&](int x, int y) { return x >= 0 && y >= 0 && x < g && y < g && owner[static_cast<std::size_t>(y * g + x)] >= 0; };
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x)
      if (inside(x, y) && (!inside(x - 1, y) || !inside(x + 1, y) || !inside(x, y - 1) || !inside(x, y + 1)))
        out.edge[y * g + x] = 1.0;

  const int pg = dims.patch_grid;
  const int cell = g / pg;
  Mat hist = Mat::Zero(pg * pg, kColorChannels);
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) hist((y / cell) * pg + x / cell, image.at(x, y)) += 1.0;
  hist /= static_cast<double>(cell * cell);
  out.patch = hist * patch_projection(dims.patch_dim);
  return out;
}

std::uint64_t expert_call_count() { return g_expert_calls.load(std::memory_order_relaxed); }

TaskConstraintRule rule_for(TaskKind kind) {
  using E = ExpertKind;
  switch (kind) {
    case TaskKind::depth_order:
      return {kind, {E::seg, E::depth}, {E::edge, E::patch}};
    case TaskKind::count:
      return {kind, {E::seg}, {E::depth, E::edge}};
    case TaskKind::contour_class:
      return {kind, {E::edge}, {E::seg, E::patch}};
    case TaskKind::texture_match:
      return {kind, {E::patch}, {E::seg, E::edge}};
  }
  throw UnsupportedTask("unknown task kind");
}

TaskSample make_task(const Scene& scene, TaskKind kind, [[maybe_unused]] std::uint64_t rng_seed) {
  const auto vis = visible_pixels(scene);
  const auto& objs = scene.objects;
  const bool all_visible = std::all_of(vis.begin(), vis.end(), [](const auto& v) { return !v.empty(); });
  auto unsupported = [&](const std::string& why) {
    return UnsupportedTask(std::string(to_string(kind)) + ": " + why);
  };
  if (!all_visible) throw unsupported("every object must be visible");

  TaskSample task;
  task.scene = scene;
  task.task_kind = kind;
  task.rule = rule_for(kind);
  switch (kind) {
    case TaskKind::depth_order: {
      if (objs.size() != 2) throw unsupported("needs exactly two objects");
      if (objs[0].depth_layer == objs[1].depth_layer) throw unsupported("objects share a depth layer");
      if (objs[0].color == objs[1].color) throw unsupported("objects share a colour");
      const auto cx = visible_centroid_x(scene, vis);
      if (std::abs(cx[0] - cx[1]) < 1.0) throw unsupported("objects are not separated left to right");
      const std::size_t left = cx[0] < cx[1] ? 0 : 1;
      const std::size_t right = 1 - left;
      const std::size_t near = objs[0].depth_layer < objs[1].depth_layer ? 0 : 1;
      task.question = "which is closer : " + std::string(to_string(objs[left].color)) + " or " +
                      std::string(to_string(objs[right].color)) + " ?";
      task.answer = std::string(to_string(objs[near].color));
      break;
    }
    case TaskKind::count:
      if (objs.empty()) throw unsupported("needs at least one object");
      task.question = "how many objects are there ?";
      task.answer = std::to_string(objs.size());
      break;
    case TaskKind::contour_class:
      if (objs.size() != 1) throw unsupported("needs exactly one object");
      task.question = "what shape is the object ?";
      task.answer = std::string(to_string(objs[0].shape));
      break;
    case TaskKind::texture_match:
      if (objs.size() != 2) throw unsupported("needs exactly two objects");
      task.question = "do the two objects share a texture ?";
      task.answer = objs[0].color == objs[1].color ? "yes" : "no";
      break;
  }
  return task;
}

TaskSample sample_task(TaskKind kind, std::uint64_t seed, int grid_size) {
  Rng rng(seed);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Scene scene;
    scene.grid_size = grid_size;
    scene.seed = seed;
    int n = 1;
    switch (kind) {
      case TaskKind::depth_order:
      case TaskKind::texture_match:
        n = 2;
        break;
      case TaskKind::count:
        n = rng.uniform_int(1, kMaxObjects);
        break;
      case TaskKind::contour_class:
        n = 1;
        break;
    }
    std::set<std::pair<int, int>> centers;
    for (int i = 0; i < n; ++i) {
      SceneObject o;
      o.shape = static_cast<Shape>(rng.uniform_int(0, 2));
      o.color = static_cast<Color>(rng.uniform_int(1, kNumColors));
      o.depth_layer = rng.uniform_int(0, kDepthLayers - 1);
      if (kind == TaskKind::depth_order && i == 1) {
        o.color = static_cast<Color>(1 + (static_cast<int>(scene.objects[0].color) + rng.uniform_int(0, kNumColors - 2)) % kNumColors);
        o.depth_layer = (scene.objects[0].depth_layer + rng.uniform_int(1, kDepthLayers - 1)) % kDepthLayers;
      }
      if (kind == TaskKind::texture_match && i == 1 && rng.bernoulli(0.5)) o.color = scene.objects[0].color;
      // Perspective cue: nearer layers render larger.
      o.radius = std::max(1, std::min(6, grid_size / 5) - o.depth_layer);
      o.cx = rng.uniform_int(o.radius, grid_size - 1 - o.radius);
      o.cy = rng.uniform_int(o.radius, grid_size - 1 - o.radius);
      if (!centers.insert({o.cx, o.cy}).second) break;
      scene.objects.push_back(o);
    }
    if (static_cast<int>(scene.objects.size()) != n) continue;
    const auto vis = visible_pixels(scene);
    if (std::any_of(vis.begin(), vis.end(), [](const auto& v) { return v.size() < kMinVisiblePixels; })) continue;
    if (kind == TaskKind::depth_order) {
      const auto cx = visible_centroid_x(scene, vis);
      if (std::abs(cx[0] - cx[1]) < 2.0) continue;
    }
    return make_task(scene, kind, seed);
  }
  throw UnsupportedTask("could not generate a scene for " + std::string(to_string(kind)));
}

const std::vector<std::string>& world_words() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> out = {"which", "is", "closer", ":", "or", "?", "how", "many", "objects", "are",
                                    "there", "what", "shape", "the", "object", "do", "two", "share", "a",
                                    "texture", "yes", "no"};
    for (auto s : kShapeNames) out.emplace_back(s);
    for (std::size_t c = 1; c < kColorNames.size(); ++c) out.emplace_back(kColorNames[c]);
    for (int n = 1; n <= kMaxObjects; ++n) out.push_back(std::to_string(n));
    return out;
  }();
  return words;
}

std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

std::uint64_t scene_seed(std::uint64_t root, Split split, std::uint64_t index) {
  constexpr std::uint64_t kTopBit = 1ULL << 63;
  const std::uint64_t raw = derive_seed(root, 0x5ce9e5eedULL, index) & ~kTopBit;
  return split == Split::test ? (raw | kTopBit) : raw;
}

nlohmann::json to_json(const Scene& scene) {
  auto objects = nlohmann::json::array();
  for (const auto& o : scene.objects)
    objects.push_back({{"shape", std::string(to_string(o.shape))},
                       {"color", std::string(to_string(o.color))},
                       {"cx", o.cx},
                       {"cy", o.cy},
                       {"radius", o.radius},
                       {"depth_layer", o.depth_layer}});
  return {{"grid_size", scene.grid_size}, {"seed", scene.seed}, {"objects", objects}};
}

Scene scene_from_json(const nlohmann::json& j) {
  try {
    Scene scene;
    scene.grid_size = j.at("grid_size").get<int>();
    scene.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& o : j.at("objects")) {
      SceneObject obj;
      obj.shape = static_cast<Shape>(index_in(kShapeNames, o.at("shape").get<std::string>(), "shape"));
      const int color = index_in(kColorNames, o.at("color").get<std::string>(), "colour");
      if (color == 0) throw DataSchemaMismatch("object colour cannot be background");
      obj.color = static_cast<Color>(color);
      obj.cx = o.at("cx").get<int>();
      obj.cy = o.at("cy").get<int>();
      obj.radius = o.at("radius").get<int>();
      obj.depth_layer = o.at("depth_layer").get<int>();
      scene.objects.push_back(obj);
    }
    validate_scene(scene);
    return scene;
  } catch (const nlohmann::json::exception& e) {
    throw DataSchemaMismatch(std::string("bad scene record: ") + e.what());
  }
}

nlohmann::json to_json(const TaskSample& task) {
  return {{"scene", to_json(task.scene)},
          {"task_kind", std::string(to_string(task.task_kind))},
          {"question", task.question},
          {"answer", task.answer},
          {"rule", {{"required", names_of(task.rule.required)}, {"allowed_extras", names_of(task.rule.allowed_extras)}}}};
}

TaskSample task_from_json(const nlohmann::json& j) {
  try {
    TaskSample task;
    task.scene = scene_from_json(j.at("scene"));
    auto kind = task_kind_from_string(j.at("task_kind").get<std::string>());
    if (!kind) throw DataSchemaMismatch("unknown task kind " + j.at("task_kind").dump());
    task.task_kind = *kind;
    task.question = j.at("question").get<std::string>();
    task.answer = j.at("answer").get<std::string>();
    task.rule.task_kind = *kind;
    task.rule.required = set_of(j.at("rule").at("required"));
    task.rule.allowed_extras = set_of(j.at("rule").at("allowed_extras"));
    return task;
  } catch (const nlohmann::json::exception& e) {
    throw DataSchemaMismatch(std::string("bad task record: ") + e.what());
  }
}

}  // namespace percept
