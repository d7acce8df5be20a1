#pragma once

// Small decoder-only transformer over an image-patch prefix and the extended
// token vocabulary, plus the four projection heads that read observation
// slots. Hidden states are final-layer, post-norm.

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "percept/autograd.hpp"
#include "percept/projection.hpp"
#include "percept/world.hpp"

namespace percept {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct BackboneConfig {
  int hidden = 128;
  int layers = 4;
  int heads = 4;
  int context = 256;  // text tokens, excluding the image prefix
  int patch = 8;      // image patch side in pixels
  int grid_size = 32;

  int image_tokens() const { return (grid_size / patch) * (grid_size / patch); }
  void validate() const;  // throws ConfigError
  bool operator==(const BackboneConfig&) const = default;
};

struct ModelConfig {
  BackboneConfig backbone;
  int slots = kDefaultSlotCount;  // N
  int patch_grid = 4;             // patch expert P
  int patch_dim = 16;             // patch expert d_patch

  HeadDims head_dims() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const BackboneConfig& c);
nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

class Vocab {
 public:
  explicit Vocab(std::vector<std::string> tokens);
  // Special tokens, the question marker, world words and think-template words.
  static Vocab standard();

  int id(std::string_view token) const;  // throws UnknownToken
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::vector<int> encode(std::span<const std::string> tokens) const;
  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct LayerParams {
  ag::Var norm1, w_qkv, w_o, norm2, w_up, b_up, w_down, b_down;
};

struct Model {
  ModelConfig config;
  Vocab vocab = Vocab::standard();
  ag::Var token_embedding;     // V x d
  ag::Var position_embedding;  // (image_tokens + context) x d
  ag::Var patch_w;             // (patch^2 * colour channels) x d
  ag::Var patch_b;             // 1 x d
  std::vector<LayerParams> layers;
  ag::Var final_norm;  // 1 x d
  ag::Var lm_head;     // d x V
  std::array<ProjectionHead, 4> heads;

  const ProjectionHead& head(ExpertKind e) const { return heads[static_cast<std::size_t>(index_of(e))]; }
  std::vector<std::pair<std::string, ag::Var>> named_parameters() const;
  std::vector<ag::Var> backbone_parameters() const;  // embeddings included
  std::vector<ag::Var> head_parameters() const;
  std::size_t parameter_count() const;
};

Model init_model(const ModelConfig& config, std::uint64_t seed);
// Independent copy: no parameter storage is shared with `m`.
Model clone_model(const Model& m);

// One-hot colour features per image patch, image_tokens x (patch^2 * 7).
Mat image_patch_features(const Image& image, int patch);

struct ForwardResult {
  ag::Var logits;  // text positions x V
  ag::Var hidden;  // text positions x d
};

// Image rows attend among themselves; text rows see the image and earlier text.
ForwardResult forward(const Model& model, const Image& image, std::span<const int> ids);

// Learned input embedding of the expert's pad token, used at every slot.
RowVec observation_input_embedding(const Model& model, ExpertKind expert);

// Incremental decoder with a key/value cache; matches forward() row by row.
class DecodeSession {
 public:
  DecodeSession(const Model& model, const Image& image);

  struct Step {
    RowVec hidden;
    RowVec logits;
  };
  Step feed(int id);  // throws ContextOverflow
  int length() const { return text_len_; }

 private:
  const Model* model_;
  std::vector<Mat> keys_;    // per layer, rows = cached positions
  std::vector<Mat> values_;  // per layer
  int cached_ = 0;
  int text_len_ = 0;
};

struct Checkpoint {
  Model model;
  nlohmann::json meta;  // stage, config hash, training config, rng state
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);  // throws SchemaVersionMismatch, DataSchemaMismatch

}  // namespace percept
