#include "percept/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "percept/curriculum.hpp"
#include "percept/error.hpp"
#include "percept/rng.hpp"

namespace percept {
namespace {

constexpr char kMagic[8] = {'P', 'R', 'C', 'P', 'T', 'C', 'K', 'P'};

Mat gaussian(Rng& rng, int rows, int cols, double stddev) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

RowVec rms_row(const RowVec& x, const Mat& gain) {
  const double inv = 1.0 / std::sqrt(x.squaredNorm() / static_cast<double>(x.size()) + 1e-5);
  return (x * inv).cwiseProduct(gain.row(0));
}

}  // namespace

void BackboneConfig::validate() const {
  if (hidden <= 0 || layers <= 0 || heads <= 0 || context <= 0 || patch <= 0 || grid_size <= 0)
    throw ConfigError("backbone dimensions must be positive");
  if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by the number of heads");
  if (grid_size % patch != 0) throw ConfigError("grid size must be divisible by the image patch size");
}

HeadDims ModelConfig::head_dims() const {
  return HeadDims{.hidden = backbone.hidden, .grid_size = backbone.grid_size, .patch_grid = patch_grid, .patch_dim = patch_dim, .slots = slots};
}

void ModelConfig::validate() const {
  backbone.validate();
  if (slots <= 0) throw ConfigError("slot count N must be positive");
  if (patch_grid <= 0 || patch_dim <= 0) throw ConfigError("patch expert dimensions must be positive");
}

nlohmann::json to_json(const BackboneConfig& c) {
  return {{"hidden", c.hidden}, {"layers", c.layers}, {"heads", c.heads},
          {"context", c.context}, {"patch", c.patch}, {"grid_size", c.grid_size}};
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"backbone", to_json(c.backbone)}, {"slots", c.slots}, {"patch_grid", c.patch_grid}, {"patch_dim", c.patch_dim}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    const auto& b = j.at("backbone");
    c.backbone = {b.at("hidden").get<int>(), b.at("layers").get<int>(), b.at("heads").get<int>(),
                  b.at("context").get<int>(), b.at("patch").get<int>(), b.at("grid_size").get<int>()};
    c.slots = j.at("slots").get<int>();
    c.patch_grid = j.at("patch_grid").get<int>();
    c.patch_dim = j.at("patch_dim").get<int>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataSchemaMismatch(std::string("model config: ") + e.what());
  }
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) throw ValidationError("duplicate vocabulary token " + tokens_[i]);
}

Vocab Vocab::standard() {
  std::vector<std::string> tokens = special_tokens();
  tokens.emplace_back(kQuestionMarker);
  for (const auto* list : {&world_words(), &template_words()})
    for (const auto& w : *list)
      if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) tokens.push_back(w);
  return Vocab(std::move(tokens));
}

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) throw UnknownToken("token not in vocabulary: '" + std::string(token) + "'");
  return it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw UnknownToken("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::span<const std::string> tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::pair<std::string, ag::Var>> Model::named_parameters() const {
  std::vector<std::pair<std::string, ag::Var>> out = {{"token_embedding", token_embedding},
                                                      {"position_embedding", position_embedding},
                                                      {"patch_w", patch_w},
                                                      {"patch_b", patch_b}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (auto& [name, v] : std::vector<std::pair<std::string, ag::Var>>{{"norm1", p.norm1}, {"w_qkv", p.w_qkv}, {"w_o", p.w_o},
                                                                         {"norm2", p.norm2}, {"w_up", p.w_up}, {"b_up", p.b_up},
                                                                         {"w_down", p.w_down}, {"b_down", p.b_down}})
      out.emplace_back(pre + name, v);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("lm_head", lm_head);
  for (const auto& h : heads) {
    const std::string pre = "head." + std::string(to_string(h.expert())) + ".";
    out.emplace_back(pre + "w_in", h.w_in);
    out.emplace_back(pre + "b_in", h.b_in);
    out.emplace_back(pre + "queries", h.queries);
    out.emplace_back(pre + "w_out", h.w_out);
    out.emplace_back(pre + "b_out", h.b_out);
  }
  return out;
}

std::vector<ag::Var> Model::backbone_parameters() const {
  std::vector<ag::Var> out;
  for (const auto& [name, v] : named_parameters())
    if (name.rfind("head.", 0) != 0) out.push_back(v);
  return out;
}

std::vector<ag::Var> Model::head_parameters() const {
  std::vector<ag::Var> out;
  for (const auto& h : heads)
    for (const auto& v : h.parameters()) out.push_back(v);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : named_parameters()) n += static_cast<std::size_t>(v.value().size());
  return n;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  const auto& b = config.backbone;
  const int d = b.hidden, v = m.vocab.size();
  const int patch_inputs = b.patch * b.patch * kColorChannels;
  Rng rng(derive_seed(seed, 0xb0d1, 0));
  const double residual_scale = 1.0 / std::sqrt(2.0 * b.layers);
  m.token_embedding = ag::parameter(gaussian(rng, v, d, 0.1));
  m.position_embedding = ag::parameter(gaussian(rng, b.image_tokens() + b.context, d, 0.1));
  m.patch_w = ag::parameter(gaussian(rng, patch_inputs, d, 1.0 / b.patch));
  m.patch_b = ag::parameter(Mat::Zero(1, d));
  for (int l = 0; l < b.layers; ++l) {
    LayerParams p;
    p.norm1 = ag::parameter(Mat::Ones(1, d));
    p.w_qkv = ag::parameter(gaussian(rng, d, 3 * d, 1.0 / std::sqrt(d)));
    p.w_o = ag::parameter(gaussian(rng, d, d, residual_scale / std::sqrt(d)));
    p.norm2 = ag::parameter(Mat::Ones(1, d));
    p.w_up = ag::parameter(gaussian(rng, d, 4 * d, 1.0 / std::sqrt(d)));
    p.b_up = ag::parameter(Mat::Zero(1, 4 * d));
    p.w_down = ag::parameter(gaussian(rng, 4 * d, d, residual_scale / std::sqrt(4.0 * d)));
    p.b_down = ag::parameter(Mat::Zero(1, d));
    m.layers.push_back(p);
  }
  m.final_norm = ag::parameter(Mat::Ones(1, d));
  m.lm_head = ag::parameter(gaussian(rng, d, v, 1.0 / std::sqrt(d)));
  for (auto e : kAllExperts) m.heads[static_cast<std::size_t>(index_of(e))] = init_head(e, config.head_dims(), seed);
  return m;
}

Model clone_model(const Model& src) {
  Model m = src;
  auto copy = [](ag::Var& v) { v = ag::parameter(v.value()); };
  copy(m.token_embedding), copy(m.position_embedding), copy(m.patch_w), copy(m.patch_b);
  for (auto& p : m.layers)
    for (ag::Var* v : {&p.norm1, &p.w_qkv, &p.w_o, &p.norm2, &p.w_up, &p.b_up, &p.w_down, &p.b_down}) copy(*v);
  copy(m.final_norm), copy(m.lm_head);
  for (auto& h : m.heads)
    for (ag::Var* v : {&h.w_in, &h.b_in, &h.queries, &h.w_out, &h.b_out}) copy(*v);
  return m;
}

Mat image_patch_features(const Image& image, int patch) {
  const int per_side = image.size / patch;
  Mat out = Mat::Zero(per_side * per_side, patch * patch * kColorChannels);
  for (int py = 0; py < per_side; ++py)
    for (int px = 0; px < per_side; ++px)
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) {
          const int c = image.at(px * patch + x, py * patch + y);
          out(py * per_side + px, (y * patch + x) * kColorChannels + c) = 1.0;
        }
  return out;
}

ForwardResult forward(const Model& model, const Image& image, std::span<const int> ids) {
  const auto& b = model.config.backbone;
  if (image.size != b.grid_size) throw ShapeMismatch("image size differs from the backbone grid");
  if (static_cast<int>(ids.size()) > b.context)
    throw ContextOverflow("sequence of " + std::to_string(ids.size()) + " tokens exceeds context " + std::to_string(b.context));
  const int prefix = b.image_tokens();
  const int total = prefix + static_cast<int>(ids.size());

  const ag::Var img = ag::add_row(ag::matmul(ag::constant(image_patch_features(image, b.patch)), model.patch_w), model.patch_b);
  std::vector<ag::Var> parts = {img};
  if (!ids.empty()) parts.push_back(ag::gather_rows(model.token_embedding, ids));
  std::vector<int> positions(static_cast<std::size_t>(total));
  std::iota(positions.begin(), positions.end(), 0);
  ag::Var x = ag::add(ag::concat_rows(parts), ag::gather_rows(model.position_embedding, positions));

  for (const auto& p : model.layers) {
    const ag::Var qkv = ag::matmul(ag::rms_norm(x, p.norm1), p.w_qkv);
    x = ag::add(x, ag::matmul(ag::attention(qkv, b.heads, prefix), p.w_o));
    const ag::Var up = ag::gelu(ag::add_row(ag::matmul(ag::rms_norm(x, p.norm2), p.w_up), p.b_up));
    x = ag::add(x, ag::add_row(ag::matmul(up, p.w_down), p.b_down));
  }
  std::vector<int> text_rows(ids.size());
  std::iota(text_rows.begin(), text_rows.end(), prefix);
  const ag::Var hidden = ag::rms_norm(ag::gather_rows(x, text_rows), model.final_norm);
  return {ag::matmul(hidden, model.lm_head), hidden};
}

RowVec observation_input_embedding(const Model& model, ExpertKind expert) {
  return model.token_embedding.value().row(model.vocab.id(pad_token(expert)));
}

DecodeSession::DecodeSession(const Model& model, const Image& image) : model_(&model) {
  const auto& b = model.config.backbone;
  if (image.size != b.grid_size) throw ShapeMismatch("image size differs from the backbone grid");
  const int prefix = b.image_tokens();
  const int d = b.hidden, hd = d / b.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const int capacity = prefix + b.context;

  Mat x = image_patch_features(image, b.patch) * model.patch_w.value();
  x.rowwise() += model.patch_b.value().row(0);
  x += model.position_embedding.value().topRows(prefix);
  for (const auto& p : model.layers) {
    Mat xn(prefix, d);
    for (int r = 0; r < prefix; ++r) xn.row(r) = rms_row(x.row(r), p.norm1.value());
    const Mat qkv = xn * p.w_qkv.value();
    Mat k = Mat::Zero(capacity, d), v = Mat::Zero(capacity, d);
    k.topRows(prefix) = qkv.middleCols(d, d);
    v.topRows(prefix) = qkv.middleCols(2 * d, d);
    Mat attn(prefix, d);
    for (int h = 0; h < b.heads; ++h) {
      Mat s = qkv.middleCols(h * hd, hd) * qkv.middleCols(d + h * hd, hd).transpose() * inv_sqrt;
      for (int r = 0; r < prefix; ++r) {
        s.row(r) = (s.row(r).array() - s.row(r).maxCoeff()).exp();
        s.row(r) /= s.row(r).sum();
      }
      attn.middleCols(h * hd, hd) = s * qkv.middleCols(2 * d + h * hd, hd);
    }
    x += attn * p.w_o.value();
    Mat up(prefix, 4 * d);
    for (int r = 0; r < prefix; ++r) up.row(r) = rms_row(x.row(r), p.norm2.value()) * p.w_up.value();
    up.rowwise() += p.b_up.value().row(0);
    up = ag::gelu_values(up);
    x += up * p.w_down.value();
    x.rowwise() += p.b_down.value().row(0);
    keys_.push_back(std::move(k));
    values_.push_back(std::move(v));
  }
  cached_ = prefix;
}

DecodeSession::Step DecodeSession::feed(int id) {
  const auto& m = *model_;
  const auto& b = m.config.backbone;
  if (text_len_ >= b.context) throw ContextOverflow("decode session exceeded context " + std::to_string(b.context));
  if (id < 0 || id >= m.vocab.size()) throw UnknownToken("token id out of range: " + std::to_string(id));
  const int d = b.hidden, hd = d / b.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const int pos = cached_;

  RowVec x = m.token_embedding.value().row(id) + m.position_embedding.value().row(pos);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& p = m.layers[l];
    const RowVec qkv = rms_row(x, p.norm1.value()) * p.w_qkv.value();
    keys_[l].row(pos) = qkv.segment(d, d);
    values_[l].row(pos) = qkv.segment(2 * d, d);
    RowVec attn(d);
    for (int h = 0; h < b.heads; ++h) {
      const auto keys = keys_[l].block(0, h * hd, pos + 1, hd);
      RowVec s = (qkv.segment(h * hd, hd) * keys.transpose()) * inv_sqrt;
      s = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      attn.segment(h * hd, hd) = s * values_[l].block(0, h * hd, pos + 1, hd);
    }
    x += attn * p.w_o.value();
    RowVec up = rms_row(x, p.norm2.value()) * p.w_up.value() + p.b_up.value().row(0);
    up = ag::gelu_values(up);
    x += up * p.w_down.value() + p.b_down.value().row(0);
  }
  ++cached_;
  ++text_len_;
  Step out;
  out.hidden = rms_row(x, m.final_norm.value());
  out.logits = out.hidden * m.lm_head.value();
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta) {
  auto params = nlohmann::json::array();
  const auto named = model.named_parameters();
  for (const auto& [name, v] : named) params.push_back({{"name", name}, {"rows", v.rows()}, {"cols", v.cols()}});
  const nlohmann::json header = {{"config", to_json(model.config)}, {"vocab", model.vocab.tokens()}, {"params", params}, {"meta", meta}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write checkpoint " + path.string());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, v] : named)
      out.write(reinterpret_cast<const char*>(v.value().data()), static_cast<std::streamsize>(v.value().size() * sizeof(double)));
    if (!out) throw RuntimeFailure("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataSchemaMismatch("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataSchemaMismatch(path.string() + " is not a checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion)
    throw SchemaVersionMismatch("checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 30)) throw DataSchemaMismatch("corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataSchemaMismatch(std::string("checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  ck.model = init_model(model_config_from_json(header.at("config")), 0);
  ck.model.vocab = Vocab(header.at("vocab").get<std::vector<std::string>>());
  if (!(ck.model.vocab == Vocab::standard())) throw DataSchemaMismatch("checkpoint vocabulary differs from this build");
  ck.meta = header.value("meta", nlohmann::json::object());
  const auto named = ck.model.named_parameters();
  const auto& params = header.at("params");
  if (params.size() != named.size()) throw DataSchemaMismatch("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto v = named[i].second;
    if (params[i].at("name") != named[i].first || params[i].at("rows").get<Eigen::Index>() != v.rows() ||
        params[i].at("cols").get<Eigen::Index>() != v.cols())
      throw DataSchemaMismatch("checkpoint parameter layout mismatch at " + named[i].first);
    in.read(reinterpret_cast<char*>(v.mutable_value().data()), static_cast<std::streamsize>(v.value().size() * sizeof(double)));
  }
  if (!in) throw DataSchemaMismatch("checkpoint truncated: " + path.string());
  return ck;
}

}  // namespace percept
