#include "percept/kinds.hpp"

namespace percept {
namespace {

constexpr std::array<std::string_view, 4> kExpertNames = {"seg", "depth", "edge", "patch"};
constexpr std::array<std::string_view, 4> kDecisionTokens = {
    "<query_seg>", "<query_depth>", "<query_edge>", "<query_patch>"};
constexpr std::array<std::string_view, 4> kPadTokens = {"<seg_pad>", "<depth_pad>",
                                                        "<edge_pad>", "<patch_pad>"};
constexpr std::array<std::string_view, 4> kTaskNames = {"depth_order", "count",
                                                        "contour_class", "texture_match"};

template <std::size_t N>
std::optional<int> find_name(const std::array<std::string_view, N>& names, std::string_view s) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<int>(i);
  return std::nullopt;
}

}  // namespace

std::string_view to_string(ExpertKind e) { return kExpertNames[index_of(e)]; }

std::optional<ExpertKind> expert_from_string(std::string_view name) {
  if (auto i = find_name(kExpertNames, name)) return static_cast<ExpertKind>(*i);
  return std::nullopt;
}

std::string_view decision_token(ExpertKind e) { return kDecisionTokens[index_of(e)]; }
std::string_view pad_token(ExpertKind e) { return kPadTokens[index_of(e)]; }

std::optional<ExpertKind> expert_of_decision_token(std::string_view tok) {
  if (auto i = find_name(kDecisionTokens, tok)) return static_cast<ExpertKind>(*i);
  return std::nullopt;
}

std::optional<ExpertKind> expert_of_pad_token(std::string_view tok) {
  if (auto i = find_name(kPadTokens, tok)) return static_cast<ExpertKind>(*i);
  return std::nullopt;
}

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> tokens = [] {
    std::vector<std::string> out;
    for (auto t : kDecisionTokens) out.emplace_back(t);
    for (auto t : kPadTokens) out.emplace_back(t);
    for (auto t : {kThinkOpen, kThinkClose, kAnswerOpen, kAnswerClose}) out.emplace_back(t);
    return out;
  }();
  return tokens;
}

std::vector<ExpertKind> ExpertSet::members() const {
  std::vector<ExpertKind> out;
  for (auto k : kAllExperts)
    if (contains(k)) out.push_back(k);
  return out;
}

std::string ExpertSet::to_string() const {
  std::string out = "{";
  bool first = true;
  for (auto k : members()) {
    if (!first) out += ',';
    out += percept::to_string(k);
    first = false;
  }
  return out + "}";
}

std::string_view to_string(TaskKind k) { return kTaskNames[static_cast<int>(k)]; }

std::optional<TaskKind> task_kind_from_string(std::string_view name) {
  if (auto i = find_name(kTaskNames, name)) return static_cast<TaskKind>(*i);
  return std::nullopt;
}

}  // namespace percept
