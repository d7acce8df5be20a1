#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace percept {

// The four perceptual experts. Order is canonical: it fixes decision-token
// order inside generated chains and head order inside checkpoints.
enum class ExpertKind : std::uint8_t { seg = 0, depth = 1, edge = 2, patch = 3 };

inline constexpr std::array<ExpertKind, 4> kAllExperts = {
    ExpertKind::seg, ExpertKind::depth, ExpertKind::edge, ExpertKind::patch};

inline constexpr int index_of(ExpertKind e) { return static_cast<int>(e); }

std::string_view to_string(ExpertKind e);
std::optional<ExpertKind> expert_from_string(std::string_view name);

std::string_view decision_token(ExpertKind e);  // e.g. "<query_seg>"
std::string_view pad_token(ExpertKind e);       // e.g. "<seg_pad>"
std::optional<ExpertKind> expert_of_decision_token(std::string_view tok);
std::optional<ExpertKind> expert_of_pad_token(std::string_view tok);

inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

// All 12 canonical special tokens: decisions, pads, then structural tags.
const std::vector<std::string>& special_tokens();

// Small value-type set of experts backed by a bitmask; iteration follows
// canonical order.
class ExpertSet {
 public:
  constexpr ExpertSet() = default;
  constexpr ExpertSet(std::initializer_list<ExpertKind> kinds) {
    for (auto k : kinds) insert(k);
  }

  static constexpr ExpertSet all() {
    return ExpertSet{ExpertKind::seg, ExpertKind::depth, ExpertKind::edge,
                     ExpertKind::patch};
  }
  static constexpr ExpertSet from_bits(std::uint8_t bits) {
    ExpertSet s;
    s.bits_ = bits & 0xF;
    return s;
  }

  constexpr void insert(ExpertKind k) { bits_ |= bit(k); }
  constexpr void erase(ExpertKind k) { bits_ &= static_cast<std::uint8_t>(~bit(k)); }
  constexpr bool contains(ExpertKind k) const { return (bits_ & bit(k)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr int size() const { return std::popcount(bits_); }
  constexpr std::uint8_t bits() const { return bits_; }

  constexpr bool subset_of(ExpertSet other) const { return (bits_ & ~other.bits_) == 0; }
  constexpr ExpertSet operator|(ExpertSet o) const { return from_bits(bits_ | o.bits_); }
  constexpr ExpertSet operator&(ExpertSet o) const { return from_bits(bits_ & o.bits_); }
  constexpr ExpertSet operator-(ExpertSet o) const {
    return from_bits(bits_ & static_cast<std::uint8_t>(~o.bits_));
  }
  constexpr bool operator==(const ExpertSet&) const = default;

  std::vector<ExpertKind> members() const;
  std::string to_string() const;  // "{seg,depth}"

 private:
  static constexpr std::uint8_t bit(ExpertKind k) {
    return static_cast<std::uint8_t>(1u << index_of(k));
  }
  std::uint8_t bits_ = 0;
};

enum class TaskKind : std::uint8_t { depth_order = 0, count = 1, contour_class = 2, texture_match = 3 };

inline constexpr std::array<TaskKind, 4> kAllTaskKinds = {
    TaskKind::depth_order, TaskKind::count, TaskKind::contour_class, TaskKind::texture_match};

std::string_view to_string(TaskKind k);
std::optional<TaskKind> task_kind_from_string(std::string_view name);

}  // namespace percept
