#pragma once

// Token-level grammar of interleaved reasoning chains.
//
//   chain   := span* think? answer?
//   think   := "<think>" (word | span)* "</think>"
//   answer  := "<answer>" word* "</answer>"
//   span    := <query_m> <m_pad>{N}
//
// Spans before <think> belong to the context region (stage-1 inputs); spans
// inside <think> are policy decisions (stage-2 targets). Queries are never
// legal inside the answer.

#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "percept/kinds.hpp"

namespace percept {

inline constexpr int kDefaultSlotCount = 4;

enum class Region : std::uint8_t { context, think };

struct ThinkText {
  std::string text;
  bool operator==(const ThinkText&) const = default;
};

struct AnswerText {
  std::string text;
  bool operator==(const AnswerText&) const = default;
};

struct QuerySpan {
  ExpertKind expert = ExpertKind::seg;
  int slot_count = kDefaultSlotCount;
  int position = 0;  // index of the decision token within the chain's tokens
  Region region = Region::think;
  bool operator==(const QuerySpan&) const = default;
};

using Segment = std::variant<ThinkText, QuerySpan, AnswerText>;

struct ReasoningChain {
  std::vector<Segment> segments;
  int slot_count = kDefaultSlotCount;

  std::vector<QuerySpan> spans() const;
  bool has_answer() const;
  std::string answer() const;  // empty when there is no answer segment
  bool operator==(const ReasoningChain&) const = default;
};

// Incrementally builds a canonical chain and assigns span positions.
class ChainBuilder {
 public:
  explicit ChainBuilder(int slot_count = kDefaultSlotCount);

  ChainBuilder& context_query(ExpertKind e);
  ChainBuilder& open_think();
  ChainBuilder& think(std::string_view words);
  ChainBuilder& query(ExpertKind e);
  ChainBuilder& close_think();
  ChainBuilder& answer(std::string_view words);
  ReasoningChain build();

 private:
  void flush_words();
  ReasoningChain chain_;
  std::vector<std::string> pending_;
  int tokens_ = 0;
  bool in_think_ = false;
  bool think_has_content_ = false;
};

// Splits raw text into tokens; angle-bracket tags split even without spaces.
std::vector<std::string> lex(std::string_view text);

ReasoningChain parse_chain(std::string_view text, int slot_count = kDefaultSlotCount);
std::string serialize(const ReasoningChain& chain);
std::vector<std::string> chain_tokens(const ReasoningChain& chain);

// Throws MalformedChain when a programmatically built chain breaks the grammar.
void check_well_formed(const ReasoningChain& chain);

struct TaskConstraintRule {
  TaskKind task_kind = TaskKind::count;
  ExpertSet required;
  ExpertSet allowed_extras;
  bool operator==(const TaskConstraintRule&) const = default;
};

struct ValidationReport {
  bool valid = false;
  ExpertSet missing;
  ExpertSet illegal;
};

ExpertSet experts_of(const ReasoningChain& chain);
ValidationReport validate_chain(const ReasoningChain& chain, const TaskConstraintRule& rule);

struct SequenceLayout {
  std::set<int> text_positions;
  std::set<int> decision_positions;
  std::map<int, std::vector<int>> observation_positions;
  std::set<int> answer_positions;
  std::map<int, ExpertKind> decision_experts;

  int size() const;
  SequenceLayout shifted(int offset) const;
};

// Positions of the tokens of serialize(chain); `tokens` must match exactly.
SequenceLayout layout(const ReasoningChain& chain, std::span<const std::string> tokens);

std::map<ExpertKind, int> query_signature(const ReasoningChain& chain);

}  // namespace percept
