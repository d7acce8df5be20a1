#include "percept/chain.hpp"

#include <cctype>
#include <sstream>

#include "percept/error.hpp"

namespace percept {
namespace {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

int word_count(std::string_view text) { return static_cast<int>(split_words(text).size()); }

bool is_tag(std::string_view tok) { return tok.size() >= 2 && tok.front() == '<' && tok.back() == '>'; }

bool is_known_special(std::string_view tok) {
  for (const auto& s : special_tokens())
    if (s == tok) return true;
  return false;
}

}  // namespace

std::vector<QuerySpan> ReasoningChain::spans() const {
  std::vector<QuerySpan> out;
  for (const auto& seg : segments)
    if (const auto* q = std::get_if<QuerySpan>(&seg)) out.push_back(*q);
  return out;
}

bool ReasoningChain::has_answer() const {
  return !segments.empty() && std::holds_alternative<AnswerText>(segments.back());
}

std::string ReasoningChain::answer() const {
  return has_answer() ? std::get<AnswerText>(segments.back()).text : std::string{};
}

// ---------------------------------------------------------------------------

ChainBuilder::ChainBuilder(int slot_count) {
  if (slot_count <= 0) throw MalformedChain("slot count must be positive");
  chain_.slot_count = slot_count;
}

void ChainBuilder::flush_words() {
  if (pending_.empty()) return;
  chain_.segments.emplace_back(ThinkText{join_words(pending_)});
  pending_.clear();
  think_has_content_ = true;
}

ChainBuilder& ChainBuilder::context_query(ExpertKind e) {
  if (in_think_ || (!chain_.segments.empty() && !std::holds_alternative<QuerySpan>(chain_.segments.back())))
    throw MalformedChain("context queries must precede the think block");
  chain_.segments.emplace_back(QuerySpan{e, chain_.slot_count, tokens_, Region::context});
  tokens_ += 1 + chain_.slot_count;
  return *this;
}

ChainBuilder& ChainBuilder::open_think() {
  if (in_think_) throw MalformedChain("nested <think>");
  in_think_ = true;
  think_has_content_ = false;
  tokens_ += 1;
  return *this;
}

ChainBuilder& ChainBuilder::think(std::string_view words) {
  if (!in_think_) throw MalformedChain("think text outside <think>");
  auto split = split_words(words);
  tokens_ += static_cast<int>(split.size());
  pending_.insert(pending_.end(), split.begin(), split.end());
  return *this;
}

ChainBuilder& ChainBuilder::query(ExpertKind e) {
  if (!in_think_) throw MalformedChain("query outside <think>");
  flush_words();
  chain_.segments.emplace_back(QuerySpan{e, chain_.slot_count, tokens_, Region::think});
  tokens_ += 1 + chain_.slot_count;
  think_has_content_ = true;
  return *this;
}

ChainBuilder& ChainBuilder::close_think() {
  if (!in_think_) throw MalformedChain("</think> without <think>");
  flush_words();
  if (!think_has_content_) chain_.segments.emplace_back(ThinkText{});
  in_think_ = false;
  tokens_ += 1;
  return *this;
}

ChainBuilder& ChainBuilder::answer(std::string_view words) {
  if (in_think_) close_think();
  chain_.segments.emplace_back(AnswerText{join_words(split_words(words))});
  tokens_ += 2 + word_count(words);
  return *this;
}

ReasoningChain ChainBuilder::build() {
  if (in_think_) close_think();
  check_well_formed(chain_);
  return chain_;
}

// ---------------------------------------------------------------------------

std::vector<std::string> lex(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '<') {
      const auto close = text.find('>', i);
      if (close == std::string_view::npos) throw MalformedChain("unterminated tag in chain text");
      out.emplace_back(text.substr(i, close - i + 1));
      i = close + 1;
    } else {
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != '<') ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

ReasoningChain parse_chain(std::string_view text, int slot_count) {
  if (slot_count <= 0) throw MalformedChain("slot count must be positive");
  enum class State { context, think, after_think, answer, done };

  const auto tokens = lex(text);
  ReasoningChain chain;
  chain.slot_count = slot_count;
  State state = State::context;
  std::vector<std::string> words;
  bool think_has_content = false;

  auto fail = [&](std::size_t at, const std::string& why) {
    std::ostringstream msg;
    msg << "malformed chain at token " << at << ": " << why;
    throw MalformedChain(msg.str());
  };
  auto flush_think = [&] {
    if (words.empty()) return;
    chain.segments.emplace_back(ThinkText{join_words(words)});
    words.clear();
    think_has_content = true;
  };

  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& tok = tokens[i];
    if (state == State::done) fail(i, "tokens after </answer>");

    if (auto expert = expert_of_decision_token(tok)) {
      if (state != State::context && state != State::think)
        fail(i, "query outside the context or think region");
      for (int k = 1; k <= slot_count; ++k) {
        if (i + k >= tokens.size()) fail(i, "decision token truncated before its observation slots");
        auto pad = expert_of_pad_token(tokens[i + k]);
        if (!pad) fail(i + k, "expected " + std::string(pad_token(*expert)) + ", got " + tokens[i + k]);
        if (*pad != *expert) fail(i + k, "pad kind mismatch: " + tokens[i + k] + " after " + tok);
      }
      if (i + slot_count + 1 < tokens.size() && expert_of_pad_token(tokens[i + slot_count + 1]))
        fail(i + slot_count + 1, "more than " + std::to_string(slot_count) + " observation slots");
      if (state == State::think) flush_think(), think_has_content = true;
      chain.segments.emplace_back(QuerySpan{*expert, slot_count, static_cast<int>(i),
                                            state == State::think ? Region::think : Region::context});
      i += static_cast<std::size_t>(slot_count);
    } else if (expert_of_pad_token(tok)) {
      fail(i, "observation slot without a decision token");
    } else if (tok == kThinkOpen) {
      if (state != State::context) fail(i, "unexpected <think>");
      state = State::think;
      think_has_content = false;
    } else if (tok == kThinkClose) {
      if (state != State::think) fail(i, "</think> without <think>");
      flush_think();
      if (!think_has_content) chain.segments.emplace_back(ThinkText{});
      state = State::after_think;
    } else if (tok == kAnswerOpen) {
      if (state == State::think) fail(i, "unclosed <think> before <answer>");
      if (state == State::answer) fail(i, "nested <answer>");
      state = State::answer;
    } else if (tok == kAnswerClose) {
      if (state != State::answer) fail(i, "</answer> without <answer>");
      chain.segments.emplace_back(AnswerText{join_words(words)});
      words.clear();
      state = State::done;
    } else if (is_tag(tok) && !is_known_special(tok)) {
      fail(i, "unknown token " + tok);
    } else {
      if (state != State::think && state != State::answer) fail(i, "text outside <think>/<answer>: " + tok);
      words.push_back(tok);
    }
  }
  if (state == State::think) throw MalformedChain("unclosed <think>");
  if (state == State::answer) throw MalformedChain("unclosed <answer>");
  return chain;
}

std::vector<std::string> chain_tokens(const ReasoningChain& chain) {
  std::vector<std::string> out;
  bool in_think = false;
  auto close_think = [&] {
    if (in_think) out.emplace_back(kThinkClose), in_think = false;
  };
  for (const auto& seg : chain.segments) {
    if (const auto* q = std::get_if<QuerySpan>(&seg)) {
      if (q->region == Region::think && !in_think) out.emplace_back(kThinkOpen), in_think = true;
      out.emplace_back(decision_token(q->expert));
      for (int k = 0; k < q->slot_count; ++k) out.emplace_back(pad_token(q->expert));
    } else if (const auto* t = std::get_if<ThinkText>(&seg)) {
      if (!in_think) out.emplace_back(kThinkOpen), in_think = true;
      for (auto& w : split_words(t->text)) out.push_back(std::move(w));
    } else {
      close_think();
      out.emplace_back(kAnswerOpen);
      for (auto& w : split_words(std::get<AnswerText>(seg).text)) out.push_back(std::move(w));
      out.emplace_back(kAnswerClose);
    }
  }
  close_think();
  return out;
}

std::string serialize(const ReasoningChain& chain) {
  std::string out;
  for (const auto& tok : chain_tokens(chain)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

void check_well_formed(const ReasoningChain& chain) {
  if (chain.slot_count <= 0) throw MalformedChain("slot count must be positive");
  enum class Phase { context, think, answer };
  Phase phase = Phase::context;
  int think_segments = 0;
  bool empty_think = false;
  bool prev_text = false;
  int position = 0;
  for (std::size_t i = 0; i < chain.segments.size(); ++i) {
    const auto& seg = chain.segments[i];
    if (phase == Phase::answer) throw MalformedChain("answer must be the final segment");
    if (const auto* q = std::get_if<QuerySpan>(&seg)) {
      if (q->slot_count != chain.slot_count) throw MalformedChain("span slot count differs from chain");
      if (q->region == Region::context) {
        if (phase != Phase::context) throw MalformedChain("context query after the think block");
      } else {
        if (phase == Phase::context) phase = Phase::think, position += 1;
        ++think_segments;
      }
      if (q->position != position) throw MalformedChain("span position does not match token index");
      position += 1 + q->slot_count;
      prev_text = false;
    } else if (const auto* t = std::get_if<ThinkText>(&seg)) {
      if (phase == Phase::context) phase = Phase::think, position += 1;
      if (prev_text) throw MalformedChain("adjacent think-text segments");
      const int words = word_count(t->text);
      if (words == 0) empty_think = true;
      if (join_words(split_words(t->text)) != t->text) throw MalformedChain("non-canonical think text");
      position += words;
      ++think_segments;
      prev_text = true;
    } else {
      const auto& a = std::get<AnswerText>(seg);
      if (join_words(split_words(a.text)) != a.text) throw MalformedChain("non-canonical answer text");
      if (phase == Phase::think) position += 1;
      phase = Phase::answer;
    }
  }
  if (empty_think && think_segments != 1) throw MalformedChain("empty think text beside other content");
}

// ---------------------------------------------------------------------------

ExpertSet experts_of(const ReasoningChain& chain) {
  ExpertSet out;
  for (const auto& q : chain.spans()) out.insert(q.expert);
  return out;
}

ValidationReport validate_chain(const ReasoningChain& chain, const TaskConstraintRule& rule) {
  const ExpertSet used = experts_of(chain);
  ValidationReport report;
  report.missing = rule.required - used;
  report.illegal = used - (rule.required | rule.allowed_extras);
  report.valid = report.missing.empty() && report.illegal.empty();
  return report;
}

int SequenceLayout::size() const {
  int obs = 0;
  for (const auto& [_, slots] : observation_positions) obs += static_cast<int>(slots.size());
  return static_cast<int>(text_positions.size() + decision_positions.size() + answer_positions.size()) + obs;
}

SequenceLayout SequenceLayout::shifted(int offset) const {
  SequenceLayout out;
  for (int p : text_positions) out.text_positions.insert(p + offset);
  for (int p : decision_positions) out.decision_positions.insert(p + offset);
  for (int p : answer_positions) out.answer_positions.insert(p + offset);
  for (const auto& [p, slots] : observation_positions) {
    auto& dst = out.observation_positions[p + offset];
    for (int s : slots) dst.push_back(s + offset);
  }
  for (const auto& [p, e] : decision_experts) out.decision_experts[p + offset] = e;
  return out;
}

SequenceLayout layout(const ReasoningChain& chain, std::span<const std::string> tokens) {
  const auto expected = chain_tokens(chain);
  if (!std::equal(expected.begin(), expected.end(), tokens.begin(), tokens.end()))
    throw LayoutMismatch("token sequence does not match the chain's serialization");

  SequenceLayout out;
  bool in_answer = false;
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    const std::string& tok = tokens[static_cast<std::size_t>(i)];
    if (auto e = expert_of_decision_token(tok)) {
      out.decision_positions.insert(i);
      out.decision_experts[i] = *e;
      auto& slots = out.observation_positions[i];
      for (int k = 1; k <= chain.slot_count; ++k) slots.push_back(i + k);
      i += chain.slot_count;
    } else if (tok == kAnswerOpen || in_answer) {
      out.answer_positions.insert(i);
      in_answer = tok != kAnswerClose;
    } else {
      out.text_positions.insert(i);
    }
  }
  return out;
}

std::map<ExpertKind, int> query_signature(const ReasoningChain& chain) {
  std::map<ExpertKind, int> out;
  for (const auto& q : chain.spans()) ++out[q.expert];
  return out;
}

}  // namespace percept
