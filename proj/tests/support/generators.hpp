#pragma once

// Random generators shared by the property tests and the acceptance suite.

#include <string>
#include <string_view>
#include <vector>

#include "percept/chain.hpp"
#include "percept/rng.hpp"

namespace percept::testing {

inline std::string random_words(Rng& rng, int max_words) {
  static const std::vector<std::string> pool = {"look", "at", "the", "red", "object", "it", "is", "closer", "3", "yes"};
  std::string out;
  const int n = rng.uniform_int(0, max_words);
  for (int i = 0; i < n; ++i) {
    if (!out.empty()) out += ' ';
    out += pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
  }
  return out;
}

inline ExpertKind random_expert(Rng& rng) { return static_cast<ExpertKind>(rng.uniform_int(0, 3)); }

// A random canonical chain: optional context spans, optional think block with
// interleaved words and spans, optional answer.
inline ReasoningChain random_chain(Rng& rng, int slot_count) {
  ChainBuilder b(slot_count);
  const int context = rng.uniform_int(0, 3);
  for (int i = 0; i < context; ++i) b.context_query(random_expert(rng));
  if (rng.bernoulli(0.8)) {
    b.open_think();
    const int parts = rng.uniform_int(0, 6);
    for (int i = 0; i < parts; ++i) {
      if (rng.bernoulli(0.5))
        b.query(random_expert(rng));
      else
        b.think(random_words(rng, 4));
    }
    b.close_think();
  }
  if (rng.bernoulli(0.8)) b.answer(random_words(rng, 3));
  return b.build();
}

inline std::string pads(std::string_view pad, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) out += " " + std::string(pad);
  return out;
}

// Texts that must fail to parse with N = 4.
inline std::vector<std::string> malformed_chain_fixtures() {
  return {
      "<think> <query_seg> <depth_pad> <depth_pad> <depth_pad> <depth_pad> </think>",
      "<think> <query_seg> <seg_pad> <seg_pad> <seg_pad> </think>",
      "<think> <query_seg>" + pads("<seg_pad>", 5) + " </think>",
      "<think> a",
      "<answer> a",
      "</think>",
      "<think> a </think> <think> b </think>",
      "<answer> a </answer> <answer> b </answer>",
      "<answer> <query_seg>" + pads("<seg_pad>", 4) + " </answer>",
      "<think> <seg_pad> </think>",
      "<think> <query_color>" + pads("<seg_pad>", 4) + " </think>",
      "hello <answer> x </answer>",
      "<answer> a </answer> trailing",
      "<think> a </think> <query_seg>" + pads("<seg_pad>", 4),
      "<think> unterminated <tag",
      "<think> <query_seg>",
  };
}

}  // namespace percept::testing
