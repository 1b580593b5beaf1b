#ifndef STRUCEMB_SYNTHETIC_HPP
#define STRUCEMB_SYNTHETIC_HPP

// Seeded synthetic texts and tasks for benchmarks and tests.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "strucemb/rng.hpp"

namespace strucemb::synthetic {

/// Random space-separated words over `alphabet`, exactly `bytes` long.
inline std::string random_text(Rng& rng, std::size_t bytes, std::string_view alphabet = "abcdefghijklmnopqrstuvwxyz") {
  std::string out;
  out.reserve(bytes);
  std::size_t word_left = 2 + rng.below(7);
  while (out.size() < bytes) {
    if (word_left == 0 && !out.empty() && out.back() != ' ' && out.size() + 1 < bytes) {
      out.push_back(' ');
      word_left = 2 + rng.below(7);
      continue;
    }
    out.push_back(alphabet[rng.below(alphabet.size())]);
    if (word_left > 0) --word_left;
  }
  return out;
}

/// `phrase` repeated (space separated) and cut to exactly `bytes`.
inline std::string repeat_to(std::string_view phrase, std::size_t bytes) {
  std::string out;
  while (out.size() < bytes) {
    if (!out.empty()) out.push_back(' ');
    out += phrase;
  }
  out.resize(bytes);
  return out;
}

/// Retrieval fixture where only a related segment carries the query's signal.
/// Each target's own text is filler; exactly one of its contexts (at a random
/// slot) is the query's key phrase repeated to full length.
struct PlantedRetrieval {
  struct Item {
    std::string query_text;
    std::string target_text;
    std::vector<std::string> contexts;
    std::size_t planted_slot = 0;
  };
  std::vector<Item> items;  // query i is relevant to target i only
};

/// `segment_tokens` counts the EOS token, so texts carry segment_tokens - 1 bytes.
inline PlantedRetrieval planted_retrieval(std::size_t n_queries, std::size_t n_contexts, std::size_t segment_tokens,
                                          std::uint64_t seed, std::size_t key_bytes = 40) {
  Rng rng(seed);
  constexpr std::string_view kKeyAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  const std::size_t bytes = segment_tokens > 1 ? segment_tokens - 1 : 0;
  PlantedRetrieval out;
  for (std::size_t q = 0; q < n_queries; ++q) {
    PlantedRetrieval::Item item;
    const std::string key = random_text(rng, key_bytes, kKeyAlphabet);
    item.query_text = key;
    item.target_text = random_text(rng, bytes);
    item.planted_slot = rng.below(n_contexts);
    for (std::size_t j = 0; j < n_contexts; ++j)
      item.contexts.push_back(j == item.planted_slot ? repeat_to(key, bytes) : random_text(rng, bytes));
    out.items.push_back(std::move(item));
  }
  return out;
}

}  // namespace strucemb::synthetic

#endif  // STRUCEMB_SYNTHETIC_HPP
