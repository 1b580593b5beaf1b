#ifndef STRUCEMB_INSTRUCTIONS_HPP
#define STRUCEMB_INSTRUCTIONS_HPP

#include <array>
#include <optional>
#include <string_view>
#include <utility>

namespace strucemb {

// Context instructions for distilled parallel encoding, keyed by dataset
// family. Text is used byte-for-byte, trailing space included.
inline constexpr std::array<std::pair<std::string_view, std::string_view>, 7> kInstructionPresets{{
    {"musique",
     "Summarize the above linked Wikipedia paragraphs of the target paragraph into a contextual "
     "representation that captures shared entities, relations, and background knowledge. Use this "
     "distilled context, together with the original paragraphs as supporting evidence, when encoding "
     "the following target paragraph for retrieval: "},
    {"hotpotqa",
     "Summarize the above linked Wikipedia paragraphs of the target paragraph into a contextual "
     "representation that captures shared entities, relations, and background knowledge. Use this "
     "distilled context, together with the original paragraphs as supporting evidence, when encoding "
     "the following target paragraph for retrieval: "},
    {"stackexchange",
     "Summarize the above related StackExchange post titles of the target post into a contextual "
     "representation that captures overlapping topics, recurring tags, and shared problem domains. Use "
     "this distilled context, together with the original posts as supporting evidence, when encoding "
     "the following target post for clustering: "},
    {"citation",
     "Summarize the above citing and cited research papers of the target paper into a contextual "
     "representation that captures shared domains, recurring methods, and notable overlaps. Use this "
     "distilled context, together with the original papers as supporting evidence, when encoding the "
     "following target paper for domain classification: "},
    {"bookhis",
     "Summarize the above co-purchased or co-viewed history books of the target book into a contextual "
     "representation that highlights dominant geographical regions, historical periods, and recurring "
     "themes. Use this distilled context, together with the original books as supporting evidence, when "
     "encoding the following target book for category classification: "},
    {"sportsfit",
     "Summarize the above co-purchased or co-viewed sports & fitness items of the target item into a "
     "contextual representation that captures activity types, training goals, and usage contexts. Use "
     "this distilled context, together with the original items as supporting evidence, when encoding "
     "the following target item for category classification: "},
    {"stark",
     "Summarize the above co-purchased or co-viewed products, brands, colors, and categories of the "
     "target product into a contextual representation that captures complementary functions, styles, "
     "and usage contexts. Use this distilled context, together with the original attributes as "
     "supporting evidence, when encoding the following target product for recommendation: "},
}};

inline std::optional<std::string_view> instruction_preset(std::string_view name) {
  for (const auto& [key, text] : kInstructionPresets)
    if (key == name) return text;
  return std::nullopt;
}

/// A preset name resolves to its text; anything else is taken literally.
inline std::string_view resolve_instruction(std::string_view name_or_text) {
  if (auto preset = instruction_preset(name_or_text)) return *preset;
  return name_or_text;
}

}  // namespace strucemb

#endif  // STRUCEMB_INSTRUCTIONS_HPP
