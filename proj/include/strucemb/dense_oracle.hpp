#ifndef STRUCEMB_DENSE_ORACLE_HPP
#define STRUCEMB_DENSE_ORACLE_HPP

// Reference computation for the cached encoders. All blocks go through one
// joint pass without any KV reuse; visibility between blocks comes from an
// explicit block mask and position ids may repeat across blocks. Meant for
// verification, not for production encoding.

#include <span>
#include <vector>

#include "strucemb/encoder.hpp"
#include "strucemb/error.hpp"
#include "strucemb/model.hpp"

namespace strucemb {

/// visible[i][j]: tokens of block i may attend to all tokens of block j.
/// Must be lower-triangular with a true diagonal (causal inside each block).
using BlockMask = std::vector<std::vector<bool>>;

inline void validate_block_mask(const BlockMask& mask, std::size_t n_blocks) {
  if (mask.size() != n_blocks) fail(ErrorCode::invalid_argument, "block mask has wrong number of rows");
  for (std::size_t i = 0; i < n_blocks; ++i) {
    if (mask[i].size() != n_blocks) fail(ErrorCode::invalid_argument, "block mask row has wrong length");
    if (!mask[i][i]) fail(ErrorCode::invalid_argument, "block mask must let each block see itself");
    for (std::size_t j = i + 1; j < n_blocks; ++j)
      if (mask[i][j]) fail(ErrorCode::invalid_argument, "block mask must be lower-triangular");
  }
}

/// Final hidden states for every token of every block, rows in block order.
inline Matrix dense_oracle(const Weights& w, std::span<const TokenBlock> blocks, const BlockMask& mask) {
  validate_block_mask(mask, blocks.size());
  const auto& cfg = w.config;
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.d_head();

  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> block_start;
  std::vector<std::size_t> block_of;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].tokens.size() != blocks[b].positions.size())
      fail(ErrorCode::invalid_argument, "block token and position counts differ");
    block_start.push_back(tokens.size());
    for (std::size_t i = 0; i < blocks[b].tokens.size(); ++i) {
      tokens.push_back(blocks[b].tokens[i]);
      positions.push_back(blocks[b].positions[i]);
      block_of.push_back(b);
    }
  }
  block_start.push_back(tokens.size());
  for (auto p : positions)
    if (p >= cfg.max_pos) fail(ErrorCode::position_overflow, "oracle position id exceeds max_pos");

  // Visible token indices per query token, in block order.
  std::vector<std::vector<std::size_t>> visible(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const std::size_t b = block_of[t];
    for (std::size_t j = 0; j < b; ++j)
      if (mask[b][j])
        for (std::size_t s = block_start[j]; s < block_start[j + 1]; ++s) visible[t].push_back(s);
    for (std::size_t s = block_start[b]; s <= t; ++s) visible[t].push_back(s);
  }

  Matrix x = embed_tokens(w, tokens);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  kernels::HeadPanel panel;
  std::vector<float> scores;
  for (const auto& layer : w.layers) {
    const Matrix xn = kernels::rms_norm_rows(x, layer.attn_norm);
    Matrix q = kernels::matmul(xn, layer.wq);
    Matrix k = kernels::matmul(xn, layer.wk);
    const Matrix v = kernels::matmul(xn, layer.wv);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      kernels::apply_rope(q.row(t), cfg.n_heads, dh, positions[t], cfg.rope_base);
      kernels::apply_rope(k.row(t), cfg.n_heads, dh, positions[t], cfg.rope_base);
    }
    Matrix attn(tokens.size(), d);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * dh;
        panel.reset(dh, visible[t].size());
        for (auto s : visible[t]) panel.push(k.data.data() + s * d + off, v.data.data() + s * d + off);
        kernels::attend(q.row(t).subspan(off, dh), panel, panel.count, scale, scores, attn.row(t).subspan(off, dh));
      }
    }
    kernels::finish_block(layer, attn, x);
  }
  return kernels::rms_norm_rows(x, w.final_norm);
}

/// Mask for parallel context encoding: blocks [ctx_1..ctx_n, target]; each
/// context sees only itself, the target sees everything.
inline BlockMask parallel_context_mask(std::size_t n_contexts) {
  const std::size_t n = n_contexts + 1;
  BlockMask mask(n, std::vector<bool>(n, false));
  for (std::size_t i = 0; i < n; ++i) mask[i][i] = true;
  for (std::size_t j = 0; j < n_contexts; ++j) mask[n_contexts][j] = true;
  return mask;
}

/// Mask for distilled parallel encoding: blocks [ctx_1..ctx_n, instruction,
/// target]. The instruction sees the contexts, the target sees all.
inline BlockMask distill_context_mask(std::size_t n_contexts) {
  const std::size_t n = n_contexts + 2;
  BlockMask mask(n, std::vector<bool>(n, false));
  for (std::size_t i = 0; i < n; ++i) mask[i][i] = true;
  for (std::size_t j = 0; j <= n_contexts; ++j) mask[n_contexts + 1][j] = true;
  for (std::size_t j = 0; j < n_contexts; ++j) mask[n_contexts][j] = true;
  return mask;
}

/// Full causal visibility over all blocks (sequential concatenation).
inline BlockMask sequential_mask(std::size_t n_blocks) {
  BlockMask mask(n_blocks, std::vector<bool>(n_blocks, false));
  for (std::size_t i = 0; i < n_blocks; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask[i][j] = true;
  return mask;
}

}  // namespace strucemb

#endif  // STRUCEMB_DENSE_ORACLE_HPP
