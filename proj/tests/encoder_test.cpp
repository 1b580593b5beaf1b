#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "helpers.hpp"
#include "strucemb/dense_oracle.hpp"
#include "strucemb/encoder.hpp"
#include "strucemb/instructions.hpp"
#include "strucemb/rng.hpp"
#include "strucemb/synthetic.hpp"

using namespace strucemb;
using testing_helpers::max_abs_diff;
using testing_helpers::small_config;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::io;
}

std::vector<const KVCacheEntry*> refs(const std::vector<KVCacheEntry>& caches) {
  std::vector<const KVCacheEntry*> out;
  for (const auto& c : caches) out.push_back(&c);
  return out;
}

}  // namespace

class EncoderTest : public ::testing::Test {
 protected:
  Weights w = init_weights(small_config(21));
  Encoder enc{w};
  std::vector<std::string> contexts{"the first linked page", "a second neighbour", "third one here",
                                    "and a fourth related text"};
  std::string target = "target paragraph text";
  std::size_t l_ctx = 32;

  std::vector<KVCacheEntry> caches(std::size_t n) const {
    std::vector<KVCacheEntry> out;
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(enc.build_context_cache("c" + std::to_string(i), contexts[i], l_ctx));
    return out;
  }
};

TEST_F(EncoderTest, IndividualIsUnitAndDeterministic) {
  const auto a = enc.individual(target);
  const auto b = enc.individual(target);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.strategy, "individual");
  EXPECT_NEAR(l2_norm(a.values), 1.0, 1e-6);
  EXPECT_GT(cosine_distance(a.values, enc.individual("something else").values), 1e-3);
}

TEST_F(EncoderTest, SeqStreamAndTruncation) {
  const auto trace = enc.seq_trace(std::span(contexts).first(2), target);
  const std::size_t expected = tokenize(contexts[0]).size() + tokenize(contexts[1]).size() + 2 + tokenize(target).size();
  EXPECT_EQ(trace.total_tokens, expected);
  EXPECT_EQ(trace.max_position, expected - 1);

  // drop-head keeps the whole target; the result equals encoding just the kept tail
  const std::size_t budget = tokenize(target).size() + 5;
  const auto dropped = enc.seq_trace(contexts, target, SeqOptions{budget, Truncation::drop_head, true});
  EXPECT_EQ(dropped.total_tokens, budget);
  std::vector<TokenId> ctx_stream;
  for (const auto& c : contexts) {
    auto t = tokenize(c);
    ctx_stream.insert(ctx_stream.end(), t.begin(), t.end());
    ctx_stream.push_back(kSeparatorToken);
  }
  TokenBlock manual{{ctx_stream.end() - 5, ctx_stream.end()}, {}};
  const auto tt = tokenize(target);
  manual.tokens.insert(manual.tokens.end(), tt.begin(), tt.end());
  manual.positions = position_range(0, manual.tokens.size());
  EXPECT_EQ(enc.blocks_trace(std::span(&manual, 1)).embedding.values, dropped.embedding.values);

  // faithful-tail keeps the head and cuts the end, so it never ends at the target's EOS
  const auto tail = enc.seq_trace(contexts, target, SeqOptions{20, Truncation::faithful_tail, true});
  EXPECT_EQ(tail.total_tokens, 20u);

  EXPECT_EQ(code_of([&] { enc.seq(contexts, target, SeqOptions{5, Truncation::drop_head, true}); }),
            ErrorCode::position_overflow);
  EXPECT_EQ(code_of([&] { enc.seq(contexts, target, SeqOptions{9999, Truncation::drop_head, true}); }),
            ErrorCode::position_overflow);
}

TEST_F(EncoderTest, SeqIsOrderSensitive) {
  auto reversed = contexts;
  std::reverse(reversed.begin(), reversed.end());
  EXPECT_GT(cosine_distance(enc.seq(contexts, target).values, enc.seq(reversed, target).values), 1e-4);
}

TEST_F(EncoderTest, CacheEntryContents) {
  const auto e = enc.build_context_cache("x", contexts[0], l_ctx);
  EXPECT_EQ(e.token_count, tokenize(contexts[0]).size());
  EXPECT_EQ(e.pe_span, l_ctx);
  EXPECT_EQ(e.fingerprint, enc.fingerprint());
  EXPECT_EQ(e.kv.positions.front(), 0u);
  const auto long_entry = enc.build_context_cache("y", std::string(100, 'z'), l_ctx);
  EXPECT_EQ(long_entry.token_count, l_ctx);
  EXPECT_EQ(long_entry.kv.positions.back(), l_ctx - 1);
}

TEST_F(EncoderTest, ParMatchesDenseOracle) {
  for (std::size_t n : {1ul, 2ul, 4ul}) {
    const auto cs = caches(n);
    const auto trace = enc.par_trace(refs(cs), target, l_ctx);
    std::vector<TokenBlock> blocks;
    for (std::size_t i = 0; i < n; ++i) {
      const auto t = tokenize(contexts[i]);
      blocks.push_back({t, position_range(0, t.size())});
    }
    const auto tt = tokenize(target);
    blocks.push_back({tt, position_range(l_ctx, tt.size())});
    const Matrix dense = dense_oracle(w, blocks, parallel_context_mask(n));
    Matrix tail(tt.size(), dense.cols);
    std::copy(dense.data.end() - static_cast<std::ptrdiff_t>(tail.data.size()), dense.data.end(), tail.data.begin());
    EXPECT_LT(max_abs_diff(trace.target_hidden, tail), 1e-5) << "n = " << n;
  }
}

TEST_F(EncoderTest, ParDistillMatchesDenseOracle) {
  const auto cs = caches(3);
  const std::string instruction(instruction_preset("musique").value());
  const auto trace = enc.par_distill_trace(refs(cs), instruction, target, l_ctx);
  std::vector<TokenBlock> blocks;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto t = tokenize(contexts[i]);
    blocks.push_back({t, position_range(0, t.size())});
  }
  const auto it = tokenize(instruction);
  blocks.push_back({it, position_range(l_ctx, it.size())});
  const auto tt = tokenize(target);
  blocks.push_back({tt, position_range(l_ctx + it.size(), tt.size())});
  const Matrix dense = dense_oracle(w, blocks, distill_context_mask(3));
  Matrix tail(tt.size(), dense.cols);
  std::copy(dense.data.end() - static_cast<std::ptrdiff_t>(tail.data.size()), dense.data.end(), tail.data.begin());
  EXPECT_LT(max_abs_diff(trace.target_hidden, tail), 1e-5);
  EXPECT_EQ(trace.max_position, l_ctx + it.size() + tt.size() - 1);
}

TEST_F(EncoderTest, DenseOracleSequentialMaskEqualsOneStream) {
  std::vector<TokenBlock> blocks;
  std::size_t start = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto t = tokenize(contexts[i]);
    blocks.push_back({t, position_range(start, t.size())});
    start += t.size();
  }
  const Matrix dense = dense_oracle(w, blocks, sequential_mask(3));
  std::vector<TokenId> all;
  for (const auto& b : blocks) all.insert(all.end(), b.tokens.begin(), b.tokens.end());
  const auto full = forward(w, all, position_range(0, all.size())).hidden;
  EXPECT_LT(max_abs_diff(dense, full), 1e-5);
}

TEST(DenseOracle, MaskValidation) {
  BlockMask upper{{true, true}, {false, true}};
  EXPECT_THROW(validate_block_mask(upper, 2), Error);
  BlockMask blind{{false, false}, {true, true}};
  EXPECT_THROW(validate_block_mask(blind, 2), Error);
  EXPECT_THROW(validate_block_mask(parallel_context_mask(2), 2), Error);
  EXPECT_NO_THROW(validate_block_mask(distill_context_mask(2), 4));
}

TEST_F(EncoderTest, ParOrderInvariance) {
  auto cs = caches(4);
  auto r = refs(cs);
  const auto base = enc.par(r, target, l_ctx).values;
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    rng.shuffle(r.begin(), r.end());
    EXPECT_EQ(enc.par(r, target, l_ctx).values, base);
    EXPECT_EQ(enc.par_distill(r, "summarize: ", target, l_ctx).values,
              enc.par_distill(refs(cs), "summarize: ", target, l_ctx).values);
  }
}

TEST_F(EncoderTest, SingleContextCollapse) {
  // One cache at [0, t_v) and the target at [l_ctx, ...) is exactly the
  // no-separator sequential stream with the same gapped positions.
  const auto cs = caches(1);
  const auto par = enc.par(refs(cs), target, l_ctx);
  const auto ctx = tokenize(contexts[0]);
  const auto tt = tokenize(target);
  std::vector<TokenBlock> blocks{{ctx, position_range(0, ctx.size())}, {tt, position_range(l_ctx, tt.size())}};
  const auto seq = enc.blocks_trace(blocks).embedding;
  EXPECT_LT(cosine_distance(par.values, seq.values), 1e-5);
}

TEST_F(EncoderTest, EmptyContextReduction) {
  const auto ind = enc.individual(target).values;
  EXPECT_LT(cosine_distance(enc.par({}, target, l_ctx).values, ind), 1e-5);
  EXPECT_EQ(enc.seq({}, target).values, ind);
  auto text_of = [&](const std::string&) -> const std::string& { return target; };
  for (auto s : {Strategy::individual, Strategy::seq, Strategy::par, Strategy::par_distill}) {
    EncodePlan plan;
    plan.strategy = s;
    plan.target_id = "t";
    plan.l_ctx = l_ctx;
    plan.instruction = "summarize: ";
    EXPECT_LT(cosine_distance(encode(enc, plan, text_of).values, ind), 1e-5) << to_string(s);
  }
}

TEST_F(EncoderTest, PositionBudget) {
  std::vector<std::string> many(16, "some related segment with a few words");
  std::vector<KVCacheEntry> cs;
  for (std::size_t i = 0; i < many.size(); ++i)
    cs.push_back(enc.build_context_cache("m" + std::to_string(i), many[i], l_ctx));
  for (std::size_t n : {1ul, 4ul, 16ul}) {
    std::vector<const KVCacheEntry*> r;
    for (std::size_t i = 0; i < n; ++i) r.push_back(&cs[i]);
    const auto trace = enc.par_trace(r, target, l_ctx);
    EXPECT_EQ(trace.max_position, l_ctx + tokenize(target).size() - 1);
  }
}

TEST_F(EncoderTest, ParTruncatesLongTargetToSpan) {
  const std::string long_target(200, 'q');
  const auto trace = enc.par_trace({}, long_target, l_ctx);
  EXPECT_EQ(trace.max_position, 2 * l_ctx - 1);
}

TEST_F(EncoderTest, SpanAndInstructionPreconditions) {
  const auto cs = caches(2);
  EXPECT_EQ(code_of([&] { enc.par(refs(cs), target, 0); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { enc.par(refs(cs), target, 300); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { enc.par(refs(cs), target, 16); }), ErrorCode::cache_mismatch);
  EXPECT_EQ(code_of([&] { enc.par_distill(refs(cs), "", target, l_ctx); }), ErrorCode::invalid_argument);
  const std::string huge(600, 'i');
  EXPECT_EQ(code_of([&] { enc.par_distill(refs(cs), huge, target, l_ctx); }), ErrorCode::position_overflow);

  const auto other_w = init_weights(small_config(99));
  const Encoder other(other_w);
  const auto foreign = other.build_context_cache("f", "foreign", l_ctx);
  std::vector<const KVCacheEntry*> mixed{&foreign};
  EXPECT_EQ(code_of([&] { enc.par(mixed, target, l_ctx); }), ErrorCode::cache_mismatch);
}

TEST_F(EncoderTest, CacheStoreIsPureAndWorkerIndependent) {
  std::vector<std::pair<std::string, std::string>> segs;
  for (std::size_t i = 0; i < contexts.size(); ++i) segs.emplace_back("s" + std::to_string(i), contexts[i]);
  const auto one = enc.build_cache_store(segs, l_ctx, 1);
  const auto four = enc.build_cache_store(segs, l_ctx, 4);
  EXPECT_TRUE(one == four);
  EXPECT_EQ(one.size(), 4u);
  // Using the store leaves it untouched.
  const auto before = one;
  std::vector<std::string> ids{"s0", "s2"};
  (void)enc.par(one.lookup(ids), target, l_ctx);
  EXPECT_TRUE(one == before);
  EXPECT_EQ(code_of([&] { one.at("missing"); }), ErrorCode::unknown_id);

  CacheStore wrong("0000000000000000", l_ctx);
  EXPECT_EQ(code_of([&] { wrong.insert(one.at("s0")); }), ErrorCode::cache_mismatch);
}

TEST_F(EncoderTest, CacheStoreRoundTrip) {
  testing_helpers::TempDir dir("store");
  std::vector<std::pair<std::string, std::string>> segs{{"a", contexts[0]}, {"b", contexts[1]}};
  const auto store = enc.build_cache_store(segs, l_ctx);
  save_cache_store(store, dir.path());
  const auto back = load_cache_store(dir.path(), 2);
  EXPECT_TRUE(store == back);
  EXPECT_EQ(code_of([&] { load_cache_store(dir.path(), 3); }), ErrorCode::layer_mismatch);
}

TEST_F(EncoderTest, EncodePlanUsesStoreOrBuildsCaches) {
  std::map<std::string, std::string> texts{{"t", target}, {"a", contexts[0]}, {"b", contexts[1]}};
  auto text_of = [&](const std::string& id) -> const std::string& { return texts.at(id); };
  std::vector<std::pair<std::string, std::string>> segs{{"a", contexts[0]}, {"b", contexts[1]}};
  const auto store = enc.build_cache_store(segs, l_ctx);
  EncodePlan plan;
  plan.strategy = Strategy::par;
  plan.target_id = "t";
  plan.related = {"b", "a"};
  plan.l_ctx = l_ctx;
  EXPECT_EQ(encode(enc, plan, text_of, &store).values, encode(enc, plan, text_of).values);
  plan.strategy = Strategy::seq;
  EXPECT_EQ(encode(enc, plan, text_of).values, enc.seq(std::vector<std::string>{contexts[1], contexts[0]}, target).values);
}

TEST(Instructions, PresetsResolve) {
  for (const char* name : {"musique", "hotpotqa", "citation", "bookhis", "sportsfit", "stark", "stackexchange"}) {
    const auto p = instruction_preset(name);
    ASSERT_TRUE(p.has_value()) << name;
    EXPECT_TRUE(p->ends_with(": "));
  }
  EXPECT_EQ(instruction_preset("musique"), instruction_preset("hotpotqa"));
  EXPECT_EQ(resolve_instruction("custom text: "), "custom text: ");
  EXPECT_NE(resolve_instruction("citation").find("paper"), std::string::npos);
}

TEST(Strategy, ParseRoundTrip) {
  for (auto s : {Strategy::individual, Strategy::seq, Strategy::par, Strategy::par_distill})
    EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_EQ(parse_truncation("faithful-tail"), Truncation::faithful_tail);
  EXPECT_THROW(parse_strategy("nope"), Error);
  EXPECT_EQ(truncate_tail(tokenize("abcdef"), 3), (std::vector<TokenId>{'a', 'b', kEosToken}));
}
