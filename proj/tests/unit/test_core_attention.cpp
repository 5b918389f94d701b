#include <doctest.h>

#include <cmath>
#include <set>

#include "corelab/core_attention.hpp"
#include "corelab/errors.hpp"
#include "../support/oracles.hpp"

using namespace corelab;
using namespace corelab::core;

namespace {

CoReConfig config_for(const oracle::CoreInstance& in) {
  CoReConfig c;
  c.n = in.n;
  c.languages = in.languages;
  c.anchor = in.anchor;
  c.pool_size = in.pool_size;
  c.bridge_mode = in.all_languages ? BridgeMode::all_languages : BridgeMode::own_plus_anchor;
  c.composition = in.residual ? Composition::residual_add : Composition::replace;
  return c;
}

CoReParams params_for(const oracle::CoreInstance& in) {
  CoReParams p = CoReParams::identity(in.z.cols());
  p.w_q.value = in.w_q;
  p.w_k.value = in.w_k;
  p.w_v.value = in.w_v;
  return p;
}

std::set<TokenId> selected_set(const PositionPools& per_pos) {
  std::set<TokenId> s;
  for (const auto& [l, ids] : per_pos) s.insert(ids.begin(), ids.end());
  return s;
}

}  // namespace

TEST_CASE("project") {
  Rng rng(1);
  const Tensor z = oracle::random_tensor(rng, 2, 4), b = oracle::random_tensor(rng, 5, 4);
  const CoReParams id = CoReParams::identity(4);
  const Projection p = project(z, b, id);
  CHECK(p.q == z);
  CHECK(p.k == b);
  CHECK(p.v == b);
  const Projection zero = project(Tensor({2, 4}), b, id);
  for (double v : zero.q.data()) CHECK(v == 0.0);

  CoReParams r = id;
  r.w_q.value = oracle::random_tensor(rng, 4, 4);
  r.w_k.value = oracle::random_tensor(rng, 4, 4);
  r.w_v.value = oracle::random_tensor(rng, 4, 4);
  const Projection pr = project(z, b, r);
  CHECK(max_abs_diff(pr.q, oracle::matmul(z, r.w_q.value)) < 1e-12);
  CHECK(max_abs_diff(pr.k, oracle::matmul(b, r.w_k.value)) < 1e-12);
  CHECK(max_abs_diff(pr.v, oracle::matmul(b, r.w_v.value)) < 1e-12);
  r.w_q.value = Tensor({4, 3});
  CHECK_THROWS_AS(project(z, b, r), ConfigError);
}

TEST_CASE("compatibility") {
  const Tensor q({1, 4}, {1, 2, 3, 4});
  const Tensor c = compatibility(q, q, 4);
  CHECK(c[0] == doctest::Approx(30.0 / 2.0).epsilon(1e-15));
  CHECK(compatibility(Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0, 1}), 2)[0] == 0.0);
  const Tensor a({2, 4}, {1, 2, 0, -1, 3, 0, 1, 1});
  const Tensor k({2, 4}, {2, 1, 1, 0, -1, 0, 2, 5});
  const Tensor ck = compatibility(a, k, 4);
  // Raw dots: [4, -6; 7, 4], halved.
  CHECK(ck(0, 0) == 2.0);
  CHECK(ck(0, 1) == -3.0);
  CHECK(ck(1, 0) == 3.5);
  CHECK(ck(1, 1) == 2.0);
}

TEST_CASE("candidate_pool") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    oracle::CoreInstance in = oracle::random_instance(rng, 1, 16, 1, 1, 0, false);
    const auto asset = oracle::asset_for(in);
    const auto& ids = asset.languages.tokens_of("L0");
    CHECK(candidate_pool(in.bank, asset.languages, "L0", 0, in.z.row(0)) == ids);
    auto full = candidate_pool(in.bank, asset.languages, "L0", ids.size(), in.z.row(0));
    std::sort(full.begin(), full.end());
    CHECK(full == ids);
    std::vector<std::pair<double, TokenId>> scored;
    for (TokenId t : ids) scored.emplace_back(oracle::cosine(in.z.row(0), in.bank.row(static_cast<std::size_t>(t))), t);
    auto expect = oracle::ranked(scored);
    expect.resize(3);
    CHECK(candidate_pool(in.bank, asset.languages, "L0", 3, in.z.row(0)) == expect);
  }
  SUBCASE("ties and zero vectors rank by ascending id") {
    oracle::CoreInstance in = oracle::random_instance(rng, 1, 12, 1, 1, 0, false);
    in.bank = Tensor({12, in.z.cols()});
    const auto asset = oracle::asset_for(in);
    const auto pool = candidate_pool(in.bank, asset.languages, "L0", 3, in.z.row(0));
    const auto& ids = asset.languages.tokens_of("L0");
    CHECK(pool == std::vector<TokenId>(ids.begin(), ids.begin() + 3));
  }
}

TEST_CASE("select_proximal") {
  SUBCASE("saturation and argmax") {
    const Tensor c({1, 4}, {0.1, 0.9, 0.3, 0.2});
    const std::vector<PositionPools> pools{{{"L0", {0, 1, 2, 3}}}};
    CHECK(select_proximal(c, pools, 4).selected[0][0].second == std::vector<TokenId>{0, 1, 2, 3});
    CHECK(select_proximal(c, pools, 9).selected[0][0].second == std::vector<TokenId>{0, 1, 2, 3});
    CHECK(select_proximal(c, pools, 1).selected[0][0].second == std::vector<TokenId>{1});
  }
  SUBCASE("ties prefer smaller ids") {
    const Tensor c({1, 4}, {0.5, 0.5, 0.5, 0.1});
    const std::vector<PositionPools> pools{{{"L0", {3, 2, 1, 0}}}};
    CHECK(select_proximal(c, pools, 2).selected[0][0].second == std::vector<TokenId>{0, 1});
  }
  SUBCASE("empty pool") {
    const std::vector<PositionPools> pools{{{"L0", {}}}};
    CHECK_THROWS_AS(select_proximal(Tensor({1, 2}), pools, 1), ConfigError);
  }
  SUBCASE("matches brute force on random 4-language instances") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
      const bool all = trial % 2 == 0;
      oracle::CoreInstance in = oracle::random_instance(rng, 5, 32, 4, 3, trial % 3 == 0 ? 0 : 5, all);
      const auto asset = oracle::asset_for(in);
      const auto cfg = config_for(in);
      const auto res = apply(in.z, in.tokens, in.bank, params_for(in), asset, cfg);
      const auto ref = oracle::core_pipeline(in);
      for (std::size_t i = 0; i < in.tokens.size(); ++i)
        for (std::size_t j = 0; j < 32; ++j) CHECK(res.mask.kept(i, j) == ref.keep[i][j]);
    }
  }
}

TEST_CASE("build_mask") {
  ProximalSelection sel;
  sel.selected = {{{"L0", {1, 2}}, {"L1", {2, 4}}}, {{"L0", {0}}}, {{"", {5}}}};
  const AdditiveMask m = build_mask(sel, 6);
  const std::vector<std::set<std::size_t>> expect{{1, 2, 4}, {0}, {5}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(m.kept(i, j) == (expect[i].count(j) == 1));
  const AdditiveMask strict = build_mask(sel, 6, true);
  CHECK(strict.kept(0, 2));
  CHECK_FALSE(strict.kept(0, 1));
  CHECK(strict.kept(1, 0));

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    oracle::CoreInstance in = oracle::random_instance(rng, 6, 24, 3, 2, 0, true);
    const auto res = apply(in.z, in.tokens, in.bank, params_for(in), oracle::asset_for(in), config_for(in));
    for (std::size_t i = 0; i < 6; ++i) {
      std::size_t kept = 0;
      for (std::size_t j = 0; j < 24; ++j) kept += res.mask.kept(i, j);
      CHECK(kept >= 1);
      CHECK(kept <= in.n * in.languages.size());
    }
  }
}

TEST_CASE("strict intersection over disjoint languages leaves a row empty") {
  Rng rng(5);
  oracle::CoreInstance in = oracle::random_instance(rng, 1, 12, 2, 1, 0, true);
  for (auto& m : in.member)
    if (m.size() > 1) m.erase(m.begin());
  in.tokens = {static_cast<TokenId>(Vocabulary::specials().size())};
  CoReConfig cfg = config_for(in);
  cfg.eq1_strict_intersection = true;
  CHECK_THROWS_AS(apply(in.z, in.tokens, in.bank, params_for(in), oracle::asset_for(in), cfg), InvariantViolation);
}

TEST_CASE("compose") {
  const Tensor v({3, 2}, {1, 2, 3, 4, 5, 6});
  AdditiveMask single(1, 3, false);
  single.set_kept(0, 1, true);
  const Tensor one = compose(Tensor({1, 3}, {9, 0.1, -2}), single, v);
  CHECK(one[0] == 3.0);
  CHECK(one[1] == 4.0);
  AdditiveMask pair(1, 3, false);
  pair.set_kept(0, 0, true);
  pair.set_kept(0, 2, true);
  const Tensor mid = compose(Tensor({1, 3}, {0.7, 5, 0.7}), pair, v);
  CHECK(mid[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(mid[1] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("apply matches the end-to-end oracle") {
  Rng rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    oracle::CoreInstance in =
        oracle::random_instance(rng, 1 + rng.below(6), 20 + rng.below(20), 1 + rng.below(4), 1 + rng.below(4),
                                rng.below(2) ? 0 : 6, rng.below(2) == 1);
    const auto res = apply(in.z, in.tokens, in.bank, params_for(in), oracle::asset_for(in), config_for(in));
    const auto ref = oracle::core_pipeline(in);
    CHECK(max_abs_diff(res.c, ref.c) < 1e-12);
    CHECK(max_abs_diff(res.z_out, ref.z_out) < 1e-10);
  }
}

TEST_CASE("outputs lie in the convex hull of selected value rows") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    oracle::CoreInstance in = oracle::random_instance(rng, 4, 30, 3, 3, 0, false);
    in.residual = false;
    const auto res = apply(in.z, in.tokens, in.bank, params_for(in), oracle::asset_for(in), config_for(in));
    const Tensor v = oracle::matmul(in.bank, in.w_v);
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> row(30);
      std::vector<bool> keep(30);
      for (std::size_t j = 0; j < 30; ++j) {
        row[j] = res.c(i, j);
        keep[j] = res.mask.kept(i, j);
      }
      const auto w = oracle::softmax(row, keep);
      double s = 0.0;
      for (std::size_t j = 0; j < 30; ++j) {
        CHECK(w[j] >= 0.0);
        if (!keep[j]) CHECK(w[j] == 0.0);
        s += w[j];
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
      for (std::size_t t = 0; t < v.cols(); ++t) {
        double x = 0.0;
        for (std::size_t j = 0; j < 30; ++j) x += w[j] * v(j, t);
        CHECK(std::abs(x - res.z_out(i, t)) < 1e-9);
      }
    }
  }
}

TEST_CASE("selection is permutation equivariant") {
  Rng rng(8);
  const std::size_t reserved = Vocabulary::specials().size();
  for (int trial = 0; trial < 15; ++trial) {
    const std::size_t m = 28;
    oracle::CoreInstance in = oracle::random_instance(rng, 5, m, 3, 2, trial % 2 ? 4 : 0, trial % 3 == 0);
    std::vector<std::size_t> perm(m);
    for (std::size_t j = 0; j < m; ++j) perm[j] = j;
    std::vector<std::size_t> tail(perm.begin() + static_cast<long>(reserved), perm.end());
    rng.shuffle(tail);
    std::copy(tail.begin(), tail.end(), perm.begin() + static_cast<long>(reserved));

    oracle::CoreInstance pi = in;
    for (std::size_t j = 0; j < m; ++j) {
      pi.member[perm[j]] = in.member[j];
      for (std::size_t t = 0; t < in.bank.cols(); ++t) pi.bank(perm[j], t) = in.bank(j, t);
    }
    for (auto& t : pi.tokens) t = static_cast<TokenId>(perm[static_cast<std::size_t>(t)]);

    const auto a = apply(in.z, in.tokens, in.bank, params_for(in), oracle::asset_for(in), config_for(in));
    const auto b = apply(pi.z, pi.tokens, pi.bank, params_for(pi), oracle::asset_for(pi), config_for(pi));
    for (std::size_t i = 0; i < 5; ++i) {
      std::set<TokenId> mapped;
      for (TokenId t : selected_set(a.selection.selected[i])) mapped.insert(static_cast<TokenId>(perm[static_cast<std::size_t>(t)]));
      CHECK(mapped == selected_set(b.selection.selected[i]));
    }
    CHECK(max_abs_diff(a.z_out, b.z_out) < 1e-10);
  }
}

TEST_CASE("identity initialization") {
  Rng rng(9);
  oracle::CoreInstance in = oracle::random_instance(rng, 4, 20, 2, 2, 0, false);
  const std::size_t d = in.z.cols();
  const CoReParams id = CoReParams::identity(d);
  const auto res = apply(in.z, in.tokens, in.bank, id, oracle::asset_for(in), config_for(in));
  const Tensor expect = oracle::matmul(in.z, kernels::transpose(in.bank));
  for (std::size_t k = 0; k < expect.size(); ++k) CHECK(std::abs(res.c[k] - expect[k] / std::sqrt(double(d))) < 1e-12);

  SUBCASE("self-selection returns the input") {
    // Orthonormal-ish bank where each z_i is its own token's row.
    oracle::CoreInstance s = in;
    const std::size_t m = 10;
    s.member.assign(m, {});
    const std::size_t reserved = Vocabulary::specials().size();
    for (std::size_t j = reserved; j < m; ++j) s.member[j].insert("L0");
    s.languages = {"L0"};
    s.anchor = "L0";
    s.bank = Tensor({m, m});
    for (std::size_t j = 0; j < m; ++j) s.bank(j, j) = 1.0;
    s.tokens = {6, 8, 9};
    s.z = kernels::embedding_lookup(s.bank, s.tokens);
    s.n = 1;
    s.residual = false;
    const auto r = apply(s.z, s.tokens, s.bank, CoReParams::identity(m), oracle::asset_for(s), config_for(s));
    CHECK(r.z_out == s.z);
  }
  SUBCASE("zero bank under residual_add returns the input") {
    oracle::CoreInstance s = in;
    s.bank = Tensor({in.bank.rows(), d});
    s.residual = true;
    const auto r = apply(s.z, s.tokens, s.bank, id, oracle::asset_for(s), config_for(s));
    CHECK(r.z_out == s.z);
  }
}

TEST_CASE("reserved tokens attend only to themselves") {
  Rng rng(10);
  oracle::CoreInstance in = oracle::random_instance(rng, 2, 16, 2, 3, 0, true);
  in.tokens = {Vocabulary::kBos, Vocabulary::kSep};
  const auto res = apply(in.z, in.tokens, in.bank, params_for(in), oracle::asset_for(in), config_for(in));
  CHECK(res.selection.selected[0] == PositionPools{{"", {Vocabulary::kBos}}});
  const Tensor v = oracle::matmul(in.bank, in.w_v);
  for (std::size_t t = 0; t < v.cols(); ++t) {
    const double expect = v(static_cast<std::size_t>(Vocabulary::kSep), t) + (in.residual ? in.z(1, t) : 0.0);
    CHECK(std::abs(res.z_out(1, t) - expect) < 1e-12);
  }
}

TEST_CASE("aligned_query pools around the parallel token") {
  // Two languages with a parallel pair far apart in the bank.
  std::vector<std::string> toks = Vocabulary::specials();
  for (const char* w : {"a0", "a1", "b0", "b1"}) toks.emplace_back(w);
  VocabularyAsset asset;
  asset.vocab = Vocabulary(toks);
  asset.languages.add("A", 6);
  asset.languages.add("A", 7);
  asset.languages.add("B", 8);
  asset.languages.add("B", 9);
  asset.languages.finalize(asset.vocab);
  asset.alignment.add("A", "B", 6, 9);
  asset.alignment.add("A", "B", 7, 8);
  Tensor bank({10, 2});
  bank(6, 0) = 1.0;
  bank(7, 1) = 1.0;
  bank(8, 0) = 1.0;
  bank(9, 1) = 1.0;
  CoReConfig cfg;
  cfg.n = 1;
  cfg.languages = {"A", "B"};
  cfg.anchor = "A";
  cfg.pool_size = 1;
  cfg.bridge_mode = BridgeMode::all_languages;
  const std::vector<double> q{1.0, 0.0};
  cfg.pool_mode = PoolMode::knn;
  CHECK(position_pools(6, q, bank, asset, cfg)[1].second == std::vector<TokenId>{8});
  cfg.pool_mode = PoolMode::aligned_query;
  CHECK(position_pools(6, q, bank, asset, cfg)[1].second == std::vector<TokenId>{9});
  CHECK(position_pools(6, q, bank, asset, cfg)[0].second == std::vector<TokenId>{6});

  SUBCASE("aligned_class pools are the equivalence class") {
    cfg.pool_mode = PoolMode::aligned_class;
    cfg.n = 2;
    cfg.pool_size = 2;
    const auto pools = position_pools(7, q, bank, asset, cfg);
    REQUIRE(pools.size() == 2);
    CHECK(pools[0].second == std::vector<TokenId>{7});
    CHECK(pools[1].second == std::vector<TokenId>{8});
    // Without a counterpart the pool falls back to knn.
    VocabularyAsset lone = asset;
    lone.alignment = AlignmentMap();
    const auto fallback = position_pools(7, q, bank, lone, cfg);
    CHECK(fallback[1].second.size() == 2);
    // Selection saturates at the class size.
    const Tensor z = kernels::embedding_lookup(bank, std::vector<TokenId>{7});
    const auto res = apply(z, std::vector<TokenId>{7}, bank, CoReParams::identity(2), asset, cfg);
    std::size_t kept = 0;
    for (std::size_t j = 0; j < 10; ++j) kept += res.mask.kept(0, j);
    CHECK(kept == 2);
    CHECK(res.mask.kept(0, 7));
    CHECK(res.mask.kept(0, 8));
  }
}

TEST_CASE("gathered graph matches the full graph") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    oracle::CoreInstance in = oracle::random_instance(rng, 4, 24, 3, 2, 0, trial % 2 == 0);
    const auto asset = oracle::asset_for(in);
    const auto res = apply(in.z, in.tokens, in.bank, params_for(in), asset, config_for(in));
    Parameter z("z", in.z), b("b", in.bank), wq("wq", in.w_q), wk("wk", in.w_k), wv("wv", in.w_v);
    Tape tape;
    const auto full = compose_full(tape.param(z), tape.param(b), tape.param(wq), tape.param(wk), tape.param(wv), res.mask);
    const auto g = compose_gathered(tape.param(z), tape.param(b), tape.param(wq), tape.param(wk), tape.param(wv),
                                    res.selection);
    CHECK(max_abs_diff(full.z_prime.value(), g.z_prime.value()) < 1e-10);
    const Tensor gc = gathered_compatibility(in.z, in.bank, in.w_q, in.w_k, g.columns);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < g.columns.size(); ++c)
        CHECK(std::abs(gc(i, c) - res.c(i, static_cast<std::size_t>(g.columns[c]))) < 1e-10);
  }
}

TEST_CASE("CoRe gradients match finite differences") {
  Rng rng(12);
  oracle::CoreInstance in = oracle::random_instance(rng, 3, 16, 2, 3, 0, true);
  const auto res = apply(in.z, in.tokens, in.bank, params_for(in), oracle::asset_for(in), config_for(in));
  Parameter z("z", in.z), b("b", in.bank), wq("wq", in.w_q), wk("wk", in.w_k), wv("wv", in.w_v);
  const Tensor weights = oracle::random_tensor(rng, 3, in.z.cols());
  SUBCASE("full") {
    auto loss = [&](Tape& t) {
      const auto g = compose_full(t.param(z), t.param(b), t.param(wq), t.param(wk), t.param(wv), res.mask);
      return ag::sum(ag::mul(g.z_prime, t.constant(weights)));
    };
    const auto r = oracle::grad_check(loss, {&z, &b, &wq, &wk, &wv});
    INFO("worst " << r.worst);
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("gathered") {
    auto loss = [&](Tape& t) {
      const auto g = compose_gathered(t.param(z), t.param(b), t.param(wq), t.param(wk), t.param(wv), res.selection);
      return ag::sum(ag::mul(g.z_prime, t.constant(weights)));
    };
    const auto r = oracle::grad_check(loss, {&z, &b, &wq, &wk, &wv});
    INFO("worst " << r.worst);
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("config validation and JSON") {
  CoReConfig c;
  c.languages = {"L0", "L1"};
  c.anchor = "L0";
  c.n = 3;
  CHECK_NOTHROW(c.validate());
  CoReConfig bad = c;
  bad.n = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.anchor = "L7";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.pool_size = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  c.pool_mode = PoolMode::aligned_query;
  c.composition = Composition::residual_add;
  c.eq1_strict_intersection = true;
  CHECK(to_json(core_config_from_json(to_json(c))) == to_json(c));
  c.pool_mode = PoolMode::aligned_class;
  CHECK(core_config_from_json(to_json(c)).pool_mode == PoolMode::aligned_class);
  CHECK_THROWS_AS(core_config_from_json(nlohmann::json{{"composition", "blend"}}), ConfigError);
}
