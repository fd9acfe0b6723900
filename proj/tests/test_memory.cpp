#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "emem/data_model.hpp"
#include "emem/encoder.hpp"
#include "emem/error.hpp"
#include "emem/kernels.hpp"
#include "emem/memory.hpp"
#include "emem/rng.hpp"
#include "emem/tree.hpp"

using namespace emem;

namespace {

// shared fixture: a small synthetic set with an untrained encoder and the
// fallback-embedding tree
struct Pipeline {
  Dataset data;
  EncoderParams encoder;
  Tree tree;
  EdgePolicy policy = EdgePolicy::complete();

  Pipeline() {
    SyntheticConfig sc;
    sc.per_class_count = 6;
    sc.t_frames = 5;
    sc.ttb_frames = 5;
    data = generate_synthetic(sc, 19);
    EncoderConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_graph = 8;
    cfg.t_len = 5;
    cfg.n_classes = 8;
    encoder = init_encoder_params(cfg, 5);
    tree = build_tree(fallback_embed_taxonomy(data.taxonomy, 128, 5), Linkage::kAverage);
  }
};

}  // namespace

TEST_CASE("the first element of a stream is always admitted") {
  const std::vector<std::vector<double>> one = {{0.2, -0.4, 0.6}};
  for (double eta : {-1.0, -0.5, 0.0, 0.9}) {
    const auto admitted = lnmf_admit(one, eta);
    REQUIRE(admitted.size() == 1);
    CHECK(admitted[0] == 0);
  }
}

TEST_CASE("hand-simulated admission on three unit vectors with eta 0.7") {
  // cos(a,b) = 0.9, cos(a,c) = 0.5, cos(b,c) = 0.6
  const std::vector<double> a = {1.0, 0.0, 0.0};
  const std::vector<double> b = {0.9, std::sqrt(1.0 - 0.81), 0.0};
  const double cy = (0.6 - 0.9 * 0.5) / std::sqrt(1.0 - 0.81);
  const std::vector<double> c = {0.5, cy, std::sqrt(1.0 - 0.25 - cy * cy)};
  REQUIRE(kernels::cosine(a, b) == doctest::Approx(0.9));
  REQUIRE(kernels::cosine(a, c) == doctest::Approx(0.5));
  REQUIRE(kernels::cosine(b, c) == doctest::Approx(0.6));

  // b rejected (0.9 > 0.7); c admitted (max(0.5) <= 0.7 against {a})
  const auto admitted = lnmf_admit({a, b, c}, 0.7);
  CHECK(admitted == std::vector<std::size_t>{0, 2});
}

TEST_CASE("a duplicate of an admitted feature is rejected for eta < 1") {
  const std::vector<double> a = {0.3, 0.4, 0.5};
  const auto admitted = lnmf_admit({a, a}, 0.999);
  CHECK(admitted == std::vector<std::size_t>{0});
  const auto all = lnmf_admit({a, a}, 1.0);
  CHECK(all == std::vector<std::size_t>{0, 1});
}

TEST_CASE("admitted sets satisfy the pairwise cosine bound for random streams") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5 + static_cast<std::size_t>(rng.uniform_int(0, 45));
    const std::size_t width = 3 + static_cast<std::size_t>(rng.uniform_int(0, 13));
    const double eta = trial % 2 == 0 ? 0.5 : 0.9;
    std::vector<std::vector<double>> stream;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> v(width);
      for (double& x : v) x = rng.normal();
      stream.push_back(std::move(v));
    }
    const auto admitted = lnmf_admit(stream, eta);
    REQUIRE(!admitted.empty());
    CHECK(admitted[0] == 0);
    for (std::size_t i = 0; i < admitted.size(); ++i) {
      for (std::size_t j = i + 1; j < admitted.size(); ++j) {
        CHECK(kernels::cosine(stream[admitted[i]], stream[admitted[j]]) <= eta);
      }
    }
  }
}

TEST_CASE("lnmf rejects eta outside [-1, 1] and zero-norm features") {
  const std::vector<std::vector<double>> s = {{1.0, 0.0}};
  CHECK_THROWS_AS(lnmf_admit(s, 1.5), Error);
  CHECK_THROWS_AS(lnmf_admit(s, -1.01), Error);
  const std::vector<std::vector<double>> z = {{0.0, 0.0}};
  CHECK_THROWS_AS(lnmf_admit(z, 0.5), Error);
}

TEST_CASE("implant covers every leaf, is deterministic, and keeps eta") {
  Pipeline pl;
  const MemoryBankSet banks = implant(pl.data, pl.encoder, pl.tree, 0.95, pl.policy);
  REQUIRE(static_cast<int>(banks.banks.size()) == pl.tree.leaf_count);
  for (const auto& [leaf, bank] : banks.banks) {
    CHECK(bank.prototypes.size() >= 1);
    CHECK(bank.eta == 0.95);
    CHECK(bank.usage_counts.size() == bank.prototypes.size());
    for (const auto& p : bank.prototypes) {
      CHECK(pl.tree.node(leaf).label == p.raw.label);
    }
  }
  const MemoryBankSet again = implant(pl.data, pl.encoder, pl.tree, 0.95, pl.policy);
  REQUIRE(again.total_size() == banks.total_size());
  for (const auto& [leaf, bank] : banks.banks) {
    const auto& other = again.banks.at(leaf);
    REQUIRE(other.prototypes.size() == bank.prototypes.size());
    for (std::size_t k = 0; k < bank.prototypes.size(); ++k) {
      CHECK(other.prototypes[k].instance_id == bank.prototypes[k].instance_id);
      CHECK(other.prototypes[k].feature == bank.prototypes[k].feature);
    }
  }
}

TEST_CASE("implant reports leaves whose label has no training instances") {
  Pipeline pl;
  Dataset partial = pl.data;
  std::erase_if(partial.instances,
                [](const Instance& i) { return i.label == "turn-left"; });
  try {
    implant(partial, pl.encoder, pl.tree, 0.9, pl.policy);
    FAIL("expected data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kData);
    CHECK(std::string(e.what()).find("turn-left") != std::string::npos);
  }
}

TEST_CASE("implant with eta = 1 admits every instance") {
  Pipeline pl;
  const MemoryBankSet banks = implant(pl.data, pl.encoder, pl.tree, 1.0, pl.policy);
  CHECK(banks.total_size() == pl.data.size());
}

TEST_CASE("bank_stats reports sizes and pairwise cosines") {
  Pipeline pl;
  MemoryBankSet banks = implant(pl.data, pl.encoder, pl.tree, 1.0, pl.policy);
  const auto stats = bank_stats(banks, pl.tree);
  REQUIRE(static_cast<int>(stats.size()) == pl.tree.leaf_count);
  std::size_t total = 0;
  for (const auto& s : stats) {
    total += s.k;
    CHECK(!s.label.empty());
    if (s.k >= 2) {
      REQUIRE(s.mean_pairwise_cosine.has_value());
      CHECK(*s.mean_pairwise_cosine <= 1.0);
      CHECK(*s.mean_pairwise_cosine >= -1.0);
    }
  }
  CHECK(total == banks.total_size());

  // single-prototype bank reports no mean pairwise cosine
  LeafMemoryBank solo;
  solo.leaf_id = 0;
  solo.prototypes.push_back({{1.0, 0.0}, "x", pl.data.instances[0], {}});
  solo.usage_counts = {0};
  MemoryBankSet single;
  single.banks[0] = solo;
  Tree two = build_tree(fallback_embed_taxonomy(
      BehaviorTaxonomy{{{"stopping", "halts"}, {"turn-left", "turns"}}}, 64, 1),
      Linkage::kAverage);
  const auto sstats = bank_stats(single, two);
  REQUIRE(sstats.size() == 1);
  CHECK(!sstats[0].mean_pairwise_cosine.has_value());
}

TEST_CASE("utilization entropy: uniform, degenerate and hand-computed cases") {
  LeafMemoryBank bank;
  bank.leaf_id = 3;
  bank.prototypes.resize(4);
  bank.usage_counts = {5, 5, 5, 5};
  CHECK(utilization_entropy(bank) == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  bank.usage_counts = {9, 0, 0, 0};
  CHECK(utilization_entropy(bank) == doctest::Approx(0.0));

  bank.prototypes.resize(2);
  bank.usage_counts = {3, 1};
  CHECK(utilization_entropy(bank) == doctest::Approx(0.5623).epsilon(1e-3));

  bank.usage_counts = {0, 0};
  CHECK_THROWS_AS(utilization_entropy(bank), Error);
}
