// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line with the measured values.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <vector>

#include "emem/data_model.hpp"
#include "emem/encoder.hpp"
#include "emem/eval.hpp"
#include "emem/kernels.hpp"
#include "emem/memory.hpp"
#include "emem/ndt.hpp"
#include "emem/rng.hpp"
#include "emem/tree.hpp"

using namespace emem;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void report_line(int criterion, bool pass, const std::string& detail) {
  std::printf("[criterion %02d] %s — %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tree balanced_tree(const BehaviorTaxonomy& tax) {
  Tree t;
  t.leaf_count = static_cast<int>(tax.size());
  for (int i = 0; i < t.leaf_count; ++i) {
    TreeNode n;
    n.node_id = i;
    n.kind = TreeNode::Kind::kLeaf;
    n.label = tax.labels[i].first;
    t.nodes[i] = std::move(n);
  }
  std::vector<int> level;
  for (int i = 0; i < t.leaf_count; ++i) level.push_back(i);
  int next = t.leaf_count;
  while (level.size() > 1) {
    std::vector<int> up;
    for (std::size_t i = 0; i + 1 < level.size(); i += 2) {
      TreeNode n;
      n.node_id = next;
      n.kind = TreeNode::Kind::kInner;
      n.children = {level[i], level[i + 1]};
      t.nodes[next] = std::move(n);
      up.push_back(next);
      ++next;
    }
    if (level.size() % 2 == 1) up.push_back(level.back());
    level = std::move(up);
  }
  t.root_id = next - 1;
  t.nodes[t.root_id].kind = TreeNode::Kind::kRoot;
  validate_tree(t);
  return t;
}

// The end-to-end pipeline at the scaled-down defaults: d_model 32, base
// training 30 epochs, tree head 5 epochs, rho 30, eta 0.7, seed 7. Every
// artifact is written to `dir` so reruns can be compared byte for byte.
struct PipelineArtifacts {
  Dataset full, train, test;
  Tree tree;
  EncoderParams encoder;
  EMemNdtModel model;
  MetricsReport ndt_report;
  MetricsReport base_report;
  double seconds = 0.0;
};

PipelineArtifacts run_pipeline(const fs::path& dir) {
  const auto t0 = Clock::now();
  fs::create_directories(dir);
  const EdgePolicy policy = EdgePolicy::complete();

  PipelineArtifacts art;
  SyntheticConfig sc;  // defaults: T=10, ttb=10, 10 Hz, sigma 0.05, 1-4 neighbors
  sc.per_class_count = 100;
  art.full = generate_synthetic(sc, 7);
  save_dataset(art.full, (dir / "data.jsonl").string());
  save_taxonomy(art.full.taxonomy, (dir / "taxonomy.json").string());

  auto [train, test] = split(art.full, 0.8, 7);
  art.train = std::move(train);
  art.test = std::move(test);
  save_dataset(art.train, (dir / "train.jsonl").string());
  save_dataset(art.test, (dir / "test.jsonl").string());

  art.tree = build_tree(fallback_embed_taxonomy(art.full.taxonomy, 256, 7), Linkage::kAverage);
  save_tree(art.tree, (dir / "tree.json").string());

  EncoderConfig ec;  // d_model 32, 4 heads, 2 layers, d_graph 32
  BaseTrainConfig btc;
  btc.epochs = 30;
  btc.seed = 7;
  art.encoder = train_base(art.train, btc, ec, policy);
  save_encoder(art.encoder, (dir / "encoder.json").string());

  MemoryBankSet banks = implant(art.train, art.encoder, art.tree, 0.7, policy);
  art.model = init_model(art.tree, std::move(banks), art.encoder.config.d_model, 64, 32, 30.0,
                         Aggregation::kMax, false, 7,
                         file_content_hash((dir / "encoder.json").string()));
  save_model(art.model, (dir / "model_implanted.json").string());

  NdtTrainConfig ntc;  // 5 epochs, lr 5e-5, wd 1e-6, batch 64
  ntc.seed = 7;
  train_ndt(art.model, art.train, art.encoder, ntc, policy);
  save_model(art.model, (dir / "model.json").string());

  auto [cm, rep] = evaluate(art.model, art.encoder, art.test, policy, 1, /*track_usage=*/true);
  art.ndt_report = rep;
  auto [bcm, brep] = evaluate_base(art.encoder, art.test, policy);
  art.base_report = brep;
  {
    std::ofstream out(dir / "report.json");
    out << report_to_json(cm, rep).dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "base_report.json");
    out << report_to_json(bcm, brep).dump(2) << '\n';
  }
  art.seconds = seconds_since(t0);
  return art;
}

struct Shared {
  fs::path root;
  PipelineArtifacts run;

  Shared() {
    root = fs::temp_directory_path() / ("emem_accept_" + std::to_string(::getpid()));
    run = run_pipeline(root / "run_a");
  }
  ~Shared() {
    std::error_code ec;
    fs::remove_all(root, ec);
  }
};

Shared& shared() {
  static Shared s;
  return s;
}

// enumerate every labeled binary merge sequence over m leaves
void enumerate_trees(int m, std::vector<Tree>& out) {
  struct State {
    std::vector<std::pair<int, std::set<int>>> active;  // (id, leaves)
    std::vector<std::pair<int, std::vector<int>>> merges;
    int next_id;
  };
  std::vector<State> stack;
  State init;
  for (int i = 0; i < m; ++i) init.active.push_back({i, {i}});
  init.next_id = m;
  stack.push_back(init);
  while (!stack.empty()) {
    State st = stack.back();
    stack.pop_back();
    if (st.active.size() == 1) {
      Tree t;
      t.leaf_count = m;
      for (int i = 0; i < m; ++i) {
        TreeNode n;
        n.node_id = i;
        n.kind = TreeNode::Kind::kLeaf;
        n.label = "leaf" + std::to_string(i);
        t.nodes[i] = std::move(n);
      }
      for (const auto& [id, children] : st.merges) {
        TreeNode n;
        n.node_id = id;
        n.kind = TreeNode::Kind::kInner;
        n.children = children;
        t.nodes[id] = std::move(n);
      }
      t.root_id = st.next_id - 1;
      t.nodes[t.root_id].kind = TreeNode::Kind::kRoot;
      validate_tree(t);
      out.push_back(std::move(t));
      continue;
    }
    for (std::size_t i = 0; i < st.active.size(); ++i) {
      for (std::size_t j = i + 1; j < st.active.size(); ++j) {
        State next = st;
        auto leaves = next.active[i].second;
        leaves.insert(next.active[j].second.begin(), next.active[j].second.end());
        const std::vector<int> children = {next.active[i].first, next.active[j].first};
        next.active.erase(next.active.begin() + j);
        next.active.erase(next.active.begin() + i);
        next.active.push_back({next.next_id, leaves});
        next.merges.push_back({next.next_id, children});
        next.next_id += 1;
        stack.push_back(std::move(next));
      }
    }
  }
}

// independent root-to-leaf product oracle in extended precision
std::vector<double> lla_oracle(const Tree& tree, const NodeScores& scores) {
  std::vector<double> s(tree.leaf_count, 0.0);
  for (int leaf = 0; leaf < tree.leaf_count; ++leaf) {
    long double prod = 1.0L;
    const auto path = tree.path_from_root(leaf);
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      const TreeNode& parent = tree.node(path[i]);
      long double denom = 0.0L;
      for (int c : parent.children) denom += std::exp(static_cast<long double>(scores.gamma.at(c)));
      prod *= std::exp(static_cast<long double>(scores.gamma.at(path[i + 1]))) / denom;
    }
    s[leaf] = static_cast<double>(prod);
  }
  return s;
}

}  // namespace

TEST_CASE("criterion 1: leaf distributions normalize across random models") {
  const auto t0 = Clock::now();
  Rng rng(101);
  bool ok = true;
  int tested = 0;
  double worst = 0.0;
  for (int m : {2, 4, 8, 13}) {
    for (int trial = 0; trial < 250; ++trial) {
      std::vector<TextEmbedding> embs;
      for (int i = 0; i < m; ++i) {
        std::vector<double> v(6);
        for (double& x : v) x = rng.normal();
        embs.push_back({"leaf" + std::to_string(i), v});
      }
      const Tree tree = build_tree(embs, Linkage::kAverage);
      std::vector<std::vector<std::vector<double>>> feats(m);
      for (auto& leaf : feats) {
        const int k = 1 + static_cast<int>(rng.uniform_int(0, 3));
        for (int p = 0; p < k; ++p) {
          std::vector<double> v(16);
          for (double& x : v) x = rng.normal();
          leaf.push_back(std::move(v));
        }
      }
      MemoryBankSet banks;
      for (int leaf = 0; leaf < m; ++leaf) {
        LeafMemoryBank bank;
        bank.leaf_id = leaf;
        bank.eta = 0.7;
        for (auto& f : feats[leaf]) {
          MemoryPrototype p;
          p.feature = f;
          p.instance_id = "r";
          bank.prototypes.push_back(std::move(p));
          bank.usage_counts.push_back(0);
        }
        banks.banks[leaf] = std::move(bank);
      }
      EMemNdtModel model = init_model(tree, std::move(banks), 16, 8, 8, 30.0,
                                      Aggregation::kMax, false, rng.bits(), "");
      std::vector<double> g(16);
      for (double& x : g) x = rng.normal();
      const NodeScores scores = mpm(g, model);
      const LeafDistribution dist = lla(scores, model);
      double sum = 0.0;
      for (const auto& [leaf, p] : dist.s) sum += p;
      worst = std::max(worst, std::abs(sum - 1.0));
      if (std::abs(sum - 1.0) > 1e-9) ok = false;
      for (const auto& [id, node] : tree.nodes) {
        if (node.children.empty()) continue;
        double mx = -1e300;
        for (int c : node.children) mx = std::max(mx, scores.gamma.at(c));
        double z = 0.0;
        for (int c : node.children) z += std::exp(scores.gamma.at(c) - mx);
        double psum = 0.0;
        for (int c : node.children) psum += std::exp(scores.gamma.at(c) - mx) / z;
        if (std::abs(psum - 1.0) > 1e-9) ok = false;
      }
      ++tested;
    }
  }
  const double secs = seconds_since(t0);
  if (secs >= 10.0) ok = false;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%d random (model, embedding) pairs, worst |sum-1| = %.2e, %.2fs (< 10s)",
                tested, worst, secs);
  report_line(1, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 2: lla equals the exhaustive path-product oracle for M <= 4") {
  Rng rng(202);
  bool ok = true;
  double worst = 0.0;
  int trees_tested = 0;
  for (int m = 2; m <= 4; ++m) {
    std::vector<Tree> trees;
    enumerate_trees(m, trees);
    for (const Tree& tree : trees) {
      EMemNdtModel shell;
      shell.tree = tree;
      for (int trial = 0; trial < 100; ++trial) {
        std::map<int, double> leaf_gamma;
        for (int leaf = 0; leaf < m; ++leaf) leaf_gamma[leaf] = rng.uniform(-30.0, 30.0);
        const NodeScores scores = propagate_scores(tree, leaf_gamma);
        const LeafDistribution dist = lla(scores, shell);
        const auto oracle = lla_oracle(tree, scores);
        for (int leaf = 0; leaf < m; ++leaf) {
          const double diff = std::abs(dist.s.at(leaf) - oracle[leaf]);
          worst = std::max(worst, diff);
          if (diff > 1e-12) ok = false;
        }
      }
      ++trees_tested;
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d trees x 100 score draws, worst |diff| = %.2e (<= 1e-12)",
                trees_tested, worst);
  report_line(2, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 3: leaf filter admits first and bounds every admitted pair") {
  Rng rng(303);
  bool ok = true;
  int streams = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 498));
    const std::size_t width = 2 + static_cast<std::size_t>(rng.uniform_int(0, 62));
    const double eta = (trial % 3 == 0) ? 0.3 : (trial % 3 == 1 ? 0.7 : 0.9);
    std::vector<std::vector<double>> stream;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> v(width);
      for (double& x : v) x = rng.normal();
      stream.push_back(std::move(v));
    }
    const auto admitted = lnmf_admit(stream, eta);
    if (admitted.empty() || admitted[0] != 0) ok = false;
    for (std::size_t i = 0; i < admitted.size() && ok; ++i) {
      for (std::size_t j = i + 1; j < admitted.size(); ++j) {
        if (kernels::cosine(stream[admitted[i]], stream[admitted[j]]) > eta) {
          ok = false;
          break;
        }
      }
    }
    ++streams;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%d random streams (n <= 500, width <= 64, eta in {0.3, 0.7, 0.9})", streams);
  report_line(3, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 4: memory grows monotonically in eta and eta = 1 admits all") {
  const auto& sh = shared();
  const EdgePolicy policy = EdgePolicy::complete();
  std::vector<std::size_t> sizes;
  for (double eta : {0.3, 0.7, 0.9}) {
    sizes.push_back(implant(sh.run.full, sh.run.encoder, sh.run.tree, eta, policy).total_size());
  }
  const std::size_t all = implant(sh.run.full, sh.run.encoder, sh.run.tree, 1.0, policy).total_size();
  const bool monotone = sizes[0] <= sizes[1] && sizes[1] <= sizes[2];
  const bool complete = all == sh.run.full.size();
  const bool ok = monotone && complete;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "EMB(0.3)=%zu <= EMB(0.7)=%zu <= EMB(0.9)=%zu; EMB(1.0)=%zu == N=%zu",
                sizes[0], sizes[1], sizes[2], all, sh.run.full.size());
  report_line(4, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 5: analytic gradients match finite differences") {
  const auto t0 = Clock::now();
  const EdgePolicy policy = EdgePolicy::complete();

  SyntheticConfig sc;
  sc.per_class_count = 2;
  sc.t_frames = 6;
  sc.ttb_frames = 6;
  const Dataset ds = generate_synthetic(sc, 3);
  EncoderConfig ec;
  ec.d_model = 8;
  ec.n_heads = 2;
  ec.d_graph = 8;
  ec.t_len = 6;
  ec.n_classes = 8;
  const EncoderParams enc = init_encoder_params(ec, 11);
  const auto enc_res = grad_check(enc, ds.instances[5], ds.taxonomy, policy, 1e-5, 120, 5);

  const Tree tree = build_tree(fallback_embed_taxonomy(ds.taxonomy, 64, 1), Linkage::kAverage);
  EMemNdtModel model = init_model(tree, implant(ds, enc, tree, 1.0, policy), ec.d_model, 16, 8,
                                  30.0, Aggregation::kMax, false, 7, "");
  std::vector<std::vector<double>> gs;
  std::vector<int> ids;
  const auto encoded = encode_dataset(ds, enc, policy);
  for (std::size_t i = 0; i < ds.size(); i += 2) {
    gs.push_back(encoded[i].embedding.g);
    ids.push_back(*tree.leaf_for_label(ds.instances[i].label));
  }
  const auto ndt_res = ndt_grad_check(model, gs, ids, 1e-5, 120, 7);

  const double secs = seconds_since(t0);
  const bool ok = enc_res.n_checked >= 100 && ndt_res.n_checked >= 100 &&
                  enc_res.max_rel_error <= 1e-4 && ndt_res.max_rel_error <= 1e-4 && secs < 60.0;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "encoder max rel err %.2e (n=%zu), tree-head max rel err %.2e (n=%zu), %.2fs (< 60s)",
                enc_res.max_rel_error, enc_res.n_checked, ndt_res.max_rel_error,
                ndt_res.n_checked, secs);
  report_line(5, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 6: clustering matches the brute-force oracle for M <= 6") {
  Rng rng(606);
  bool ok = true;
  int tested = 0;

  auto euclid = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  };

  while (tested < 50) {
    const int m = 2 + static_cast<int>(rng.uniform_int(0, 4));
    std::vector<TextEmbedding> embs;
    for (int i = 0; i < m; ++i) {
      std::vector<double> v(3);
      for (double& x : v) x = rng.uniform(-5.0, 5.0);
      embs.push_back({"leaf" + std::to_string(i), std::move(v)});
    }
    // require distinct pairwise distances
    std::vector<double> ds;
    for (int i = 0; i < m; ++i) {
      for (int j = i + 1; j < m; ++j) ds.push_back(euclid(embs[i].vec, embs[j].vec));
    }
    std::sort(ds.begin(), ds.end());
    bool distinct = true;
    for (std::size_t i = 1; i < ds.size(); ++i) {
      if (ds[i] - ds[i - 1] < 1e-9) distinct = false;
    }
    if (!distinct) continue;

    const Tree tree = build_tree(embs, Linkage::kAverage);

    // oracle: exhaustive minimal-pair search with from-scratch distances
    struct Cluster {
      std::set<int> leaves;
    };
    std::vector<Cluster> active;
    for (int i = 0; i < m; ++i) active.push_back({{i}});
    std::set<std::set<int>> oracle_merges;
    while (active.size() > 1) {
      double best = 1e300;
      std::size_t bi = 0, bj = 1;
      for (std::size_t i = 0; i < active.size(); ++i) {
        for (std::size_t j = i + 1; j < active.size(); ++j) {
          double sum = 0.0;
          std::size_t cnt = 0;
          for (int a : active[i].leaves) {
            for (int b : active[j].leaves) {
              sum += euclid(embs[a].vec, embs[b].vec);
              ++cnt;
            }
          }
          const double d = sum / static_cast<double>(cnt);
          if (d < best) {
            best = d;
            bi = i;
            bj = j;
          }
        }
      }
      Cluster merged;
      merged.leaves = active[bi].leaves;
      merged.leaves.insert(active[bj].leaves.begin(), active[bj].leaves.end());
      oracle_merges.insert(merged.leaves);
      std::vector<Cluster> next;
      for (std::size_t i = 0; i < active.size(); ++i) {
        if (i != bi && i != bj) next.push_back(active[i]);
      }
      next.push_back(merged);
      active = std::move(next);
    }

    std::set<std::set<int>> got;
    for (const auto& [id, node] : tree.nodes) {
      if (node.children.empty()) continue;
      std::set<int> leaves;
      std::vector<int> stack = {id};
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const TreeNode& n = tree.node(cur);
        if (n.kind == TreeNode::Kind::kLeaf) {
          leaves.insert(cur);
        } else {
          stack.insert(stack.end(), n.children.begin(), n.children.end());
        }
      }
      got.insert(std::move(leaves));
    }
    if (got != oracle_merges) ok = false;
    ++tested;
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf), "%d random embedding sets with distinct distances", tested);
  report_line(6, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 7: end-to-end synthetic run clears the F1 bar") {
  const auto& sh = shared();
  const double ndt_f1 = sh.run.ndt_report.macro_f1;
  const double base_f1 = sh.run.base_report.macro_f1;
  const bool ok = ndt_f1 >= 0.85 && ndt_f1 >= base_f1 - 0.02 && sh.run.seconds < 300.0;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "eMem-NDT macro F1 = %.4f (>= 0.85), base = %.4f (margin %.4f >= -0.02), %.1fs (< 300s)",
                ndt_f1, base_f1, ndt_f1 - base_f1, sh.run.seconds);
  report_line(7, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 8: every trace is sound; matched prototypes carry the predicted label") {
  auto& sh = shared();
  EMemNdtModel& model = sh.run.model;
  const EdgePolicy policy = EdgePolicy::complete();
  std::size_t total = 0, correct = 0, label_match = 0;
  bool sound = true;
  for (const Instance& inst : sh.run.test.instances) {
    const auto trace = explain(inst, sh.run.encoder, model, policy, /*track_usage=*/true);
    const auto path = model.tree.path_from_root(trace.predicted_leaf);
    if (trace.path.size() != path.size() || trace.path.front().node_id != model.tree.root_id ||
        trace.path.back().node_id != trace.predicted_leaf) {
      sound = false;
    }
    for (std::size_t i = 0; i < path.size() && sound; ++i) {
      if (trace.path[i].node_id != path[i]) sound = false;
    }
    const auto& bank = model.banks.banks.at(trace.predicted_leaf);
    if (trace.prototype.index >= bank.prototypes.size()) {
      sound = false;
    } else {
      const auto g = encode_instance(inst, build_interaction_graphs(inst, policy), sh.run.encoder)
                         .embedding.g;
      const auto [gamma, best] = leaf_similarity(g, trace.predicted_leaf, model);
      if (best != trace.prototype.index || std::abs(gamma - trace.prototype.gamma) > 1e-9) {
        sound = false;
      }
      if (trace.predicted_label == inst.label) {
        ++correct;
        if (bank.prototypes[trace.prototype.index].raw.label == trace.predicted_label) {
          ++label_match;
        }
      }
    }
    ++total;
  }
  const double match_rate =
      correct > 0 ? static_cast<double>(label_match) / static_cast<double>(correct) : 0.0;
  const bool ok = sound && match_rate >= 0.9;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "%zu traces (100%% structurally sound: %s), label match on correct = %.1f%% (>= 90%%)",
                total, sound ? "yes" : "no", 100.0 * match_rate);
  report_line(8, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 9: the pipeline is byte-deterministic across reruns") {
  auto& sh = shared();
  const fs::path dir_b = sh.root / "run_b";
  run_pipeline(dir_b);
  bool ok = true;
  std::string mismatch;
  for (const char* name :
       {"data.jsonl", "taxonomy.json", "train.jsonl", "test.jsonl", "tree.json", "encoder.json",
        "model_implanted.json", "model.json", "report.json", "base_report.json"}) {
    if (read_file(sh.root / "run_a" / name) != read_file(dir_b / name)) {
      ok = false;
      mismatch += std::string(name) + " ";
    }
  }
  char buf[200];
  std::snprintf(buf, sizeof(buf), "10 artifacts compared%s%s",
                ok ? ", all byte-identical" : ", mismatch: ", mismatch.c_str());
  report_line(9, ok, buf);
  CHECK(ok);
}

TEST_CASE("criterion 10: a symmetric untrained model scores ln M on the training set") {
  auto& sh = shared();
  const EdgePolicy policy = EdgePolicy::complete();
  const Tree tree = balanced_tree(sh.run.full.taxonomy);

  EncoderConfig ec;
  ec.t_len = 10;
  ec.n_classes = 8;
  const EncoderParams untrained = init_encoder_params(ec, 7);
  MemoryBankSet banks = implant(sh.run.train, untrained, tree, 0.7, policy);
  EMemNdtModel model = init_model(tree, std::move(banks), ec.d_model, 64, 32, 30.0,
                                  Aggregation::kMax, false, 7, "");
  // symmetric initialization: identical constant-output transforms make the
  // head carry no instance information, so every per-node split is even
  for (auto& [key, t] : model.transforms) {
    std::fill(t.w.begin(), t.w.end(), 0.0);
    for (int i = 0; i < t.out; ++i) t.w[t.b2_off() + i] = 1.0;
  }
  model.refresh_cache();

  const auto encoded = encode_dataset(sh.run.train, untrained, policy);
  std::vector<std::vector<double>> gs;
  std::vector<int> ids;
  for (std::size_t i = 0; i < sh.run.train.size(); ++i) {
    gs.push_back(encoded[i].embedding.g);
    ids.push_back(*tree.leaf_for_label(sh.run.train.instances[i].label));
  }
  const double loss = ndt_loss(gs, ids, model);
  const double ln_m = std::log(static_cast<double>(tree.leaf_count));
  const double rel = std::abs(loss / ln_m - 1.0);
  const bool ok = rel <= 0.05;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "mean NLL = %.6f vs ln M = %.6f (rel dev %.2e <= 0.05)", loss,
                ln_m, rel);
  report_line(10, ok, buf);
  CHECK(ok);
}
