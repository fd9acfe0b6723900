#include "emem/ndt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <unordered_set>

#include "emem/error.hpp"
#include "emem/kernels.hpp"
#include "emem/rng.hpp"
#include "emem/serial.hpp"
#include "json.hpp"

namespace emem {

using nlohmann::json;
using kernels::axpy;
using kernels::dot;
using kernels::gemv;
using kernels::gemv_t;
using kernels::ger;

std::string aggregation_name(Aggregation a) {
  return a == Aggregation::kMax ? "max" : "mean";
}

std::optional<Aggregation> aggregation_from_name(const std::string& name) {
  if (name == "max") return Aggregation::kMax;
  if (name == "mean") return Aggregation::kMean;
  return std::nullopt;
}

namespace {

// forward through H keeping the hidden activations for backprop
void transform_forward(const LeafTransform& t, const double* x, std::vector<double>& a1,
                       std::vector<double>& out) {
  a1.assign(t.hidden, 0.0);
  gemv(t.w.data() + t.w1_off(), t.hidden, t.in_dim, x, a1.data());
  axpy(1.0, t.w.data() + t.b1_off(), a1.data(), t.hidden);
  kernels::tanh_vec(a1.data(), a1.data(), t.hidden);
  out.assign(t.out, 0.0);
  gemv(t.w.data() + t.w2_off(), t.out, t.hidden, a1.data(), out.data());
  axpy(1.0, t.w.data() + t.b2_off(), out.data(), t.out);
}

// parameter gradients only; inputs (g and stored features) are frozen
void transform_backward(const LeafTransform& t, const double* x, const std::vector<double>& a1,
                        const std::vector<double>& dout, std::vector<double>& gw) {
  ger(gw.data() + t.w2_off(), t.out, t.hidden, 1.0, dout.data(), a1.data());
  axpy(1.0, dout.data(), gw.data() + t.b2_off(), t.out);
  std::vector<double> da1(t.hidden, 0.0);
  gemv_t(t.w.data() + t.w2_off(), t.out, t.hidden, dout.data(), da1.data());
  for (int i = 0; i < t.hidden; ++i) da1[i] *= 1.0 - a1[i] * a1[i];
  ger(gw.data() + t.w1_off(), t.hidden, t.in_dim, 1.0, da1.data(), x);
  axpy(1.0, da1.data(), gw.data() + t.b1_off(), t.hidden);
}

struct CosineParts {
  double value = 0.0;  // unclamped
  double nu = 0.0, nv = 0.0;
};

CosineParts cosine_parts(const std::vector<double>& u, const std::vector<double>& v) {
  CosineParts p;
  p.nu = kernels::norm2(u.data(), u.size());
  p.nv = kernels::norm2(v.data(), v.size());
  p.value = dot(u, v) / (p.nu * p.nv);
  return p;
}

// d(cos)/du and d(cos)/dv scaled by dcos
void cosine_backward(const std::vector<double>& u, const std::vector<double>& v,
                     const CosineParts& p, double dcos, std::vector<double>& du,
                     std::vector<double>& dv) {
  const double inv = 1.0 / (p.nu * p.nv);
  du.assign(u.size(), 0.0);
  dv.assign(v.size(), 0.0);
  axpy(dcos * inv, v.data(), du.data(), v.size());
  axpy(-dcos * p.value / (p.nu * p.nu), u.data(), du.data(), u.size());
  axpy(dcos * inv, u.data(), dv.data(), u.size());
  axpy(-dcos * p.value / (p.nv * p.nv), v.data(), dv.data(), v.size());
}

// Per-leaf forward state kept for training backprop.
struct LeafForward {
  std::vector<double> u, a1_u;
  std::vector<CosineParts> cos;  // per prototype
  std::size_t best = 0;
  double gamma = 0.0;
};

LeafForward leaf_forward(const std::vector<double>& g, int leaf_id, const EMemNdtModel& model) {
  const LeafTransform& t = model.transform_for(leaf_id);
  if (g.size() != static_cast<std::size_t>(t.in_dim)) {
    throw data_error("leaf_similarity: embedding width " + std::to_string(g.size()) +
                     " does not match transform input " + std::to_string(t.in_dim));
  }
  auto bank_it = model.banks.banks.find(leaf_id);
  if (bank_it == model.banks.banks.end() || bank_it->second.prototypes.empty()) {
    throw data_error("leaf_similarity: empty bank for leaf " + std::to_string(leaf_id));
  }
  auto cache_it = model.cache.find(leaf_id);
  if (cache_it == model.cache.end() ||
      cache_it->second.v.size() != bank_it->second.prototypes.size()) {
    throw data_error("leaf_similarity: stale transform cache; call refresh_cache()");
  }

  LeafForward f;
  transform_forward(t, g.data(), f.a1_u, f.u);
  if (kernels::norm2(f.u.data(), f.u.size()) < 1e-12) {
    throw numeric_error("leaf_similarity: zero-norm transformed embedding at leaf " +
                        std::to_string(leaf_id));
  }
  const auto& vs = cache_it->second.v;
  double best_cos = -2.0, sum = 0.0;
  for (std::size_t k = 0; k < vs.size(); ++k) {
    CosineParts p = cosine_parts(f.u, vs[k]);
    const double clamped = std::clamp(p.value, -1.0, 1.0);
    if (clamped > best_cos) {
      best_cos = clamped;
      f.best = k;
    }
    sum += clamped;
    f.cos.push_back(p);
  }
  const double agg = model.aggregation == Aggregation::kMax
                         ? best_cos
                         : sum / static_cast<double>(vs.size());
  f.gamma = model.rho * agg;
  return f;
}

struct ScoreForward {
  NodeScores scores;
  std::map<int, LeafForward> leaves;
};

ScoreForward forward_scores(const std::vector<double>& g, const EMemNdtModel& model) {
  ScoreForward sf;
  std::map<int, double> leaf_gamma;
  for (int leaf = 0; leaf < model.tree.leaf_count; ++leaf) {
    LeafForward lf = leaf_forward(g, leaf, model);
    leaf_gamma[leaf] = lf.gamma;
    sf.leaves[leaf] = std::move(lf);
  }
  sf.scores = propagate_scores(model.tree, leaf_gamma);
  return sf;
}

struct LlaFull {
  LeafDistribution dist;
  // per inner node: children ids with their softmax probabilities
  std::map<int, std::vector<std::pair<int, double>>> node_probs;
};

LlaFull lla_full(const NodeScores& scores, const Tree& tree) {
  const int m = tree.leaf_count;
  for (const auto& [id, node] : tree.nodes) {
    if (!scores.gamma.count(id)) {
      throw data_error("lla: scores missing node " + std::to_string(id));
    }
  }
  LlaFull out;
  std::map<int, double> log_acc;
  log_acc[tree.root_id] = 0.0;
  for (int id = tree.root_id; id >= m; --id) {
    const TreeNode& n = tree.node(id);
    std::vector<double> logits, logp(n.children.size());
    for (int c : n.children) logits.push_back(scores.gamma.at(c));
    kernels::log_softmax(logits.data(), logp.data(), logits.size());
    auto& probs = out.node_probs[id];
    for (std::size_t i = 0; i < n.children.size(); ++i) {
      log_acc[n.children[i]] = log_acc.at(id) + logp[i];
      probs.emplace_back(n.children[i], std::exp(logp[i]));
    }
  }
  for (int leaf = 0; leaf < m; ++leaf) {
    out.dist.log_s[leaf] = log_acc.at(leaf);
    out.dist.s[leaf] = std::exp(log_acc.at(leaf));
  }
  return out;
}

}  // namespace

std::vector<double> LeafTransform::apply(const std::vector<double>& x) const {
  if (x.size() != static_cast<std::size_t>(in_dim)) {
    throw data_error("LeafTransform: input width mismatch");
  }
  std::vector<double> a1, out;
  transform_forward(*this, x.data(), a1, out);
  return out;
}

const LeafTransform& EMemNdtModel::transform_for(int leaf_id) const {
  const int key = shared_h ? kSharedKey : leaf_id;
  auto it = transforms.find(key);
  if (it == transforms.end()) {
    throw data_error("model: missing transform for leaf " + std::to_string(leaf_id));
  }
  return it->second;
}

LeafTransform& EMemNdtModel::transform_for(int leaf_id) {
  const int key = shared_h ? kSharedKey : leaf_id;
  auto it = transforms.find(key);
  if (it == transforms.end()) {
    throw data_error("model: missing transform for leaf " + std::to_string(leaf_id));
  }
  return it->second;
}

void EMemNdtModel::refresh_cache() {
  cache.clear();
  for (const auto& [leaf_id, bank] : banks.banks) {
    const LeafTransform& t = transform_for(leaf_id);
    TransformedBank tb;
    for (const MemoryPrototype& p : bank.prototypes) {
      if (p.feature.size() != static_cast<std::size_t>(t.in_dim)) {
        throw data_error("model: prototype feature width mismatch at leaf " +
                         std::to_string(leaf_id));
      }
      std::vector<double> a1, v;
      transform_forward(t, p.feature.data(), a1, v);
      if (kernels::norm2(v.data(), v.size()) < 1e-12) {
        throw numeric_error("model: zero-norm transformed prototype at leaf " +
                            std::to_string(leaf_id));
      }
      tb.a1.push_back(std::move(a1));
      tb.v.push_back(std::move(v));
    }
    cache[leaf_id] = std::move(tb);
  }
}

EMemNdtModel init_model(const Tree& tree, MemoryBankSet banks, int in_dim, int hidden, int out,
                        double rho, Aggregation aggregation, bool shared_h, std::uint64_t seed,
                        const std::string& encoder_hash) {
  if (!(rho > 1.0)) throw usage_error("init_model: rho must be > 1");
  if (in_dim < 1 || hidden < 1 || out < 1) throw usage_error("init_model: invalid transform dims");
  validate_tree(tree);

  EMemNdtModel model;
  model.tree = tree;
  model.banks = std::move(banks);
  model.rho = rho;
  model.aggregation = aggregation;
  model.shared_h = shared_h;
  model.encoder_hash = encoder_hash;

  // every leaf starts from the same seeded transform and diverges in training
  LeafTransform proto;
  proto.in_dim = in_dim;
  proto.hidden = hidden;
  proto.out = out;
  proto.w.assign(proto.size(), 0.0);
  Rng rng(seed);
  // Identity-preserving skeleton with small symmetric noise. H starts as a
  // near-isometry (per coordinate: tanh(a*x)/a), so cosine rankings between
  // embeddings and stored prototypes survive the untrained transform; a
  // plain random init scrambles them and rho amplifies the damage.
  const double a = 0.05;
  const int k1 = std::min(hidden, in_dim);
  const int k2 = (hidden >= in_dim + k1) ? k1 : 0;
  double* w1 = proto.w.data() + proto.w1_off();
  double* w2 = proto.w.data() + proto.w2_off();
  for (int i = 0; i < k1; ++i) w1[static_cast<std::size_t>(i) * in_dim + i] = a;
  for (int i = 0; i < k2; ++i) w1[static_cast<std::size_t>(in_dim + i) * in_dim + i] = -a;
  for (int i = 0; i < std::min(out, k1); ++i) {
    if (i < k2) {
      w2[static_cast<std::size_t>(i) * hidden + i] = 0.5 / a;
      w2[static_cast<std::size_t>(i) * hidden + in_dim + i] = -0.5 / a;
    } else {
      w2[static_cast<std::size_t>(i) * hidden + i] = 1.0 / a;
    }
  }
  const double s1 = 0.01 / std::sqrt(static_cast<double>(in_dim));
  for (std::size_t i = proto.w1_off(); i < proto.b1_off(); ++i) proto.w[i] += rng.uniform(-s1, s1);
  const double s2 = 0.01 / std::sqrt(static_cast<double>(hidden));
  for (std::size_t i = proto.w2_off(); i < proto.b2_off(); ++i) proto.w[i] += rng.uniform(-s2, s2);

  if (shared_h) {
    model.transforms[EMemNdtModel::kSharedKey] = proto;
  } else {
    for (int leaf = 0; leaf < tree.leaf_count; ++leaf) model.transforms[leaf] = proto;
  }
  model.refresh_cache();
  return model;
}

std::pair<double, std::size_t> leaf_similarity(const std::vector<double>& g, int leaf_id,
                                               const EMemNdtModel& model) {
  const LeafForward f = leaf_forward(g, leaf_id, model);
  return {f.gamma, f.best};
}

NodeScores propagate_scores(const Tree& tree, const std::map<int, double>& leaf_gamma) {
  NodeScores out;
  for (int leaf = 0; leaf < tree.leaf_count; ++leaf) {
    auto it = leaf_gamma.find(leaf);
    if (it == leaf_gamma.end()) {
      throw data_error("propagate_scores: missing leaf score for leaf " + std::to_string(leaf));
    }
    out.gamma[leaf] = it->second;
  }
  for (int id = tree.leaf_count; id <= tree.root_id; ++id) {
    const TreeNode& n = tree.node(id);
    if (n.children.size() != 2) {
      throw data_error("propagate_scores: inner node " + std::to_string(id) + " is not binary");
    }
    out.gamma[id] = (out.gamma.at(n.children[0]) + out.gamma.at(n.children[1])) / 2.0;
  }
  return out;
}

NodeScores mpm(const std::vector<double>& g, const EMemNdtModel& model) {
  return forward_scores(g, model).scores;
}

LeafDistribution lla(const NodeScores& scores, const EMemNdtModel& model) {
  return lla_full(scores, model.tree).dist;
}

PredictResult predict(const std::vector<double>& g, const EMemNdtModel& model) {
  ScoreForward sf = forward_scores(g, model);
  LlaFull ll = lla_full(sf.scores, model.tree);
  int best_leaf = 0;
  double best_logp = ll.dist.log_s.at(0);
  for (int leaf = 1; leaf < model.tree.leaf_count; ++leaf) {
    const double lp = ll.dist.log_s.at(leaf);
    if (lp > best_logp) {  // strict: ties keep the smaller leaf id
      best_logp = lp;
      best_leaf = leaf;
    }
  }
  PredictResult r;
  r.label = model.tree.node(best_leaf).label;
  r.leaf_id = best_leaf;
  r.best_prototype = sf.leaves.at(best_leaf).best;
  r.best_gamma = sf.leaves.at(best_leaf).gamma;
  r.distribution = std::move(ll.dist);
  return r;
}

void record_usage(EMemNdtModel& model, int leaf_id, std::size_t prototype_index) {
  auto it = model.banks.banks.find(leaf_id);
  if (it == model.banks.banks.end() || prototype_index >= it->second.usage_counts.size()) {
    throw data_error("record_usage: invalid leaf or prototype index");
  }
  it->second.usage_counts[prototype_index] += 1;
}

ExplanationTrace explain(const Instance& instance, const EncoderParams& encoder,
                         EMemNdtModel& model, const EdgePolicy& policy, bool track_usage) {
  const ForwardResult fr =
      encode_instance(instance, build_interaction_graphs(instance, policy), encoder);
  ScoreForward sf = forward_scores(fr.embedding.g, model);
  LlaFull ll = lla_full(sf.scores, model.tree);

  int best_leaf = 0;
  double best_logp = ll.dist.log_s.at(0);
  for (int leaf = 1; leaf < model.tree.leaf_count; ++leaf) {
    if (ll.dist.log_s.at(leaf) > best_logp) {
      best_logp = ll.dist.log_s.at(leaf);
      best_leaf = leaf;
    }
  }

  ExplanationTrace trace;
  trace.instance_id = instance.instance_id;
  trace.predicted_leaf = best_leaf;
  trace.predicted_label = model.tree.node(best_leaf).label;
  for (int id : model.tree.path_from_root(best_leaf)) {
    const TreeNode& n = model.tree.node(id);
    ExplanationTrace::PathNode pn;
    pn.node_id = id;
    if (n.kind == TreeNode::Kind::kLeaf) {
      pn.name = n.label;
    } else {
      pn.name = n.name.value_or("node-" + std::to_string(id));
      pn.child_probs = ll.node_probs.at(id);
    }
    trace.path.push_back(std::move(pn));
  }
  const LeafForward& lf = sf.leaves.at(best_leaf);
  trace.prototype.leaf_id = best_leaf;
  trace.prototype.index = lf.best;
  trace.prototype.instance_id =
      model.banks.banks.at(best_leaf).prototypes[lf.best].instance_id;
  trace.prototype.gamma = lf.gamma;
  trace.distribution = std::move(ll.dist);
  if (track_usage) record_usage(model, best_leaf, lf.best);
  return trace;
}

namespace {

// d(loss)/d(gamma) for every node, for one instance with ground-truth leaf.
// Softmax cross-entropy attaches at the children of every node on the
// root-to-leaf path; bottom-up means distribute top-down with factor 1/2.
std::vector<double> gamma_gradients(const Tree& tree, const NodeScores& scores, int true_leaf) {
  const int total = 2 * tree.leaf_count - 1;
  std::vector<double> dg(total, 0.0);
  const std::vector<int> path = tree.path_from_root(true_leaf);
  std::unordered_set<int> on_path(path.begin(), path.end());
  for (int id = tree.root_id; id >= tree.leaf_count; --id) {
    const TreeNode& n = tree.node(id);
    if (on_path.count(id)) {
      double logits[2] = {scores.gamma.at(n.children[0]), scores.gamma.at(n.children[1])};
      double logp[2];
      kernels::log_softmax(logits, logp, 2);
      for (int i = 0; i < 2; ++i) {
        dg[n.children[i]] += std::exp(logp[i]) - (on_path.count(n.children[i]) ? 1.0 : 0.0);
      }
    }
    dg[n.children[0]] += dg[id] / 2.0;
    dg[n.children[1]] += dg[id] / 2.0;
  }
  return dg;
}

// gradient of one instance's NLL into the transform parameter buffers
void backward_instance(const EMemNdtModel& model, const ScoreForward& sf, int true_leaf,
                       const std::vector<double>& g_embed, double scale,
                       std::map<int, std::vector<double>>& grads) {
  const std::vector<double> dg = gamma_gradients(model.tree, sf.scores, true_leaf);
  std::vector<double> du, dv;
  for (int leaf = 0; leaf < model.tree.leaf_count; ++leaf) {
    const double dgamma = dg[leaf] * scale;
    if (dgamma == 0.0) continue;
    const LeafForward& lf = sf.leaves.at(leaf);
    const LeafTransform& t = model.transform_for(leaf);
    const int key = model.shared_h ? EMemNdtModel::kSharedKey : leaf;
    std::vector<double>& gw = grads.at(key);
    const auto& cache = model.cache.at(leaf);
    const auto& bank = model.banks.banks.at(leaf);

    auto backprop_pair = [&](std::size_t k, double dcos) {
      cosine_backward(lf.u, cache.v[k], lf.cos[k], dcos, du, dv);
      transform_backward(t, g_embed.data(), lf.a1_u, du, gw);
      transform_backward(t, bank.prototypes[k].feature.data(), cache.a1[k], dv, gw);
    };
    if (model.aggregation == Aggregation::kMax) {
      backprop_pair(lf.best, model.rho * dgamma);
    } else {
      const double per = model.rho * dgamma / static_cast<double>(lf.cos.size());
      for (std::size_t k = 0; k < lf.cos.size(); ++k) backprop_pair(k, per);
    }
  }
}

double instance_nll(const EMemNdtModel& model, const ScoreForward& sf, int true_leaf) {
  LlaFull ll = lla_full(sf.scores, model.tree);
  return -ll.dist.log_s.at(true_leaf);
}

}  // namespace

double ndt_loss(const std::vector<std::vector<double>>& gs, const std::vector<int>& leaf_ids,
                const EMemNdtModel& model) {
  if (gs.empty() || gs.size() != leaf_ids.size()) {
    throw usage_error("ndt_loss: batch must be nonempty with matching labels");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    if (leaf_ids[i] < 0 || leaf_ids[i] >= model.tree.leaf_count) {
      throw data_error("ndt_loss: leaf id out of range");
    }
    ScoreForward sf = forward_scores(gs[i], model);
    sum += instance_nll(model, sf, leaf_ids[i]);
  }
  const double loss = sum / static_cast<double>(gs.size());
  if (!std::isfinite(loss)) throw numeric_error("ndt_loss: non-finite loss");
  return loss;
}

void train_ndt(EMemNdtModel& model, const Dataset& train, const EncoderParams& encoder,
               const NdtTrainConfig& cfg, const EdgePolicy& policy) {
  if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.lr <= 0.0) {
    throw usage_error("train_ndt: epochs, batch_size and lr must be positive");
  }
  if (train.instances.empty()) throw data_error("train_ndt: empty dataset");

  const std::vector<ForwardResult> encoded = encode_dataset(train, encoder, policy);
  std::vector<std::vector<double>> gs;
  std::vector<int> leaf_ids;
  gs.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto leaf = model.tree.leaf_for_label(train.instances[i].label);
    if (!leaf) {
      throw data_error("train_ndt: label '" + train.instances[i].label + "' has no leaf");
    }
    gs.push_back(encoded[i].embedding.g);
    leaf_ids.push_back(*leaf);
  }

  // Adam state per transform
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<int, std::vector<double>> grads;
  std::map<int, Moments> moments;
  for (const auto& [key, t] : model.transforms) {
    grads[key] = std::vector<double>(t.w.size(), 0.0);
    moments[key] = {std::vector<double>(t.w.size(), 0.0), std::vector<double>(t.w.size(), 0.0)};
  }
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t step = 0;

  Rng shuffle_rng(cfg.seed ^ 0xA0761D6478BD642FULL);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      model.refresh_cache();
      for (auto& [key, g] : grads) std::fill(g.begin(), g.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const std::size_t i = order[bi];
        ScoreForward sf = forward_scores(gs[i], model);
        batch_loss += instance_nll(model, sf, leaf_ids[i]);
        backward_instance(model, sf, leaf_ids[i], gs[i], inv_b, grads);
      }
      batch_loss *= inv_b;
      if (!std::isfinite(batch_loss)) {
        throw numeric_error("train_ndt: non-finite loss in epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(n_batches));
      }
      step += 1;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (auto& [key, t] : model.transforms) {
        std::vector<double>& g = grads.at(key);
        Moments& mo = moments.at(key);
        if (cfg.weight_decay != 0.0) axpy(cfg.weight_decay, t.w.data(), g.data(), g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
          mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
          t.w[i] -= cfg.lr * (mo.m[i] / bc1) / (std::sqrt(mo.v[i] / bc2) + eps);
        }
      }
      epoch_loss += batch_loss;
      ++n_batches;
    }
    std::cerr << "[train-ndt] epoch " << (epoch + 1) << "/" << cfg.epochs
              << " mean_loss=" << (epoch_loss / static_cast<double>(n_batches)) << "\n";
  }
  model.refresh_cache();
}

GradCheckResult ndt_grad_check(const EMemNdtModel& model,
                               const std::vector<std::vector<double>>& gs,
                               const std::vector<int>& leaf_ids, double epsilon,
                               std::size_t n_samples, std::uint64_t seed) {
  if (epsilon < 1e-6 || epsilon > 1e-3) {
    throw usage_error("ndt_grad_check: epsilon must be in [1e-6, 1e-3]");
  }
  if (gs.empty() || gs.size() != leaf_ids.size()) {
    throw usage_error("ndt_grad_check: batch must be nonempty with matching labels");
  }

  // analytic gradient of the mean NLL
  std::map<int, std::vector<double>> grads;
  for (const auto& [key, t] : model.transforms) {
    grads[key] = std::vector<double>(t.w.size(), 0.0);
  }
  const double inv_b = 1.0 / static_cast<double>(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    ScoreForward sf = forward_scores(gs[i], model);
    backward_instance(model, sf, leaf_ids[i], gs[i], inv_b, grads);
  }

  // flat coordinate space over transforms in key order
  std::vector<std::pair<int, std::size_t>> coord_map;
  for (const auto& [key, t] : model.transforms) {
    for (std::size_t i = 0; i < t.w.size(); ++i) coord_map.emplace_back(key, i);
  }
  Rng rng(seed);
  std::set<std::size_t> coords;
  while (coords.size() < std::min(n_samples, coord_map.size())) {
    coords.insert(static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(coord_map.size()) - 1)));
  }

  EMemNdtModel probe = model;
  GradCheckResult result;
  for (std::size_t c : coords) {
    const auto [key, idx] = coord_map[c];
    double& slot = probe.transforms.at(key).w[idx];
    const double keep = slot;
    slot = keep + epsilon;
    probe.refresh_cache();
    const double lp = ndt_loss(gs, leaf_ids, probe);
    slot = keep - epsilon;
    probe.refresh_cache();
    const double lm = ndt_loss(gs, leaf_ids, probe);
    slot = keep;
    const double fd = (lp - lm) / (2.0 * epsilon);
    const double an = grads.at(key)[idx];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_coordinate = c;
    }
    ++result.n_checked;
  }
  probe.refresh_cache();
  return result;
}

// ---------------------------------------------------------------------------
// Serialization ("emem-ndt/v1")
// ---------------------------------------------------------------------------

void save_model(const EMemNdtModel& model, const std::string& path) {
  json banks = json::array();
  for (const auto& [leaf_id, bank] : model.banks.banks) {
    json protos = json::array();
    for (const MemoryPrototype& p : bank.prototypes) {
      json edges_per_frame = json::array();
      for (const InteractionGraph& gr : p.graphs) {
        json edges = json::array();
        for (const auto& [a, b] : gr.edges) edges.push_back(json::array({a, b}));
        edges_per_frame.push_back(std::move(edges));
      }
      protos.push_back(json{{"feature", p.feature},
                            {"instance_id", p.instance_id},
                            {"instance", instance_to_json(p.raw)},
                            {"graph_edges", std::move(edges_per_frame)}});
    }
    banks.push_back(json{{"leaf_id", leaf_id},
                         {"eta", bank.eta},
                         {"usage", bank.usage_counts},
                         {"prototypes", std::move(protos)}});
  }
  json transforms = json::array();
  for (const auto& [key, t] : model.transforms) {
    transforms.push_back(json{{"leaf_id", key},
                              {"in_dim", t.in_dim},
                              {"hidden", t.hidden},
                              {"out", t.out},
                              {"w", t.w}});
  }
  json j{{"version", "emem-ndt/v1"},
         {"rho", model.rho},
         {"aggregation", aggregation_name(model.aggregation)},
         {"shared_h", model.shared_h},
         {"encoder_hash", model.encoder_hash},
         {"tree", tree_to_json(model.tree)},
         {"banks", std::move(banks)},
         {"transforms", std::move(transforms)}};
  std::ofstream out(path);
  if (!out) throw data_error("cannot open output file: " + path);
  out << j.dump() << '\n';
  if (!out) throw data_error("write failure: " + path);
}

EMemNdtModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open model file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw data_error(path + ": parse error: " + e.what());
  }
  if (!j.contains("version") || j.at("version") != "emem-ndt/v1") {
    throw data_error(path + ": expected version emem-ndt/v1");
  }
  EMemNdtModel model;
  model.rho = j.at("rho").get<double>();
  if (!(model.rho > 1.0)) throw data_error(path + ": rho must be > 1");
  const auto agg = aggregation_from_name(j.at("aggregation").get<std::string>());
  if (!agg) throw data_error(path + ": unknown aggregation mode");
  model.aggregation = *agg;
  model.shared_h = j.at("shared_h").get<bool>();
  model.encoder_hash = j.value("encoder_hash", "");
  model.tree = tree_from_json(j.at("tree"), path);

  for (const json& jb : j.at("banks")) {
    LeafMemoryBank bank;
    bank.leaf_id = jb.at("leaf_id").get<int>();
    bank.eta = jb.at("eta").get<double>();
    for (const json& jp : jb.at("prototypes")) {
      MemoryPrototype p;
      p.feature = jp.at("feature").get<std::vector<double>>();
      for (double v : p.feature) {
        if (!std::isfinite(v)) throw data_error(path + ": non-finite prototype feature");
      }
      p.instance_id = jp.at("instance_id").get<std::string>();
      p.raw = instance_from_json(jp.at("instance"), path);
      validate_instance(p.raw);
      const json& jef = jp.at("graph_edges");
      if (jef.size() != p.raw.frames.size()) {
        throw data_error(path + ": prototype graph count differs from frame count");
      }
      for (std::size_t t = 0; t < p.raw.frames.size(); ++t) {
        InteractionGraph gr;
        gr.vertices = p.raw.frames[t].agents;
        gr.target_uid = p.raw.frames[t].target_uid;
        for (const json& je : jef[t]) {
          const std::int64_t a = je.at(0).get<std::int64_t>();
          const std::int64_t b = je.at(1).get<std::int64_t>();
          if (!p.raw.frames[t].find(a) || !p.raw.frames[t].find(b)) {
            throw data_error(path + ": graph edge endpoint missing from frame");
          }
          gr.edges.emplace_back(a, b);
        }
        p.graphs.push_back(std::move(gr));
      }
      bank.prototypes.push_back(std::move(p));
    }
    bank.usage_counts = jb.at("usage").get<std::vector<std::uint64_t>>();
    if (bank.usage_counts.size() != bank.prototypes.size()) {
      throw data_error(path + ": usage count length differs from bank size");
    }
    if (bank.prototypes.empty()) {
      throw data_error(path + ": empty memory bank for leaf " + std::to_string(bank.leaf_id));
    }
    model.banks.banks[bank.leaf_id] = std::move(bank);
  }
  for (int leaf = 0; leaf < model.tree.leaf_count; ++leaf) {
    if (!model.banks.banks.count(leaf)) {
      throw data_error(path + ": missing memory bank for leaf " + std::to_string(leaf));
    }
  }

  for (const json& jt : j.at("transforms")) {
    LeafTransform t;
    const int key = jt.at("leaf_id").get<int>();
    t.in_dim = jt.at("in_dim").get<int>();
    t.hidden = jt.at("hidden").get<int>();
    t.out = jt.at("out").get<int>();
    t.w = jt.at("w").get<std::vector<double>>();
    if (t.w.size() != t.size()) {
      throw data_error(path + ": transform weight count mismatch for leaf " + std::to_string(key));
    }
    for (double v : t.w) {
      if (!std::isfinite(v)) throw data_error(path + ": non-finite transform weight");
    }
    model.transforms[key] = std::move(t);
  }
  if (model.shared_h) {
    if (!model.transforms.count(EMemNdtModel::kSharedKey)) {
      throw data_error(path + ": shared_h model missing the shared transform");
    }
  } else {
    for (int leaf = 0; leaf < model.tree.leaf_count; ++leaf) {
      if (!model.transforms.count(leaf)) {
        throw data_error(path + ": missing transform for leaf " + std::to_string(leaf));
      }
    }
  }
  model.refresh_cache();
  return model;
}

}  // namespace emem
