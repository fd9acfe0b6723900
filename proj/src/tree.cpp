#include "emem/tree.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "emem/error.hpp"
#include "emem/kernels.hpp"
#include "emem/serial.hpp"
#include "json.hpp"

namespace emem {

using nlohmann::json;

std::string linkage_name(Linkage l) {
  switch (l) {
    case Linkage::kAverage: return "average";
    case Linkage::kSingle: return "single";
    case Linkage::kComplete: return "complete";
  }
  return "average";
}

std::optional<Linkage> linkage_from_name(const std::string& name) {
  if (name == "average") return Linkage::kAverage;
  if (name == "single") return Linkage::kSingle;
  if (name == "complete") return Linkage::kComplete;
  return std::nullopt;
}

const TreeNode& Tree::node(int id) const {
  auto it = nodes.find(id);
  if (it == nodes.end()) throw data_error("tree: unknown node_id " + std::to_string(id));
  return it->second;
}

int Tree::parent_of(int id) const {
  for (const auto& [nid, n] : nodes) {
    for (int c : n.children) {
      if (c == id) return nid;
    }
  }
  return -1;
}

std::optional<int> Tree::leaf_for_label(const std::string& label) const {
  for (const auto& [nid, n] : nodes) {
    if (n.kind == TreeNode::Kind::kLeaf && n.label == label) return nid;
  }
  return std::nullopt;
}

std::vector<int> Tree::path_from_root(int leaf_id) const {
  std::vector<int> path;
  int cur = leaf_id;
  path.push_back(cur);
  while (cur != root_id) {
    cur = parent_of(cur);
    if (cur < 0) throw data_error("tree: node " + std::to_string(leaf_id) + " unreachable from root");
    path.push_back(cur);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

std::vector<int> Tree::leaves_in_order() const {
  std::vector<int> out;
  for (int i = 0; i < leaf_count; ++i) out.push_back(i);
  return out;
}

void validate_tree(const Tree& tree) {
  const int m = tree.leaf_count;
  if (m < 2) throw data_error("tree: must have at least 2 leaves");
  if (static_cast<int>(tree.nodes.size()) != 2 * m - 1) {
    throw data_error("tree: expected " + std::to_string(2 * m - 1) + " nodes for " +
                     std::to_string(m) + " leaves, found " + std::to_string(tree.nodes.size()));
  }
  std::unordered_map<int, int> parent_count;
  for (int id = 0; id < 2 * m - 1; ++id) {
    auto it = tree.nodes.find(id);
    if (it == tree.nodes.end()) throw data_error("tree: missing node_id " + std::to_string(id));
    const TreeNode& n = it->second;
    if (n.node_id != id) throw data_error("tree: node keyed " + std::to_string(id) + " carries node_id " + std::to_string(n.node_id));
    if (id < m) {
      if (n.kind != TreeNode::Kind::kLeaf) {
        throw data_error("tree: node " + std::to_string(id) + " must be a leaf (ids 0..M-1 are leaves)");
      }
      if (!n.children.empty()) throw data_error("tree: leaf " + std::to_string(id) + " has children");
      if (n.label.empty()) throw data_error("tree: leaf " + std::to_string(id) + " has no label");
    } else {
      if (n.kind == TreeNode::Kind::kLeaf) {
        throw data_error("tree: node " + std::to_string(id) + " in the inner id range is marked leaf");
      }
      if (n.children.size() != 2) {
        throw data_error("tree: inner node " + std::to_string(id) + " has " +
                         std::to_string(n.children.size()) + " children; inner nodes are binary");
      }
      for (int c : n.children) {
        if (c < 0 || c >= id) {
          throw data_error("tree: node " + std::to_string(id) + " lists child " + std::to_string(c) +
                           "; children must precede their parent in merge order");
        }
        parent_count[c] += 1;
      }
    }
  }
  if (tree.root_id != 2 * m - 2) {
    throw data_error("tree: root_id must be the final merge " + std::to_string(2 * m - 2));
  }
  if (tree.node(tree.root_id).kind != TreeNode::Kind::kRoot) {
    throw data_error("tree: node " + std::to_string(tree.root_id) + " must have kind 'root'");
  }
  for (int id = 0; id < 2 * m - 1; ++id) {
    const int pc = parent_count.count(id) ? parent_count.at(id) : 0;
    if (id == tree.root_id) {
      if (pc != 0) throw data_error("tree: root node " + std::to_string(id) + " has a parent");
    } else if (pc == 0) {
      throw data_error("tree: node " + std::to_string(id) + " is disconnected from the root");
    } else if (pc > 1) {
      throw data_error("tree: node " + std::to_string(id) + " is listed under " +
                       std::to_string(pc) + " parents");
    }
  }
  // Distinct leaf labels.
  std::unordered_map<std::string, int> seen;
  for (int id = 0; id < m; ++id) {
    const auto& lbl = tree.node(id).label;
    if (seen.count(lbl)) throw data_error("tree: duplicate leaf label '" + lbl + "'");
    seen[lbl] = id;
  }
}

std::vector<TextEmbedding> load_label_embeddings(const std::string& path,
                                                 const BehaviorTaxonomy& taxonomy) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open embeddings file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw data_error(path + ": parse error: " + e.what());
  }
  if (!j.is_object()) throw data_error(path + ": embeddings file must be a JSON object");

  std::vector<TextEmbedding> out;
  std::size_t width = 0;
  for (const auto& [label, desc] : taxonomy.labels) {
    auto it = j.find(label);
    if (it == j.end()) throw data_error(path + ": missing embedding for label '" + label + "'");
    if (!it->is_array()) throw data_error(path + ": embedding for '" + label + "' must be an array");
    TextEmbedding e;
    e.label = label;
    for (const json& v : *it) {
      if (!v.is_number()) throw data_error(path + ": non-numeric entry in embedding '" + label + "'");
      e.vec.push_back(v.get<double>());
    }
    if (width == 0) width = e.vec.size();
    if (e.vec.size() != width) {
      throw data_error(path + ": width mismatch: embedding '" + label + "' has width " +
                       std::to_string(e.vec.size()) + ", expected " + std::to_string(width));
    }
    double norm = kernels::norm2(e.vec.data(), e.vec.size());
    if (!std::isfinite(norm) || norm == 0.0) {
      throw data_error(path + ": embedding for '" + label + "' must be finite with nonzero norm");
    }
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t seed) {
  std::uint64_t h = 14695981039346656037ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  // splitmix-style finalizer spreads the low bits used for bucketing
  h ^= h >> 30;
  h *= 0xBF58476D1CE4E5B9ULL;
  h ^= h >> 27;
  h *= 0x94D049BB133111EBULL;
  h ^= h >> 31;
  return h;
}

}  // namespace

std::vector<double> fallback_embed(const std::string& description, std::size_t width,
                                   std::uint64_t seed) {
  if (description.empty()) throw data_error("fallback_embed: empty description");
  if (width == 0) throw usage_error("fallback_embed: width must be positive");
  std::vector<double> v(width, 0.0);
  auto add_gram = [&](const char* p, std::size_t n) {
    const std::uint64_t h = fnv1a(p, n, seed);
    const std::size_t bucket = static_cast<std::size_t>(h % width);
    v[bucket] += (h >> 63) ? 1.0 : -1.0;
  };
  if (description.size() < 3) {
    add_gram(description.data(), description.size());
  } else {
    for (std::size_t i = 0; i + 3 <= description.size(); ++i) {
      add_gram(description.data() + i, 3);
    }
  }
  double norm = kernels::norm2(v.data(), v.size());
  if (norm == 0.0) {
    // all grams cancelled; fall back to a one-hot on the whole string
    const std::uint64_t h = fnv1a(description.data(), description.size(), seed);
    v[h % width] = 1.0;
    norm = 1.0;
  }
  kernels::scal(1.0 / norm, v.data(), v.size());
  return v;
}

std::vector<TextEmbedding> fallback_embed_taxonomy(const BehaviorTaxonomy& taxonomy,
                                                   std::size_t width, std::uint64_t seed) {
  std::vector<TextEmbedding> out;
  for (const auto& [label, desc] : taxonomy.labels) {
    out.push_back({label, fallback_embed(desc, width, seed)});
  }
  return out;
}

Tree build_tree(const std::vector<TextEmbedding>& embeddings, Linkage linkage) {
  const int m = static_cast<int>(embeddings.size());
  if (m < 2) throw data_error("build_tree: need at least 2 embeddings");
  const std::size_t width = embeddings.front().vec.size();
  for (const auto& e : embeddings) {
    if (e.vec.size() != width) throw data_error("build_tree: embedding width mismatch");
  }

  const int total = 2 * m - 1;
  // symmetric distance matrix over all (eventual) cluster ids
  std::vector<double> dist(static_cast<std::size_t>(total) * total, 0.0);
  auto d = [&](int a, int b) -> double& { return dist[static_cast<std::size_t>(a) * total + b]; };
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      std::vector<double> diff(width);
      for (std::size_t k = 0; k < width; ++k) diff[k] = embeddings[i].vec[k] - embeddings[j].vec[k];
      const double dd = kernels::norm2(diff.data(), diff.size());
      d(i, j) = d(j, i) = dd;
    }
  }

  Tree tree;
  tree.leaf_count = m;
  for (int i = 0; i < m; ++i) {
    TreeNode leaf;
    leaf.node_id = i;
    leaf.kind = TreeNode::Kind::kLeaf;
    leaf.label = embeddings[i].label;
    tree.nodes[i] = std::move(leaf);
  }

  std::vector<int> active;
  std::vector<int> size(total, 1);
  for (int i = 0; i < m; ++i) active.push_back(i);

  int next_id = m;
  while (active.size() > 1) {
    int best_a = -1, best_b = -1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < active.size(); ++i) {
      for (std::size_t j = i + 1; j < active.size(); ++j) {
        const int a = std::min(active[i], active[j]);
        const int b = std::max(active[i], active[j]);
        if (d(a, b) < best) {  // strict: first minimum wins, i.e. smallest (a, b)
          best = d(a, b);
          best_a = a;
          best_b = b;
        }
      }
    }
    const int nid = next_id++;
    // Lance-Williams updates against every other active cluster
    for (int k : active) {
      if (k == best_a || k == best_b) continue;
      double nd = 0.0;
      switch (linkage) {
        case Linkage::kAverage:
          nd = (size[best_a] * d(k, best_a) + size[best_b] * d(k, best_b)) /
               static_cast<double>(size[best_a] + size[best_b]);
          break;
        case Linkage::kSingle:
          nd = std::min(d(k, best_a), d(k, best_b));
          break;
        case Linkage::kComplete:
          nd = std::max(d(k, best_a), d(k, best_b));
          break;
      }
      d(k, nid) = d(nid, k) = nd;
    }
    size[nid] = size[best_a] + size[best_b];
    TreeNode inner;
    inner.node_id = nid;
    inner.kind = TreeNode::Kind::kInner;
    inner.children = {best_a, best_b};
    tree.nodes[nid] = std::move(inner);

    active.erase(std::remove(active.begin(), active.end(), best_a), active.end());
    active.erase(std::remove(active.begin(), active.end(), best_b), active.end());
    active.push_back(nid);
  }

  tree.root_id = next_id - 1;
  tree.nodes[tree.root_id].kind = TreeNode::Kind::kRoot;
  validate_tree(tree);
  return tree;
}

namespace {

const char* kind_name(TreeNode::Kind k) {
  switch (k) {
    case TreeNode::Kind::kLeaf: return "leaf";
    case TreeNode::Kind::kInner: return "inner";
    case TreeNode::Kind::kRoot: return "root";
  }
  return "leaf";
}

TreeNode::Kind kind_from_name(const std::string& s, const std::string& ctx) {
  if (s == "leaf") return TreeNode::Kind::kLeaf;
  if (s == "inner") return TreeNode::Kind::kInner;
  if (s == "root") return TreeNode::Kind::kRoot;
  throw data_error(ctx + ": unknown node kind '" + s + "'");
}

}  // namespace

json tree_to_json(const Tree& tree) {
  json nodes = json::array();
  for (const auto& [id, n] : tree.nodes) {
    json jn{{"node_id", id}, {"kind", kind_name(n.kind)}, {"children", n.children}};
    if (n.kind == TreeNode::Kind::kLeaf) jn["label"] = n.label;
    if (n.name) jn["name"] = *n.name;
    nodes.push_back(std::move(jn));
  }
  return json{{"version", "tree/v1"}, {"root_id", tree.root_id}, {"nodes", std::move(nodes)}};
}

Tree tree_from_json(const json& j, const std::string& ctx) {
  if (!j.contains("version") || j.at("version") != "tree/v1") {
    throw data_error(ctx + ": expected version tree/v1");
  }
  Tree tree;
  if (!j.contains("root_id") || !j.at("root_id").is_number_integer()) {
    throw data_error(ctx + ": missing integer root_id");
  }
  tree.root_id = j.at("root_id").get<int>();
  if (!j.contains("nodes") || !j.at("nodes").is_array()) {
    throw data_error(ctx + ": missing nodes array");
  }
  int leaf_count = 0;
  for (const json& jn : j.at("nodes")) {
    TreeNode n;
    if (!jn.contains("node_id") || !jn.at("node_id").is_number_integer()) {
      throw data_error(ctx + ": node without integer node_id");
    }
    n.node_id = jn.at("node_id").get<int>();
    n.kind = kind_from_name(jn.value("kind", ""), ctx);
    if (jn.contains("children")) {
      for (const json& c : jn.at("children")) n.children.push_back(c.get<int>());
    }
    if (jn.contains("label")) n.label = jn.at("label").get<std::string>();
    if (jn.contains("name")) n.name = jn.at("name").get<std::string>();
    if (n.kind == TreeNode::Kind::kLeaf) ++leaf_count;
    if (tree.nodes.count(n.node_id)) {
      throw data_error(ctx + ": duplicate node_id " + std::to_string(n.node_id));
    }
    tree.nodes[n.node_id] = std::move(n);
  }
  tree.leaf_count = leaf_count;
  validate_tree(tree);
  return tree;
}

Tree load_tree(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open tree file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw data_error(path + ": parse error: " + e.what());
  }
  return tree_from_json(j, path);
}

void save_tree(const Tree& tree, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open output file: " + path);
  out << tree_to_json(tree).dump(2) << '\n';
}

Tree annotate_node(const Tree& tree, int node_id, const std::string& name) {
  auto it = tree.nodes.find(node_id);
  if (it == tree.nodes.end()) {
    throw data_error("annotate: unknown node_id " + std::to_string(node_id));
  }
  if (it->second.kind == TreeNode::Kind::kLeaf) {
    throw data_error("annotate: node " + std::to_string(node_id) +
                     " is a leaf; leaf behavior labels cannot be renamed");
  }
  Tree out = tree;
  out.nodes[node_id].name = name;
  return out;
}

}  // namespace emem
