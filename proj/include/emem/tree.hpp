#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emem/data_model.hpp"

namespace emem {

struct TextEmbedding {
  std::string label;
  std::vector<double> vec;
};

enum class Linkage { kAverage, kSingle, kComplete };

std::string linkage_name(Linkage l);
std::optional<Linkage> linkage_from_name(const std::string& name);

// Leaves are 0..M-1 in taxonomy order; inner nodes are M, M+1, ... in merge
// order, so a parent id always exceeds both child ids. The last merge is the
// root.
struct TreeNode {
  int node_id = 0;
  enum class Kind { kLeaf, kInner, kRoot } kind = Kind::kLeaf;
  std::vector<int> children;        // exactly 2 for inner/root, empty for leaves
  std::string label;                // leaves only: behavior label
  std::optional<std::string> name;  // inner/root only: human annotation
};

struct Tree {
  std::map<int, TreeNode> nodes;
  int root_id = 0;
  int leaf_count = 0;

  const TreeNode& node(int id) const;
  int parent_of(int id) const;  // -1 for the root
  std::optional<int> leaf_for_label(const std::string& label) const;
  std::vector<int> path_from_root(int leaf_id) const;
  std::vector<int> leaves_in_order() const;  // ids 0..M-1
};

void validate_tree(const Tree& tree);

std::vector<TextEmbedding> load_label_embeddings(const std::string& path,
                                                 const BehaviorTaxonomy& taxonomy);

// Offline stand-in for a text-embedding service: signed character-trigram
// hashing into `width` buckets, L2-normalized. Same string, same vector.
std::vector<double> fallback_embed(const std::string& description, std::size_t width,
                                   std::uint64_t seed);

std::vector<TextEmbedding> fallback_embed_taxonomy(const BehaviorTaxonomy& taxonomy,
                                                   std::size_t width, std::uint64_t seed);

// Agglomerative clustering over Euclidean distances (Lance-Williams updates).
// Ties break on the lexicographically smallest (id_a, id_b) pair.
Tree build_tree(const std::vector<TextEmbedding>& embeddings, Linkage linkage);

Tree load_tree(const std::string& path);
void save_tree(const Tree& tree, const std::string& path);

Tree annotate_node(const Tree& tree, int node_id, const std::string& name);

}  // namespace emem
