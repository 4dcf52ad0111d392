// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lorap/common.hpp"

namespace lorap {

/// Immutable CSR adjacency. Row i lists the neighbors N(i) of node i with
/// strictly increasing column indices; optional per-edge weights are aligned
/// with the column array.
class Graph {
 public:
  Graph() = default;
  /// Validates every CSR invariant; throws InputError on violation.
  Graph(std::size_t num_nodes, std::vector<std::uint64_t> row_ptr,
        std::vector<std::uint32_t> col_idx,
        std::optional<std::vector<double>> edge_weight = std::nullopt);

  std::size_t num_nodes() const { return num_nodes_; }
  std::size_t num_edges() const { return col_idx_.size(); }
  std::span<const std::uint64_t> row_ptr() const { return row_ptr_; }
  std::span<const std::uint32_t> col_idx() const { return col_idx_; }
  std::span<const std::uint32_t> degree() const { return degree_; }
  std::uint32_t degree(std::size_t i) const { return degree_[i]; }
  bool has_weights() const { return edge_weight_.has_value(); }
  std::span<const double> edge_weight() const {
    return edge_weight_ ? std::span<const double>(*edge_weight_) : std::span<const double>();
  }
  std::span<const std::uint32_t> neighbors(std::size_t i) const {
    return {col_idx_.data() + row_ptr_[i], degree_[i]};
  }
  /// Weight of the e-th CSR entry (1 when the graph is unweighted).
  double weight(std::size_t e) const { return edge_weight_ ? (*edge_weight_)[e] : 1.0; }
  bool has_edge(std::size_t i, std::size_t j) const;

  /// Dense N×N matrix with A(i,j) = weight of edge i→j.
  DenseMatrix to_dense() const;

  bool operator==(const Graph&) const = default;

 private:
  std::size_t num_nodes_ = 0;
  std::vector<std::uint64_t> row_ptr_{0};
  std::vector<std::uint32_t> col_idx_;
  std::optional<std::vector<double>> edge_weight_;
  std::vector<std::uint32_t> degree_;
};

enum class Split : std::uint8_t { none = 0, train = 1, val = 2, test = 3 };

struct LabelVector {
  std::vector<std::uint32_t> labels;
  std::size_t num_classes = 0;
  std::vector<Split> split;

  std::size_t count(Split s) const;
  std::vector<std::size_t> indices(Split s) const;
};

using FeatureMatrix = DenseMatrix;

struct Dataset {
  Graph graph;
  FeatureMatrix features;
  LabelVector labels;
  std::vector<std::string> node_ids;  // empty for synthetic data
  std::size_t dropped_edges = 0;
};

using Edge = std::pair<std::uint32_t, std::uint32_t>;

Graph build_csr(std::span<const Edge> edges, std::size_t num_nodes, bool make_undirected);

enum class NormMode { sym, row, none };

/// Re-weights the graph. `sym` gives 1/sqrt(d̃_i d̃_j), `row` gives 1/d̃_i,
/// `none` gives unit weights, where d̃ counts self-loops once added. A node
/// with no edges keeps an empty row.
Graph normalize_adjacency(const Graph& g, NormMode mode, bool add_self_loops);

/// Parses the LINQS `.content` / `.cites` pair. Node order follows the
/// content file; labels are indexed by first occurrence; citations become
/// undirected edges and references to unknown ids are dropped and counted.
Dataset load_content_cites(std::istream& content, std::istream& cites);

/// Writes the content/cites pair load_content_cites reads back, plus an
/// optional split file. Synthetic nodes are named n0, n1, ...
void save_content_cites(const Dataset& ds, std::ostream& content, std::ostream& cites,
                        std::ostream* split = nullptr);

/// Stochastic block model fixture with Gaussian class-mean features and a
/// seeded 60/20/20 split.
Dataset synth_sbm(std::span<const std::size_t> block_sizes, double p_in, double p_out,
                  std::size_t d, double class_signal, std::uint64_t seed);

/// Applies a `<node-id> <train|val|test>` split file.
void apply_split_file(Dataset& ds, std::istream& split_file);

/// Deterministic citation-style split: `per_class` training nodes per class,
/// then `num_val` validation and `num_test` test nodes, drawn from one seeded
/// permutation.
void assign_standard_split(LabelVector& labels, std::size_t per_class, std::size_t num_val,
                           std::size_t num_test, std::uint64_t seed);

/// "LRG1" binary cache.
void save_dataset(std::ostream& os, const Dataset& ds);
Dataset load_dataset(std::istream& is);

}  // namespace lorap
