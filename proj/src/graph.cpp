// SPDX-License-Identifier: Apache-2.0
#include "lorap/graph.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string_view>
#include <unordered_map>

namespace lorap {

Graph::Graph(std::size_t num_nodes, std::vector<std::uint64_t> row_ptr,
             std::vector<std::uint32_t> col_idx, std::optional<std::vector<double>> edge_weight)
    : num_nodes_(num_nodes),
      row_ptr_(std::move(row_ptr)),
      col_idx_(std::move(col_idx)),
      edge_weight_(std::move(edge_weight)) {
  if (row_ptr_.size() != num_nodes_ + 1) throw InputError("Graph: row_ptr length != num_nodes+1");
  if (row_ptr_.front() != 0) throw InputError("Graph: row_ptr[0] != 0");
  if (row_ptr_.back() != col_idx_.size()) throw InputError("Graph: row_ptr[N] != num_edges");
  if (edge_weight_ && edge_weight_->size() != col_idx_.size())
    throw InputError("Graph: edge_weight not aligned with col_idx");
  degree_.resize(num_nodes_);
  for (std::size_t i = 0; i < num_nodes_; ++i) {
    if (row_ptr_[i + 1] < row_ptr_[i]) throw InputError("Graph: row_ptr decreasing");
    degree_[i] = static_cast<std::uint32_t>(row_ptr_[i + 1] - row_ptr_[i]);
    for (std::uint64_t e = row_ptr_[i]; e < row_ptr_[i + 1]; ++e) {
      if (col_idx_[e] >= num_nodes_) throw InputError("Graph: column index out of range");
      if (e > row_ptr_[i] && col_idx_[e] <= col_idx_[e - 1])
        throw InputError("Graph: columns not strictly increasing in row " + std::to_string(i));
    }
  }
}

bool Graph::has_edge(std::size_t i, std::size_t j) const {
  const auto nb = neighbors(i);
  return std::binary_search(nb.begin(), nb.end(), static_cast<std::uint32_t>(j));
}

DenseMatrix Graph::to_dense() const {
  DenseMatrix a(num_nodes_, num_nodes_);
  for (std::size_t i = 0; i < num_nodes_; ++i)
    for (std::uint64_t e = row_ptr_[i]; e < row_ptr_[i + 1]; ++e) a(i, col_idx_[e]) = weight(e);
  return a;
}

std::size_t LabelVector::count(Split s) const {
  return static_cast<std::size_t>(std::count(split.begin(), split.end(), s));
}

std::vector<std::size_t> LabelVector::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == s) out.push_back(i);
  return out;
}

Graph build_csr(std::span<const Edge> edges, std::size_t num_nodes, bool make_undirected) {
  if (num_nodes == 0) throw InputError("build_csr: num_nodes must be positive");
  std::vector<Edge> all;
  all.reserve(edges.size() * (make_undirected ? 2 : 1));
  for (const auto& [u, v] : edges) {
    if (u >= num_nodes || v >= num_nodes)
      throw InputError("build_csr: endpoint out of range (" + std::to_string(u) + "," +
                       std::to_string(v) + ")");
    all.emplace_back(u, v);
    if (make_undirected && u != v) all.emplace_back(v, u);
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  std::vector<std::uint64_t> row_ptr(num_nodes + 1, 0);
  std::vector<std::uint32_t> col_idx;
  col_idx.reserve(all.size());
  for (const auto& [u, v] : all) {
    ++row_ptr[u + 1];
    col_idx.push_back(v);
  }
  std::partial_sum(row_ptr.begin(), row_ptr.end(), row_ptr.begin());
  return Graph(num_nodes, std::move(row_ptr), std::move(col_idx));
}

Graph normalize_adjacency(const Graph& g, NormMode mode, bool add_self_loops) {
  const std::size_t n = g.num_nodes();
  std::vector<std::uint64_t> row_ptr(n + 1, 0);
  std::vector<std::uint32_t> col_idx;
  col_idx.reserve(g.num_edges() + (add_self_loops ? n : 0));
  for (std::size_t i = 0; i < n; ++i) {
    bool self_done = !add_self_loops;
    for (std::uint32_t j : g.neighbors(i)) {
      if (!self_done && j >= i) {
        if (j != i) col_idx.push_back(static_cast<std::uint32_t>(i));
        self_done = true;
      }
      col_idx.push_back(j);
    }
    if (!self_done) col_idx.push_back(static_cast<std::uint32_t>(i));
    row_ptr[i + 1] = col_idx.size();
  }

  std::vector<double> deg(n);
  for (std::size_t i = 0; i < n; ++i) deg[i] = static_cast<double>(row_ptr[i + 1] - row_ptr[i]);

  std::vector<double> w(col_idx.size(), 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::uint64_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
      switch (mode) {
        case NormMode::sym:
          w[e] = 1.0 / std::sqrt(deg[i] * std::max(deg[col_idx[e]], 1.0));
          break;
        case NormMode::row:
          w[e] = 1.0 / deg[i];
          break;
        case NormMode::none:
          break;
      }
    }
  }
  return Graph(n, std::move(row_ptr), std::move(col_idx), std::move(w));
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(std::move(tok));
  return out;
}

}  // namespace

Dataset load_content_cites(std::istream& content, std::istream& cites) {
  Dataset ds;
  std::unordered_map<std::string, std::uint32_t> index;
  std::unordered_map<std::string, std::uint32_t> label_index;
  std::vector<double> feats;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(content, line)) {
    ++line_no;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() < 3) throw ParseError("content line needs id, features and label", line_no);
    const std::size_t d = tok.size() - 2;
    if (ds.node_ids.empty()) {
      width = d;
    } else if (d != width) {
      throw InputError("content line " + std::to_string(line_no) + ": feature width " +
                       std::to_string(d) + " != " + std::to_string(width));
    }
    if (!index.emplace(tok.front(), static_cast<std::uint32_t>(ds.node_ids.size())).second)
      throw ParseError("duplicate node id " + tok.front(), line_no);
    ds.node_ids.push_back(tok.front());
    for (std::size_t f = 1; f + 1 < tok.size(); ++f) {
      try {
        std::size_t used = 0;
        const double v = std::stod(tok[f], &used);
        if (used != tok[f].size() || !std::isfinite(v)) throw std::invalid_argument(tok[f]);
        feats.push_back(v);
      } catch (const std::exception&) {
        throw ParseError("bad feature value '" + tok[f] + "'", line_no);
      }
    }
    const auto [it, inserted] =
        label_index.emplace(tok.back(), static_cast<std::uint32_t>(label_index.size()));
    ds.labels.labels.push_back(it->second);
  }
  const std::size_t n = ds.node_ids.size();
  if (n == 0) throw InputError("content file has no nodes");
  ds.features = DenseMatrix(n, width, std::move(feats));
  ds.labels.num_classes = label_index.size();
  ds.labels.split.assign(n, Split::none);

  std::vector<Edge> edges;
  line_no = 0;
  while (std::getline(cites, line)) {
    ++line_no;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 2) throw ParseError("cites line needs exactly two ids", line_no);
    const auto a = index.find(tok[0]);
    const auto b = index.find(tok[1]);
    if (a == index.end() || b == index.end()) {
      ++ds.dropped_edges;
      continue;
    }
    edges.emplace_back(b->second, a->second);  // citing -> cited
  }
  ds.graph = build_csr(edges, n, /*make_undirected=*/true);
  return ds;
}

void save_content_cites(const Dataset& ds, std::ostream& content, std::ostream& cites,
                        std::ostream* split) {
  const std::size_t n = ds.graph.num_nodes();
  const auto id = [&](std::size_t i) {
    return ds.node_ids.empty() ? "n" + std::to_string(i) : ds.node_ids[i];
  };
  for (std::size_t i = 0; i < n; ++i) {
    content << id(i);
    for (double v : ds.features.row(i)) {
      char buf[32];
      const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), static_cast<float>(v));
      content << ' ' << std::string_view(buf, static_cast<std::size_t>(p - buf));
    }
    content << " c" << ds.labels.labels[i] << '\n';
  }
  // The loader symmetrizes, so each undirected pair is written once.
  for (std::size_t i = 0; i < n; ++i)
    for (std::uint32_t j : ds.graph.neighbors(i))
      if (j > i) cites << id(j) << ' ' << id(i) << '\n';
  if (split == nullptr) return;
  for (std::size_t i = 0; i < n; ++i) {
    const Split s = ds.labels.split.empty() ? Split::none : ds.labels.split[i];
    if (s == Split::train) *split << id(i) << " train\n";
    else if (s == Split::val) *split << id(i) << " val\n";
    else if (s == Split::test) *split << id(i) << " test\n";
  }
}

Dataset synth_sbm(std::span<const std::size_t> block_sizes, double p_in, double p_out,
                  std::size_t d, double class_signal, std::uint64_t seed) {
  if (block_sizes.empty()) throw InputError("synth_sbm: no blocks");
  for (std::size_t b : block_sizes)
    if (b == 0) throw InputError("synth_sbm: empty block");
  if (!(0.0 <= p_out && p_out <= p_in && p_in <= 1.0))
    throw InputError("synth_sbm: need 0 <= p_out <= p_in <= 1");

  Dataset ds;
  const std::size_t classes = block_sizes.size();
  for (std::size_t c = 0; c < classes; ++c)
    ds.labels.labels.insert(ds.labels.labels.end(), block_sizes[c], static_cast<std::uint32_t>(c));
  const std::size_t n = ds.labels.labels.size();
  ds.labels.num_classes = classes;

  Rng edge_rng = Rng::stream(seed, "sbm.edges");
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double p = ds.labels.labels[i] == ds.labels.labels[j] ? p_in : p_out;
      if (edge_rng.uniform() < p)
        edges.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    }
  }
  ds.graph = build_csr(edges, n, /*make_undirected=*/true);

  Rng mean_rng = Rng::stream(seed, "sbm.means");
  DenseMatrix means(classes, d);
  for (std::size_t c = 0; c < classes; ++c) {
    double norm = 0.0;
    for (double& v : means.row(c)) {
      v = mean_rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : means.row(c)) v = norm > 0 ? v * class_signal / norm : 0.0;
  }
  Rng noise_rng = Rng::stream(seed, "sbm.noise");
  ds.features = DenseMatrix(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t f = 0; f < d; ++f)
      ds.features(i, f) = means(ds.labels.labels[i], f) + noise_rng.normal();

  Rng split_rng = Rng::stream(seed, "sbm.split");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), split_rng.engine());
  ds.labels.split.assign(n, Split::none);
  const std::size_t n_train = (n * 6) / 10;
  const std::size_t n_val = (n * 2) / 10;
  for (std::size_t r = 0; r < n; ++r) {
    ds.labels.split[perm[r]] =
        r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
  }
  return ds;
}

void apply_split_file(Dataset& ds, std::istream& split_file) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ds.node_ids.size(); ++i) index.emplace(ds.node_ids[i], i);
  ds.labels.split.assign(ds.graph.num_nodes(), Split::none);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(split_file, line)) {
    ++line_no;
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0].starts_with('#')) continue;
    if (tok.size() != 2) throw ParseError("split line needs '<id> <train|val|test>'", line_no);
    const auto it = index.find(tok[0]);
    if (it == index.end()) throw ParseError("unknown node id " + tok[0], line_no);
    Split s;
    if (tok[1] == "train") s = Split::train;
    else if (tok[1] == "val") s = Split::val;
    else if (tok[1] == "test") s = Split::test;
    else throw ParseError("unknown split '" + tok[1] + "'", line_no);
    if (ds.labels.split[it->second] != Split::none && ds.labels.split[it->second] != s)
      throw ParseError("node " + tok[0] + " assigned to two splits", line_no);
    ds.labels.split[it->second] = s;
  }
}

void assign_standard_split(LabelVector& labels, std::size_t per_class, std::size_t num_val,
                           std::size_t num_test, std::uint64_t seed) {
  const std::size_t n = labels.labels.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng::stream(seed, "split.standard");
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  labels.split.assign(n, Split::none);
  std::vector<std::size_t> taken(labels.num_classes, 0);
  std::vector<std::size_t> rest;
  for (std::size_t i : perm) {
    auto& t = taken[labels.labels[i]];
    if (t < per_class) {
      ++t;
      labels.split[i] = Split::train;
    } else {
      rest.push_back(i);
    }
  }
  for (std::size_t r = 0; r < rest.size(); ++r) {
    if (r < num_val) labels.split[rest[r]] = Split::val;
    else if (r < num_val + num_test) labels.split[rest[r]] = Split::test;
  }
}

void save_dataset(std::ostream& os, const Dataset& ds) {
  const Graph& g = ds.graph;
  const std::size_t n = g.num_nodes();
  const std::size_t d = ds.features.cols();
  os.write("LRG1", 4);
  io::put<std::uint64_t>(os, n);
  io::put<std::uint64_t>(os, g.num_edges());
  io::put<std::uint64_t>(os, d);
  io::put<std::uint64_t>(os, ds.labels.num_classes);
  io::write_bytes(os, g.row_ptr().data(), (n + 1) * sizeof(std::uint64_t));
  io::write_bytes(os, g.col_idx().data(), g.num_edges() * sizeof(std::uint32_t));
  std::vector<float> f(ds.features.size());
  std::transform(ds.features.storage().begin(), ds.features.storage().end(), f.begin(),
                 [](double v) { return static_cast<float>(v); });
  io::write_bytes(os, f.data(), f.size() * sizeof(float));
  std::vector<std::uint16_t> lab(n);
  for (std::size_t i = 0; i < n; ++i) lab[i] = static_cast<std::uint16_t>(ds.labels.labels[i]);
  io::write_bytes(os, lab.data(), n * sizeof(std::uint16_t));
  std::vector<std::uint8_t> split(n, 0);
  for (std::size_t i = 0; i < n && i < ds.labels.split.size(); ++i)
    split[i] = static_cast<std::uint8_t>(ds.labels.split[i]);
  io::write_bytes(os, split.data(), n);
}

Dataset load_dataset(std::istream& is) {
  io::expect_magic(is, "LRG1");
  const auto n = io::get<std::uint64_t>(is);
  const auto e = io::get<std::uint64_t>(is);
  const auto d = io::get<std::uint64_t>(is);
  const auto c = io::get<std::uint64_t>(is);
  if (n == 0 || n > (1ULL << 32) || d > (1ULL << 24)) throw InputError("LRG1: implausible header");
  std::vector<std::uint64_t> row_ptr(n + 1);
  io::read_bytes(is, row_ptr.data(), row_ptr.size() * sizeof(std::uint64_t));
  std::vector<std::uint32_t> col_idx(e);
  io::read_bytes(is, col_idx.data(), e * sizeof(std::uint32_t));
  std::vector<float> f(n * d);
  io::read_bytes(is, f.data(), f.size() * sizeof(float));
  std::vector<std::uint16_t> lab(n);
  io::read_bytes(is, lab.data(), n * sizeof(std::uint16_t));
  std::vector<std::uint8_t> split(n);
  io::read_bytes(is, split.data(), n);

  Dataset ds;
  ds.graph = Graph(n, std::move(row_ptr), std::move(col_idx));
  ds.features = DenseMatrix(n, d, std::vector<double>(f.begin(), f.end()));
  ds.labels.num_classes = c;
  ds.labels.labels.assign(lab.begin(), lab.end());
  ds.labels.split.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.labels.labels[i] >= c) throw InputError("LRG1: label out of range");
    if (split[i] > 3) throw InputError("LRG1: bad split code");
    ds.labels.split[i] = static_cast<Split>(split[i]);
  }
  return ds;
}

}  // namespace lorap
