#pragma once

#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "cellsearch/ops.hpp"

namespace cellsearch {

struct GenotypeEdge {
  OpKind op = OpKind::skip_connect;
  int source = 0;  // node index: 0,1 are the cell inputs, 2.. are intermediates
};

struct CellGenotype {
  // One entry per intermediate node: its two selected incoming edges,
  // ordered by source index.
  std::vector<std::array<GenotypeEdge, 2>> nodes;
  std::vector<int> concat;  // intermediate node indices joined into the cell output
};

struct Genotype {
  CellGenotype normal;
  CellGenotype reduce;
};

inline bool operator==(const GenotypeEdge& a, const GenotypeEdge& b) {
  return a.op == b.op && a.source == b.source;
}
inline bool operator==(const CellGenotype& a, const CellGenotype& b) {
  return a.nodes == b.nodes && a.concat == b.concat;
}
inline bool operator==(const Genotype& a, const Genotype& b) {
  return a.normal == b.normal && a.reduce == b.reduce;
}

inline int edge_row_offset(int node) { return node * (node + 3) / 2; }
inline int num_cell_edges(int num_nodes) { return edge_row_offset(num_nodes); }

// Discretizes one cell kind from its [edges x ops] logits: per intermediate
// node, rank incoming edges by the best non-zero softmax weight, keep the top
// two, and pick each kept edge's best non-zero op. Ties fall to the lower op
// index and then the lower source index.
inline CellGenotype derive_cell(const std::vector<double>& alpha, int num_nodes) {
  const int edges = num_cell_edges(num_nodes);
  if (alpha.size() != static_cast<std::size_t>(edges) * kNumOps)
    tensor_error("derive: alpha has " + std::to_string(alpha.size()) + " values, expected " +
                 std::to_string(edges * kNumOps));

  // Row softmax (max-subtracted); comparisons across edges use the
  // normalized weights.
  std::vector<double> w(alpha.size());
  for (int e = 0; e < edges; ++e) {
    const double* row = alpha.data() + static_cast<std::size_t>(e) * kNumOps;
    double* out = w.data() + static_cast<std::size_t>(e) * kNumOps;
    double mx = row[0];
    for (int o = 1; o < kNumOps; ++o) mx = std::max(mx, row[o]);
    double denom = 0.0;
    for (int o = 0; o < kNumOps; ++o) {
      out[o] = std::exp(row[o] - mx);
      denom += out[o];
    }
    for (int o = 0; o < kNumOps; ++o) out[o] /= denom;
  }

  CellGenotype cell;
  for (int node = 0; node < num_nodes; ++node) {
    const int in_degree = node + 2;
    const int base = edge_row_offset(node);
    std::vector<int> best_op(in_degree);
    std::vector<double> strength(in_degree);
    for (int src = 0; src < in_degree; ++src) {
      const double* row = w.data() + static_cast<std::size_t>(base + src) * kNumOps;
      int arg = 1;  // skip index 0 == zero
      for (int o = 2; o < kNumOps; ++o)
        if (row[o] > row[arg]) arg = o;
      best_op[src] = arg;
      strength[src] = row[arg];
    }
    int first = -1, second = -1;
    for (int src = 0; src < in_degree; ++src) {
      if (first < 0 || strength[src] > strength[first]) {
        second = first;
        first = src;
      } else if (second < 0 || strength[src] > strength[second]) {
        second = src;
      }
    }
    if (first > second) std::swap(first, second);
    cell.nodes.push_back({GenotypeEdge{static_cast<OpKind>(best_op[first]), first},
                          GenotypeEdge{static_cast<OpKind>(best_op[second]), second}});
  }
  for (int node = 0; node < num_nodes; ++node) cell.concat.push_back(node + 2);
  return cell;
}

// alpha holds both cell kinds stacked: [2, edges, ops], normal first.
inline Genotype derive_genotype(const std::vector<double>& alpha, int num_nodes) {
  const std::size_t half = static_cast<std::size_t>(num_cell_edges(num_nodes)) * kNumOps;
  if (alpha.size() != 2 * half)
    tensor_error("derive: alpha table has " + std::to_string(alpha.size()) + " values, expected " +
                 std::to_string(2 * half));
  Genotype g;
  g.normal = derive_cell({alpha.begin(), alpha.begin() + static_cast<std::ptrdiff_t>(half)}, num_nodes);
  g.reduce = derive_cell({alpha.begin() + static_cast<std::ptrdiff_t>(half), alpha.end()}, num_nodes);
  return g;
}

inline Genotype derive_genotype(const Tensor& alpha) {
  if (alpha.rank() != 3 || alpha.dim(0) != 2 || alpha.dim(2) != kNumOps)
    tensor_error("derive: alpha tensor must be [2, edges, " + std::to_string(kNumOps) + "], got " +
                 shape_str(alpha.shape()));
  // edges = n(n+3)/2 for n intermediate nodes
  const int edges = alpha.dim(1);
  int num_nodes = 0;
  while (num_cell_edges(num_nodes + 1) <= edges) ++num_nodes;
  if (num_cell_edges(num_nodes) != edges)
    tensor_error("derive: " + std::to_string(edges) + " edges is not a complete cell");
  return derive_genotype(alpha.values(), num_nodes);
}

// ---------------------------------------------------------------------------
// Text format: one line,
//   normal: (op,src);(op,src) | ... ; reduce: (op,src);(op,src) | ...
// ---------------------------------------------------------------------------

inline std::string serialize_cell(const CellGenotype& cell) {
  std::ostringstream os;
  for (std::size_t n = 0; n < cell.nodes.size(); ++n) {
    if (n) os << " | ";
    os << '(' << op_kind_name(cell.nodes[n][0].op) << ',' << cell.nodes[n][0].source << ");("
       << op_kind_name(cell.nodes[n][1].op) << ',' << cell.nodes[n][1].source << ')';
  }
  return os.str();
}

inline std::string serialize_genotype(const Genotype& g) {
  return "normal: " + serialize_cell(g.normal) + " ; reduce: " + serialize_cell(g.reduce);
}

namespace detail {

inline CellGenotype parse_cell(const std::string& text) {
  CellGenotype cell;
  std::size_t pos = 0;
  std::vector<GenotypeEdge> pairs;
  while ((pos = text.find('(', pos)) != std::string::npos) {
    const std::size_t comma = text.find(',', pos);
    const std::size_t close = text.find(')', pos);
    if (comma == std::string::npos || close == std::string::npos || comma > close)
      tensor_error("genotype: malformed pair near '" + text.substr(pos, 20) + "'");
    GenotypeEdge e;
    e.op = op_kind_from_name(text.substr(pos + 1, comma - pos - 1));
    e.source = std::stoi(text.substr(comma + 1, close - comma - 1));
    pairs.push_back(e);
    pos = close + 1;
  }
  if (pairs.empty() || pairs.size() % 2 != 0)
    tensor_error("genotype: expected an even number of (op,src) pairs");
  for (std::size_t i = 0; i < pairs.size(); i += 2) cell.nodes.push_back({pairs[i], pairs[i + 1]});
  for (std::size_t n = 0; n < cell.nodes.size(); ++n) cell.concat.push_back(static_cast<int>(n) + 2);
  return cell;
}

}  // namespace detail

inline Genotype parse_genotype(const std::string& line) {
  const std::size_t npos_ = line.find("normal:");
  const std::size_t rpos = line.find("reduce:");
  if (npos_ == std::string::npos || rpos == std::string::npos || rpos < npos_)
    tensor_error("genotype: expected 'normal: ... ; reduce: ...'");
  Genotype g;
  std::string normal_part = line.substr(npos_ + 7, rpos - npos_ - 7);
  const std::size_t semi = normal_part.rfind(';');
  if (semi != std::string::npos) normal_part = normal_part.substr(0, semi);
  g.normal = detail::parse_cell(normal_part);
  g.reduce = detail::parse_cell(line.substr(rpos + 7));
  return g;
}

inline void validate_genotype(const Genotype& g) {
  for (const CellGenotype* cell : {&g.normal, &g.reduce}) {
    for (std::size_t n = 0; n < cell->nodes.size(); ++n) {
      const auto& pair = cell->nodes[n];
      if (pair[0].source == pair[1].source)
        tensor_error("genotype: node " + std::to_string(n) + " has duplicate sources");
      for (const GenotypeEdge& e : pair) {
        if (e.op == OpKind::zero) tensor_error("genotype: zero op is not selectable");
        if (e.source < 0 || e.source >= static_cast<int>(n) + 2)
          tensor_error("genotype: node " + std::to_string(n) + " has invalid source " +
                       std::to_string(e.source));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// DOT export
// ---------------------------------------------------------------------------

namespace detail {

inline std::string dot_node_id(const std::string& prefix, int source) {
  if (source == 0) return prefix + "_in0";
  if (source == 1) return prefix + "_in1";
  return prefix + "_n" + std::to_string(source - 2);
}

inline void export_dot_cell(std::ostringstream& os, const CellGenotype& cell,
                            const std::string& name) {
  os << "  subgraph cluster_" << name << " {\n";
  os << "    label=\"" << name << "\";\n";
  os << "    " << name << "_in0 [label=\"c_{k-2}\", shape=box];\n";
  os << "    " << name << "_in1 [label=\"c_{k-1}\", shape=box];\n";
  for (std::size_t n = 0; n < cell.nodes.size(); ++n)
    os << "    " << name << "_n" << n << " [label=\"" << n << "\"];\n";
  os << "    " << name << "_out [label=\"c_k\", shape=box];\n";
  for (std::size_t n = 0; n < cell.nodes.size(); ++n)
    for (const GenotypeEdge& e : cell.nodes[n])
      os << "    " << dot_node_id(name, e.source) << " -> " << name << "_n" << n << " [label=\""
         << op_kind_name(e.op) << "\"];\n";
  for (int c : cell.concat)
    os << "    " << name << "_n" << (c - 2) << " -> " << name << "_out;\n";
  os << "  }\n";
}

}  // namespace detail

inline std::string export_dot(const Genotype& g) {
  std::ostringstream os;
  os << "digraph cells {\n";
  os << "  rankdir=LR;\n";
  detail::export_dot_cell(os, g.normal, "normal");
  detail::export_dot_cell(os, g.reduce, "reduce");
  os << "}\n";
  return os.str();
}

}  // namespace cellsearch
