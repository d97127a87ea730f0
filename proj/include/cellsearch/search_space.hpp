#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cellsearch/genotype.hpp"
#include "cellsearch/grouping.hpp"
#include "cellsearch/ops.hpp"

namespace cellsearch {

enum class SearchMode { darts, darts_attention, g_darts_a, g_pc_darts_a };

inline const char* search_mode_name(SearchMode m) {
  switch (m) {
    case SearchMode::darts: return "darts";
    case SearchMode::darts_attention: return "darts_attention";
    case SearchMode::g_darts_a: return "g_darts_a";
    case SearchMode::g_pc_darts_a: return "g_pc_darts_a";
  }
  return "?";
}

inline SearchMode search_mode_from_name(const std::string& name) {
  for (SearchMode m : {SearchMode::darts, SearchMode::darts_attention, SearchMode::g_darts_a,
                       SearchMode::g_pc_darts_a})
    if (name == search_mode_name(m)) return m;
  tensor_error("unknown search mode: " + name);
}

struct SupernetConfig {
  SearchMode mode = SearchMode::g_pc_darts_a;
  int cells = 8;
  int init_channels = 16;
  int num_classes = 10;
  int nodes = 4;
  int stem_multiplier = 3;
  ChannelGrouping grouping = ChannelGrouping::parse("1/8,1/8,1/4,1/2");
  std::vector<double> gamma_init{2.4, 2.4, 3.2, 3.0};
  int partial_k = 4;    // channel sampling divisor (g_pc_darts_a)
  int conv_groups = 4;  // grouped-convolution approximation (g_darts_a)
  bool edge_norm = false;
  bool merge_sum = false;

  bool attention() const { return mode != SearchMode::darts; }
};

// ---------------------------------------------------------------------------
// Edge building blocks
// ---------------------------------------------------------------------------

// Splits channels into the grouping's contiguous slices; concatenating the
// slices back restores the input exactly.
inline std::vector<Tensor> group_split(const Tensor& x, const ChannelGrouping& grouping) {
  const std::vector<int> counts = grouping.channel_counts(x.dim(1));
  std::vector<Tensor> parts;
  parts.reserve(counts.size());
  int start = 0;
  for (int c : counts) {
    parts.push_back(narrow(x, 1, start, c));
    start += c;
  }
  return parts;
}

// Softmax(alpha)-weighted sum of candidate outputs. The weight row must hold
// one weight per op; all ops must agree on the output shape.
class MixedOp {
 public:
  MixedOp(int channels, int stride, int conv_groups, RngStream& rng) {
    for (int i = 0; i < kNumOps; ++i)
      ops_.push_back(make_candidate(static_cast<OpKind>(i), channels, stride, conv_groups, false, rng));
  }
  explicit MixedOp(std::vector<ModulePtr> ops) : ops_(std::move(ops)) {}

  Tensor forward(const Tensor& x, const Tensor& weights_row, bool train) const {
    if (weights_row.size() != ops_.size())
      tensor_error("mixed op: " + std::to_string(weights_row.size()) + " weights for " +
                   std::to_string(ops_.size()) + " ops");
    const int axis = weights_row.rank() - 1;
    Tensor acc;
    for (std::size_t o = 0; o < ops_.size(); ++o) {
      Tensor y = ops_[o]->forward(x, train);
      if (acc.defined() && acc.shape() != y.shape())
        tensor_error("mixed op: output shape mismatch: " + shape_str(acc.shape()) + " vs " +
                     shape_str(y.shape()));
      Tensor term = scale_tensor(y, narrow(weights_row, axis, static_cast<int>(o), 1));
      acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
  }

  void collect_params(std::vector<Tensor>& out) const {
    for (const ModulePtr& op : ops_) op->collect_params(out);
  }

 private:
  std::vector<ModulePtr> ops_;
};

inline Tensor mixed_edge(const Tensor& x, const Tensor& alpha_row, const std::vector<ModulePtr>& ops,
                         bool train = true) {
  return MixedOp(ops).forward(x, softmax(alpha_row, alpha_row.rank() - 1), train);
}

// Multiplies contiguous channel slices by per-group attention weights and
// re-assembles them in order.
inline Tensor attention_scale(const Tensor& x, const Tensor& gamma_row, const std::vector<int>& counts) {
  if (gamma_row.size() != counts.size())
    tensor_error("attention: " + std::to_string(gamma_row.size()) + " weights for " +
                 std::to_string(counts.size()) + " groups");
  const int axis = gamma_row.rank() - 1;
  std::vector<Tensor> parts;
  parts.reserve(counts.size());
  int start = 0;
  for (std::size_t m = 0; m < counts.size(); ++m) {
    parts.push_back(scale_tensor(narrow(x, 1, start, counts[m]),
                                 narrow(gamma_row, axis, static_cast<int>(m), 1)));
    start += counts[m];
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 1);
}

// Abstract per-edge computation of the super-network.
class SearchEdge {
 public:
  virtual ~SearchEdge() = default;
  // weights_row: softmaxed op weights for this edge; gamma_row: attention
  // weights (undefined in plain mode); mask_rng: channel-mask stream, null
  // for the deterministic identity mask.
  virtual Tensor forward(const Tensor& x, const Tensor& weights_row, const Tensor& gamma_row,
                         bool train, RngStream* mask_rng) const = 0;
  virtual void collect_params(std::vector<Tensor>& out) const = 0;
};

// Plain continuous relaxation: one mixed op over the full channels.
class PlainEdge final : public SearchEdge {
 public:
  PlainEdge(int channels, int stride, RngStream& rng) : op_(channels, stride, 1, rng) {}
  Tensor forward(const Tensor& x, const Tensor& w, const Tensor&, bool train, RngStream*) const override {
    return op_.forward(x, w, train);
  }
  void collect_params(std::vector<Tensor>& out) const override { op_.collect_params(out); }

 private:
  MixedOp op_;
};

// Channel-group parallel sampling with attention: each contiguous channel
// group runs its own candidate instances under the shared op weights, is
// scaled by its attention weight, and the groups are merged (channel
// concatenation by default; elementwise sum for equal-sized groups).
class GroupAttentionEdge final : public SearchEdge {
 public:
  GroupAttentionEdge(int channels, int stride, const ChannelGrouping& grouping, int conv_groups,
                     bool merge_sum, RngStream& rng)
      : counts_(grouping.channel_counts(channels)), merge_sum_(merge_sum) {
    if (merge_sum_)
      for (int c : counts_)
        if (c != counts_[0])
          tensor_error("attention edge: merge=sum needs equal group sizes, got group of " +
                       std::to_string(c) + " vs " + std::to_string(counts_[0]));
    for (int c : counts_) group_ops_.emplace_back(c, stride, conv_groups, rng);
  }

  // Pre-built per-group mixed ops (sizes must match counts).
  GroupAttentionEdge(std::vector<int> counts, std::vector<MixedOp> group_ops, bool merge_sum)
      : counts_(std::move(counts)), merge_sum_(merge_sum), group_ops_(std::move(group_ops)) {}

  Tensor forward(const Tensor& x, const Tensor& w, const Tensor& gamma_row, bool train,
                 RngStream*) const override {
    if (gamma_row.size() != counts_.size())
      tensor_error("attention edge: " + std::to_string(gamma_row.size()) + " gammas for " +
                   std::to_string(counts_.size()) + " groups");
    const int gaxis = gamma_row.rank() - 1;
    std::vector<Tensor> parts;
    parts.reserve(counts_.size());
    int start = 0;
    for (std::size_t m = 0; m < counts_.size(); ++m) {
      Tensor part = group_ops_[m].forward(narrow(x, 1, start, counts_[m]), w, train);
      parts.push_back(scale_tensor(part, narrow(gamma_row, gaxis, static_cast<int>(m), 1)));
      start += counts_[m];
    }
    if (parts.size() == 1) return parts[0];
    if (!merge_sum_) return concat(parts, 1);
    Tensor acc = parts[0];
    for (std::size_t m = 1; m < parts.size(); ++m) acc = add(acc, parts[m]);
    return acc;
  }

  void collect_params(std::vector<Tensor>& out) const override {
    for (const MixedOp& op : group_ops_) op.collect_params(out);
  }

 private:
  std::vector<int> counts_;
  bool merge_sum_;
  std::vector<MixedOp> group_ops_;
};

// Partial channel connection: 1/K of the channels pass through the mixed op,
// the rest bypass (max-pooled on reduction edges), and the reassembled map is
// channel-shuffled. Attention weights, when given, scale the shuffled output
// by contiguous fraction groups of the full channel count.
class PartialChannelEdge final : public SearchEdge {
 public:
  PartialChannelEdge(int channels, int stride, int k_divisor, const ChannelGrouping& grouping,
                     int conv_groups, RngStream& rng)
      : channels_(channels),
        stride_(stride),
        k_(checked_divisor(channels, k_divisor)),
        counts_(grouping.channel_counts(channels)),
        op_(channels / k_, stride, conv_groups, rng) {}

  // Pre-built mixed op over channels/K (must match the sampled block size).
  PartialChannelEdge(int channels, int stride, int k_divisor, const ChannelGrouping& grouping,
                     MixedOp op)
      : channels_(channels),
        stride_(stride),
        k_(checked_divisor(channels, k_divisor)),
        counts_(grouping.channel_counts(channels)),
        op_(std::move(op)) {}

  Tensor forward(const Tensor& x, const Tensor& w, const Tensor& gamma_row, bool train,
                 RngStream* mask_rng) const override {
    Tensor merged = partial_forward(x, w, train, mask_rng);
    if (!gamma_row.defined()) return merged;
    return attention_scale(merged, gamma_row, counts_);
  }

  void collect_params(std::vector<Tensor>& out) const override { op_.collect_params(out); }

 private:
  static int checked_divisor(int channels, int k) {
    if (k < 1 || channels % k != 0)
      tensor_error("partial edge: " + std::to_string(channels) + " channels not divisible by K=" +
                   std::to_string(k));
    return k;
  }

  Tensor partial_forward(const Tensor& x, const Tensor& w, bool train, RngStream* mask_rng) const {
    if (k_ == 1) return op_.forward(x, w, train);

    const int sampled = channels_ / k_;
    std::vector<int> all(static_cast<std::size_t>(channels_));
    for (int c = 0; c < channels_; ++c) all[static_cast<std::size_t>(c)] = c;
    std::vector<int> selected, bypass;
    if (mask_rng != nullptr) {
      // Uniform random subset via partial Fisher-Yates.
      for (int i = 0; i < sampled; ++i) {
        const int j = i + static_cast<int>(mask_rng->uniform_int(static_cast<std::uint64_t>(channels_ - i)));
        std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
      }
      selected.assign(all.begin(), all.begin() + sampled);
      std::sort(selected.begin(), selected.end());
      bypass.assign(all.begin() + sampled, all.end());
      std::sort(bypass.begin(), bypass.end());
    } else {
      selected.assign(all.begin(), all.begin() + sampled);
      bypass.assign(all.begin() + sampled, all.end());
    }

    Tensor operated = op_.forward(select_channels(x, selected), w, train);
    Tensor rest = select_channels(x, bypass);
    if (stride_ != 1) rest = max_pool2d(rest, 2, 2, 0);
    return channel_shuffle(concat({operated, rest}, 1), k_);
  }

  int channels_;
  int stride_;
  int k_;
  std::vector<int> counts_;
  MixedOp op_;
};

// Sum of edge outputs; with a raw beta segment, a softmax over the node's
// incoming edges weighs each contribution (edge normalization).
inline Tensor node_aggregate(const std::vector<Tensor>& edge_outs, const Tensor& beta_segment) {
  if (edge_outs.empty()) tensor_error("node_aggregate: no edges");
  if (!beta_segment.defined()) {
    Tensor acc = edge_outs[0];
    for (std::size_t i = 1; i < edge_outs.size(); ++i) acc = add(acc, edge_outs[i]);
    return acc;
  }
  if (beta_segment.size() != edge_outs.size())
    tensor_error("node_aggregate: " + std::to_string(beta_segment.size()) + " betas for " +
                 std::to_string(edge_outs.size()) + " edges");
  const int axis = beta_segment.rank() - 1;
  Tensor w = softmax(beta_segment, axis);
  Tensor acc;
  for (std::size_t i = 0; i < edge_outs.size(); ++i) {
    Tensor term = scale_tensor(edge_outs[i], narrow(w, axis, static_cast<int>(i), 1));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Cells and the super-network
// ---------------------------------------------------------------------------

class SearchCell {
 public:
  SearchCell(const SupernetConfig& cfg, int c_prev_prev, int c_prev, int channels, bool reduction,
             bool reduction_prev, RngStream& rng)
      : reduction_(reduction), nodes_(cfg.nodes) {
    if (reduction_prev)
      pre0_ = std::make_shared<FactorizedReduce>(c_prev_prev, channels, 1, false, rng);
    else
      pre0_ = std::make_shared<ReluConvBn>(c_prev_prev, channels, 1, 1, 0, 1, false, rng);
    pre1_ = std::make_shared<ReluConvBn>(c_prev, channels, 1, 1, 0, 1, false, rng);

    const int edges = num_cell_edges(nodes_);
    if (cfg.attention()) {
      std::vector<double> init;
      init.reserve(static_cast<std::size_t>(edges) * cfg.gamma_init.size());
      for (int e = 0; e < edges; ++e)
        init.insert(init.end(), cfg.gamma_init.begin(), cfg.gamma_init.end());
      gamma = Tensor::from_vector({edges, static_cast<int>(cfg.gamma_init.size())}, std::move(init), true);
    }

    for (int node = 0; node < nodes_; ++node) {
      for (int src = 0; src < node + 2; ++src) {
        const int stride = (reduction && src < 2) ? 2 : 1;
        switch (cfg.mode) {
          case SearchMode::darts:
            edges_.push_back(std::make_unique<PlainEdge>(channels, stride, rng));
            break;
          case SearchMode::darts_attention:
            edges_.push_back(std::make_unique<GroupAttentionEdge>(channels, stride, cfg.grouping, 1,
                                                                  cfg.merge_sum, rng));
            break;
          case SearchMode::g_darts_a:
            edges_.push_back(std::make_unique<GroupAttentionEdge>(
                channels, stride, cfg.grouping, cfg.conv_groups, cfg.merge_sum, rng));
            break;
          case SearchMode::g_pc_darts_a:
            edges_.push_back(std::make_unique<PartialChannelEdge>(channels, stride, cfg.partial_k,
                                                                  cfg.grouping, 1, rng));
            break;
        }
      }
    }
  }

  bool reduction() const { return reduction_; }

  // alpha_w: softmaxed op weights [edges, ops] for this cell kind;
  // beta_raw: raw per-edge logits [edges] or undefined.
  Tensor forward(const Tensor& s0, const Tensor& s1, const Tensor& alpha_w, const Tensor& beta_raw,
                 bool train, RngStream* mask_rng) const {
    std::vector<Tensor> states{pre0_->forward(s0, train), pre1_->forward(s1, train)};
    for (int node = 0; node < nodes_; ++node) {
      const int base = edge_row_offset(node);
      std::vector<Tensor> outs;
      outs.reserve(static_cast<std::size_t>(node) + 2);
      for (int src = 0; src < node + 2; ++src) {
        const int e = base + src;
        Tensor w_row = narrow(alpha_w, 0, e, 1);
        Tensor gamma_row = gamma.defined() ? narrow(gamma, 0, e, 1) : Tensor();
        outs.push_back(edges_[static_cast<std::size_t>(e)]->forward(states[static_cast<std::size_t>(src)],
                                                                    w_row, gamma_row, train, mask_rng));
      }
      Tensor beta_seg = beta_raw.defined() ? narrow(beta_raw, 0, base, node + 2) : Tensor();
      states.push_back(node_aggregate(outs, beta_seg));
    }
    std::vector<Tensor> cat(states.begin() + 2, states.end());
    return concat(cat, 1);
  }

  void collect_params(std::vector<Tensor>& out) const {
    pre0_->collect_params(out);
    pre1_->collect_params(out);
    for (const auto& e : edges_) e->collect_params(out);
  }

  Tensor gamma;  // [edges, groups]; independent per cell

 private:
  bool reduction_;
  int nodes_;
  ModulePtr pre0_, pre1_;
  std::vector<std::unique_ptr<SearchEdge>> edges_;
};

// Reduction cells sit at depths L/3 and 2L/3 (never at depth 0) and double
// the channel count.
inline bool is_reduction_cell(int index, int total_cells) {
  const int a = total_cells / 3, b = 2 * total_cells / 3;
  return index != 0 && (index == a || index == b);
}

class SuperNetwork {
 public:
  SuperNetwork(const SupernetConfig& cfg, RngStream& weight_rng, RngStream& arch_rng) : cfg_(cfg) {
    const int edges = num_cell_edges(cfg.nodes);
    {
      std::vector<double> a(static_cast<std::size_t>(2) * edges * kNumOps);
      for (double& v : a) v = 1e-3 * arch_rng.normal();
      alpha = Tensor::from_vector({2, edges, kNumOps}, std::move(a), true);
    }
    if (cfg.edge_norm) {
      std::vector<double> b(static_cast<std::size_t>(2) * edges);
      for (double& v : b) v = 1e-3 * arch_rng.normal();
      beta = Tensor::from_vector({2, edges}, std::move(b), true);
    }

    const int c_stem = cfg.stem_multiplier * cfg.init_channels;
    stem_conv_ = make_conv2d(3, c_stem, 3, 1, 1, 1, 1, false, weight_rng);
    stem_bn_ = BatchNorm2d(c_stem, true);

    int c_prev_prev = c_stem, c_prev = c_stem, channels = cfg.init_channels;
    bool reduction_prev = false;
    for (int i = 0; i < cfg.cells; ++i) {
      const bool reduction = is_reduction_cell(i, cfg.cells);
      if (reduction) channels *= 2;
      cells_.push_back(std::make_unique<SearchCell>(cfg, c_prev_prev, c_prev, channels, reduction,
                                                    reduction_prev, weight_rng));
      reduction_prev = reduction;
      c_prev_prev = c_prev;
      c_prev = cfg.nodes * channels;
    }

    classifier_w_ = Tensor::randn({cfg.num_classes, c_prev}, weight_rng,
                                  std::sqrt(1.0 / c_prev), true);
    classifier_b_ = Tensor::zeros({cfg.num_classes}, true);
  }

  Tensor forward(const Tensor& x, bool train, RngStream* mask_rng) {
    const int edges = num_cell_edges(cfg_.nodes);
    Tensor aw_normal = softmax(reshape(narrow(alpha, 0, 0, 1), {edges, kNumOps}), 1);
    Tensor aw_reduce = softmax(reshape(narrow(alpha, 0, 1, 1), {edges, kNumOps}), 1);
    Tensor beta_normal, beta_reduce;
    if (beta.defined()) {
      beta_normal = reshape(narrow(beta, 0, 0, 1), {edges});
      beta_reduce = reshape(narrow(beta, 0, 1, 1), {edges});
    }

    Tensor stem = batchnorm2d(conv2d(x, stem_conv_), stem_bn_, train);
    Tensor s0 = stem, s1 = stem;
    for (const auto& cell : cells_) {
      Tensor out = cell->forward(s0, s1, cell->reduction() ? aw_reduce : aw_normal,
                                 cell->reduction() ? beta_reduce : beta_normal, train, mask_rng);
      s0 = s1;
      s1 = out;
    }
    return classifier_head(s1, classifier_w_, classifier_b_);
  }

  // Architecture parameters: alpha, beta (when present), and the per-cell
  // attention tables unless they are routed to the weight step.
  std::vector<Tensor> arch_params(bool gamma_in_arch = true) const {
    std::vector<Tensor> out{alpha};
    if (beta.defined()) out.push_back(beta);
    if (gamma_in_arch)
      for (const auto& cell : cells_)
        if (cell->gamma.defined()) out.push_back(cell->gamma);
    return out;
  }

  std::vector<Tensor> weight_params(bool gamma_in_arch = true) const {
    std::vector<Tensor> out;
    out.push_back(stem_conv_.weight);
    out.push_back(stem_bn_.weight);
    out.push_back(stem_bn_.bias);
    for (const auto& cell : cells_) cell->collect_params(out);
    out.push_back(classifier_w_);
    out.push_back(classifier_b_);
    if (!gamma_in_arch)
      for (const auto& cell : cells_)
        if (cell->gamma.defined()) out.push_back(cell->gamma);
    return out;
  }

  std::vector<Tensor> gammas() const {
    std::vector<Tensor> out;
    for (const auto& cell : cells_)
      if (cell->gamma.defined()) out.push_back(cell->gamma);
    return out;
  }

  std::size_t weight_param_count() const {
    std::size_t n = 0;
    for (const Tensor& t : weight_params(true)) n += t.size();
    return n;
  }

  Genotype derive() const { return derive_genotype(alpha); }

  const SupernetConfig& config() const { return cfg_; }

  Tensor alpha;  // [2, edges, ops], shared by all cells of a kind
  Tensor beta;   // [2, edges] when edge normalization is enabled

 private:
  SupernetConfig cfg_;
  Conv2dSpec stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<std::unique_ptr<SearchCell>> cells_;
  Tensor classifier_w_, classifier_b_;
};

}  // namespace cellsearch
