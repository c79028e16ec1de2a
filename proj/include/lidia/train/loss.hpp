#pragma once

#include <deque>
#include <unordered_set>

#include "lidia/model/segmenter.hpp"
#include "lidia/phantom/phantom.hpp"

namespace lidia {

struct LossConfig {
  double lambda_seg = 5.0;
  double lambda_focal = 5.0;
  double lambda_acl = 0.01;
  double temperature = 0.1;  // tau
  double focal_gamma = 2.0;
  double no_object_weight = 0.1;
  double bg_per_fg = 1.0;  // background samples drawn per foreground voxel
  double w_cls = 1.0, w_ce = 1.0, w_dice = 1.0;
  /// Ablation: ordinary supervised contrast (attraction within "others" too).
  bool symmetric_contrast = false;
  /// Whether rare samples appear in the denominator set of common anchors.
  bool rare_in_common_denominator = true;
  int bank_capacity = 1024;

  void validate() const {
    if (lambda_seg < 0 || lambda_focal < 0 || lambda_acl < 0)
      throw config_error("loss weights must be nonnegative");
    if (temperature <= 0) throw config_error("temperature must be positive");
    if (focal_gamma < 0) throw config_error("focal gamma must be nonnegative");
    if (no_object_weight < 0) throw config_error("no-object weight must be nonnegative");
    if (w_cls < 0 || w_ce < 0 || w_dice < 0)
      throw config_error("matching cost weights must be nonnegative");
    if (bank_capacity < 1) throw config_error("bank capacity must be positive");
  }
};

/// Bounded FIFO store of (unit-norm embedding, class label) pairs enabling
/// cross-batch contrast. Stored embeddings are constants: no gradient flows
/// into the bank.
template <class T>
class MemoryBank {
 public:
  explicit MemoryBank(int capacity = 1024) : capacity_(capacity) {
    if (capacity < 1) throw config_error("bank capacity must be positive");
  }

  void push(const T* embedding, int dim, int label) {
    if (dim_ == 0) dim_ = dim;
    if (dim != dim_) throw dimension_error("memory bank: embedding dimension changed");
    T norm2 = 0;
    for (int i = 0; i < dim; ++i) norm2 += embedding[i] * embedding[i];
    if (std::abs(std::sqrt(static_cast<double>(norm2)) - 1.0) > 1e-3)
      throw Error("not_normalized", "memory bank rejects non-unit embedding");
    entries_.push_back(Entry{std::vector<T>(embedding, embedding + dim), label, counter_++});
    if (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
  }

  int size() const { return static_cast<int>(entries_.size()); }
  int capacity() const { return capacity_; }
  int dim() const { return dim_; }

  const std::vector<T>& embedding(int i) const { return entries_[static_cast<size_t>(i)].embedding; }
  int label(int i) const { return entries_[static_cast<size_t>(i)].label; }
  uint64_t counter(int i) const { return entries_[static_cast<size_t>(i)].counter; }

  /// All stored embeddings as an (n x d) tensor (constant snapshot).
  Tensor<T> embeddings_matrix() const {
    Tensor<T> m({size(), dim_});
    for (int i = 0; i < size(); ++i)
      std::copy_n(entries_[static_cast<size_t>(i)].embedding.data(), dim_,
                  m.data() + static_cast<int64_t>(i) * dim_);
    return m;
  }

 private:
  struct Entry {
    std::vector<T> embedding;
    int label;
    uint64_t counter;
  };
  std::deque<Entry> entries_;
  int capacity_;
  int dim_ = 0;
  uint64_t counter_ = 0;
};

/// Ground-truth view of a case, precomputed for loss evaluation.
struct InstanceTargets {
  std::vector<std::vector<int64_t>> fg_indices;  // flat voxel ids per lesion
  std::vector<int> labels;
  int64_t voxels = 0;

  int num_instances() const { return static_cast<int>(labels.size()); }
};

inline InstanceTargets targets_from_case(const phantom::Case& c) {
  InstanceTargets t;
  t.voxels = c.liver_mask.numel();
  t.labels = c.labels;
  for (const auto& m : c.instance_masks) {
    std::vector<int64_t> fg;
    for (int64_t i = 0; i < m.numel(); ++i)
      if (m[i]) fg.push_back(i);
    t.fg_indices.push_back(std::move(fg));
  }
  return t;
}

/// Injective map from ground-truth instance j to query index.
struct Assignment {
  std::vector<int> query_of_gt;
};

// ---------------------------------------------------------------------------
// optimal assignment
// ---------------------------------------------------------------------------

/// Hungarian algorithm with potentials on an n x m cost matrix (n <= m).
/// Returns, for each row, its assigned column; the total is optimal.
inline std::vector<int> hungarian_min_cost(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  if (n > m) throw dimension_error("hungarian: more rows than columns");
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // 1-based potentials formulation
  std::vector<double> u(static_cast<size_t>(n) + 1), v(static_cast<size_t>(m) + 1);
  std::vector<int> p(static_cast<size_t>(m) + 1), way(static_cast<size_t>(m) + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(m) + 1, false);
    do {
      used[static_cast<size_t>(j0)] = true;
      const int i0 = p[static_cast<size_t>(j0)];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(static_cast<size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<size_t>(j)] > 0) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

namespace detail {
template <class T>
T softplus_val(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
template <class T>
T sigmoid_val(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}
}  // namespace detail

/// Optimal query assignment under the matching cost
///   w_cls * (1 - p_q(C_j)) + w_ce * BCE(mask_q, S_j) + w_dice * (1 - Dice).
/// Costs are evaluated on values only; no gradient flows through matching.
template <class T>
Assignment match(const HeadOutput<T>& head, const InstanceTargets& gt, const LossConfig& cfg) {
  const int k = gt.num_instances();
  const int q = head.class_logits.val().dim(0);
  if (k > q)
    throw Error("too_many_instances",
                "matching needs K <= Q; got K=" + std::to_string(k) + ", Q=" + std::to_string(q) +
                    " (configure more queries)");
  Assignment a;
  if (k == 0) return a;

  const int nc = head.class_logits.val().dim(1);
  const int64_t v = head.mask_logits.val().dim(1);
  const T* cls = head.class_logits.val().data();
  const T* msk = head.mask_logits.val().data();

  // per-query class probabilities
  std::vector<double> prob(static_cast<size_t>(q) * nc);
  for (int qi = 0; qi < q; ++qi) {
    const T* row = cls + static_cast<int64_t>(qi) * nc;
    double mx = row[0];
    for (int j = 1; j < nc; ++j) mx = std::max<double>(mx, row[j]);
    double s = 0;
    for (int j = 0; j < nc; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    for (int j = 0; j < nc; ++j)
      prob[static_cast<size_t>(qi) * nc + j] = std::exp(static_cast<double>(row[j]) - mx) / s;
  }

  // per-query mask statistics shared across instances
  std::vector<double> sum_softplus(static_cast<size_t>(q)), sum_sigmoid(static_cast<size_t>(q));
  for (int qi = 0; qi < q; ++qi) {
    const T* row = msk + static_cast<int64_t>(qi) * v;
    double sp = 0, sg = 0;
    for (int64_t i = 0; i < v; ++i) {
      sp += detail::softplus_val(static_cast<double>(row[i]));
      sg += detail::sigmoid_val(static_cast<double>(row[i]));
    }
    sum_softplus[static_cast<size_t>(qi)] = sp;
    sum_sigmoid[static_cast<size_t>(qi)] = sg;
  }

  std::vector<std::vector<double>> cost(static_cast<size_t>(k),
                                        std::vector<double>(static_cast<size_t>(q)));
  for (int j = 0; j < k; ++j) {
    const auto& fg = gt.fg_indices[static_cast<size_t>(j)];
    for (int qi = 0; qi < q; ++qi) {
      const T* row = msk + static_cast<int64_t>(qi) * v;
      double sum_logit_fg = 0, sum_sig_fg = 0;
      for (int64_t i : fg) {
        sum_logit_fg += static_cast<double>(row[i]);
        sum_sig_fg += detail::sigmoid_val(static_cast<double>(row[i]));
      }
      const double bce = (sum_softplus[static_cast<size_t>(qi)] - sum_logit_fg) /
                         static_cast<double>(v);
      const double dice =
          2.0 * sum_sig_fg /
          (sum_sigmoid[static_cast<size_t>(qi)] + static_cast<double>(fg.size()));
      const double p_cls =
          prob[static_cast<size_t>(qi) * nc + gt.labels[static_cast<size_t>(j)]];
      cost[static_cast<size_t>(j)][static_cast<size_t>(qi)] =
          cfg.w_cls * (1.0 - p_cls) + cfg.w_ce * bce + cfg.w_dice * (1.0 - dice);
    }
  }
  a.query_of_gt = hungarian_min_cost(cost);
  return a;
}

// ---------------------------------------------------------------------------
// loss terms
// ---------------------------------------------------------------------------

/// BCE + soft-Dice on a foreground-enhanced voxel sample: all foreground
/// voxels of S_j plus an equal share of uniformly drawn background voxels
/// (without replacement; all of the background if fewer are available).
/// Mean over matched pairs; zero for K = 0.
template <class T>
Var<T> seg_loss(const HeadOutput<T>& head, const Assignment& a, const InstanceTargets& gt,
                const LossConfig& cfg, Rng& rng) {
  const int k = gt.num_instances();
  if (k == 0) return ops::scalar_const<T>(0);
  const int64_t v = head.mask_logits.val().dim(1);

  Var<T> total;
  for (int j = 0; j < k; ++j) {
    const auto& fg = gt.fg_indices[static_cast<size_t>(j)];
    const int qi = a.query_of_gt[static_cast<size_t>(j)];

    const int64_t want_bg =
        std::min<int64_t>(static_cast<int64_t>(std::llround(
                              static_cast<double>(fg.size()) * cfg.bg_per_fg)),
                          v - static_cast<int64_t>(fg.size()));
    std::vector<int64_t> sample = fg;
    std::unordered_set<int64_t> taken(fg.begin(), fg.end());
    if (want_bg >= v - static_cast<int64_t>(fg.size())) {
      for (int64_t i = 0; i < v; ++i)
        if (!taken.count(i)) sample.push_back(i);
    } else {
      int64_t drawn = 0;
      while (drawn < want_bg) {
        const int64_t i = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(v)));
        if (taken.insert(i).second) {
          sample.push_back(i);
          ++drawn;
        }
      }
    }

    Tensor<T> targets({static_cast<int>(sample.size())});
    for (size_t i = 0; i < fg.size(); ++i) targets[static_cast<int64_t>(i)] = T(1);

    std::vector<int64_t> flat(sample.size());
    for (size_t i = 0; i < sample.size(); ++i)
      flat[i] = static_cast<int64_t>(qi) * v + sample[i];
    Var<T> logits = ops::gather(head.mask_logits, std::move(flat));

    Var<T> bce = ops::bce_with_logits_mean(logits, targets);
    Var<T> sig = ops::sigmoid(logits);
    Var<T> numer = ops::scale(ops::dot(sig, ops::constant(targets)), 2.0);
    Var<T> denom = ops::add(ops::sum(sig), ops::scalar_const<T>(static_cast<T>(fg.size())));
    Var<T> dice_term = ops::add_const(ops::neg(ops::divide(numer, denom)), 1.0);

    Var<T> pair = ops::add(bce, dice_term);
    total = total.defined() ? ops::add(total, pair) : pair;
  }
  return ops::scale(total, 1.0 / static_cast<double>(k));
}

/// Focal classification loss: matched queries target their ground-truth
/// class, unmatched ones the no-object class at reduced weight; mean over Q.
template <class T>
Var<T> focal_loss(const Var<T>& class_logits, const Assignment& a,
                  const std::vector<int>& gt_labels, const LossConfig& cfg) {
  const int q = class_logits.val().dim(0);
  const int nc = class_logits.val().dim(1);

  std::vector<int> target(static_cast<size_t>(q), kNoObjectClass);
  Tensor<T> weight = Tensor<T>::full({q}, static_cast<T>(cfg.no_object_weight));
  for (size_t j = 0; j < a.query_of_gt.size(); ++j) {
    target[static_cast<size_t>(a.query_of_gt[j])] = gt_labels[j];
    weight[a.query_of_gt[j]] = T(1);
  }

  std::vector<int64_t> idx(static_cast<size_t>(q));
  for (int qi = 0; qi < q; ++qi)
    idx[static_cast<size_t>(qi)] = static_cast<int64_t>(qi) * nc + target[static_cast<size_t>(qi)];

  Var<T> log_pt = ops::gather(ops::log_softmax_rows(class_logits), std::move(idx));
  Var<T> one_minus_pt = ops::add_const(ops::neg(ops::vexp(log_pt)), 1.0);
  Var<T> fl = ops::mul(ops::pow_const(one_minus_pt, cfg.focal_gamma), ops::neg(log_pt));
  return ops::scale(ops::dot(fl, ops::constant(weight)), 1.0 / static_cast<double>(q));
}

namespace detail {
template <class T>
void check_unit_rows(const Tensor<T>& m, const char* what) {
  const int d = m.dim(m.ndim() - 1);
  const int rows = static_cast<int>(m.numel() / d);
  for (int i = 0; i < rows; ++i) {
    double n2 = 0;
    for (int j = 0; j < d; ++j) {
      const double x = m[static_cast<int64_t>(i) * d + j];
      n2 += x * x;
    }
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-3)
      throw Error("not_normalized", std::string(what) + ": embedding row " + std::to_string(i) +
                                        " is not unit-norm");
  }
}
}  // namespace detail

/// Supervised-contrast term for one anchor:
///   sum_{p in P} -(1/|P|) log( exp(z_x.z_p / tau) / sum_{a in A} exp(z_x.z_a / tau) ).
/// Empty P contributes 0 (skipped by the caller in batch form).
template <class T>
Var<T> supcon_term(const Var<T>& anchor, const Var<T>& positives, const Var<T>& contrast,
                   double tau) {
  if (tau <= 0) throw config_error("temperature must be positive");
  detail::check_unit_rows(anchor.val(), "supcon anchor");
  if (positives.val().numel() == 0) return ops::scalar_const<T>(0);
  detail::check_unit_rows(positives.val(), "supcon positives");
  detail::check_unit_rows(contrast.val(), "supcon contrast");

  Var<T> za = ops::reshape(anchor, {anchor.val().dim(anchor.val().ndim() - 1)});
  Var<T> s_all = ops::scale(ops::matvec(contrast, za), 1.0 / tau);
  Var<T> s_pos = ops::scale(ops::matvec(positives, za), 1.0 / tau);
  return ops::sub(ops::logsumexp(s_all), ops::mean(s_pos));
}

/// Rare-anchor repulsion: log sum_{a in A_c} exp(z_x.z_a / tau) over common
/// samples only; empty A_c contributes 0.
template <class T>
Var<T> rare_term(const Var<T>& anchor, const Var<T>& common_contrast, double tau) {
  if (tau <= 0) throw config_error("temperature must be positive");
  detail::check_unit_rows(anchor.val(), "rare anchor");
  if (common_contrast.val().numel() == 0) return ops::scalar_const<T>(0);
  detail::check_unit_rows(common_contrast.val(), "rare contrast");

  Var<T> za = ops::reshape(anchor, {anchor.val().dim(anchor.val().ndim() - 1)});
  return ops::logsumexp(ops::scale(ops::matvec(common_contrast, za), 1.0 / tau));
}

/// Asymmetric contrastive loss over the matched queries of one batch.
/// Anchors are matched queries; contrast partners are the other matched
/// queries plus the bank snapshot (constants). Mean over non-skipped anchors.
/// When push_to_bank is set, the batch embeddings enter the bank after the
/// loss is computed.
template <class T>
Var<T> acl_loss(const Var<T>& embeddings, const Assignment& a, const std::vector<int>& gt_labels,
                MemoryBank<T>& bank, const LossConfig& cfg, bool push_to_bank = true) {
  const int d = embeddings.val().dim(1);
  const int n_anchor = static_cast<int>(a.query_of_gt.size());

  std::vector<int> anchor_rows(a.query_of_gt.begin(), a.query_of_gt.end());
  std::vector<int> anchor_labels(gt_labels.begin(), gt_labels.end());

  Tensor<T> bank_embs = bank.size() > 0 ? bank.embeddings_matrix() : Tensor<T>({0, d});
  std::vector<int> bank_labels;
  for (int i = 0; i < bank.size(); ++i) bank_labels.push_back(bank.label(i));

  Var<T> total;
  int used = 0;
  for (int i = 0; i < n_anchor; ++i) {
    const int cls = anchor_labels[static_cast<size_t>(i)];
    Var<T> anchor = ops::select_rows(embeddings, {anchor_rows[static_cast<size_t>(i)]});

    // batch peers (exclude the anchor itself) and bank entries
    std::vector<int> peer_rows, peer_labels;
    for (int o = 0; o < n_anchor; ++o)
      if (o != i) {
        peer_rows.push_back(anchor_rows[static_cast<size_t>(o)]);
        peer_labels.push_back(anchor_labels[static_cast<size_t>(o)]);
      }

    const bool rare_anchor = !cfg.symmetric_contrast && cls == kOthersClass;

    auto build_set = [&](const std::function<bool(int)>& keep) -> Var<T> {
      std::vector<int> keep_peers;
      for (size_t o = 0; o < peer_rows.size(); ++o)
        if (keep(peer_labels[o])) keep_peers.push_back(peer_rows[o]);
      std::vector<int> keep_bank;
      for (size_t b = 0; b < bank_labels.size(); ++b)
        if (keep(bank_labels[b])) keep_bank.push_back(static_cast<int>(b));

      Var<T> batch_part =
          keep_peers.empty() ? Var<T>() : ops::select_rows(embeddings, keep_peers);
      Var<T> bank_part;
      if (!keep_bank.empty()) {
        Tensor<T> sel({static_cast<int>(keep_bank.size()), d});
        for (size_t r = 0; r < keep_bank.size(); ++r)
          std::copy_n(bank_embs.data() + static_cast<int64_t>(keep_bank[r]) * d, d,
                      sel.data() + static_cast<int64_t>(r) * d);
        bank_part = ops::constant(sel);
      }
      if (batch_part.defined() && bank_part.defined())
        return ops::concat_rows(batch_part, bank_part);
      if (batch_part.defined()) return batch_part;
      if (bank_part.defined()) return bank_part;
      return Var<T>();
    };

    Var<T> term;
    if (rare_anchor) {
      Var<T> commons = build_set([](int l) { return l != kOthersClass; });
      if (!commons.defined()) continue;  // skipped
      term = rare_term(anchor, commons, cfg.temperature);
    } else {
      Var<T> positives = build_set([&](int l) { return l == cls; });
      if (!positives.defined()) continue;  // no positives: skipped
      Var<T> contrast = build_set([&](int l) {
        return cfg.rare_in_common_denominator || cfg.symmetric_contrast || l != kOthersClass;
      });
      term = supcon_term(anchor, positives, contrast, cfg.temperature);
    }
    total = total.defined() ? ops::add(total, term) : term;
    ++used;
  }

  Var<T> loss = used > 0 ? ops::scale(total, 1.0 / static_cast<double>(used))
                         : ops::scalar_const<T>(0);

  if (push_to_bank) {
    for (int i = 0; i < n_anchor; ++i)
      bank.push(embeddings.val().data() +
                    static_cast<int64_t>(anchor_rows[static_cast<size_t>(i)]) * d,
                d, anchor_labels[static_cast<size_t>(i)]);
  }
  return loss;
}

/// lambda1 * L_seg + lambda2 * L_focal + lambda3 * L_acl.
template <class T>
Var<T> total_loss(const Var<T>& l_seg, const Var<T>& l_focal, const Var<T>& l_acl,
                  const LossConfig& cfg) {
  return ops::add(ops::add(ops::scale(l_seg, cfg.lambda_seg), ops::scale(l_focal, cfg.lambda_focal)),
                  ops::scale(l_acl, cfg.lambda_acl));
}

}  // namespace lidia
