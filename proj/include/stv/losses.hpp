#pragma once

// Loss functions for still-to-video face matching: pairwise CCM triplet loss,
// hinge triplet loss on the unit hypersphere, mean-distance and standard-
// deviation regularizers (with an independent closed-form gradient for the
// latter), T-mask weighted reconstruction error, and softmax cross-entropy.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "stv/tape.hpp"
#include "stv/tensor.hpp"
#include "stv/tmask.hpp"

namespace stv::losses {

using ad::Tape;
using ad::Var;

/// Margins and term weights for every loss in the library.  The chapter uses
/// the letters alpha/beta twice (triplet/mean margins vs. T-mask weights);
/// fields keep them apart.
struct LossConfig {
  double alpha_triplet = 0.2;  // triplet margin
  double beta_mean = 0.5;      // mean-distance margin
  double gamma_std = 0.2;      // standard-deviation margin
  double delta1 = 1.0;         // triplet term weight
  double delta2 = 0.5;         // mean term weight
  double delta3 = 0.25;        // std term weight
  double tmask_alpha = 1.0;    // pixel weight inside the T region
  double tmask_beta = 0.25;    // pixel weight outside

  void validate() const {
    if (alpha_triplet < 0 || beta_mean < 0 || gamma_std < 0)
      throw ConfigError("LossConfig: margins must be non-negative");
    if (delta1 <= 0 || delta2 < 0 || delta3 < 0)
      throw ConfigError("LossConfig: delta weights must be non-negative with delta1 > 0");
    if (tmask_alpha < 0 || tmask_beta < 0)
      throw ConfigError("LossConfig: T-mask weights must be non-negative");
    if (delta2 > 0 && delta3 > 0 && !(gamma_std < beta_mean))
      throw ConfigError("LossConfig: gamma_std must be smaller than beta_mean when both "
                        "regularizers are active (got gamma=" + std::to_string(gamma_std) +
                        ", beta=" + std::to_string(beta_mean) + ")");
  }
};

/// Batch of L2-normalized representations with class labels.
struct EmbeddingBatch {
  Tensor embeddings;        // [n, d]
  std::vector<int> labels;  // length n

  std::size_t size() const { return embeddings.shape.empty() ? 0 : embeddings.shape[0]; }
  std::size_t dim() const { return embeddings.rank() == 2 ? embeddings.shape[1] : 0; }

  void validate(double unit_tol = 1e-6) const {
    if (embeddings.rank() != 2)
      throw ShapeError("EmbeddingBatch: embeddings must be [n,d], got " +
                       shape_str(embeddings.shape));
    if (size() < 1 || dim() < 2)
      throw ShapeError("EmbeddingBatch: need n >= 1 and d >= 2, got " +
                       shape_str(embeddings.shape));
    if (labels.size() != size())
      throw ShapeError("EmbeddingBatch: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(size()) + " rows");
    for (std::size_t r = 0; r < size(); ++r) {
      double sq = 0.0;
      for (std::size_t i = 0; i < dim(); ++i) {
        const double v = embeddings.data[r * dim() + i];
        sq += v * v;
      }
      if (std::abs(std::sqrt(sq) - 1.0) > unit_tol)
        throw DomainError("EmbeddingBatch: row " + std::to_string(r) +
                          " is not unit-norm (|v| = " + std::to_string(std::sqrt(sq)) + ")");
    }
  }
};

struct ScoreTriple {
  double s_tp = 0.0, s_tn = 0.0, s_np = 0.0;
};

struct IndexTriplet {
  std::size_t anchor = 0, positive = 0, negative = 0;
};

namespace detail {

/// classes in ascending id order with their member row indices
inline std::map<int, std::vector<std::size_t>> class_partition(
    const std::vector<int>& labels) {
  std::map<int, std::vector<std::size_t>> part;
  for (std::size_t i = 0; i < labels.size(); ++i) part[labels[i]].push_back(i);
  return part;
}

/// [k] row-sum of a [k,d] matrix via matmul with a ones column
inline Var sum_rows(Tape& t, Var m) {
  const Tensor& mv = t.value(m);
  Var ones = t.leaf(Tensor({mv.shape[1], 1}, 1.0));
  return ad::reshape(t, ad::matmul(t, m, ones), {mv.shape[0]});
}

/// [C,d] class means: selector matrix (1/N_c at member columns) times emb
inline Var class_means(Tape& t, Var emb,
                       const std::map<int, std::vector<std::size_t>>& part) {
  const Tensor& ev = t.value(emb);
  const std::size_t n = ev.shape[0];
  Tensor sel({part.size(), n});
  std::size_t row = 0;
  for (const auto& [cls, members] : part) {
    for (std::size_t i : members)
      sel.data[row * n + i] = 1.0 / static_cast<double>(members.size());
    ++row;
  }
  return ad::matmul(t, t.leaf(std::move(sel)), emb);
}

}  // namespace detail

// --- hinge triplet loss ----------------------------------------------------------

/// L = (1/2N) * sum_i [ |f(a)-f(p)|^2 - |f(a)-f(n)|^2 + alpha ]_+ over the N
/// supplied triplets.
inline Var triplet_loss(Tape& t, Var emb, const std::vector<IndexTriplet>& triplets,
                        const LossConfig& cfg) {
  const Tensor& ev = t.value(emb);
  if (ev.rank() != 2)
    throw ShapeError("triplet_loss: embeddings must be [n,d], got " + shape_str(ev.shape));
  if (triplets.empty()) throw DomainError("triplet_loss: empty triplet list");
  const std::size_t n = ev.shape[0];
  std::vector<std::size_t> ai, pi, ni;
  for (const auto& tr : triplets) {
    if (tr.anchor >= n || tr.positive >= n || tr.negative >= n)
      throw DomainError("triplet_loss: triplet index out of range [0," + std::to_string(n) +
                        ")");
    ai.push_back(tr.anchor);
    pi.push_back(tr.positive);
    ni.push_back(tr.negative);
  }
  Var A = ad::gather_rows(t, emb, ai);
  Var P = ad::gather_rows(t, emb, pi);
  Var N = ad::gather_rows(t, emb, ni);
  Var d_ap = detail::sum_rows(t, ad::square(t, ad::sub(t, A, P)));
  Var d_an = detail::sum_rows(t, ad::square(t, ad::sub(t, A, N)));
  Var margin = ad::affine(t, ad::sub(t, d_ap, d_an), 1.0, cfg.alpha_triplet);
  Var hinged = ad::hinge_clamp(t, margin);
  return ad::scale(t, ad::sum(t, hinged), 1.0 / (2.0 * static_cast<double>(triplets.size())));
}

// --- mean distance regularizer ------------------------------------------------------

/// L = (1/2P) * sum_c max(0, beta - |mu_c - mu_c^n|^2), where mu_c^n is the
/// nearest other-class mean (ties broken by lowest class id) and P counts the
/// classes violating the constraint.  Zero when nothing violates.
inline Var mean_distance_loss(Tape& t, Var emb, const std::vector<int>& labels,
                              const LossConfig& cfg) {
  auto part = detail::class_partition(labels);
  const std::size_t C = part.size();
  if (C < 2) throw DomainError("mean_distance_loss: need >= 2 distinct classes, got " +
                               std::to_string(C));
  Var means = detail::class_means(t, emb, part);
  const Tensor& mv = t.value(means);
  const std::size_t d = mv.shape[1];

  // nearest other-class mean per class, from current values
  std::vector<std::size_t> nearest(C);
  std::size_t violations = 0;
  std::vector<double> sq_dist(C);
  for (std::size_t c = 0; c < C; ++c) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = c;
    for (std::size_t j = 0; j < C; ++j) {
      if (j == c) continue;
      double sq = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = mv.data[c * d + i] - mv.data[j * d + i];
        sq += diff * diff;
      }
      if (sq < best) {  // strict: ties keep the lowest class id
        best = sq;
        best_j = j;
      }
    }
    nearest[c] = best_j;
    sq_dist[c] = best;
    if (best < cfg.beta_mean) ++violations;
  }
  if (violations == 0) return t.leaf(Tensor::scalar(0.0));

  std::vector<std::size_t> all(C);
  for (std::size_t c = 0; c < C; ++c) all[c] = c;
  Var own = ad::gather_rows(t, means, all);
  Var other = ad::gather_rows(t, means, nearest);
  Var dist = detail::sum_rows(t, ad::square(t, ad::sub(t, own, other)));
  Var hinged = ad::hinge_clamp(t, ad::affine(t, dist, -1.0, cfg.beta_mean));
  return ad::scale(t, ad::sum(t, hinged), 1.0 / (2.0 * static_cast<double>(violations)));
}

// --- standard deviation regularizer ---------------------------------------------------

/// sigma_c = sqrt( (1/N_c) * sum_j |f(x_cj) - mu_c|^2 )
/// L = (1/M) * sum_c max(0, gamma - sigma_c), M = number of violating classes.
/// At zero spread the sqrt-kink convention yields subgradient 0, so no
/// additive stabilizer is needed (and the zero-spread loss is exactly gamma).
inline Var std_dev_loss(Tape& t, Var emb, const std::vector<int>& labels,
                        const LossConfig& cfg) {
  auto part = detail::class_partition(labels);
  if (part.empty()) throw DomainError("std_dev_loss: empty batch");
  const Tensor& ev = t.value(emb);

  std::vector<Var> sigmas;
  std::vector<double> sigma_vals;
  for (const auto& [cls, members] : part) {
    const std::size_t nc = members.size();
    Var rows = ad::gather_rows(t, emb, members);
    Tensor sel({1, ev.shape[0]});
    for (std::size_t i : members) sel.data[i] = 1.0 / static_cast<double>(nc);
    Var mu = ad::matmul(t, t.leaf(std::move(sel)), emb);  // [1,d]
    Var mu_tiled = ad::matmul(t, t.leaf(Tensor({nc, 1}, 1.0)), mu);  // [nc,d]
    Var sq = ad::square(t, ad::sub(t, rows, mu_tiled));
    Var msd = ad::scale(t, ad::sum(t, sq), 1.0 / static_cast<double>(nc));
    Var sigma = ad::sqrt(t, msd);
    sigmas.push_back(ad::reshape(t, sigma, {1}));
    sigma_vals.push_back(t.value(sigma).data[0]);
  }
  std::size_t M = 0;
  for (double s : sigma_vals) M += s < cfg.gamma_std ? 1 : 0;
  Var sig_vec = ad::concat(t, sigmas);
  Var hinged = ad::hinge_clamp(t, ad::affine(t, sig_vec, -1.0, cfg.gamma_std));
  double positive_total = 0.0;
  for (double v : t.value(hinged).data) positive_total += v;
  if (M == 0) {
    if (positive_total > 0.0)
      throw DomainError("std_dev_loss: internal inconsistency, zero violation count with "
                        "positive hinge terms");
    return t.leaf(Tensor::scalar(0.0));
  }
  return ad::scale(t, ad::sum(t, hinged), 1.0 / static_cast<double>(M));
}

/// Closed-form gradient of std_dev_loss w.r.t. the embeddings, derived by the
/// chain rule: d sigma_c / d f(x_ci) = (f(x_ci) - mu_c) / (N_c * sigma_c),
/// accumulated as -(1/M) * omega_c * d sigma_c / d f(x_ci).
inline Tensor std_dev_loss_grad_analytic(const EmbeddingBatch& batch, const LossConfig& cfg) {
  const std::size_t n = batch.size(), d = batch.dim();
  auto part = detail::class_partition(batch.labels);
  if (part.empty()) throw DomainError("std_dev_loss_grad_analytic: empty batch");

  struct ClassStat {
    std::vector<std::size_t> members;
    std::vector<double> mu;
    double sigma = 0.0;
    double msd = 0.0;
    bool violated = false;
  };
  std::vector<ClassStat> stats;
  std::size_t M = 0;
  for (const auto& [cls, members] : part) {
    ClassStat s;
    s.members = members;
    s.mu.assign(d, 0.0);
    for (std::size_t i : members)
      for (std::size_t k = 0; k < d; ++k) s.mu[k] += batch.embeddings.data[i * d + k];
    for (double& v : s.mu) v /= static_cast<double>(members.size());
    double ss = 0.0;
    for (std::size_t i : members)
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = batch.embeddings.data[i * d + k] - s.mu[k];
        ss += diff * diff;
      }
    s.msd = ss / static_cast<double>(members.size());
    s.sigma = std::sqrt(s.msd);
    s.violated = s.sigma < cfg.gamma_std;
    if (s.violated) {
      if (s.msd == 0.0)
        throw DomainError("std_dev_loss_grad_analytic: singular gradient, zero-spread "
                          "violated class");
      ++M;
    }
    stats.push_back(std::move(s));
  }
  Tensor grad({n, d});
  if (M == 0) return grad;
  for (const auto& s : stats) {
    if (!s.violated) continue;
    const double scale = -1.0 / (static_cast<double>(M) *
                                 static_cast<double>(s.members.size()) * s.sigma);
    for (std::size_t i : s.members)
      for (std::size_t k = 0; k < d; ++k)
        grad.data[i * d + k] += scale * (batch.embeddings.data[i * d + k] - s.mu[k]);
  }
  return grad;
}

// --- composite losses -------------------------------------------------------------------

/// delta1 * L_triplet + delta2 * L_mean + delta3 * L_std.
inline Var haarnet_loss(Tape& t, Var emb, const std::vector<int>& labels,
                        const std::vector<IndexTriplet>& triplets, const LossConfig& cfg) {
  cfg.validate();
  Var total = ad::scale(t, triplet_loss(t, emb, triplets, cfg), cfg.delta1);
  if (cfg.delta2 > 0.0)
    total = ad::add(t, total, ad::scale(t, mean_distance_loss(t, emb, labels, cfg),
                                        cfg.delta2));
  if (cfg.delta3 > 0.0)
    total = ad::add(t, total, ad::scale(t, std_dev_loss(t, emb, labels, cfg), cfg.delta3));
  return total;
}

/// Mean-distance-regularized triplet loss: the composite with delta3 forced 0.
inline Var mdr_tl(Tape& t, Var emb, const std::vector<int>& labels,
                  const std::vector<IndexTriplet>& triplets, const LossConfig& cfg) {
  LossConfig c = cfg;
  c.delta3 = 0.0;
  return haarnet_loss(t, emb, labels, triplets, c);
}

// --- CCM pairwise triplet loss ------------------------------------------------------------

/// (1/L) * sum_i sqrt( (1 - S_tp)^2 + S_tn^2 + S_np^2 ) over [L] score vectors.
inline Var ccm_triplet_loss(Tape& t, Var s_tp, Var s_tn, Var s_np) {
  const Tensor& a = t.value(s_tp);
  if (a.rank() != 1 || !same_shape(a, t.value(s_tn)) || !same_shape(a, t.value(s_np)))
    throw ShapeError("ccm_triplet_loss: three equal-length score vectors required");
  const std::size_t L = a.numel();
  if (L == 0) throw DomainError("ccm_triplet_loss: empty score list");
  Var miss = ad::square(t, ad::affine(t, s_tp, -1.0, 1.0));
  Var term = ad::add(t, miss, ad::add(t, ad::square(t, s_tn), ad::square(t, s_np)));
  return ad::scale(t, ad::sum(t, ad::sqrt(t, term)), 1.0 / static_cast<double>(L));
}

/// Value-level wrapper over a list of score triples.
inline Tensor ccm_triplet_loss(const std::vector<ScoreTriple>& scores) {
  if (scores.empty()) throw DomainError("ccm_triplet_loss: empty score list");
  for (const auto& s : scores)
    for (double v : {s.s_tp, s.s_tn, s.s_np})
      if (v < 0.0 || v > 1.0)
        throw DomainError("ccm_triplet_loss: score " + std::to_string(v) +
                          " outside [0,1]");
  Tape t;
  Tensor tp({scores.size()}), tn({scores.size()}), np({scores.size()});
  for (std::size_t i = 0; i < scores.size(); ++i) {
    tp.data[i] = scores[i].s_tp;
    tn.data[i] = scores[i].s_tn;
    np.data[i] = scores[i].s_np;
  }
  Var loss = ccm_triplet_loss(t, t.leaf(tp), t.leaf(tn), t.leaf(np));
  return t.value(loss);
}

// --- T-mask weighted reconstruction error ---------------------------------------------------

/// sum_{i,j} tau_{i,j} * (X_{i,j} - Xhat_{i,j})^2, summed over channels;
/// reconstruction and target are [H,W] or [C,H,W] (or [B,C,H,W] batches).
inline Var weighted_tmask_mse(Tape& t, Var reconstruction, Var target,
                              const data::TMask& mask) {
  const Tensor& rv = t.value(reconstruction);
  const Tensor& tv = t.value(target);
  if (!same_shape(rv, tv))
    throw ShapeError("weighted_tmask_mse: reconstruction " + shape_str(rv.shape) +
                     " vs target " + shape_str(tv.shape));
  if (rv.rank() < 2)
    throw ShapeError("weighted_tmask_mse: need at least [H,W], got " + shape_str(rv.shape));
  const std::size_t H = rv.shape[rv.rank() - 2], W = rv.shape[rv.rank() - 1];
  if (H != mask.rows || W != mask.cols)
    throw ShapeError("weighted_tmask_mse: mask grid " + std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + " does not match image " +
                     std::to_string(H) + "x" + std::to_string(W));
  Tensor tiled(rv.shape);
  const std::size_t planes = rv.numel() / (H * W);
  for (std::size_t p = 0; p < planes; ++p)
    std::copy_n(mask.grid.data.data(), H * W, &tiled.data[p * H * W]);
  Var diff = ad::sub(t, reconstruction, target);
  return ad::sum(t, ad::mul(t, t.leaf(std::move(tiled)), ad::square(t, diff)));
}

// --- softmax cross-entropy -------------------------------------------------------------------

/// Mean negative log-likelihood under a per-row softmax.  A single tape node;
/// d logits = (softmax - onehot) / n.
inline Var softmax_cross_entropy(Tape& t, Var logits, const std::vector<int>& labels) {
  const Tensor& lv = t.value(logits);
  if (lv.rank() != 2)
    throw ShapeError("softmax_cross_entropy: logits must be [n,C], got " +
                     shape_str(lv.shape));
  const std::size_t n = lv.shape[0], C = lv.shape[1];
  if (labels.size() != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= C)
      throw DomainError("softmax_cross_entropy: label " + std::to_string(l) +
                        " outside [0," + std::to_string(C) + ")");
  std::vector<double> probs(n * C);
  double nll = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &lv.data[r * C];
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      probs[r * C + c] = std::exp(row[c] - mx);
      z += probs[r * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) probs[r * C + c] /= z;
    nll -= std::log(probs[r * C + static_cast<std::size_t>(labels[r])]);
  }
  int lid = logits.id;
  std::vector<int> labels_copy = labels;
  return t.record("softmax_cross_entropy", {lid},
                  Tensor::scalar(nll / static_cast<double>(n)),
                  [lid, n, C, probs, labels_copy](Tape& tp, const std::vector<double>& g,
                                                  auto& flow) {
                    if (!tp.node(lid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, lid, n * C);
                    const double gn = g[0] / static_cast<double>(n);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < C; ++c) {
                        const double onehot =
                            c == static_cast<std::size_t>(labels_copy[r]) ? 1.0 : 0.0;
                        fx[r * C + c] += gn * (probs[r * C + c] - onehot);
                      }
                  });
}

// --- value-level wrappers ----------------------------------------------------------------------

namespace detail {

template <typename Body>
double eval_on_batch(const EmbeddingBatch& batch, Body&& body, Tensor* grad_out = nullptr) {
  Tape t;
  Tensor e = batch.embeddings;
  e.requires_grad = grad_out != nullptr;
  Var emb = t.leaf(std::move(e));
  Var loss = body(t, emb);
  if (grad_out) {
    t.backward(loss);
    *grad_out = t.grad_tensor(emb);
  }
  return t.value(loss).data[0];
}

}  // namespace detail

inline double triplet_loss_value(const std::vector<IndexTriplet>& triplets,
                                 const EmbeddingBatch& batch, const LossConfig& cfg,
                                 Tensor* grad = nullptr) {
  return detail::eval_on_batch(
      batch, [&](Tape& t, Var e) { return triplet_loss(t, e, triplets, cfg); }, grad);
}

inline double mean_distance_loss_value(const EmbeddingBatch& batch, const LossConfig& cfg,
                                       Tensor* grad = nullptr) {
  return detail::eval_on_batch(
      batch, [&](Tape& t, Var e) { return mean_distance_loss(t, e, batch.labels, cfg); },
      grad);
}

inline double std_dev_loss_value(const EmbeddingBatch& batch, const LossConfig& cfg,
                                 Tensor* grad = nullptr) {
  return detail::eval_on_batch(
      batch, [&](Tape& t, Var e) { return std_dev_loss(t, e, batch.labels, cfg); }, grad);
}

inline double haarnet_loss_value(const std::vector<IndexTriplet>& triplets,
                                 const EmbeddingBatch& batch, const LossConfig& cfg,
                                 Tensor* grad = nullptr) {
  return detail::eval_on_batch(
      batch, [&](Tape& t, Var e) { return haarnet_loss(t, e, batch.labels, triplets, cfg); },
      grad);
}

inline double mdr_tl_value(const std::vector<IndexTriplet>& triplets,
                           const EmbeddingBatch& batch, const LossConfig& cfg,
                           Tensor* grad = nullptr) {
  return detail::eval_on_batch(
      batch, [&](Tape& t, Var e) { return mdr_tl(t, e, batch.labels, triplets, cfg); }, grad);
}

}  // namespace stv::losses
