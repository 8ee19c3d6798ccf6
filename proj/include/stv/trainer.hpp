#pragma once

// Optimization loop: SGD with momentum, stage-wise training with parameter
// freezing, the four architecture schedules, and run reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "stv/losses.hpp"
#include "stv/network.hpp"
#include "stv/synthetic.hpp"

namespace stv::train {

using losses::EmbeddingBatch;
using losses::IndexTriplet;
using losses::LossConfig;
using nn::CcmModel;
using nn::CfrModel;
using nn::ForwardOptions;
using nn::Mode;
using nn::Network;

struct TrainingError : Error {
  explicit TrainingError(const std::string& m) : Error(m) {}
};

struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("optimizer: learning rate must be positive");
    if (momentum < 0 || momentum >= 1)
      throw ConfigError("optimizer: momentum must lie in [0,1)");
    if (weight_decay < 0) throw ConfigError("optimizer: negative weight decay");
  }
};

struct SgdState {
  std::map<std::string, Tensor> velocity;
};

/// v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.
/// Parameters in `frozen` (or without a gradient entry) are untouched.
inline void sgd_momentum_step(std::map<std::string, Tensor>& params,
                              const std::map<std::string, Tensor>& grads, SgdState& state,
                              const OptimizerConfig& cfg,
                              const std::set<std::string>& frozen = {}) {
  cfg.validate();
  for (auto& [name, p] : params) {
    if (frozen.count(name)) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (g.shape != p.shape)
      throw ShapeError("sgd_momentum_step: gradient shape " + shape_str(g.shape) +
                       " does not match parameter " + name + " " + shape_str(p.shape));
    Tensor& v = state.velocity.try_emplace(name, Tensor(p.shape)).first->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      v.data[i] = cfg.momentum * v.data[i] + g.data[i] + cfg.weight_decay * p.data[i];
      p.data[i] -= cfg.lr * v.data[i];
    }
  }
}

// --- stages -----------------------------------------------------------------------------

enum class LossKind { softmax, triplet, mdr_tl, haarnet, autoencoder_tmask };

struct Stage {
  std::string name;
  LossKind loss = LossKind::softmax;
  std::size_t epochs = 0;
  std::vector<std::string> trainable;  // exact parameter names
  std::vector<std::string> frozen;     // complement; the two must partition params
  std::string feature_node = "embedding";  // softmax stages attach the aux head here
  data::SamplingStrategy sampling = data::SamplingStrategy::uniform;

  void validate(const Network& net) const {
    std::set<std::string> t(trainable.begin(), trainable.end());
    std::set<std::string> f(frozen.begin(), frozen.end());
    for (const auto& name : t)
      if (f.count(name))
        throw ConfigError("stage " + name + ": parameter in both trainable and frozen");
    for (const auto& [pname, tensor] : net.params)
      if (!t.count(pname) && !f.count(pname))
        throw ConfigError("stage " + this->name + ": parameter " + pname +
                          " is neither trainable nor frozen");
  }
};

/// Builds a stage whose trainable set is every parameter matching one of the
/// prefixes; the rest is frozen.
inline Stage stage_with_prefixes(const Network& net, std::string name, LossKind loss,
                                 std::size_t epochs,
                                 const std::vector<std::string>& prefixes,
                                 const std::string& feature_node = "embedding") {
  Stage s;
  s.name = std::move(name);
  s.loss = loss;
  s.epochs = epochs;
  s.feature_node = feature_node;
  for (const auto& [pname, tensor] : net.params) {
    bool hit = prefixes.empty();
    for (const auto& pre : prefixes) hit = hit || pname.rfind(pre, 0) == 0;
    (hit ? s.trainable : s.frozen).push_back(pname);
  }
  return s;
}

struct StageTrace {
  std::string stage;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // softmax stages and CCM fine-tuning only
};

struct RunReport {
  std::vector<StageTrace> stages;
  std::map<std::string, std::string> info;  // echoed settings and results
};

struct TrainConfig {
  OptimizerConfig opt;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  LossConfig loss;
  std::size_t epochs = 30;            // generic per-stage default
  std::size_t pretrain_epochs = 30;   // CCM pre-training
  std::size_t finetune_epochs = 200;  // CCM fine-tuning budget
  double target_rank1 = 1.0;          // CCM fine-tune early stop (0 disables)
  double mining_margin = 0.2;
  data::TMaskGeometry tmask;
};

namespace detail {

struct LabeledRois {
  std::vector<const Tensor*> rois;
  std::vector<int> labels;
};

inline LabeledRois collect_items(const data::Dataset& ds, bool include_stills) {
  LabeledRois out;
  for (const auto& e : ds.identities) {
    if (include_stills) {
      out.rois.push_back(&e.still);
      out.labels.push_back(e.id);
    }
    for (const auto& v : e.videos) {
      out.rois.push_back(&v);
      out.labels.push_back(e.id);
    }
  }
  return out;
}

inline ad::Var batch_leaf(ad::Tape& t, const std::vector<const Tensor*>& rois,
                          const std::vector<std::size_t>& idx) {
  const Tensor& first = *rois.at(idx.at(0));
  Tensor batch({idx.size(), first.shape[0], first.shape[1], first.shape[2]});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(rois[idx[i]]->data.begin(), rois[idx[i]]->data.end(),
              batch.data.begin() + static_cast<long>(i * first.numel()));
  return t.leaf(std::move(batch));
}

inline void check_finite_loss(double loss, const std::string& stage, std::size_t epoch,
                              std::size_t step, const char* kind) {
  if (!std::isfinite(loss))
    throw TrainingError("stage " + stage + ": non-finite " + std::string(kind) +
                        " loss at epoch " + std::to_string(epoch) + ", step " +
                        std::to_string(step));
}

/// Ensures softmax-stage aux classifier parameters exist; returns their names.
inline std::pair<std::string, std::string> ensure_aux_head(Network& net, const Stage& stage,
                                                           std::size_t feat_dim,
                                                           std::size_t n_classes,
                                                           std::uint64_t seed) {
  const std::string wname = "aux." + stage.name + ".w";
  const std::string bname = "aux." + stage.name + ".b";
  if (!net.params.count(wname)) {
    net.params[wname] =
        nn::detail::he_init({n_classes, feat_dim}, feat_dim, mix_seed(seed, fnv1a64(wname)));
    net.params[bname] = Tensor({n_classes});
  }
  return {wname, bname};
}

inline std::set<std::string> frozen_set(const Stage& stage) {
  return {stage.frozen.begin(), stage.frozen.end()};
}

/// Deterministic uniform index triplets over a labeled item set.
inline std::vector<IndexTriplet> uniform_index_triplets(const std::vector<int>& labels,
                                                        std::size_t count,
                                                        std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<int> classes;
  for (auto& [c, members] : by_class)
    if (members.size() >= 2) classes.push_back(c);
  if (classes.size() < 1 || by_class.size() < 2)
    throw TrainingError("uniform_index_triplets: need two classes and a positive pair");
  std::mt19937_64 rng(mix_seed(seed, 0x7712));
  std::vector<IndexTriplet> out;
  for (std::size_t i = 0; i < count; ++i) {
    const int ca = classes[rng() % classes.size()];
    const auto& pos = by_class[ca];
    const std::size_t a = pos[rng() % pos.size()];
    std::size_t p = a;
    while (p == a) p = pos[rng() % pos.size()];
    // negative: any item of another class
    std::size_t n = a;
    while (labels[n] == ca) n = rng() % labels.size();
    out.push_back({a, p, n});
  }
  return out;
}

}  // namespace detail

// --- generic single-network stage ----------------------------------------------------------

/// Runs one stage in place.  Frozen parameters are bit-identical afterwards;
/// the trace holds one loss value per epoch (mean over steps).
inline StageTrace run_stage(Network& net, const data::Dataset& ds, const Stage& stage,
                            const TrainConfig& cfg) {
  StageTrace trace;
  trace.stage = stage.name;
  SgdState sgd;
  const auto frozen = detail::frozen_set(stage);
  const std::size_t n_classes = ds.identities.size();

  // softmax stages create their aux head before validation so the partition
  // covers it
  Stage st = stage;
  if (stage.loss == LossKind::softmax) {
    auto shapes = nn::validate_spec(net.spec);
    const auto& fs = shapes.at(stage.feature_node);
    const std::size_t feat_dim = fs.is_map ? fs.c * fs.h * fs.w : fs.dim;
    auto [wname, bname] =
        detail::ensure_aux_head(net, stage, feat_dim, n_classes, cfg.seed);
    st.trainable.push_back(wname);
    st.trainable.push_back(bname);
  }
  st.validate(net);

  for (std::size_t epoch = 0; epoch < st.epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    std::size_t correct = 0, total = 0;
    switch (st.loss) {
      case LossKind::softmax: {
        auto items = detail::collect_items(ds, true);
        std::vector<std::size_t> order(items.rois.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, fnv1a64(st.name), epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
          const std::size_t hi = std::min(off + cfg.batch_size, order.size());
          std::vector<std::size_t> idx(order.begin() + static_cast<long>(off),
                                       order.begin() + static_cast<long>(hi));
          std::vector<int> labels;
          for (std::size_t i : idx) labels.push_back(items.labels[i]);
          ad::Tape t;
          ad::Var in = detail::batch_leaf(t, items.rois, idx);
          ForwardOptions opts;
          opts.mode = Mode::train;
          opts.trainable = true;
          opts.dropout_seed = mix_seed(cfg.seed, epoch, off);
          std::map<std::string, ad::Var> pvars;
          auto res = run_graph(t, net, {{nn::detail::entry_node(net), in}}, opts, &pvars);
          ad::Var feat = res.nodes.at(st.feature_node);
          if (t.value(feat).rank() == 4) feat = nn::flatten_batch(t, feat);
          const std::string aux = "aux." + st.name;
          Tensor w = net.params.at(aux + ".w");
          Tensor b = net.params.at(aux + ".b");
          w.requires_grad = b.requires_grad = true;
          ad::Var wv = t.leaf(std::move(w));
          ad::Var bv = t.leaf(std::move(b));
          pvars.emplace(aux + ".w", wv);
          pvars.emplace(aux + ".b", bv);
          ad::Var logits = nn::fully_connected(t, feat, wv, bv);
          ad::Var loss = losses::softmax_cross_entropy(t, logits, labels);
          const double lv = t.value(loss).data[0];
          detail::check_finite_loss(lv, st.name, epoch, steps, "softmax");
          t.backward(loss);
          std::map<std::string, Tensor> grads;
          for (auto& [name, var] : pvars) grads[name] = t.grad_tensor(var);
          sgd_momentum_step(net.params, grads, sgd, cfg.opt, frozen);
          epoch_loss += lv;
          ++steps;
          const Tensor& lg = t.value(logits);
          for (std::size_t r = 0; r < idx.size(); ++r) {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < n_classes; ++c)
              if (lg.data[r * n_classes + c] > lg.data[r * n_classes + arg]) arg = c;
            correct += static_cast<int>(arg) == labels[r] ? 1 : 0;
            ++total;
          }
        }
        break;
      }
      case LossKind::triplet:
      case LossKind::mdr_tl:
      case LossKind::haarnet: {
        auto items = detail::collect_items(ds, true);
        std::vector<IndexTriplet> triplets;
        if (st.sampling == data::SamplingStrategy::hard) {
          // mine on eval-mode embeddings, refreshed every epoch
          ad::Tape te;
          std::vector<std::size_t> all(items.rois.size());
          for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
          ad::Var in = detail::batch_leaf(te, items.rois, all);
          auto res = run_graph(te, net, {{nn::detail::entry_node(net), in}}, {});
          const Tensor& emb = te.value(res.output);
          triplets = data::mine_hard_triplets(emb, items.labels,
                                              data::MiningPolicy::semi_hard,
                                              cfg.mining_margin);
          if (triplets.empty())
            triplets = data::mine_hard_triplets(emb, items.labels,
                                                data::MiningPolicy::hardest, 0.0);
        }
        if (triplets.empty())
          triplets = detail::uniform_index_triplets(items.labels, cfg.batch_size,
                                                    mix_seed(cfg.seed, epoch));
        if (triplets.size() > cfg.batch_size) triplets.resize(cfg.batch_size);
        ad::Tape t;
        std::vector<std::size_t> all(items.rois.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        ad::Var in = detail::batch_leaf(t, items.rois, all);
        ForwardOptions opts;
        opts.mode = Mode::train;
        opts.trainable = true;
        opts.dropout_seed = mix_seed(cfg.seed, epoch, 1);
        std::map<std::string, ad::Var> pvars;
        auto res = run_graph(t, net, {{nn::detail::entry_node(net), in}}, opts, &pvars);
        ad::Var loss;
        switch (st.loss) {
          case LossKind::triplet:
            loss = losses::triplet_loss(t, res.output, triplets, cfg.loss);
            break;
          case LossKind::mdr_tl:
            loss = losses::mdr_tl(t, res.output, items.labels, triplets, cfg.loss);
            break;
          default:
            loss = losses::haarnet_loss(t, res.output, items.labels, triplets, cfg.loss);
            break;
        }
        const double lv = t.value(loss).data[0];
        detail::check_finite_loss(lv, st.name, epoch, steps, "triplet-family");
        t.backward(loss);
        std::map<std::string, Tensor> grads;
        for (auto& [name, var] : pvars) grads[name] = t.grad_tensor(var);
        sgd_momentum_step(net.params, grads, sgd, cfg.opt, frozen);
        epoch_loss += lv;
        ++steps;
        break;
      }
      case LossKind::autoencoder_tmask: {
        const auto mask = data::make_tmask(net.spec.in_h, net.spec.in_w, cfg.tmask,
                                           cfg.loss.tmask_alpha, cfg.loss.tmask_beta);
        std::vector<const Tensor*> videos, targets;
        for (const auto& e : ds.identities)
          for (const auto& v : e.videos) {
            videos.push_back(&v);
            targets.push_back(&e.still);
          }
        std::vector<std::size_t> order(videos.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, fnv1a64(st.name), epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
          const std::size_t hi = std::min(off + cfg.batch_size, order.size());
          std::vector<std::size_t> idx(order.begin() + static_cast<long>(off),
                                       order.begin() + static_cast<long>(hi));
          ad::Tape t;
          ad::Var in = detail::batch_leaf(t, videos, idx);
          ad::Var target = detail::batch_leaf(t, targets, idx);
          ForwardOptions opts;
          opts.mode = Mode::train;
          opts.trainable = true;
          opts.dropout_seed = mix_seed(cfg.seed, epoch, off);
          std::map<std::string, ad::Var> pvars;
          auto res = run_graph(t, net, {{nn::detail::entry_node(net), in}}, opts, &pvars);
          // per-pixel scaling keeps gradient magnitudes independent of the
          // ROI geometry; the loss definition itself stays a plain sum
          const double px = static_cast<double>(idx.size() * net.spec.in_channels *
                                                net.spec.in_h * net.spec.in_w);
          ad::Var loss =
              ad::scale(t, losses::weighted_tmask_mse(t, res.output, target, mask), 1.0 / px);
          const double lv = t.value(loss).data[0];
          detail::check_finite_loss(lv, st.name, epoch, steps, "reconstruction");
          t.backward(loss);
          std::map<std::string, Tensor> grads;
          for (auto& [name, var] : pvars) grads[name] = t.grad_tensor(var);
          sgd_momentum_step(net.params, grads, sgd, cfg.opt, frozen);
          epoch_loss += lv;
          ++steps;
        }
        break;
      }
    }
    trace.epoch_loss.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
    if (total > 0)
      trace.epoch_accuracy.push_back(static_cast<double>(correct) /
                                     static_cast<double>(total));
  }
  return trace;
}

// --- CCM schedule ----------------------------------------------------------------------------

namespace detail {

/// One optimizer step of the pairwise CCM triplet loss over an ROI triplet
/// batch; branch and head share one tape so Siamese gradients accumulate.
inline double ccm_step(CcmModel& m, const data::TripletBatch& batch, const TrainConfig& cfg,
                       SgdState& sgd_branch, SgdState& sgd_head, std::uint64_t step_seed) {
  const std::size_t L = batch.size();
  ad::Tape t;
  auto role_batch = [&](auto pick) {
    const Tensor& first = pick(batch.triplets[0]);
    Tensor b({L, first.shape[0], first.shape[1], first.shape[2]});
    for (std::size_t i = 0; i < L; ++i) {
      const Tensor& roi = pick(batch.triplets[i]);
      std::copy(roi.data.begin(), roi.data.end(),
                b.data.begin() + static_cast<long>(i * roi.numel()));
    }
    return t.leaf(std::move(b));
  };
  ad::Var tin = role_batch([](const data::RoiTriplet& r) -> const Tensor& { return r.still; });
  ad::Var pin =
      role_batch([](const data::RoiTriplet& r) -> const Tensor& { return r.positive; });
  ad::Var nin =
      role_batch([](const data::RoiTriplet& r) -> const Tensor& { return r.negative; });
  ForwardOptions opts;
  opts.mode = Mode::train;
  opts.trainable = true;
  std::map<std::string, ad::Var> pvars;
  opts.dropout_seed = mix_seed(step_seed, 1);
  ad::Var tmap = run_graph(t, m.branch, {{"roi", tin}}, opts, &pvars).output;
  opts.dropout_seed = mix_seed(step_seed, 2);
  ad::Var pmap = run_graph(t, m.branch, {{"roi", pin}}, opts, &pvars).output;
  opts.dropout_seed = mix_seed(step_seed, 3);
  ad::Var nmap = run_graph(t, m.branch, {{"roi", nin}}, opts, &pvars).output;
  ForwardOptions head_opts = opts;
  auto pair_scores = [&](ad::Var a, ad::Var b, std::uint64_t s) {
    head_opts.dropout_seed = mix_seed(step_seed, s);
    ad::Var sim = ad::mul(t, a, b);
    ad::Var vec = nn::flatten_batch(t, sim);
    auto res = run_graph(t, m.head, {{"sim", vec}}, head_opts, &pvars);
    return ad::select_column(t, res.output, 0);  // match probability
  };
  ad::Var s_tp = pair_scores(tmap, pmap, 4);
  ad::Var s_tn = pair_scores(tmap, nmap, 5);
  ad::Var s_np = pair_scores(nmap, pmap, 6);
  ad::Var loss = losses::ccm_triplet_loss(t, s_tp, s_tn, s_np);
  const double lv = t.value(loss).data[0];
  t.backward(loss);
  std::map<std::string, Tensor> grads;
  for (auto& [name, var] : pvars) grads[name] = t.grad_tensor(var);
  sgd_momentum_step(m.branch.params, grads, sgd_branch, cfg.opt);
  sgd_momentum_step(m.head.params, grads, sgd_head, cfg.opt);
  return lv;
}

/// Training rank-1 of the CCM matcher over the dataset's video ROIs.
inline double ccm_training_rank1(CcmModel& m, const data::Dataset& ds) {
  std::vector<Tensor> gallery;
  for (const auto& e : ds.identities) gallery.push_back(nn::forward_embed(m.branch, e.still));
  std::size_t correct = 0, total = 0;
  for (const auto& e : ds.identities) {
    for (const auto& v : e.videos) {
      Tensor probe = nn::forward_embed(m.branch, v);
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gallery.size(); ++g) {
        Tensor tm = gallery[g];
        tm.shape = {1, tm.numel()};
        Tensor pm = probe;
        pm.shape = {1, pm.numel()};
        ad::Tape t;
        ad::Var probs = nn::ccm_match_on_tape(t, t.leaf(tm), t.leaf(pm), m.head, {});
        const double score = t.value(probs).data[0];
        if (score > best) {
          best = score;
          best_g = g;
        }
      }
      correct += ds.identities[best_g].id == e.id ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

/// Fine-tuning batch: anchor stills with augmented-still positives and
/// other-identity negatives (stills or videos).
inline data::TripletBatch ccm_finetune_batch(const data::Dataset& ds, std::size_t L,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0xccf7));
  data::TripletBatch batch;
  const auto ops = data::default_augment_ops();
  for (std::size_t i = 0; i < L; ++i) {
    const std::size_t a = rng() % ds.identities.size();
    std::size_t b = rng() % (ds.identities.size() - 1);
    if (b >= a) ++b;
    const auto& ia = ds.identities[a];
    const auto& ib = ds.identities[b];
    const std::size_t op_ix = rng() % ops.size();
    auto aug = data::augment_still(ia.still, {ops[op_ix]}, mix_seed(seed, i));
    data::RoiTriplet tr;
    tr.still = ia.still;
    tr.positive = std::move(aug[0]);
    tr.negative = rng() % 2 == 0 ? ib.still : ib.videos[rng() % ib.videos.size()];
    tr.label_anchor = ia.id;
    tr.label_negative = ib.id;
    batch.triplets.push_back(std::move(tr));
  }
  batch.validate();
  return batch;
}

}  // namespace detail

/// Pre-training on dataset triplets, then fine-tuning on augmented stills.
/// Fine-tuning stops early once training rank-1 reaches `target_rank1`.
inline RunReport run_ccm_schedule(CcmModel& m, const data::Dataset& ds,
                                  const TrainConfig& cfg) {
  RunReport report;
  SgdState sgd_branch, sgd_head;
  StageTrace pre;
  pre.stage = "ccm_pretrain";
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    auto batch = data::build_triplet_batch(ds, cfg.batch_size,
                                           data::SamplingStrategy::uniform, nullptr,
                                           mix_seed(cfg.seed, 100, epoch));
    const double lv =
        detail::ccm_step(m, batch, cfg, sgd_branch, sgd_head, mix_seed(cfg.seed, 200, epoch));
    detail::check_finite_loss(lv, pre.stage, epoch, 0, "ccm");
    pre.epoch_loss.push_back(lv);
  }
  report.stages.push_back(std::move(pre));

  StageTrace fine;
  fine.stage = "ccm_finetune";
  double rank1 = detail::ccm_training_rank1(m, ds);
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    if (cfg.target_rank1 > 0.0 && rank1 >= cfg.target_rank1) break;
    auto batch = detail::ccm_finetune_batch(ds, cfg.batch_size, mix_seed(cfg.seed, 300, epoch));
    const double lv =
        detail::ccm_step(m, batch, cfg, sgd_branch, sgd_head, mix_seed(cfg.seed, 400, epoch));
    detail::check_finite_loss(lv, fine.stage, epoch, 0, "ccm");
    fine.epoch_loss.push_back(lv);
    rank1 = detail::ccm_training_rank1(m, ds);
    fine.epoch_accuracy.push_back(rank1);
  }
  report.info["final_train_rank1"] = std::to_string(rank1);
  report.stages.push_back(std::move(fine));
  return report;
}

/// Trunk softmax, per-branch softmax with frozen shared stem, full-network
/// softmax fine-tune, then hard-triplet training with the composite loss.
inline RunReport run_haarnet_schedule(Network& net, const data::Dataset& ds,
                                      const TrainConfig& cfg) {
  if (net.spec.arch != "haarnet")
    throw ConfigError("run_haarnet_schedule: network arch is " + net.spec.arch);
  RunReport report;
  Stage s1 = stage_with_prefixes(net, "trunk_softmax", LossKind::softmax, cfg.epochs,
                                 {"conv1", "conv2", "trunk_"}, "trunk_feat");
  report.stages.push_back(run_stage(net, ds, s1, cfg));
  for (const char* b : {"b1", "b2", "b3"}) {
    Stage sb = stage_with_prefixes(net, std::string(b) + "_softmax", LossKind::softmax,
                                   cfg.epochs, {std::string(b) + "_"},
                                   std::string(b) + "_feat");
    report.stages.push_back(run_stage(net, ds, sb, cfg));
  }
  Stage s3 = stage_with_prefixes(net, "full_softmax", LossKind::softmax, cfg.epochs, {},
                                 "embedding");
  report.stages.push_back(run_stage(net, ds, s3, cfg));
  Stage s4 = stage_with_prefixes(net, "hard_triplet", LossKind::haarnet, cfg.epochs, {});
  s4.sampling = data::SamplingStrategy::hard;
  report.stages.push_back(run_stage(net, ds, s4, cfg));
  return report;
}

/// Trunk softmax, branch softmax with frozen shared conv, then MDR-TL
/// fine-tuning of the whole network.
inline RunReport run_tbe_schedule(Network& net, const data::Dataset& ds,
                                  const TrainConfig& cfg) {
  if (net.spec.arch != "tbe")
    throw ConfigError("run_tbe_schedule: network arch is " + net.spec.arch);
  RunReport report;
  Stage s1 = stage_with_prefixes(net, "trunk_softmax", LossKind::softmax, cfg.epochs,
                                 {"shared_conv1", "t_conv2"}, "trunk_feat");
  report.stages.push_back(run_stage(net, ds, s1, cfg));
  Stage s2 = stage_with_prefixes(net, "branch_softmax", LossKind::softmax, cfg.epochs,
                                 {"b"}, "all_feat");
  report.stages.push_back(run_stage(net, ds, s2, cfg));
  Stage s3 = stage_with_prefixes(net, "mdr_finetune", LossKind::mdr_tl, cfg.epochs, {});
  s3.sampling = data::SamplingStrategy::hard;
  report.stages.push_back(run_stage(net, ds, s3, cfg));
  return report;
}

/// Autoencoder reconstruction training, then the pairwise classifier over
/// frozen-encoder embeddings.
inline RunReport run_cfr_schedule(CfrModel& m, const data::Dataset& ds,
                                  const TrainConfig& cfg) {
  if (m.autoencoder.spec.arch != "cfr_autoencoder")
    throw ConfigError("run_cfr_schedule: wrong autoencoder arch");
  RunReport report;
  Stage s1 = stage_with_prefixes(m.autoencoder, "autoencoder", LossKind::autoencoder_tmask,
                                 cfg.epochs, {});
  report.stages.push_back(run_stage(m.autoencoder, ds, s1, cfg));

  // pairwise classifier on frozen embeddings: one matching and one
  // non-matching pair per video ROI
  struct Pair {
    Tensor features;
    int label;  // 0 = match, 1 = non-match
  };
  std::vector<Pair> pairs;
  std::vector<Tensor> still_emb;
  for (const auto& e : ds.identities)
    still_emb.push_back(nn::forward_embed(m.autoencoder, e.still));
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xcf12));
  for (std::size_t i = 0; i < ds.identities.size(); ++i) {
    for (const auto& v : ds.identities[i].videos) {
      Tensor ve = nn::forward_embed(m.autoencoder, v);
      std::size_t j = rng() % (ds.identities.size() - 1);
      if (j >= i) ++j;
      for (auto [gi, label] : {std::pair<std::size_t, int>{i, 0}, {j, 1}}) {
        Pair p;
        p.features = Tensor({still_emb[gi].numel() + ve.numel()});
        std::copy(still_emb[gi].data.begin(), still_emb[gi].data.end(),
                  p.features.data.begin());
        std::copy(ve.data.begin(), ve.data.end(),
                  p.features.data.begin() + static_cast<long>(still_emb[gi].numel()));
        p.label = label;
        pairs.push_back(std::move(p));
      }
    }
  }
  StageTrace clf;
  clf.stage = "classifier";
  SgdState sgd;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0xc1a, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t steps = 0, correct = 0;
    for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
      const std::size_t hi = std::min(off + cfg.batch_size, order.size());
      ad::Tape t;
      const std::size_t B = hi - off;
      const std::size_t dim = pairs[0].features.numel();
      Tensor batch({B, dim});
      std::vector<int> labels;
      for (std::size_t k = 0; k < B; ++k) {
        const Pair& p = pairs[order[off + k]];
        std::copy(p.features.data.begin(), p.features.data.end(),
                  batch.data.begin() + static_cast<long>(k * dim));
        labels.push_back(p.label);
      }
      ForwardOptions opts;
      opts.mode = Mode::train;
      opts.trainable = true;
      std::map<std::string, ad::Var> pvars;
      auto res = run_graph(t, m.classifier, {{"pair", t.leaf(std::move(batch))}}, opts, &pvars);
      // cross-entropy over the pre-softmax logits
      ad::Var logits = res.nodes.at("fc2");
      ad::Var loss = losses::softmax_cross_entropy(t, logits, labels);
      const double lv = t.value(loss).data[0];
      detail::check_finite_loss(lv, clf.stage, epoch, steps, "classifier");
      t.backward(loss);
      std::map<std::string, Tensor> grads;
      for (auto& [name, var] : pvars) grads[name] = t.grad_tensor(var);
      sgd_momentum_step(m.classifier.params, grads, sgd, cfg.opt);
      epoch_loss += lv;
      ++steps;
      const Tensor& lg = t.value(logits);
      for (std::size_t r = 0; r < B; ++r)
        correct += (lg.data[r * 2] > lg.data[r * 2 + 1] ? 0 : 1) == labels[r] ? 1 : 0;
    }
    clf.epoch_loss.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
    clf.epoch_accuracy.push_back(static_cast<double>(correct) /
                                 static_cast<double>(pairs.size()));
  }
  report.stages.push_back(std::move(clf));
  return report;
}

// --- run report I/O ---------------------------------------------------------------------------

/// Key-value header plus a CSV loss trace per stage.
inline void write_run_report(const RunReport& report, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("write_run_report: cannot open " + path);
  for (const auto& [k, v] : report.info) f << k << ": " << v << "\n";
  f << "\nstage,epoch,loss,accuracy\n";
  for (const auto& st : report.stages)
    for (std::size_t e = 0; e < st.epoch_loss.size(); ++e) {
      f << st.stage << "," << e << "," << st.epoch_loss[e] << ",";
      if (e < st.epoch_accuracy.size()) f << st.epoch_accuracy[e];
      f << "\n";
    }
  if (!f) throw IoError("write_run_report: write failure on " + path);
}

}  // namespace stv::train
