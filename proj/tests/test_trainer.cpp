#include <gtest/gtest.h>

#include <cmath>

#include "stv/trainer.hpp"
#include "test_util.hpp"

using namespace stv;
using namespace stv::train;
using stv::test::random_tensor;

namespace {

data::Dataset small_dataset(std::uint64_t seed = 3, std::size_t ids = 4,
                            std::size_t videos = 2) {
  return data::generate_synthetic_dataset(seed, ids, {48, 40}, videos);
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.seed = 5;
  cfg.epochs = 2;
  cfg.pretrain_epochs = 2;
  cfg.finetune_epochs = 2;
  cfg.target_rank1 = 0.0;  // no early stop in unit tests
  return cfg;
}

}  // namespace

TEST(Sgd, MomentumZeroIsPlainGradientDescent) {
  std::map<std::string, Tensor> params{{"p", Tensor::from({2}, {1.0, -2.0})}};
  std::map<std::string, Tensor> grads{{"p", Tensor::from({2}, {0.5, 0.25})}};
  SgdState state;
  OptimizerConfig cfg{0.1, 0.0, 0.0};
  sgd_momentum_step(params, grads, state, cfg);
  EXPECT_DOUBLE_EQ(params.at("p").data[0], 1.0 - 0.1 * 0.5);
  EXPECT_DOUBLE_EQ(params.at("p").data[1], -2.0 - 0.1 * 0.25);
}

TEST(Sgd, ZeroGradientZeroVelocityIsIdentity) {
  std::map<std::string, Tensor> params{{"p", Tensor::from({3}, {1, 2, 3})}};
  std::map<std::string, Tensor> grads{{"p", Tensor({3})}};
  SgdState state;
  OptimizerConfig cfg{0.1, 0.9, 0.0};
  sgd_momentum_step(params, grads, state, cfg);
  EXPECT_EQ(params.at("p").data, (std::vector<double>{1, 2, 3}));
}

TEST(Sgd, TwoStepsMatchHandRecursion) {
  // quadratic f(x) = x^2/2, grad = x, lr=0.1, momentum=0.5, wd=0.01
  const double lr = 0.1, mu = 0.5, wd = 0.01;
  double x = 2.0, v = 0.0;
  std::map<std::string, Tensor> params{{"x", Tensor::from({1}, {x})}};
  SgdState state;
  OptimizerConfig cfg{lr, mu, wd};
  for (int step = 0; step < 2; ++step) {
    std::map<std::string, Tensor> grads{{"x", Tensor::from({1}, {params.at("x").data[0]})}};
    sgd_momentum_step(params, grads, state, cfg);
    // hand recursion
    const double g = x;
    v = mu * v + g + wd * x;
    x = x - lr * v;
  }
  EXPECT_NEAR(params.at("x").data[0], x, 1e-12);
}

TEST(Sgd, FrozenParamsUntouchedAndShapeChecked) {
  std::map<std::string, Tensor> params{{"a", Tensor::from({1}, {1.0})},
                                       {"b", Tensor::from({1}, {1.0})}};
  std::map<std::string, Tensor> grads{{"a", Tensor::from({1}, {1.0})},
                                      {"b", Tensor::from({1}, {1.0})}};
  SgdState state;
  OptimizerConfig cfg{0.1, 0.0, 0.0};
  sgd_momentum_step(params, grads, state, cfg, {"b"});
  EXPECT_DOUBLE_EQ(params.at("a").data[0], 0.9);
  EXPECT_DOUBLE_EQ(params.at("b").data[0], 1.0);
  grads.at("a") = Tensor({2});
  EXPECT_THROW(sgd_momentum_step(params, grads, state, cfg), ShapeError);
}

TEST(RunStage, ZeroEpochsIsIdentity) {
  auto ds = small_dataset();
  auto net = nn::build_tbe_lite({}, 7);
  const auto before = net.params;
  Stage s = stage_with_prefixes(net, "noop", LossKind::triplet, 0, {});
  auto trace = run_stage(net, ds, s, quick_config());
  EXPECT_TRUE(trace.epoch_loss.empty());
  for (const auto& [name, t] : before) EXPECT_EQ(net.params.at(name).data, t.data);
}

TEST(RunStage, FrozenSubsetBitIdentical) {
  auto ds = small_dataset();
  auto net = nn::build_tbe_lite({}, 8);
  Stage s = stage_with_prefixes(net, "branches_only", LossKind::softmax, 2, {"b"},
                                "all_feat");
  const auto before = net.params;
  auto trace = run_stage(net, ds, s, quick_config());
  EXPECT_EQ(trace.epoch_loss.size(), 2u);
  std::set<std::string> trainable(s.trainable.begin(), s.trainable.end());
  bool any_changed = false;
  for (const auto& [name, t] : before) {
    if (trainable.count(name) || name.rfind("aux.", 0) == 0) {
      any_changed = any_changed || net.params.at(name).data != t.data;
    } else {
      EXPECT_EQ(net.params.at(name).data, t.data) << name << " should be frozen";
    }
  }
  EXPECT_TRUE(any_changed);
}

TEST(RunStage, StagePartitionValidated) {
  auto ds = small_dataset();
  auto net = nn::build_tbe_lite({}, 9);
  Stage s = stage_with_prefixes(net, "bad", LossKind::triplet, 1, {});
  s.frozen.clear();
  s.trainable.clear();  // neither set covers the parameters
  EXPECT_THROW(run_stage(net, ds, s, quick_config()), ConfigError);
}

TEST(RunStage, SoftmaxOverfitsSeparableSet) {
  auto ds = data::generate_synthetic_dataset(7, 8, {48, 40}, 4);
  auto net = nn::build_tbe_lite({}, 10);
  TrainConfig cfg = quick_config();
  cfg.epochs = 50;
  cfg.opt.lr = 0.02;
  Stage s = stage_with_prefixes(net, "full_softmax", LossKind::softmax, cfg.epochs, {});
  auto trace = run_stage(net, ds, s, cfg);
  ASSERT_FALSE(trace.epoch_accuracy.empty());
  double best = 0.0;
  std::size_t first_hit = trace.epoch_accuracy.size();
  for (std::size_t e = 0; e < trace.epoch_accuracy.size(); ++e) {
    best = std::max(best, trace.epoch_accuracy[e]);
    if (trace.epoch_accuracy[e] == 1.0 && first_hit == trace.epoch_accuracy.size())
      first_hit = e;
  }
  EXPECT_DOUBLE_EQ(best, 1.0);
  EXPECT_LT(first_hit, 50u);
}

TEST(RunStage, NanLossAborts) {
  auto ds = small_dataset();
  auto net = nn::build_tbe_lite({}, 11);
  TrainConfig cfg = quick_config();
  cfg.epochs = 5;
  cfg.opt.lr = 1e150;  // blow up the parameters on the first step
  Stage s = stage_with_prefixes(net, "explode", LossKind::softmax, cfg.epochs, {});
  try {
    run_stage(net, ds, s, cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(Schedules, HaarnetAllEpochsZeroIsIdentity) {
  auto ds = small_dataset();
  auto net = nn::build_haarnet_lite({}, 12);
  const auto before = net.params;
  TrainConfig cfg = quick_config();
  cfg.epochs = 0;
  auto report = run_haarnet_schedule(net, ds, cfg);
  for (const auto& [name, t] : before) EXPECT_EQ(net.params.at(name).data, t.data);
  EXPECT_EQ(report.stages.size(), 6u);
}

TEST(Schedules, HaarnetStagewiseRunsAndTrains) {
  auto ds = small_dataset(13, 3, 2);
  auto net = nn::build_haarnet_lite({}, 13);
  TrainConfig cfg = quick_config();
  cfg.epochs = 2;
  auto report = run_haarnet_schedule(net, ds, cfg);
  ASSERT_EQ(report.stages.size(), 6u);
  for (const auto& st : report.stages) {
    EXPECT_EQ(st.epoch_loss.size(), 2u);
    for (double l : st.epoch_loss) EXPECT_TRUE(std::isfinite(l));
  }
}

TEST(Schedules, TbeStagewiseRunsAndTrains) {
  auto ds = small_dataset(14, 3, 2);
  auto net = nn::build_tbe_lite({}, 14);
  TrainConfig cfg = quick_config();
  cfg.epochs = 2;
  auto report = run_tbe_schedule(net, ds, cfg);
  ASSERT_EQ(report.stages.size(), 3u);
}

TEST(Schedules, CcmOverfitsSmallSet) {
  auto ds = small_dataset(15, 3, 2);
  auto model = nn::build_ccm({}, 15);
  TrainConfig cfg = quick_config();
  cfg.pretrain_epochs = 8;
  cfg.finetune_epochs = 100;
  cfg.target_rank1 = 1.0;
  auto report = run_ccm_schedule(model, ds, cfg);
  EXPECT_EQ(report.info.at("final_train_rank1"), std::to_string(1.0));
}

TEST(Schedules, CcmDeterministicAcrossRuns) {
  auto ds = small_dataset(16, 3, 2);
  TrainConfig cfg = quick_config();
  cfg.pretrain_epochs = 3;
  cfg.finetune_epochs = 2;

  auto m1 = nn::build_ccm({}, 16);
  auto m2 = nn::build_ccm({}, 16);
  auto r1 = run_ccm_schedule(m1, ds, cfg);
  auto r2 = run_ccm_schedule(m2, ds, cfg);
  for (const auto& [name, t] : m1.branch.params)
    EXPECT_EQ(m2.branch.params.at(name).data, t.data) << name;
  for (const auto& [name, t] : m1.head.params)
    EXPECT_EQ(m2.head.params.at(name).data, t.data) << name;
}

TEST(Schedules, CfrReconstructionLossDecreases) {
  auto ds = small_dataset(17, 4, 3);
  auto model = nn::build_cfr({}, 17);
  TrainConfig cfg = quick_config();
  cfg.epochs = 5;
  cfg.opt.lr = 0.005;
  auto report = run_cfr_schedule(model, ds, cfg);
  const auto& recon = report.stages.at(0);
  ASSERT_EQ(recon.epoch_loss.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e)
    EXPECT_LT(recon.epoch_loss[e], recon.epoch_loss[e - 1]) << "epoch " << e;
}

TEST(Schedules, CfrClassifierSeparatesContrivedPairs) {
  // identical embedding pairs vs orthogonal pairs, 32 training pairs total
  auto model = nn::build_cfr({}, 18);
  const std::size_t d = 64;
  std::vector<Tensor> feats;
  std::vector<int> labels;
  std::mt19937_64 rng(18);
  for (int i = 0; i < 16; ++i) {
    Tensor e = random_tensor({d}, 100 + static_cast<std::uint64_t>(i));
    double n = 0.0;
    for (double v : e.data) n += v * v;
    for (double& v : e.data) v /= std::sqrt(n);
    // orthogonal partner: swap a coordinate pair with sign flip
    Tensor o = e;
    for (std::size_t k = 0; k + 1 < d; k += 2) {
      o.data[k] = -e.data[k + 1];
      o.data[k + 1] = e.data[k];
    }
    Tensor match({2 * d}), nonmatch({2 * d});
    std::copy(e.data.begin(), e.data.end(), match.data.begin());
    std::copy(e.data.begin(), e.data.end(), match.data.begin() + d);
    std::copy(e.data.begin(), e.data.end(), nonmatch.data.begin());
    std::copy(o.data.begin(), o.data.end(), nonmatch.data.begin() + d);
    feats.push_back(std::move(match));
    labels.push_back(0);
    feats.push_back(std::move(nonmatch));
    labels.push_back(1);
  }
  SgdState sgd;
  OptimizerConfig opt{0.05, 0.9, 0.0};
  double accuracy = 0.0;
  for (int step = 0; step < 200; ++step) {
    ad::Tape t;
    Tensor batch({feats.size(), 2 * d});
    for (std::size_t i = 0; i < feats.size(); ++i)
      std::copy(feats[i].data.begin(), feats[i].data.end(),
                batch.data.begin() + static_cast<long>(i * 2 * d));
    nn::ForwardOptions opts;
    opts.trainable = true;
    std::map<std::string, ad::Var> pvars;
    auto res = run_graph(t, model.classifier, {{"pair", t.leaf(std::move(batch))}}, opts,
                         &pvars);
    ad::Var logits = res.nodes.at("fc2");
    ad::Var loss = losses::softmax_cross_entropy(t, logits, labels);
    t.backward(loss);
    std::map<std::string, Tensor> grads;
    for (auto& [name, var] : pvars) grads[name] = t.grad_tensor(var);
    sgd_momentum_step(model.classifier.params, grads, sgd, opt);
    const Tensor& lg = t.value(logits);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < feats.size(); ++r)
      correct += (lg.data[r * 2] > lg.data[r * 2 + 1] ? 0 : 1) == labels[r] ? 1 : 0;
    accuracy = static_cast<double>(correct) / static_cast<double>(feats.size());
    if (accuracy == 1.0) break;
  }
  EXPECT_DOUBLE_EQ(accuracy, 1.0);
}

TEST(RunReportIo, KeyValueAndCsvShape) {
  namespace fs = std::filesystem;
  RunReport report;
  report.info["final_train_rank1"] = "1.000000";
  StageTrace st;
  st.stage = "demo";
  st.epoch_loss = {0.5, 0.25};
  st.epoch_accuracy = {0.75, 1.0};
  report.stages.push_back(st);
  const std::string path = (fs::temp_directory_path() / "stv_report.txt").string();
  write_run_report(report, path);
  std::ifstream f(path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  EXPECT_NE(text.find("final_train_rank1: 1.000000"), std::string::npos);
  EXPECT_NE(text.find("stage,epoch,loss,accuracy"), std::string::npos);
  EXPECT_NE(text.find("demo,1,0.25,1"), std::string::npos);
  fs::remove(path);
}
