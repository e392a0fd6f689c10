// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "scalenas/training.hpp"

using namespace scalenas;

namespace {

SearchSpaceConfig space() {
  SearchSpaceConfig c;
  c.base_width = 4;
  c.stem_width = 4;
  c.depth_choices = {1, 2};
  c.fusion_percentages = {0.2, 0.8};
  c.stage_modules = {1, 1, 1};
  c.stem_reduction = 2;
  c.stage1_blocks = 1;
  return c;
}

const HeadSpec kSeg{HeadKind::kSegmentation, 4};

SegSplits data() {
  SyntheticSegConfig t;
  t.height = 16;
  t.width = 32;
  t.train_size = 8;
  t.val_size = 4;
  t.seed = 3;
  return generate(t);
}

TrainConfig tcfg(int iterations, SamplerMode sampler = SamplerMode::kGrouped) {
  TrainConfig t;
  t.iterations = iterations;
  t.batch_size = 4;
  t.sampler = sampler;
  t.seed = 11;
  return t;
}

}  // namespace

TEST(Schedule, CosineAndConstant) {
  auto t = tcfg(100);
  EXPECT_DOUBLE_EQ(learning_rate(t, 1.0, 0), 1.0);
  EXPECT_NEAR(learning_rate(t, 1.0, 50), 0.5, 1e-12);
  EXPECT_NEAR(learning_rate(t, 1.0, 100), 0.0, 1e-12);
  t.schedule = LrSchedule::kConstant;
  EXPECT_DOUBLE_EQ(learning_rate(t, 0.3, 77), 0.3);
  EXPECT_EQ(iterations_for_epochs(3, 10, 4), 9);
}

TEST(Batches, EachEpochIsAPermutation) {
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::vector<int> seen;
    for (int i = 0; i < 3; ++i) {
      const auto b = batch_indices(5, 10, 4, epoch * 3 + i);
      EXPECT_EQ(b.size(), i < 2 ? 4u : 2u);
      seen.insert(seen.end(), b.begin(), b.end());
    }
    std::sort(seen.begin(), seen.end());
    for (int i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  }
  EXPECT_NE(batch_indices(5, 10, 4, 0), batch_indices(5, 10, 4, 3));
  EXPECT_EQ(batch_indices(5, 10, 4, 4), batch_indices(5, 10, 4, 4));
  EXPECT_THROW(batch_indices(5, 0, 4, 0), ConfigError);
}

TEST(Sampler, ModesPerIteration) {
  const auto c = space();
  EXPECT_EQ(sample_for_iteration(c, tcfg(1, SamplerMode::kFull), 3).front().genome, full_genome(c));
  const auto grouped = tcfg(1, SamplerMode::kGrouped);
  for (int it = 0; it < 8; ++it) {
    const auto s = sample_for_iteration(c, grouped, it);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0].group, it % 2);
    EXPECT_EQ(s[0].genome, sample_for_iteration(c, grouped, it)[0].genome);
  }
  EXPECT_EQ(sample_for_iteration(c, tcfg(1, SamplerMode::kSandwich), 2).size(), 4u);
  EXPECT_EQ(passes_per_iteration(SamplerMode::kSandwich), 4);
  EXPECT_EQ(passes_per_iteration(SamplerMode::kGrouped), 1);
  EXPECT_EQ(parse_sampler("uniform"), SamplerMode::kUniform);
  EXPECT_THROW(parse_sampler("bogus"), ConfigError);
}

TEST(Teacher, ZeroLearningRateLeavesParametersUnchanged) {
  const auto c = space();
  const auto d = data();
  auto t = tcfg(3);
  t.lr = 0.0;
  const auto init = build_supernet<double>(c, kSeg, 1);
  const auto s = train_teacher(init.clone(), c, kSeg, t, d.train);
  EXPECT_TRUE(s.store.values_equal(init));
  EXPECT_EQ(s.log.size(), 3u);
}

TEST(Teacher, SameSeedSameLog) {
  const auto c = space();
  const auto d = data();
  const auto t = tcfg(4);
  const auto a = train_teacher(build_supernet<float>(c, kSeg, 1), c, kSeg, t, d.train);
  const auto b = train_teacher(build_supernet<float>(c, kSeg, 1), c, kSeg, t, d.train);
  EXPECT_EQ(a.log, b.log);
  EXPECT_TRUE(a.store.values_equal(b.store));
}

TEST(Teacher, LossDecreases) {
  const auto c = space();
  const auto d = data();
  auto t = tcfg(40);
  t.lr = 1e-2;
  const auto s = train_teacher(build_supernet<float>(c, kSeg, 1), c, kSeg, t, d.train);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += s.log[i].task_loss;
    last += s.log[30 + i].task_loss;
  }
  EXPECT_LT(last, first);
}

TEST(Teacher, DivergenceIsReported) {
  const auto c = space();
  auto d = data();
  d.train.images[5] = std::nanf("");
  EXPECT_THROW(train_teacher(build_supernet<float>(c, kSeg, 1), c, kSeg, tcfg(2), d.train), DivergenceError);
}

TEST(Teacher, HeadMustMatchTask) {
  const auto c = space();
  const auto d = data();
  const HeadSpec wrong{HeadKind::kSegmentation, 3};
  EXPECT_THROW(train_teacher(build_supernet<float>(c, wrong, 1), c, wrong, tcfg(1), d.train), ConfigError);
}

TEST(Supernet, KdTermIsZeroForTeacherItself) {
  const auto c = space();
  const auto d = data();
  const auto teacher = build_supernet<double>(c, kSeg, 2);
  const auto s = train_supernet(teacher, c, kSeg, tcfg(1, SamplerMode::kFull), d.train);
  ASSERT_EQ(s.log.size(), 1u);
  EXPECT_EQ(s.log[0].kd_loss, 0.0);
  EXPECT_GT(s.log[0].task_loss, 0.0);
}

TEST(Supernet, ZeroAlphaIgnoresTeacherOutputs) {
  const auto c = space();
  const auto d = data();
  auto t = tcfg(3);
  t.kd_alpha = 0.0;
  const auto teacher = build_supernet<double>(c, kSeg, 2);
  TrainState<double> a{teacher.clone(), Optimizer<double>(), 0, {}};
  TrainState<double> b{teacher.clone(), Optimizer<double>(), 0, {}};
  const auto other = build_supernet<double>(c, kSeg, 99);
  train_until(a, &teacher, c, kSeg, t, d.train, 3);
  train_until(b, &other, c, kSeg, t, d.train, 3);
  EXPECT_EQ(a.log, b.log);
  EXPECT_TRUE(a.store.values_equal(b.store));

  // The logged loss is the plain task loss of the sampled network.
  const auto net = sample_for_iteration(c, t, 0).front();
  auto [x, y] = d.train.batch<double>(batch_indices(t.seed, d.train.count, t.batch_size, 0));
  const auto task = cross_entropy(forward(teacher, c, kSeg, net.genome, constant(x)).logits, y);
  EXPECT_EQ(a.log[0].task_loss, task->value[0]);
  EXPECT_EQ(a.log[0].kd_loss, 0.0);
}

TEST(Supernet, TeacherStaysFrozen) {
  const auto c = space();
  const auto d = data();
  const auto teacher = build_supernet<float>(c, kSeg, 2);
  const auto before = teacher.clone();
  const auto s = train_supernet(teacher, c, kSeg, tcfg(3), d.train);
  EXPECT_TRUE(teacher.values_equal(before));
  EXPECT_FALSE(s.store.values_equal(before));
}

TEST(Supernet, SandwichAveragesFourPasses) {
  const auto c = space();
  const auto d = data();
  const auto teacher = build_supernet<float>(c, kSeg, 2);
  const auto s = train_supernet(teacher, c, kSeg, tcfg(2, SamplerMode::kSandwich), d.train);
  ASSERT_EQ(s.log.size(), 2u);
  EXPECT_EQ(s.log[0].group, -1);
  EXPECT_GT(s.log[0].kd_loss, 0.0);
}

TEST(Resume, CheckpointReplayMatchesUninterrupted) {
  const auto c = space();
  const auto d = data();
  const auto t = tcfg(6);
  const auto teacher = build_supernet<float>(c, kSeg, 2);
  const auto full = train_supernet(teacher, c, kSeg, t, d.train);

  TrainState<float> part{teacher.clone(), Optimizer<float>(t.optimizer), 0, {}};
  part.store.set_trainable(true);
  train_until(part, &teacher, c, kSeg, t, d.train, 2);
  const auto ck = decode_checkpoint<float>(encode_checkpoint(to_checkpoint(part, {{"kind", "supernet"}})));
  auto resumed = state_from_checkpoint(ck, t.optimizer);
  EXPECT_EQ(resumed.iteration, 2);
  EXPECT_EQ(ck.manifest.at("kind"), "supernet");
  train_until(resumed, &teacher, c, kSeg, t, d.train, t.iterations);
  EXPECT_EQ(resumed.log, full.log);
  EXPECT_TRUE(resumed.store.values_equal(full.store));
}

TEST(Metrics, CsvHasHashLineAndHeader) {
  const auto text = metrics_csv({{0, 2, 1.5, 0.25, 0.01}}, "abc");
  EXPECT_EQ(text, "# config_hash=abc\niteration,group,task_loss,kd_loss,lr\n0,2,1.5,0.25,0.01\n");
}

TEST(Evaluate, DeterministicAndBounded) {
  const auto c = space();
  const auto d = data();
  const auto store = build_supernet<float>(c, kSeg, 2);
  const auto g = sample_uniform(c, std::uint64_t{4});
  const auto a = evaluate(store, c, kSeg, g, d.val), b = evaluate(store, c, kSeg, g, d.val);
  EXPECT_EQ(a.pixel_accuracy, b.pixel_accuracy);
  EXPECT_EQ(a.mean_iou, b.mean_iou);
  EXPECT_GE(a.pixel_accuracy, 0.0);
  EXPECT_LE(a.pixel_accuracy, 1.0);
  // Checkpointed store gives the same metric.
  Checkpoint<float> ck;
  for (const auto& [k, p] : store.entries()) ck.tensors["param/" + k] = p.var->value;
  const auto back = store_from_checkpoint(decode_checkpoint<float>(encode_checkpoint(ck)));
  EXPECT_EQ(evaluate(back, c, kSeg, g, d.val).mean_iou, a.mean_iou);
}

TEST(Evaluate, ArgmaxPrefersLowerClassOnTies) {
  Tensor<float> logits({1, 3, 1, 2}, std::vector<float>{1, 0, 1, 2, 1, 2});
  EXPECT_EQ(argmax_labels(logits), (std::vector<int>{0, 1}));
}
