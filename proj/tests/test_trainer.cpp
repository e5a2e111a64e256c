#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "detgan/errors.hpp"
#include "detgan/trainer.hpp"
#include "oracles.hpp"

using namespace detgan;

namespace {

TrainConfig tiny_config(AblationMode mode = AblationMode::Full) {
  TrainConfig c;
  c.pretrain_gan_iters = 2;
  c.pretrain_det_iters = 2;
  c.joint_iters = 2;
  c.batch_size = 2;
  c.generator = {1, 2, 1};
  c.global_disc = {1, 2, 3, 4};
  c.local_disc = {1, 2, 2, 4};
  c.detector = {1, {4, 4, 4}, 2};
  c.history_capacity = 4;
  c.mode = mode;
  return c;
}

const Dataset& tiny_data() {
  static const Dataset d = [] {
    SceneConfig s;
    s.train_labelled = 6;
    s.train_clean = 12;
    s.val_labelled = 4;
    s.test_labelled = 4;
    s.seed = 21;
    return make_dataset(s);
  }();
  return d;
}

double mean_of(const std::vector<MetricRow>& rows, const std::string& name, std::size_t from, std::size_t to) {
  double s = 0;
  std::size_t n = 0, k = 0;
  for (const auto& r : rows) {
    if (r.name != name) continue;
    if (k >= from && k < to) {
      s += r.value;
      ++n;
    }
    ++k;
  }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TEST(History, FillsThenSwapsHalfTheTime) {
  HistoryBuffer buf(5);
  for (int i = 0; i < 5; ++i) {
    const Tensor img = Tensor::from_data({1, 1, 1}, {double(i)});
    EXPECT_EQ(buf.push(img, Box{0, 0, 1, 1}, i).image.item(), double(i));
  }
  EXPECT_EQ(buf.size(), 5u);
  int returned_new = 0;
  for (int i = 0; i < 10000; ++i) {
    const double v = 100.0 + i;
    if (buf.push(Tensor::from_data({1, 1, 1}, {v}), Box{0, 0, 1, 1}, 1000 + i).image.item() == v) ++returned_new;
    ASSERT_EQ(buf.size(), 5u);
  }
  EXPECT_NEAR(returned_new / 10000.0, 0.5, 0.02);

  HistoryBuffer none(0);
  const Tensor p = Tensor::parameter({1, 1, 1}, {3.0});
  const HistoryEntry e = none.push(p, Box{0, 0, 1, 1}, 1);
  EXPECT_EQ(none.size(), 0u);
  EXPECT_EQ(e.image.item(), 3.0);
  EXPECT_FALSE(e.image.requires_grad());
}

TEST(Modes, NamesAndWeights) {
  for (AblationMode m : all_modes()) EXPECT_EQ(parse_mode(to_string(m)), m);
  EXPECT_THROW(parse_mode("unrolled"), ContractError);
  LossWeights w;
  w.det_real = 1.5;
  w.det_syn = 0.2;
  EXPECT_EQ(mode_weights(AblationMode::Full, w).real_unrolled, 1.5);
  EXPECT_EQ(mode_weights(AblationMode::Full, w).syn_ascent, 0.2);
  EXPECT_EQ(mode_weights(AblationMode::NoUnroll, w).real_unrolled, 0.0);
  EXPECT_EQ(mode_weights(AblationMode::NoUnroll, w).syn_ascent, 0.2);
  EXPECT_EQ(mode_weights(AblationMode::AcganLike, w).real_unrolled, 0.0);
  EXPECT_EQ(mode_weights(AblationMode::AcganLike, w).syn_ascent, -0.2);
  EXPECT_EQ(mode_weights(AblationMode::RealOnly, w).real_unrolled, 0.0);
  EXPECT_EQ(mode_weights(AblationMode::RealOnly, w).syn_ascent, 0.0);
}

TEST(Config, Validation) {
  TrainConfig c = tiny_config();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = tiny_config();
  c.gan_lr = -1;
  EXPECT_THROW(c.validate(), ContractError);
  c = tiny_config();
  c.joint_iters = -1;
  EXPECT_THROW(c.validate(), ContractError);
  c = tiny_config();
  EXPECT_EQ(c.unroll().inner_lr, c.det_lr);
  c.inner_lr = 0.3;
  EXPECT_EQ(c.unroll().inner_lr, 0.3);
}

TEST(Steps, EachStepTouchesOnlyItsNetworks) {
  const TrainConfig cfg = tiny_config();
  ModelBundle b = make_bundle(cfg);
  Rng rng(3);
  HistoryBuffer hist(cfg.history_capacity);
  const StepBatch batch = sample_batch(tiny_data(), cfg.batch_size, cfg.insertion_shift, rng);
  ASSERT_EQ(batch.real_y.size(), 2u);
  ASSERT_EQ(batch.real_x.size(), 2u);

  BundleChecksums before = checksums(b);
  step_discriminators(b, batch, tiny_data(), hist, cfg, rng);
  BundleChecksums after = checksums(b);
  EXPECT_EQ(after.gx, before.gx);
  EXPECT_EQ(after.gy, before.gy);
  EXPECT_EQ(after.det, before.det);
  EXPECT_NE(after.dis_global_x, before.dis_global_x);
  EXPECT_NE(after.dis_global_y, before.dis_global_y);
  EXPECT_NE(after.dis_local_x, before.dis_local_x);

  before = after;
  const LabelledBatch syn = synthesize(b.gx, batch.real_x);
  const LossReport dr = step_detector(b, batch.real_y, syn, cfg);
  after = checksums(b);
  EXPECT_TRUE(dr.det_real && dr.det_syn);
  EXPECT_NE(after.det, before.det);
  EXPECT_EQ(after.gx, before.gx);
  EXPECT_EQ(after.dis_global_x, before.dis_global_x);

  before = after;
  const LossReport gr = step_generator(b, batch, tiny_data(), cfg, true);
  after = checksums(b);
  EXPECT_TRUE(gr.det_real_unrolled.has_value());
  EXPECT_NE(after.gx, before.gx);
  EXPECT_NE(after.gy, before.gy);
  EXPECT_EQ(after.det, before.det);
  EXPECT_EQ(after.dis_global_x, before.dis_global_x);
  EXPECT_EQ(after.dis_local_x, before.dis_local_x);
}

TEST(Steps, ModeControlsReportedTerms) {
  Rng rng(4);
  for (AblationMode m : {AblationMode::Full, AblationMode::NoUnroll, AblationMode::AcganLike}) {
    const TrainConfig cfg = tiny_config(m);
    ModelBundle b = make_bundle(cfg);
    const StepBatch batch = sample_batch(tiny_data(), cfg.batch_size, cfg.insertion_shift, rng);
    const LossReport r = step_generator(b, batch, tiny_data(), cfg, true);
    EXPECT_EQ(r.det_real_unrolled.has_value(), m == AblationMode::Full);
    EXPECT_TRUE(r.det_syn.has_value());
    EXPECT_TRUE(r.cycle && r.identity && r.bbox_l1 && r.g_global_x && r.g_local_x && r.g_global_y);
    const LossReport plain = step_generator(b, batch, tiny_data(), cfg, false);
    EXPECT_FALSE(plain.det_syn.has_value());
  }
}

TEST(Steps, ZeroLearningRatesFreezeEverything) {
  TrainConfig cfg = tiny_config();
  cfg.gan_lr = 0;
  cfg.det_lr = 0;
  cfg.inner_lr = 0.01;
  const TrainResult r = run_schedule(cfg, tiny_data());
  EXPECT_EQ(checksums(r.bundle), checksums(make_bundle(cfg)));
  EXPECT_FALSE(r.metrics.empty());
}

TEST(Steps, DiscriminatorAndDetectorLossesDecrease) {
  TrainConfig cfg = tiny_config();
  ModelBundle b = make_bundle(cfg);
  Rng rng(5);
  HistoryBuffer hist(cfg.history_capacity);
  std::vector<MetricRow> rows;
  for (int i = 0; i < 200; ++i) {
    const StepBatch batch = sample_batch(tiny_data(), cfg.batch_size, cfg.insertion_shift, rng);
    LossReport r = step_discriminators(b, batch, tiny_data(), hist, cfg, rng);
    r.merge(step_detector(b, batch.real_y, {}, cfg));
    for (const auto& [n, v] : r.entries()) rows.push_back({i, n, v});
  }
  for (const char* name : {"gan_global_x", "gan_global_y", "gan_local_x", "det_real"}) {
    EXPECT_LT(mean_of(rows, name, 180, 200), mean_of(rows, name, 0, 20)) << name;
  }
}

TEST(Schedule, EmptyScheduleIsInitialBundle) {
  TrainConfig cfg = tiny_config();
  cfg.pretrain_gan_iters = cfg.pretrain_det_iters = cfg.joint_iters = 0;
  const TrainResult r = run_schedule(cfg, tiny_data());
  EXPECT_TRUE(r.metrics.empty());
  EXPECT_EQ(checksums(r.bundle), checksums(make_bundle(cfg)));
}

TEST(Schedule, DeterministicAcrossRuns) {
  TrainConfig cfg = tiny_config();
  cfg.eval_every = 3;
  const TrainResult a = run_schedule(cfg, tiny_data()), b = run_schedule(cfg, tiny_data());
  EXPECT_EQ(checksums(a.bundle), checksums(b.bundle));
  EXPECT_EQ(metrics_csv(a.metrics), metrics_csv(b.metrics));
  EXPECT_EQ(evals_csv(a.evals), evals_csv(b.evals));
  EXPECT_EQ(a.evals.front().iter, 3);
  cfg.seed = 2;
  EXPECT_NE(checksums(run_schedule(cfg, tiny_data()).bundle), checksums(a.bundle));
}

TEST(Schedule, RealOnlyTrainsDetectorAlone) {
  const TrainConfig cfg = tiny_config(AblationMode::RealOnly);
  const TrainResult r = run_schedule(cfg, tiny_data());
  const BundleChecksums init = checksums(make_bundle(cfg)), done = checksums(r.bundle);
  EXPECT_EQ(done.gx, init.gx);
  EXPECT_EQ(done.dis_global_x, init.dis_global_x);
  EXPECT_NE(done.det, init.det);
  for (const auto& m : r.metrics) EXPECT_EQ(m.name, "det_real");
  EXPECT_EQ(r.metrics.back().iter, 3);
}

TEST(Schedule, MetricsCoverPhasesWithGlobalCounter) {
  const TrainResult r = run_schedule(tiny_config(), tiny_data());
  bool saw_unrolled = false;
  for (const auto& m : r.metrics) {
    if (m.name == "det_real_unrolled") {
      saw_unrolled = true;
      EXPECT_GE(m.iter, 4);
    }
    if (m.name == "cycle") EXPECT_TRUE(m.iter < 2 || m.iter >= 4);
  }
  EXPECT_TRUE(saw_unrolled);
  const std::string csv = metrics_csv(r.metrics);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iter,loss_name,value");
}

TEST(Schedule, NonFiniteLossAborts) {
  TrainConfig cfg = tiny_config();
  cfg.pretrain_gan_iters = 0;
  cfg.det_lr = 1e300;
  cfg.pretrain_det_iters = 5;
  try {
    run_schedule(cfg, tiny_data());
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_GE(e.iteration(), 1);
    EXPECT_EQ(e.loss_name(), "det_real");
    EXPECT_NE(std::string(e.what()).find("det_real"), std::string::npos);
  }
}

TEST(Schedule, CheckpointsReloadToSameBundle) {
  const auto dir = (std::filesystem::temp_directory_path() / "detgan_trainer_ckpt").string();
  std::filesystem::remove_all(dir);
  TrainConfig cfg = tiny_config();
  cfg.checkpoint_every = 3;
  cfg.checkpoint_dir = dir;
  const TrainResult r = run_schedule(cfg, tiny_data());
  ASSERT_EQ(r.checkpoints.size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(dir + "/ckpt_3.dgck"));
  EXPECT_TRUE(std::filesystem::exists(dir + "/ckpt_6.dgck"));
  ModelBundle loaded = make_bundle(tiny_config());
  load_bundle(loaded, read_checkpoint(dir + "/final.dgck"));
  EXPECT_EQ(checksums(loaded), checksums(r.bundle));
  EXPECT_EQ(encode_checkpoint(bundle_tensors(loaded)), encode_checkpoint(bundle_tensors(r.bundle)));
  std::filesystem::remove_all(dir);
}

TEST(Protocol, SyntheticPoolAndFreshDetector) {
  const TrainConfig cfg = tiny_config();
  const ModelBundle b = make_bundle(cfg);
  const auto pool = synthetic_pool(b.gx, tiny_data(), 7, 3, 9);
  ASSERT_EQ(pool.size(), 7u);
  for (const auto& s : pool) {
    EXPECT_EQ(s.domain, Domain::Labelled);
    ASSERT_EQ(s.boxes.size(), 1u);
    EXPECT_EQ(oracle::values(s.mask), oracle::values(box_mask(s.boxes[0], 32)));
  }
  EXPECT_EQ(encode_samples(pool), encode_samples(synthetic_pool(b.gx, tiny_data(), 7, 3, 9)));

  FreshDetectorConfig fc;
  fc.iters = 20;
  fc.detector = cfg.detector;
  const DetectorParams d1 = train_fresh_detector(tiny_data().train_labelled, pool, fc);
  const DetectorParams d2 = train_fresh_detector(tiny_data().train_labelled, pool, fc);
  EXPECT_EQ(checksum(d1), checksum(d2));
  const DetectorParams d_real = train_fresh_detector(tiny_data().train_labelled, {}, fc);
  EXPECT_NE(checksum(d_real), checksum(d1));
  EXPECT_THROW(train_fresh_detector({}, {}, fc), ContractError);

  const auto preds = predict(d1, fc.grid, tiny_data().test);
  EXPECT_EQ(preds.size(), tiny_data().test.size());
  const EvalReport rep = evaluate_detector(d1, fc.grid, tiny_data().test);
  EXPECT_GE(rep.ap, 0.0);
  EXPECT_LE(rep.ap, 1.0);
}
