#include "detgan/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "detgan/errors.hpp"

namespace detgan {

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::Full: return "full";
    case AblationMode::NoUnroll: return "no_unroll";
    case AblationMode::AcganLike: return "acgan_like";
    case AblationMode::RealOnly: return "real_only";
  }
  return "?";
}

AblationMode parse_mode(const std::string& text) {
  for (AblationMode m : all_modes()) {
    if (to_string(m) == text) return m;
  }
  throw ContractError("unknown mode '" + text + "' (expected full, no_unroll, acgan_like, real_only)");
}

DetectionObjectiveWeights mode_weights(AblationMode mode, const LossWeights& w) {
  switch (mode) {
    case AblationMode::Full: return {w.det_real, w.det_syn};
    case AblationMode::NoUnroll: return {0.0, w.det_syn};
    case AblationMode::AcganLike: return {0.0, -w.det_syn};
    case AblationMode::RealOnly: return {0.0, 0.0};
  }
  return {0.0, 0.0};
}

void TrainConfig::validate() const {
  if (pretrain_gan_iters < 0 || pretrain_det_iters < 0 || joint_iters < 0) {
    throw ContractError("iteration counts must be >= 0");
  }
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (!(gan_lr >= 0) || !(det_lr >= 0)) throw ContractError("learning rates must be >= 0");
  if (eval_every < 0 || checkpoint_every < 0) throw ContractError("cadences must be >= 0");
  if (local_crop < 1) throw ContractError("local_crop must be >= 1");
  weights.validate();
  unroll().validate();
}

ModelBundle make_bundle(const TrainConfig& cfg) {
  auto stream = [&cfg](std::uint64_t role) { return Rng(Rng::mix(cfg.seed) ^ Rng::mix(role)); };
  ModelBundle b;
  Rng r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4), r5 = stream(5), r6 = stream(6);
  b.gx = make_generator(cfg.generator, r1);
  b.gy = make_generator(cfg.generator, r2);
  b.dis_global_x = make_discriminator(cfg.global_disc, r3);
  b.dis_global_y = make_discriminator(cfg.global_disc, r4);
  b.dis_local_x = make_discriminator(cfg.local_disc, r5);
  b.det = make_detector(cfg.detector, r6);
  b.opt_gen = Adam(cfg.gan_lr);
  b.opt_dis_global_x = Adam(cfg.gan_lr);
  b.opt_dis_global_y = Adam(cfg.gan_lr);
  b.opt_dis_local_x = Adam(cfg.gan_lr);
  b.opt_det = Sgd(cfg.det_lr);
  return b;
}

BundleChecksums checksums(const ModelBundle& b) {
  return {checksum(b.gx), checksum(b.gy), checksum(b.dis_global_x),
          checksum(b.dis_global_y), checksum(b.dis_local_x), checksum(b.det)};
}

namespace {

std::vector<Tensor> generator_params(const ModelBundle& b) {
  auto p = parameter_list(b.gx);
  for (const auto& t : parameter_list(b.gy)) p.push_back(t);
  return p;
}

template <class F>
auto guarded(const char* loss_name, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw LossNumericError(loss_name, e.what());
  }
}

Tensor accumulate(const Tensor& acc, const Tensor& term) { return acc.defined() ? add(acc, term) : term; }

Tensor batch_mean(const Tensor& total, std::size_t n) { return scale(total, 1.0 / static_cast<double>(n)); }

Tensor local_view(const Tensor& image, const Box& box, int side) {
  return crop_resize(image, to_pixel_rect(box), static_cast<std::size_t>(side), static_cast<std::size_t>(side));
}

std::string fmt_threshold(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

NamedTensors bundle_tensors(const ModelBundle& b) {
  NamedTensors out;
  append_named(b.gx, "gx.", out);
  append_named(b.gy, "gy.", out);
  append_named(b.dis_global_x, "dis_global_x.", out);
  append_named(b.dis_global_y, "dis_global_y.", out);
  append_named(b.dis_local_x, "dis_local_x.", out);
  append_named(b.det, "det.", out);
  b.opt_gen.save("opt.gen.", out);
  b.opt_dis_global_x.save("opt.dis_global_x.", out);
  b.opt_dis_global_y.save("opt.dis_global_y.", out);
  b.opt_dis_local_x.save("opt.dis_local_x.", out);
  b.opt_det.save("opt.det.", out);
  return out;
}

void load_bundle(ModelBundle& b, const NamedTensors& stored) {
  load_named(b.gx, "gx.", stored);
  load_named(b.gy, "gy.", stored);
  load_named(b.dis_global_x, "dis_global_x.", stored);
  load_named(b.dis_global_y, "dis_global_y.", stored);
  load_named(b.dis_local_x, "dis_local_x.", stored);
  load_named(b.det, "det.", stored);
  b.opt_gen.load("opt.gen.", stored, generator_params(b));
  b.opt_dis_global_x.load("opt.dis_global_x.", stored, parameter_list(b.dis_global_x));
  b.opt_dis_global_y.load("opt.dis_global_y.", stored, parameter_list(b.dis_global_y));
  b.opt_dis_local_x.load("opt.dis_local_x.", stored, parameter_list(b.dis_local_x));
  b.opt_det.load("opt.det.", stored, parameter_list(b.det));
}

StepBatch sample_batch(const Dataset& data, int batch_size, int insertion_shift, Rng& rng) {
  if (data.train_labelled.empty() || data.train_clean.empty()) {
    throw ContractError("training needs labelled and clean images");
  }
  StepBatch b;
  for (int i = 0; i < batch_size; ++i) {
    const SceneSample& y = data.train_labelled[rng.index(data.train_labelled.size())];
    b.real_y.images.push_back(y.image);
    b.real_y.boxes.push_back(y.boxes);
    b.real_y_masks.push_back(y.mask);

    const SceneSample& x = data.train_clean[rng.index(data.train_clean.size())];
    const Insertion ins = sample_insertion(x, data.train_labelled, rng.next_u64(), insertion_shift);
    b.real_x.images.push_back(x.image);
    b.real_x.masks.push_back(ins.mask);
    b.real_x.boxes.push_back(ins.box);
    b.references.push_back(ins.reference);
  }
  return b;
}

LossReport step_discriminators(ModelBundle& bundle, const StepBatch& batch, const Dataset& data,
                               HistoryBuffer& history, const TrainConfig& cfg, Rng& rng) {
  (void)data;
  const std::size_t n = batch.real_x.size();
  std::vector<HistoryEntry> fake_y;
  std::vector<Tensor> fake_x;
  {
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor fy = generator_forward(bundle.gx, batch.real_x.images[i], batch.real_x.masks[i]);
      fake_y.push_back(history.push(fy, batch.real_x.boxes[i], rng.next_u64()));
      fake_x.push_back(generator_forward(bundle.gy, batch.real_y.images[i], batch.real_y_masks[i]));
    }
  }

  LossReport report;
  auto update = [](const DiscriminatorParams& d, Adam& opt, const Tensor& loss) {
    auto params = parameter_list(d);
    opt.step(params, backward(loss, params));
  };

  Tensor gx_loss, lx_loss, gy_loss;
  guarded("gan_global_x", [&] {
    for (std::size_t i = 0; i < n; ++i) {
      gx_loss = accumulate(gx_loss, discriminator_loss(discriminator_forward(bundle.dis_global_x, batch.real_y.images[i]),
                                                       discriminator_forward(bundle.dis_global_x, fake_y[i].image)));
    }
    gx_loss = batch_mean(gx_loss, n);
    return 0;
  });
  guarded("gan_local_x", [&] {
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor real_crop = local_view(batch.real_y.images[i], batch.real_y.boxes[i].front(), cfg.local_crop);
      const Tensor fake_crop = local_view(fake_y[i].image, fake_y[i].box, cfg.local_crop);
      lx_loss = accumulate(lx_loss, discriminator_loss(discriminator_forward(bundle.dis_local_x, real_crop),
                                                       discriminator_forward(bundle.dis_local_x, fake_crop)));
    }
    lx_loss = batch_mean(lx_loss, n);
    return 0;
  });
  guarded("gan_global_y", [&] {
    for (std::size_t i = 0; i < n; ++i) {
      gy_loss = accumulate(gy_loss, discriminator_loss(discriminator_forward(bundle.dis_global_y, batch.real_x.images[i]),
                                                       discriminator_forward(bundle.dis_global_y, fake_x[i])));
    }
    gy_loss = batch_mean(gy_loss, n);
    return 0;
  });

  guarded("gan_global_x", [&] { update(bundle.dis_global_x, bundle.opt_dis_global_x, gx_loss); return 0; });
  guarded("gan_local_x", [&] { update(bundle.dis_local_x, bundle.opt_dis_local_x, lx_loss); return 0; });
  guarded("gan_global_y", [&] { update(bundle.dis_global_y, bundle.opt_dis_global_y, gy_loss); return 0; });
  report.gan_global_x = gx_loss.item();
  report.gan_local_x = lx_loss.item();
  report.gan_global_y = gy_loss.item();
  return report;
}

LossReport step_detector(ModelBundle& bundle, const LabelledBatch& real, const LabelledBatch& syn,
                         const TrainConfig& cfg) {
  LabelledBatch syn_detached;
  for (std::size_t i = 0; i < syn.size(); ++i) {
    syn_detached.images.push_back(syn.images[i].detach());
    syn_detached.boxes.push_back(syn.boxes[i]);
  }
  LossReport report;
  const Tensor l_real = guarded("det_real", [&] { return batch_detection_loss(bundle.det, cfg.grid, real, cfg.det_loss); });
  Tensor total = l_real;
  report.det_real = l_real.item();
  if (!syn_detached.empty()) {
    const Tensor l_syn =
        guarded("det_syn", [&] { return batch_detection_loss(bundle.det, cfg.grid, syn_detached, cfg.det_loss); });
    total = add(total, l_syn);
    report.det_syn = l_syn.item();
  }
  guarded("det_real", [&] {
    auto params = parameter_list(bundle.det);
    bundle.opt_det.step(params, backward(total, params));
    return 0;
  });
  return report;
}

LossReport step_generator(ModelBundle& bundle, const StepBatch& batch, const Dataset& data,
                          const TrainConfig& cfg, bool with_detection) {
  const std::size_t n = batch.real_x.size();
  const LossWeights& w = cfg.weights;
  std::vector<Tensor> fake_y(n), fake_x(n);
  for (std::size_t i = 0; i < n; ++i) {
    fake_y[i] = generator_forward(bundle.gx, batch.real_x.images[i], batch.real_x.masks[i]);
    fake_x[i] = generator_forward(bundle.gy, batch.real_y.images[i], batch.real_y_masks[i]);
  }

  Tensor g_gx, g_lx, g_gy, cyc, idt, bbox;
  guarded("g_global_x", [&] {
    for (std::size_t i = 0; i < n; ++i) {
      g_gx = accumulate(g_gx, generator_adversarial_loss(discriminator_forward(bundle.dis_global_x, fake_y[i])));
    }
    return 0;
  });
  guarded("g_local_x", [&] {
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor crop_view = local_view(fake_y[i], batch.real_x.boxes[i], cfg.local_crop);
      g_lx = accumulate(g_lx, generator_adversarial_loss(discriminator_forward(bundle.dis_local_x, crop_view)));
    }
    return 0;
  });
  guarded("g_global_y", [&] {
    for (std::size_t i = 0; i < n; ++i) {
      g_gy = accumulate(g_gy, generator_adversarial_loss(discriminator_forward(bundle.dis_global_y, fake_x[i])));
    }
    return 0;
  });
  guarded("cycle", [&] {
    for (std::size_t i = 0; i < n; ++i) {
      const CycleTerms ct = cycle_and_identity(bundle.gx, bundle.gy, batch.real_x.images[i], batch.real_x.masks[i],
                                               batch.real_y.images[i], batch.real_y_masks[i], fake_y[i], fake_x[i]);
      cyc = accumulate(cyc, ct.cycle);
      idt = accumulate(idt, ct.identity);
    }
    return 0;
  });
  guarded("bbox_l1", [&] {
    for (std::size_t i = 0; i < n; ++i) {
      const SceneSample& ref = data.train_labelled.at(batch.references[i]);
      bbox = accumulate(bbox, bbox_l1(fake_y[i], to_pixel_rect(batch.real_x.boxes[i]), ref.image,
                                      to_pixel_rect(ref.boxes.front())));
    }
    return 0;
  });
  g_gx = batch_mean(g_gx, n);
  g_lx = batch_mean(g_lx, n);
  g_gy = batch_mean(g_gy, n);
  cyc = batch_mean(cyc, n);
  idt = batch_mean(idt, n);
  bbox = batch_mean(bbox, n);

  LossReport report;
  report.g_global_x = g_gx.item();
  report.g_local_x = g_lx.item();
  report.g_global_y = g_gy.item();
  report.cycle = cyc.item();
  report.identity = idt.item();
  report.bbox_l1 = bbox.item();

  Tensor total = add(add(g_gx, g_lx), g_gy);
  total = add(total, scale(cyc, w.cycle));
  total = add(total, scale(idt, w.identity));
  total = add(total, scale(bbox, w.bbox));

  if (with_detection && cfg.mode != AblationMode::RealOnly) {
    const DetectionObjectiveWeights dw = mode_weights(cfg.mode, w);
    LabelledBatch syn;
    for (std::size_t i = 0; i < n; ++i) {
      syn.images.push_back(fake_y[i]);
      syn.boxes.push_back({batch.real_x.boxes[i]});
    }
    const DetectionObjective obj = guarded("det_real_unrolled", [&] {
      return generator_detection_objective(bundle.det, cfg.grid, batch.real_y, syn, cfg.unroll(), dw, cfg.det_loss);
    });
    total = add(total, obj.objective);
    report.det_syn = obj.terms.syn.item();
    if (obj.terms.real_unrolled.defined()) report.det_real_unrolled = obj.terms.real_unrolled.item();
  }

  guarded("generator_total", [&] {
    auto params = generator_params(bundle);
    bundle.opt_gen.step(params, backward(total, params));
    return 0;
  });
  return report;
}

TrainResult run_schedule(const TrainConfig& cfg, const Dataset& data, const EvalThresholds& thresholds,
                         const DecodeConfig& decode) {
  cfg.validate();
  TrainResult result{make_bundle(cfg), {}, {}, {}};
  ModelBundle& bundle = result.bundle;
  HistoryBuffer history(cfg.history_capacity);
  Rng rng(Rng::mix(cfg.seed) ^ 0x5eedULL);
  const bool gan = cfg.mode != AblationMode::RealOnly;
  long iter = 0;

  if (!cfg.checkpoint_dir.empty() && (cfg.checkpoint_every > 0)) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
  }

  auto record = [&](const LossReport& r) {
    for (const auto& [name, value] : r.entries()) {
      if (!std::isfinite(value)) throw TrainingAborted(iter, name, "value " + std::to_string(value));
      result.metrics.push_back({iter, name, value});
    }
  };
  auto finish_iteration = [&] {
    ++iter;
    if (cfg.eval_every > 0 && iter % cfg.eval_every == 0 && !data.val.empty()) {
      const EvalReport rep = evaluate_detector(bundle.det, cfg.grid, data.val, thresholds, decode);
      result.evals.push_back({iter, "ap", fmt_threshold(thresholds.ap_iou), rep.ap});
      result.evals.push_back({iter, "recall", fmt_threshold(thresholds.recall_iou), rep.recall});
      for (const auto& [t, v] : rep.loc_acc_iou) result.evals.push_back({iter, "loc_acc_iou", fmt_threshold(t), v});
      result.evals.push_back({iter, "loc_acc_iou", "avg", rep.loc_acc_iou_avg});
      for (const auto& [t, v] : rep.loc_acc_iobb) result.evals.push_back({iter, "loc_acc_iobb", fmt_threshold(t), v});
      result.evals.push_back({iter, "loc_acc_iobb", "avg", rep.loc_acc_iobb_avg});
    }
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && iter % cfg.checkpoint_every == 0) {
      const std::string path = cfg.checkpoint_dir + "/ckpt_" + std::to_string(iter) + ".dgck";
      write_checkpoint(path, bundle_tensors(bundle));
      result.checkpoints.push_back(path);
    }
  };
  auto run = [&](auto&& body) {
    try {
      body();
    } catch (const LossNumericError& e) {
      throw TrainingAborted(iter, e.loss_name(), e.what());
    }
  };

  if (gan) {
    for (int k = 0; k < cfg.pretrain_gan_iters; ++k) {
      run([&] {
        const StepBatch batch = sample_batch(data, cfg.batch_size, cfg.insertion_shift, rng);
        LossReport r = step_discriminators(bundle, batch, data, history, cfg, rng);
        r.merge(step_generator(bundle, batch, data, cfg, false));
        record(r);
      });
      finish_iteration();
    }
  }
  for (int k = 0; k < cfg.pretrain_det_iters; ++k) {
    run([&] {
      const StepBatch batch = sample_batch(data, cfg.batch_size, cfg.insertion_shift, rng);
      record(step_detector(bundle, batch.real_y, {}, cfg));
    });
    finish_iteration();
  }
  for (int k = 0; k < cfg.joint_iters; ++k) {
    run([&] {
      const StepBatch batch = sample_batch(data, cfg.batch_size, cfg.insertion_shift, rng);
      if (!gan) {
        record(step_detector(bundle, batch.real_y, {}, cfg));
        return;
      }
      LossReport r = step_discriminators(bundle, batch, data, history, cfg, rng);
      LabelledBatch syn;
      {
        NoGradGuard no_grad;
        syn = synthesize(bundle.gx, batch.real_x);
      }
      r.merge(step_detector(bundle, batch.real_y, syn, cfg));
      r.merge(step_generator(bundle, batch, data, cfg, true));
      record(r);
    });
    finish_iteration();
  }
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const std::string path = cfg.checkpoint_dir + "/final.dgck";
    write_checkpoint(path, bundle_tensors(bundle));
    result.checkpoints.push_back(path);
  }
  return result;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "iter,loss_name,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << r.iter << ',' << r.name << ',' << buf << '\n';
  }
  return os.str();
}

std::string evals_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream os;
  os << "iter,metric,threshold,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << r.iter << ',' << r.metric << ',' << r.threshold << ',' << buf << '\n';
  }
  return os.str();
}

std::vector<SceneSample> synthetic_pool(const GeneratorParams& gx, const Dataset& data, std::size_t count,
                                        int insertion_shift, std::uint64_t seed) {
  if (count > 0 && (data.train_clean.empty() || data.train_labelled.empty())) {
    throw ContractError("synthetic_pool needs clean and labelled training images");
  }
  NoGradGuard no_grad;
  std::vector<SceneSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const SceneSample& clean = data.train_clean[i % data.train_clean.size()];
    const Insertion ins = sample_insertion(clean, data.train_labelled, Rng::mix(seed) ^ Rng::mix(i), insertion_shift);
    SceneSample s;
    s.image = generator_forward(gx, clean.image, ins.mask).detach();
    s.domain = Domain::Labelled;
    s.boxes = {ins.box};
    s.mask = ins.mask;
    out.push_back(std::move(s));
  }
  return out;
}

DetectorParams train_fresh_detector(const std::vector<SceneSample>& real, const std::vector<SceneSample>& synthetic,
                                    const FreshDetectorConfig& cfg) {
  std::vector<const SceneSample*> pool;
  for (const auto& s : real) pool.push_back(&s);
  for (const auto& s : synthetic) pool.push_back(&s);
  if (pool.empty()) throw ContractError("train_fresh_detector: no training images");
  Rng init(Rng::mix(cfg.seed) ^ 0xde7ULL);
  DetectorParams det = make_detector(cfg.detector, init);
  Sgd opt(cfg.lr, cfg.momentum);
  Rng rng(Rng::mix(cfg.seed) ^ 0xba7cULL);
  for (int it = 0; it < cfg.iters; ++it) {
    LabelledBatch batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const SceneSample* s = pool[rng.index(pool.size())];
      batch.images.push_back(s->image);
      batch.boxes.push_back(s->boxes);
    }
    const Tensor loss = batch_detection_loss(det, cfg.grid, batch, cfg.det_loss);
    auto params = parameter_list(det);
    opt.step(params, backward(loss, params));
  }
  return det;
}

PerImagePreds predict(const DetectorParams& det, const AnchorGrid& grid, const std::vector<SceneSample>& samples,
                      const DecodeConfig& decode) {
  NoGradGuard no_grad;
  PerImagePreds out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(decode_predictions(detector_forward(det, s.image), grid, decode.score_thresh, decode.nms_iou));
  }
  return out;
}

PerImageGts ground_truth(const std::vector<SceneSample>& samples) {
  PerImageGts out;
  for (const auto& s : samples) out.push_back(s.boxes);
  return out;
}

EvalReport evaluate_detector(const DetectorParams& det, const AnchorGrid& grid,
                             const std::vector<SceneSample>& samples, const EvalThresholds& thresholds,
                             const DecodeConfig& decode) {
  return evaluate(predict(det, grid, samples, decode), ground_truth(samples), thresholds);
}

}  // namespace detgan
