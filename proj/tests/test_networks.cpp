#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "detgan/checkpoint.hpp"
#include "detgan/errors.hpp"
#include "detgan/networks.hpp"
#include "oracles.hpp"

using namespace detgan;

namespace {

Tensor random_image(Rng& rng, std::size_t side = 32) { return oracle::random_tensor(rng, {1, side, side}, -1, 1, false); }

Tensor rect_mask(int x0, int y0, int x1, int y1, std::size_t side = 32) {
  std::vector<double> m(side * side, 0.0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m[y * side + x] = 1.0;
  return Tensor::from_data({1, side, side}, m);
}

// Total-parameter gradient check on a sampled subset of coordinates.
template <class P, class F>
double param_grad_error(P params, F loss_of, Rng& rng, int samples = 12) {
  auto tensors = parameter_list(params);
  const auto grads = backward(loss_of(params), tensors);
  double worst = 0;
  for (int s = 0; s < samples; ++s) {
    const std::size_t ti = rng.index(tensors.size());
    const std::size_t k = rng.index(tensors[ti].numel());
    const double orig = tensors[ti][k];
    auto eval_at = [&](double v) {
      tensors[ti].mutable_data()[k] = v;
      NoGradGuard g;
      return loss_of(params).item();
    };
    const double fd = (eval_at(orig + 1e-5) - eval_at(orig - 1e-5)) / 2e-5;
    tensors[ti].mutable_data()[k] = orig;
    const double a = grads[ti][k];
    worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST(Generator, ShapeRangeDeterminism) {
  Rng r1(5), r2(5);
  const GeneratorParams g1 = make_generator({}, r1), g2 = make_generator({}, r2);
  Rng data(8);
  const Tensor img = random_image(data);
  const Tensor mask = rect_mask(10, 10, 18, 16);
  const Tensor a = generator_forward(g1, img, mask), b = generator_forward(g2, img, mask);
  ASSERT_EQ(a.shape(), (Shape{1, 32, 32}));
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_GT(a[i], -1.0);
    EXPECT_LT(a[i], 1.0);
    EXPECT_EQ(a[i], b[i]);
  }
}

TEST(Generator, ShapeMismatchIsDimensionError) {
  Rng rng(1);
  const GeneratorParams g = make_generator({}, rng);
  EXPECT_THROW(generator_forward(g, Tensor::zeros({1, 32, 32}), Tensor::zeros({1, 16, 16})), DimensionError);
  EXPECT_THROW(generator_forward(g, Tensor::zeros({1, 30, 30}), Tensor::zeros({1, 30, 30})), DimensionError);
}

TEST(Generator, OutputDependsOnMask) {
  Rng rng(2);
  const GeneratorParams g = make_generator({}, rng);
  const Tensor img = random_image(rng);
  const Tensor mask = Tensor::parameter({1, 32, 32}, oracle::values(rect_mask(4, 4, 12, 12)));
  const Tensor out = generator_forward(g, img, mask);
  const auto grad = backward(sum_all(out), std::vector<Tensor>{mask})[0];
  double norm = 0;
  for (double v : grad.data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
  const Tensor moved = generator_forward(g, img, rect_mask(16, 16, 24, 24));
  EXPECT_NE(oracle::values(out), oracle::values(moved));
}

TEST(Generator, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(3);
  const GeneratorParams g = make_generator({1, 2, 1}, rng);
  const Tensor img = random_image(rng, 8);
  const Tensor mask = rect_mask(2, 2, 5, 6, 8);
  EXPECT_LT(param_grad_error(g, [&](const GeneratorParams& p) { return sum_all(square(generator_forward(p, img, mask))); }, rng),
            1e-4);
}

TEST(Discriminator, ScoreMapShapeAndRange) {
  Rng rng(4);
  const DiscriminatorParams d = make_discriminator({}, rng);
  EXPECT_EQ(d.receptive_field(), 22);
  const Tensor s = discriminator_forward(d, random_image(rng));
  ASSERT_EQ(s.shape(), (Shape{1, 4, 4}));
  for (double v : s.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_THROW(discriminator_forward(d, Tensor::zeros({1, 16, 16})), DimensionError);
}

TEST(Discriminator, PerSampleIndependence) {
  Rng rng(5);
  const DiscriminatorParams d = make_discriminator({}, rng);
  const Tensor a = random_image(rng), b = random_image(rng);
  const auto sa = oracle::values(discriminator_forward(d, a));
  const auto sb = oracle::values(discriminator_forward(d, b));
  // Evaluate in the other order; results must not depend on it.
  EXPECT_EQ(oracle::values(discriminator_forward(d, b)), sb);
  EXPECT_EQ(oracle::values(discriminator_forward(d, a)), sa);
}

TEST(Discriminator, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(6);
  const DiscriminatorParams d = make_discriminator({1, 2, 3, 4}, rng);
  const Tensor img = random_image(rng, 24);
  EXPECT_LT(param_grad_error(d, [&](const DiscriminatorParams& p) { return mean_all(log(discriminator_forward(p, img))); }, rng),
            1e-4);
}

TEST(Detector, HeadShapes) {
  Rng rng(7);
  const DetectorParams det = make_detector({}, rng);
  EXPECT_EQ(det.stride(), 8);
  const DetectorOutput out = detector_forward(det, random_image(rng));
  EXPECT_EQ(out.objectness.shape(), (Shape{2, 4, 4}));
  EXPECT_EQ(out.offsets.shape(), (Shape{8, 4, 4}));
  EXPECT_THROW(detector_forward(det, Tensor::zeros({1, 30, 30})), DimensionError);
}

TEST(Detector, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(8);
  const DetectorParams det = make_detector({1, {2, 3, 3}, 2}, rng);
  const Tensor img = random_image(rng, 16);
  EXPECT_LT(param_grad_error(det,
                             [&](const DetectorParams& p) {
                               const DetectorOutput o = detector_forward(p, img);
                               return add(sum_all(tanh(o.objectness)), sum_all(square(o.offsets)));
                             },
                             rng),
            1e-4);
}

TEST(Anchors, GridTilesImageAndZeroOffsetsDecodeToAnchor) {
  const AnchorGrid grid;
  EXPECT_EQ(grid.count(), 32u);
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const Box a = grid.anchor(i);
    EXPECT_GT(a.center_x(), 0);
    EXPECT_LT(a.center_x(), 32);
    EXPECT_GT(a.center_y(), 0);
    EXPECT_LT(a.center_y(), 32);
    EXPECT_EQ(decode_box({0, 0, 0, 0}, a), a);
  }
  // Same size at every cell.
  EXPECT_DOUBLE_EQ(grid.anchor(0).width(), grid.anchor(15).width());
  EXPECT_DOUBLE_EQ(grid.anchor(16).width(), 10.0);
}

TEST(Anchors, EncodeDecodeRoundTrip) {
  Rng rng(9);
  const AnchorGrid grid;
  for (int t = 0; t < 500; ++t) {
    const Box b = oracle::random_box(rng);
    const Box a = grid.anchor(rng.index(grid.count()));
    const Box r = decode_box(encode_box(b, a), a);
    EXPECT_NEAR(r.x_min, b.x_min, 1e-9);
    EXPECT_NEAR(r.y_min, b.y_min, 1e-9);
    EXPECT_NEAR(r.x_max, b.x_max, 1e-9);
    EXPECT_NEAR(r.y_max, b.y_max, 1e-9);
  }
}

TEST(Anchors, AssignmentThresholdsAndForcedMatch) {
  const AnchorGrid grid;
  // Exactly the first small anchor: positive.
  const auto exact = assign_anchors(grid, {grid.anchor(0)});
  EXPECT_EQ(exact.labels[0], AnchorLabel::Positive);
  EXPECT_EQ(exact.matched_gt[0], 0);
  // A box overlapping no anchor well still claims its best anchor.
  const auto tiny = assign_anchors(grid, {Box{1, 1, 2, 2}});
  EXPECT_EQ(tiny.num_positive, 1u);
  const auto none = assign_anchors(grid, {});
  EXPECT_EQ(none.num_positive, 0u);
  for (auto l : none.labels) EXPECT_EQ(l, AnchorLabel::Negative);
}

TEST(Anchors, AssignmentIndependentOfGtOrder) {
  Rng rng(10);
  const AnchorGrid grid;
  for (int t = 0; t < 200; ++t) {
    std::vector<Box> gts{oracle::random_box(rng, 24), oracle::random_box(rng, 24), oracle::random_box(rng, 24)};
    const auto a = assign_anchors(grid, gts);
    std::vector<Box> rev(gts.rbegin(), gts.rend());
    const auto b = assign_anchors(grid, rev);
    EXPECT_EQ(a.labels, b.labels);
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
      if (a.labels[i] == AnchorLabel::Positive) EXPECT_EQ(gts[a.matched_gt[i]], rev[b.matched_gt[i]]);
    }
  }
}

namespace {

DetectorOutput head_from(const std::vector<double>& logits, const std::vector<double>& offsets) {
  return {Tensor::from_data({2, 4, 4}, logits), Tensor::from_data({8, 4, 4}, offsets)};
}

}  // namespace

TEST(Decode, SingleAnchorAboveThreshold) {
  const AnchorGrid grid;
  std::vector<double> logits(32, -10.0);
  logits[5] = 3.0;
  const auto dets = decode_predictions(head_from(logits, std::vector<double>(128, 0.0)), grid, 0.5, 0.5);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].box, grid.anchor(5));
  EXPECT_NEAR(dets[0].confidence, 1 / (1 + std::exp(-3.0)), 1e-15);
  EXPECT_THROW(decode_predictions(head_from(logits, std::vector<double>(128, 0.0)), grid, 1.5, 0.5), ContractError);
}

TEST(Nms, DuplicateSuppression) {
  const Box b{1, 1, 5, 5};
  const auto kept = nms({{b, 0.8}, {b, 0.9}}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_DOUBLE_EQ(kept[0].confidence, 0.9);
}

TEST(Nms, MatchesQuadraticOracle) {
  Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    std::vector<Detection> dets;
    const std::size_t n = 1 + rng.index(12);
    for (std::size_t i = 0; i < n; ++i) dets.push_back({oracle::random_box(rng, 10), rng.uniform()});
    const double th = rng.uniform(0.1, 0.9);
    const auto a = nms(dets, th), b = oracle::nms(dets, th);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].box, b[i].box);
      EXPECT_EQ(a[i].confidence, b[i].confidence);
    }
  }
}

TEST(Decode, RandomMapsMatchOracleAndStayInBounds) {
  Rng rng(13);
  const AnchorGrid grid;
  for (int t = 0; t < 100; ++t) {
    const auto logits = oracle::random_values(rng, 32, -3, 3);
    const auto offsets = oracle::random_values(rng, 128, -2, 2);
    const auto dets = decode_predictions(head_from(logits, offsets), grid, 0.3, 0.5);
    std::vector<Detection> cand;
    for (std::size_t i = 0; i < 32; ++i) {
      const double c = 1 / (1 + std::exp(-logits[i]));
      if (c < 0.3) continue;
      const std::size_t a = i / 16, cell = i % 16;
      BoxOffsets d{};
      for (int k = 0; k < 4; ++k) d[k] = offsets[(4 * a + k) * 16 + cell];
      Box b = decode_box(d, grid.anchor(i));
      b = {std::clamp(b.x_min, 0.0, 32.0), std::clamp(b.y_min, 0.0, 32.0), std::clamp(b.x_max, 0.0, 32.0),
           std::clamp(b.y_max, 0.0, 32.0)};
      if (b.valid()) cand.push_back({b, c});
    }
    const auto ref = oracle::nms(cand, 0.5);
    ASSERT_EQ(dets.size(), ref.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
      EXPECT_EQ(dets[i].box, ref[i].box);
      EXPECT_TRUE(dets[i].box.valid());
      EXPECT_GE(dets[i].box.x_min, 0);
      EXPECT_LE(dets[i].box.x_max, 32);
      EXPECT_GE(dets[i].box.y_min, 0);
      EXPECT_LE(dets[i].box.y_max, 32);
    }
  }
}

TEST(Checkpoint, BitExactRoundTrip) {
  Rng rng(14);
  const DetectorParams det = make_detector({}, rng);
  const GeneratorParams gen = make_generator({}, rng);
  NamedTensors named;
  append_named(det, "det.", named);
  append_named(gen, "gen.", named);
  named.emplace_back("scalar", Tensor::scalar(-0.0));
  const std::string bytes = encode_checkpoint(named);
  EXPECT_EQ(bytes.substr(0, 4), "DGCK");
  const NamedTensors back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), named.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    EXPECT_EQ(back[i].first, named[i].first);
    EXPECT_EQ(back[i].second.shape(), named[i].second.shape());
    EXPECT_EQ(0, std::memcmp(back[i].second.data().data(), named[i].second.data().data(),
                             named[i].second.numel() * sizeof(double)));
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);

  DetectorParams loaded = make_detector({}, rng);
  load_named(loaded, "det.", back);
  EXPECT_EQ(checksum(loaded), checksum(det));
}

TEST(Checkpoint, FileRoundTripAndCorruption) {
  Rng rng(15);
  const DiscriminatorParams d = make_discriminator({}, rng);
  NamedTensors named;
  append_named(d, "", named);
  const auto path = (std::filesystem::temp_directory_path() / "detgan_ckpt_test.dgck").string();
  write_checkpoint(path, named);
  EXPECT_EQ(encode_checkpoint(read_checkpoint(path)), encode_checkpoint(named));
  std::filesystem::remove(path);

  const std::string bytes = encode_checkpoint(named);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, cut)), ParseError) << cut;
  }
  std::string bad_version = bytes;
  bad_version[4] = 9;
  try {
    decode_checkpoint(bad_version);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 4u);
  }
  EXPECT_THROW(read_checkpoint("/nonexistent/dir/x.dgck"), IoError);
}
