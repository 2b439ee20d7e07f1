#include <gtest/gtest.h>

#include <cmath>

#include "milkit/encoder.hpp"
#include "test_support.hpp"

namespace milkit {
namespace {

ImageGrid ramp_image(std::size_t side) {
  ImageGrid img{side, side, std::vector<double>(side * side)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<double>(i);
  return img;
}

TEST(Patchify, LayoutOfFourByFour) {
  const Tensor p = patchify(ramp_image(4), 2);
  ASSERT_EQ(p.shape(), (Shape{4, 4}));
  EXPECT_EQ(std::vector<double>(p.row(0).begin(), p.row(0).end()), (std::vector<double>{0, 1, 4, 5}));
  EXPECT_EQ(std::vector<double>(p.row(1).begin(), p.row(1).end()), (std::vector<double>{2, 3, 6, 7}));
  EXPECT_EQ(std::vector<double>(p.row(2).begin(), p.row(2).end()), (std::vector<double>{8, 9, 12, 13}));
  EXPECT_EQ(std::vector<double>(p.row(3).begin(), p.row(3).end()), (std::vector<double>{10, 11, 14, 15}));
}

TEST(Patchify, WholeImagePatch) {
  const ImageGrid img = ramp_image(4);
  const Tensor p = patchify(img, 4);
  ASSERT_EQ(p.shape(), (Shape{1, 16}));
  EXPECT_EQ(p.values(), img.pixels);
}

TEST(Patchify, RoundTripIsBitExact) {
  RandomStream rng(3);
  for (std::size_t patch : {1u, 2u, 3u, 5u}) {
    ImageGrid img{patch * 4, patch * 4, {}};
    img.pixels = rng_uniform(rng, 0.0, 1.0, img.height * img.width).values();
    EXPECT_EQ(unpatchify(patchify(img, patch), patch), img);
  }
}

TEST(Patchify, RejectsIndivisibleSize) {
  EXPECT_THROW(patchify(ramp_image(5), 2), ValidationError);
}

TEST(Encode, ZeroWeightsGiveOutputBias) {
  RandomStream rng(1);
  EncoderParams p = init_encoder(2, 3, 4, rng);
  for (auto& v : p.w1.data()) v = 0.0;
  for (auto& v : p.w2.data()) v = 0.0;
  p.b2 = Tensor::vector({0.5, -1.0, 2.0, 3.5});
  const Tensor out = encode(uniform_tensor(rng, {6, 4}, 0, 1), p);
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(out.at(j, d), p.b2[d]);
}

TEST(Encode, SinglePatchMatchesTwoLayerFormula) {
  RandomStream rng(9);
  EncoderParams p = init_encoder(3, 5, 4, rng);
  p.b1 = uniform_tensor(rng, {5}, -0.5, 0.5);
  p.b2 = uniform_tensor(rng, {4}, -0.5, 0.5);
  const Tensor patch = uniform_tensor(rng, {1, 9}, 0, 1);
  std::vector<double> hidden(5);
  for (std::size_t h = 0; h < 5; ++h) {
    double acc = p.b1[h];
    for (std::size_t i = 0; i < 9; ++i) acc += p.w1.at(h, i) * patch[i];
    hidden[h] = std::max(0.0, acc);
  }
  const Tensor out = encode(patch, p);
  for (std::size_t d = 0; d < 4; ++d) {
    double acc = p.b2[d];
    for (std::size_t h = 0; h < 5; ++h) acc += p.w2.at(d, h) * hidden[h];
    EXPECT_NEAR(out[d], acc, 1e-12);
  }
}

TEST(Encode, PermutingRowsPermutesOutputs) {
  RandomStream rng(10);
  const EncoderParams p = init_encoder(2, 8, 3, rng);
  const Tensor patches = uniform_tensor(rng, {9, 4}, 0, 1);
  const auto perm = testing::random_permutation(9, rng);
  EXPECT_EQ(encode(testing::permute_rows(patches, perm), p), testing::permute_rows(encode(patches, p), perm));
}

TEST(Encode, ShapeMismatch) {
  RandomStream rng(1);
  const EncoderParams p = init_encoder(2, 3, 4, rng);
  EXPECT_THROW(encode(Tensor({3, 5}), p), ValidationError);
}

TEST(Encode, GradientsPassGradCheck) {
  RandomStream rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    EncoderParams p = init_encoder(2, 6, 3, rng);
    p.b1 = uniform_tensor(rng, {6}, -0.3, 0.3);
    const Tensor patches = uniform_tensor(rng, {5, 4}, 0, 1);
    const ScalarFn f = [](Graph& g, std::span<const Var> v) {
      const Var out = encode(g, v[0], EncoderVars{v[1], v[2], v[3], v[4]});
      return sum(g, mul(g, out, out));
    };
    EXPECT_LE(grad_check(f, {patches, p.w1, p.b1, p.w2, p.b2}), 1e-6);
  }
}

TEST(InitEncoder, DeterministicAndBounded) {
  RandomStream a(5), b(5);
  const EncoderParams pa = init_encoder(4, 16, 8, a);
  const EncoderParams pb = init_encoder(4, 16, 8, b);
  EXPECT_EQ(pa.w1, pb.w1);
  EXPECT_EQ(pa.w2, pb.w2);
  const double bound = std::sqrt(6.0 / 16.0);
  for (double v : pa.w1.data()) EXPECT_LE(std::abs(v), bound);
  for (double v : pa.b1.data()) EXPECT_EQ(v, 0.0);
  for (double v : pa.b2.data()) EXPECT_EQ(v, 0.0);
}

TEST(InitEncoder, VarianceIsTwoOverFanIn) {
  // Uniform(-a, a) with a = sqrt(6 / fan_in) has variance a^2 / 3 = 2 / fan_in.
  RandomStream rng(6);
  const EncoderParams p = init_encoder(10, 100, 1, rng);  // W1 is 100 x 100 = 10^4 draws, fan_in 100
  double mean = 0.0, sq = 0.0;
  for (double v : p.w1.data()) {
    mean += v;
    sq += v * v;
  }
  const double n = static_cast<double>(p.w1.size());
  const double var = sq / n - (mean / n) * (mean / n);
  EXPECT_NEAR(var, 2.0 / 100.0, 0.2 * 2.0 / 100.0);
}

TEST(Pgm, ParsesAndMapsToUnitRange) {
  const ImageGrid img = image_from_greymap(parse_pgm("P2\n# comment\n2 2\n255\n0 255\n51 102\n"));
  EXPECT_EQ(img.height, 2u);
  EXPECT_EQ(img.pixels, (std::vector<double>{0.0, 1.0, 51 / 255.0, 102 / 255.0}));
}

TEST(Pgm, RejectsBadFiles) {
  EXPECT_THROW(parse_pgm("P5\n1 1\n255\n0\n"), FormatError);
  EXPECT_THROW(parse_pgm("P2\n2 2\n255\n0 1 2\n"), FormatError);
  EXPECT_THROW(parse_pgm("P2\n1 1\n15\n3\n"), FormatError);
  EXPECT_THROW(parse_pgm("P2\n1 1\n255\n256\n"), FormatError);
}

}  // namespace
}  // namespace milkit
