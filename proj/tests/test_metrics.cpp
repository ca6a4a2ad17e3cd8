#include <gtest/gtest.h>

#include "hsf/metrics.hpp"
#include "oracles.hpp"

using namespace hsf;

namespace {

HsiCube noisy(const HsiCube& ref, double amplitude, std::uint64_t seed) {
  Rng rng(seed);
  HsiCube x = ref;
  for (Index i = 0; i < x.size(); ++i) x.data()[i] += amplitude * rng.normal();
  return x;
}

HsiCube reference(std::uint64_t seed) {
  Rng rng(seed);
  return oracle::random_cube(32, 32, 4, rng, 0.05, 1.0);
}

}  // namespace

TEST(Metrics, MatchPixelLoopOracles) {
  const HsiCube ref = reference(1), x = noisy(ref, 0.05, 2);
  EXPECT_NEAR(psnr(x, ref), oracle::psnr(x, ref), 1e-9);
  EXPECT_NEAR(sam(x, ref), oracle::sam(x, ref), 1e-9);
  EXPECT_NEAR(ergas(x, ref, 4.0), oracle::ergas(x, ref, 4.0), 1e-9);
}

TEST(Metrics, SsimMatchesDirectWindowImplementation) {
  const HsiCube ref = reference(3), x = noisy(ref, 0.1, 4);
  EXPECT_NEAR(ssim(x, ref), oracle::ssim(x, ref), 1e-6);
}

TEST(Metrics, IdentityValues) {
  const HsiCube ref = reference(5);
  EXPECT_EQ(psnr(ref, ref), kPsnrCap);
  EXPECT_EQ(sam(ref, ref), 0.0);
  EXPECT_EQ(ergas(ref, ref, 8.0), 0.0);
  EXPECT_NEAR(ssim(ref, ref), 1.0, 1e-12);
}

TEST(Metrics, ClosedForms) {
  // Constant offset e on every sample: MSE = e^2, PSNR = -20 log10 e.
  HsiCube ref(8, 8, 3, 0.5), x(8, 8, 3, 0.6);
  EXPECT_NEAR(psnr(x, ref), 20.0, 1e-9);
  // Scaled spectra are parallel.
  HsiCube s = reference(6);
  HsiCube s2 = s;
  s2.data() *= 3.0;
  EXPECT_NEAR(sam(s2, s), 0.0, 1e-12);
  // Orthogonal spectra: 90 degrees.
  HsiCube a(1, 1, 2), b(1, 1, 2);
  a.data() << 1.0, 0.0;
  b.data() << 0.0, 2.0;
  EXPECT_NEAR(sam(a, b), 90.0, 1e-12);
  // ERGAS of a uniform relative error r over all bands is 100/d * r.
  EXPECT_NEAR(ergas(x, ref, 4.0), 100.0 / 4.0 * 0.2, 1e-12);
}

TEST(Metrics, MonotoneInNoiseAmplitude) {
  const HsiCube ref = reference(7);
  const double amps[] = {0.01, 0.02, 0.05, 0.1, 0.2};
  MetricsReport prev{};
  for (int i = 0; i < 5; ++i) {
    const auto m = evaluate(noisy(ref, amps[i], 8), ref, 4.0);
    if (i > 0) {
      EXPECT_LT(m.psnr, prev.psnr);
      EXPECT_GT(m.sam, prev.sam);
      EXPECT_GT(m.ergas, prev.ergas);
      EXPECT_LT(m.ssim, prev.ssim);
    }
    prev = m;
  }
}

TEST(Metrics, BandPermutationInvariance) {
  const HsiCube ref = reference(9), x = noisy(ref, 0.05, 10);
  const int perm[] = {2, 0, 3, 1};
  HsiCube rp(32, 32, 4), xp(32, 32, 4);
  for (int b = 0; b < 4; ++b) {
    rp.band(b) = ref.band(perm[b]);
    xp.band(b) = x.band(perm[b]);
  }
  const auto m = evaluate(x, ref, 4.0), mp = evaluate(xp, rp, 4.0);
  EXPECT_NEAR(m.psnr, mp.psnr, 1e-9);
  EXPECT_NEAR(m.sam, mp.sam, 1e-9);
  EXPECT_NEAR(m.ergas, mp.ergas, 1e-9);
  EXPECT_NEAR(m.ssim, mp.ssim, 1e-9);
}

TEST(Metrics, SsimDropsUnderShift) {
  const HsiCube ref = reference(11);
  HsiCube shifted(32, 32, 4);
  for (Index b = 0; b < 4; ++b)
    for (Index i = 0; i < 32; ++i)
      for (Index j = 0; j < 32; ++j) shifted(b, i, j) = ref(b, i, (j + 1) % 32);
  EXPECT_LT(ssim(shifted, ref), 0.9);
}

TEST(Metrics, Errors) {
  const HsiCube ref = reference(12);
  EXPECT_THROW(psnr(HsiCube(16, 32, 4), ref), ShapeError);
  EXPECT_THROW(sam(HsiCube(2, 2, 1, 1.0), HsiCube(2, 2, 1, 1.0)), ShapeError);
  EXPECT_THROW(sam(HsiCube(2, 2, 2), HsiCube(2, 2, 2)), NumericsError);
  EXPECT_THROW(ergas(HsiCube(2, 2, 2), HsiCube(2, 2, 2), 4.0), NumericsError);
}

TEST(Metrics, ReportFormatting) {
  const MetricsReport m{35.123456, 2.5, 1.25, 0.987654321};
  EXPECT_EQ(format_report(m), "psnr=35.1235\nsam=2.5000\nergas=1.2500\nssim=0.9877\n");
  const std::string exact = format_report_exact(m);
  const auto at = exact.find("ssim=");
  ASSERT_NE(at, std::string::npos);
  EXPECT_EQ(std::stod(exact.substr(at + 5)), m.ssim);
}
