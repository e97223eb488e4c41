#include <gtest/gtest.h>

#include <deque>

#include "test_util.hpp"

namespace swaat {
namespace {

using testing::random_network;
using testing::uniform_tensor;

FlatParams<double> scalar(double v) { return FlatParams<double>(std::vector<double>{v}); }

TEST(Aggregator, ScalarStreamExample) {
  WeightAggregator<double> exact(AggregatorMode::ExactSMA, 4, 1), rec(AggregatorMode::Recurrence, 4, 1);
  for (int v = 1; v <= 5; ++v) {
    exact.aggregate(scalar(v));
    rec.aggregate(scalar(v));
  }
  EXPECT_DOUBLE_EQ(exact.theta()[0], 3.5);
  EXPECT_DOUBLE_EQ(rec.theta()[0], 3.125);
}

TEST(Aggregator, ModesAgreeBitwiseWhileTheWindowFills) {
  Rng rng(1);
  const std::size_t W = 37, P = 11;
  WeightAggregator<double> exact(AggregatorMode::ExactSMA, W, P), rec(AggregatorMode::Recurrence, W, P);
  for (std::size_t i = 1; i <= W; ++i) {
    FlatParams<double> s(P);
    for (auto& v : s.storage()) v = rng.normal();
    exact.aggregate(s);
    rec.aggregate(s);
    ASSERT_EQ(exact.theta(), rec.theta()) << i;
  }
}

TEST(Aggregator, ExactSmaMatchesBruteForceRingMean) {
  Rng rng(2);
  const std::size_t W = 9, P = 5;
  WeightAggregator<double> agg(AggregatorMode::ExactSMA, W, P);
  std::deque<std::vector<double>> ring;
  double worst = 0;
  for (int i = 0; i < 20000; ++i) {
    FlatParams<double> s(P);
    for (auto& v : s.storage()) v = rng.uniform(-10, 10);
    agg.aggregate(s);
    ring.emplace_back(s.storage().begin(), s.storage().end());
    if (ring.size() > W) ring.pop_front();
    for (std::size_t j = 0; j < P; ++j) {
      long double m = 0;
      for (const auto& r : ring) m += r[j];
      worst = std::max(worst, std::abs(static_cast<double>(m / ring.size()) - agg.theta()[j]));
    }
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Aggregator, RecurrenceBecomesExponentialAfterTheWindow) {
  WeightAggregator<double> rec(AggregatorMode::Recurrence, 2, 1);
  rec.aggregate(scalar(0));
  rec.aggregate(scalar(2));
  rec.aggregate(scalar(4));
  EXPECT_DOUBLE_EQ(rec.theta()[0], 0.5 * 1 + 0.5 * 4);
  EXPECT_EQ(rec.weight(), 2u);
  EXPECT_EQ(rec.updates(), 3u);
}

TEST(Aggregator, RejectsZeroWindowAndWrongLength) {
  EXPECT_THROW(WeightAggregator<double>(AggregatorMode::Recurrence, 0, 3), UserError);
  WeightAggregator<double> a(AggregatorMode::Recurrence, 2, 3);
  EXPECT_THROW(a.aggregate(scalar(1)), ShapeError);
}

TEST(Aggregator, RestoreKeepsTheMean) {
  WeightAggregator<double> a(AggregatorMode::ExactSMA, 3, 1);
  for (int v : {1, 2, 3, 4}) a.aggregate(scalar(v));
  WeightAggregator<double> b(AggregatorMode::ExactSMA, 3, 1);
  b.restore(a.updates(), a.theta());
  EXPECT_EQ(b.theta(), a.theta());
  EXPECT_DOUBLE_EQ(b.ring_mean()[0], 3.0);
}

TEST(SwapIn, NetworkEqualsThetaAfterSwap) {
  Rng rng(3);
  auto net = random_network<double>(preset_descriptor("mlp-small", {1, 3, 3}, 3), rng);
  WeightAggregator<double> agg(AggregatorMode::Recurrence, 3, net.param_count());
  for (int i = 0; i < 5; ++i) {
    auto p = net.flatten();
    for (auto& v : p.storage()) v += rng.normal();
    agg.aggregate(p);
  }
  swap_in(agg, net);
  EXPECT_EQ(net.flatten(), agg.theta());
  EXPECT_TRUE(net.bn_stale());
  WeightAggregator<double> empty(AggregatorMode::Recurrence, 3, net.param_count());
  EXPECT_THROW(swap_in(empty, net), Error);
}

TEST(ChannelMoments, MergeEqualsTwoPassOverTheWhole) {
  Rng rng(4);
  const auto a = uniform_tensor<double>({7, 2, 3, 3}, rng, -5, 5);
  const auto b = uniform_tensor<double>({4, 2, 3, 3}, rng, 0, 50);
  Tensor<double> ab({11, 2, 3, 3});
  ab.assign_slice(0, a);
  ab.assign_slice(7, b);
  auto m = channel_moments(a, 2);
  m.merge(channel_moments(b, 2));
  const auto whole = channel_moments(ab, 2);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(m.mean[c], whole.mean[c], 1e-12);
    EXPECT_NEAR(m.variance(c), whole.variance(c), 1e-10);
    EXPECT_EQ(m.n[c], 99.0);
  }
}

// Exact population moments of each BN layer's input, computed directly.
TEST(AdjustBn, NaturalModeSetsExactPopulationMoments) {
  Rng rng(5);
  auto net = random_network<double>(preset_descriptor("cnn-small", {1, 8, 8}, 3), rng);
  auto data = testing::small_synth<double>(1, 90, 3, 1.0, 8);
  AdjustBnOptions o;
  o.chunk = 16;
  net.set_bn_stale(true);
  adjust_bn(net, data, o);
  EXPECT_FALSE(net.bn_stale());
  for (std::size_t li = 0; li < net.layer_count(); ++li) {
    if (net.layer(li).kind() != LayerKind::BatchNorm) continue;
    const auto h = net.forward_prefix(data.images, li);
    const std::size_t C = h.dim(1), S = h.example_size() / C;
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0, n = 0;
      for (std::size_t b = 0; b < h.batch(); ++b)
        for (std::size_t i = 0; i < S; ++i, ++n) s += h[(b * C + c) * S + i];
      const double mu = s / n;
      double v = 0;
      for (std::size_t b = 0; b < h.batch(); ++b)
        for (std::size_t i = 0; i < S; ++i) v += (h[(b * C + c) * S + i] - mu) * (h[(b * C + c) * S + i] - mu);
      EXPECT_NEAR(net.state_span(li)[c], mu, 1e-12);
      EXPECT_NEAR(net.state_span(li)[C + c], v / n, 1e-12);
    }
  }
}

TEST(AdjustBn, IndependentOfChunkingAndThreads) {
  Rng rng(6);
  auto a = random_network<double>(preset_descriptor("cnn-small", {1, 8, 8}, 3), rng);
  auto b = a;
  const auto data = testing::small_synth<double>(2, 75, 3, 1.0, 8);
  AdjustBnOptions o1, o2;
  o1.chunk = 75;
  o2.chunk = 8;
  o2.threads = 3;
  adjust_bn(a, data, o1);
  adjust_bn(b, data, o2);
  for (std::size_t i = 0; i < a.state_count(); ++i) EXPECT_NEAR(a.bn_state()[i], b.bn_state()[i], 1e-12);
}

TEST(AdjustBn, AdversarialModeDiffersFromNatural) {
  Rng rng(7);
  auto a = random_network<double>(preset_descriptor("mlp-small", {1, 8, 8}, 3), rng);
  auto b = a;
  const auto data = testing::small_synth<double>(3, 60, 3, 1.0, 8);
  AdjustBnOptions nat, adv;
  adv.mode = BnMode::Adversarial;
  adv.attack = parse_attack("pgd:linf:eps=0.1:alpha=0.025:steps=5:rand=1").pgd;
  adjust_bn(a, data, nat);
  adjust_bn(b, data, adv);
  EXPECT_NE(std::vector<double>(a.bn_state().begin(), a.bn_state().end()),
            std::vector<double>(b.bn_state().begin(), b.bn_state().end()));
}

TEST(Checkpoint, RoundTripWithAggregator) {
  Rng rng(8);
  const auto dir = testing::scratch_dir("ckpt");
  auto net = random_network<float>(preset_descriptor("cnn-small", {1, 8, 8}, 3), rng);
  for (auto& s : net.bn_state()) s = static_cast<float>(rng.uniform());
  WeightAggregator<float> agg(AggregatorMode::ExactSMA, 5, net.param_count());
  agg.aggregate(net.flatten());
  const auto path = (dir / "c.swat").string();
  const auto sum = save_checkpoint(path, net, &agg);
  const auto d = read_checkpoint(path);
  EXPECT_EQ(d.checksum, sum);
  EXPECT_EQ(d.descriptor, net.descriptor());
  const auto back = network_from<float>(d);
  EXPECT_EQ(back.flatten(), net.flatten());
  EXPECT_TRUE(std::equal(back.bn_state().begin(), back.bn_state().end(), net.bn_state().begin()));
  ASSERT_TRUE(d.aggregator.has_value());
  const auto a2 = aggregator_from<float>(*d.aggregator);
  EXPECT_EQ(a2.theta(), agg.theta());
  EXPECT_EQ(a2.window(), 5u);
  EXPECT_EQ(checkpoint_checksum(net, &agg), sum);
}

TEST(Checkpoint, CorruptionAndTruncationAreDetected) {
  Rng rng(9);
  auto net = random_network<double>("input=1x1x3;flatten;dense(3,2)", rng);
  auto bytes = encode_checkpoint(net);
  auto flipped = bytes;
  flipped[20] ^= 1;
  EXPECT_THROW(decode_checkpoint(flipped), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 9);
  EXPECT_THROW(decode_checkpoint(cut), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);
  EXPECT_NO_THROW(decode_checkpoint(bytes));
}

}  // namespace
}  // namespace swaat
