#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "mil_oracle.hpp"
#include "raamil/mil.hpp"
#include "test_support.hpp"

using namespace raamil;
using namespace raamil::testing;

namespace {

MilParams small_params(Rng& rng, std::size_t dim, std::size_t hidden = 6) {
  MilConfig cfg;
  cfg.attention_hidden = hidden;
  cfg.classifier_hidden = hidden;
  MilParams p = MilParams::init(cfg, dim, rng);
  for (auto& v : p.phi_b1.storage()) v = rng.uniform(-0.3, 0.3);
  for (auto& v : p.phi_b2.storage()) v = rng.uniform(-0.3, 0.3);
  return p;
}

TokenBag random_bag(Rng& rng, std::size_t patches, std::size_t r, std::size_t c, std::size_t d) {
  TokenBag bag{"b", 0, {}};
  for (std::size_t p = 0; p < patches; ++p) {
    GridTokens g{r, c, d, {}};
    for (std::size_t i = 0; i < r * c * d; ++i) g.values.push_back(static_cast<float>(rng.normal()));
    bag.grids.push_back(std::move(g));
  }
  return bag;
}

ModelConfig small_model(bool raa) {
  ModelConfig cfg;
  cfg.raa_enabled = raa;
  cfg.mil.attention_hidden = 8;
  cfg.mil.classifier_hidden = 8;
  return cfg;
}

}  // namespace

TEST_CASE("single token gets all the attention") {
  Rng rng(1);
  const MilParams p = small_params(rng, 5);
  const auto w = gated_attention_weights(random_tensor(rng, 1, 5), p);
  CHECK(w == std::vector<double>{1.0});
}

TEST_CASE("identical tokens split attention evenly") {
  Rng rng(2);
  const MilParams p = small_params(rng, 4);
  Tensor x = Tensor::from_rows({{0.3, -1.0, 2.0, 0.1}, {0.3, -1.0, 2.0, 0.1}});
  const auto w = gated_attention_weights(x, p);
  CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(w[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("attention weights match the scalar oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const MilParams p = small_params(rng, 8);
    const Tensor x = random_tensor(rng, 12, 8, -2.0, 2.0);
    const auto w = gated_attention_weights(x, p);
    const auto ref = oracle_attention(x, p);
    REQUIRE(w.size() == 12);
    double total = 0.0;
    for (std::size_t i = 0; i < 12; ++i) {
      CHECK(std::abs(w[i] - ref[i]) < 1e-12);
      CHECK(w[i] >= 0.0);
      total += w[i];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("pooling") {
  Rng rng(4);
  const Tensor x = random_tensor(rng, 5, 3);
  SUBCASE("one-hot weights select a token") {
    std::vector<double> w(5, 0.0);
    w[2] = 1.0;
    const auto m = pool_bag(x, w);
    for (std::size_t d = 0; d < 3; ++d) CHECK(m[d] == x.at(2, d));
  }
  SUBCASE("result lies in the per-feature range of the tokens") {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> w(5);
      for (auto& v : w) v = rng.uniform();
      const double s = std::accumulate(w.begin(), w.end(), 0.0);
      for (auto& v : w) v /= s;
      const auto m = pool_bag(x, w);
      const auto ref = oracle_pool(x, w);
      for (std::size_t d = 0; d < 3; ++d) {
        double lo = x.at(0, d), hi = lo;
        for (std::size_t i = 1; i < 5; ++i) {
          lo = std::min(lo, x.at(i, d));
          hi = std::max(hi, x.at(i, d));
        }
        CHECK(m[d] >= lo - 1e-12);
        CHECK(m[d] <= hi + 1e-12);
        CHECK(std::abs(m[d] - ref[d]) < 1e-14);
      }
    }
  }
  CHECK_THROWS_AS(pool_bag(x, std::vector<double>(4, 0.25)), ShapeError);
}

TEST_CASE("classifier") {
  Rng rng(5);
  MilParams p = small_params(rng, 6);
  const std::vector<double> m{0.2, -0.4, 1.0, 0.0, 0.5, -1.5};

  SUBCASE("zero output layer gives a uniform distribution") {
    p.phi_w2.fill(0.0);
    p.phi_b2.fill(0.0);
    for (double v : classify(m, p).probs) CHECK(v == 0.25);
  }
  SUBCASE("shifting every output bias leaves the probabilities unchanged") {
    const auto a = classify(m, p).probs;
    for (auto& v : p.phi_b2.storage()) v += 7.0;
    const auto b = classify(m, p).probs;
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(std::abs(a[c] - b[c]) < 1e-14);
  }
  SUBCASE("matches the scalar oracle") {
    const auto out = classify(m, p).probs;
    const auto ref = oracle_probs(m, p);
    double total = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      CHECK(std::abs(out[c] - ref[c]) < 1e-12);
      total += out[c];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("freshly initialized RAA model equals the vanilla model") {
  Rng rng(6);
  const Model with = Model::init(small_model(true), 6, 99);
  const Model without = Model::init(small_model(false), 6, 99);
  REQUIRE(with.raa);
  CHECK(with.raa->gamma[0] == 0.0);
  CHECK(with.mil.w_a == without.mil.w_a);
  CHECK(with.mil.phi_w2 == without.mil.phi_w2);
  for (int trial = 0; trial < 5; ++trial) {
    const TokenBag bag = random_bag(rng, 1 + trial % 3, 4, 4, 6);
    const auto a = forward_bag(bag, with);
    const auto b = forward_bag(bag, without);
    CHECK(a.probs == b.probs);
    CHECK(a.weights == b.weights);
  }
}

TEST_CASE("bag prediction ignores patch order") {
  Rng rng(7);
  Model model = Model::init(small_model(true), 6, 3);
  model.raa->gamma[0] = 0.7;
  for (int trial = 0; trial < 5; ++trial) {
    const TokenBag bag = random_bag(rng, 3, 4, 4, 6);
    TokenBag perm = bag;
    std::reverse(perm.grids.begin(), perm.grids.end());
    std::swap(perm.grids[0], perm.grids[1]);
    const auto a = forward_bag(bag, model);
    const auto b = forward_bag(perm, model);
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(std::abs(a.probs[c] - b.probs[c]) < 1e-9);
  }
}

TEST_CASE("bag of identical tokens pools to that token") {
  Model model = Model::init(small_model(false), 3, 4);
  TokenBag bag{"same", 0, {GridTokens{2, 2, 3, {}}, GridTokens{2, 2, 3, {}}}};
  for (auto& g : bag.grids) {
    for (int i = 0; i < 4; ++i) g.values.insert(g.values.end(), {0.5f, -2.0f, 1.25f});
  }
  const auto out = forward_bag(bag, model);
  CHECK(out.embedding == std::vector<double>{0.5, -2.0, 1.25});
  for (double w : out.weights) CHECK(w == doctest::Approx(0.125).epsilon(1e-14));
}

TEST_CASE("end-to-end gradients match finite differences") {
  Rng rng(8);
  Model model = Model::init(small_model(true), 8, 11);
  model.raa->gamma[0] = 0.5;
  for (auto& v : model.raa->b1.storage()) v = rng.uniform(-0.5, 0.5);
  for (auto& v : model.mil.phi_b1.storage()) v = rng.uniform(-0.5, 0.5);
  const TokenBag bag = random_bag(rng, 2, 4, 4, 8);
  const Tensor tokens = bag.tokens();
  Tensor mask = Tensor::matrix(1, 8, 1.0 / 0.75);
  mask[3] = 0.0;

  auto loss = [&](const NamedTensors& values, NamedTensors* grads) {
    Model m = model;
    m.assign(values);
    BagGraph bg = build_bag_graph(m, 2, 4, 4, &mask);
    Graph& g = bg.graph;
    const NodeId l = g.scale(g.log(g.sum(g.mul(bg.mil.probs,
                                               g.constant(Tensor::from_rows({{0, 1, 0, 0}}))))),
                             -1.0);
    g.forward({{"tokens", tokens}});
    if (grads) *grads = g.backward(l);
    return g.value(l).item();
  };
  const NamedTensors point = model.parameters();
  NamedTensors analytic;
  loss(point, &analytic);
  const auto numeric = finite_diff_grad([&](const NamedTensors& v) { return loss(v, nullptr); },
                                        point, 1e-5);
  CHECK(analytic.size() == point.size());
  for (const auto& [name, grad] : analytic) {
    INFO(name);
    CHECK(relative_error(grad, numeric.at(name)) < 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "raamil_test_mil";
  std::filesystem::create_directories(dir);
  for (bool raa : {true, false}) {
    Model model = Model::init(small_model(raa), 5, 21);
    if (raa) model.raa->gamma[0] = -0.3;
    const auto path = dir / (raa ? "raa.raac" : "vanilla.raac");
    save_checkpoint(model, {{"fold", 2}}, path);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.meta.at("fold") == 2);
    CHECK(ck.model.dim == 5);
    CHECK(ck.model.config.raa_enabled == raa);
    CHECK(ck.model.parameters() == model.parameters());
  }

  const auto bad = dir / "bad.raac";
  {
    std::ofstream f(bad, std::ios::binary);
    f << "RAAX0000";
  }
  CHECK_THROWS_AS(load_checkpoint(bad), FormatError);

  Model model = Model::init(small_model(false), 5, 21);
  save_checkpoint(model, json::object(), bad);
  std::filesystem::resize_file(bad, std::filesystem::file_size(bad) - 8);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("past end of file"), FormatError);
  std::filesystem::remove_all(dir);
}
