#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ignitrace/nncore.hpp"
#include "support.hpp"

using namespace ignitrace::nn;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Direct-summation cross-correlation oracle.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> out({N, F, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < kh; ++a)
              for (std::size_t b = 0; b < kw; ++b) {
                const long y = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                s += x[((n * C + c) * H + y) * W + xx] * k[((f * C + c) * kh + a) * kw + b];
              }
          out[((n * F + f) * Ho + i) * Wo + j] = s;
        }
  return out;
}

Tensor<double> run(const std::function<Var(Tape<double>&)>& f) {
  Tape<double> t(GradMode::Disabled);
  return t.value(f(t));
}

}  // namespace

TEST_SUITE("nncore") {
  TEST_CASE("tensor basics") {
    Tensor<double> t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    t.reshape({3, 2});
    CHECK(t.shape() == Shape{3, 2});
    CHECK_THROWS_AS(t.reshape({4, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  }

  TEST_CASE("conv2d: identity kernel, all-ones oracle, shape law") {
    std::mt19937_64 rng(1);
    const auto x = random_tensor({2, 1, 5, 5}, rng);
    const auto id = run([&](Tape<double>& t) {
      return conv2d(t, t.constant(x), t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)), {1, Padding::SameZero});
    });
    CHECK(id == x);

    const auto ones = run([&](Tape<double>& t) {
      return conv2d(t, t.constant(Tensor<double>({1, 1, 3, 3}, 1.0)), t.constant(Tensor<double>({1, 1, 3, 3}, 1.0)));
    });
    const std::vector<double> want{4, 6, 4, 6, 9, 6, 4, 6, 4};
    CHECK(ones.values() == want);

    const auto strided = run([&](Tape<double>& t) {
      return conv2d(t, t.constant(Tensor<double>({1, 1, 5, 5}, 1.0)), t.constant(Tensor<double>({1, 1, 3, 3}, 1.0)),
                    {2, Padding::Valid});
    });
    CHECK(strided.shape() == Shape{1, 1, 2, 2});
    CHECK(conv_output_dim(7, 3, 2, 1) == 4);
    CHECK_THROWS_AS(conv_output_dim(2, 3, 1, 0), ShapeError);
  }

  TEST_CASE("conv2d matches the direct-summation oracle on random shapes") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 40; ++i) {
      const std::size_t N = 1 + rng() % 2, C = 1 + rng() % 3, F = 1 + rng() % 3, k = (rng() % 2) ? 3 : 1;
      const std::size_t H = k + rng() % 6, W = k + rng() % 6, stride = 1 + rng() % 2;
      const bool same = rng() % 2;
      const auto x = random_tensor({N, C, H, W}, rng);
      const auto w = random_tensor({F, C, k, k}, rng);
      const auto got = run([&](Tape<double>& t) {
        return conv2d(t, t.constant(x), t.constant(w), {stride, same ? Padding::SameZero : Padding::Valid});
      });
      const auto want = conv_oracle(x, w, stride, same ? k / 2 : 0);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t j = 0; j < got.size(); ++j) CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-12));
    }
  }

  TEST_CASE("illegal shapes error without corrupting the tape") {
    Tape<double> t;
    const Var x = t.constant(Tensor<double>({1, 2, 4, 4}, 1.0));
    CHECK_THROWS_AS(conv2d(t, x, t.constant(Tensor<double>({1, 3, 3, 3}, 1.0))), ShapeError);
    CHECK_THROWS_AS(conv2d(t, t.constant(Tensor<double>({2, 4}, 1.0)), t.constant(Tensor<double>({1, 2, 1, 1}))),
                    ShapeError);
    CHECK_THROWS_AS(add(t, x, t.constant(Tensor<double>({1, 2, 4, 3}))), ShapeError);
    CHECK_THROWS_AS(linear(t, t.constant(Tensor<double>({2, 3})), t.constant(Tensor<double>({4, 2})),
                           t.constant(Tensor<double>({2}))),
                    ShapeError);
    const auto before = t.size();
    CHECK(t.value(conv2d(t, x, t.constant(Tensor<double>({1, 2, 1, 1}, 1.0)))).shape() == Shape{1, 1, 4, 4});
    CHECK(t.size() == before + 2);
  }

  TEST_CASE("batch norm: constant input, affine law, eval before train") {
    BatchNormState<double> st;
    const auto zero = run([&](Tape<double>& t) {
      return batch_norm(t, t.constant(Tensor<double>({4, 2, 3, 3}, 5.0)), t.constant(Tensor<double>({2}, 1.0)),
                        t.constant(Tensor<double>({2}, 0.0)), st, Mode::Train);
    });
    for (double v : zero.values()) CHECK(v == 0.0);

    std::mt19937_64 rng(3);
    BatchNormState<double> st2;
    const auto x = random_tensor({16, 3, 4, 4}, rng, -3, 5);
    const auto y = run([&](Tape<double>& t) {
      return batch_norm(t, t.constant(x), t.constant(Tensor<double>({3}, 2.0)), t.constant(Tensor<double>({3}, 3.0)),
                        st2, Mode::Train);
    });
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0, s2 = 0;
      const double m = 16 * 16;
      for (std::size_t n = 0; n < 16; ++n)
        for (std::size_t k = 0; k < 16; ++k) s += y[(n * 3 + c) * 16 + k];
      const double mean = s / m;
      for (std::size_t n = 0; n < 16; ++n)
        for (std::size_t k = 0; k < 16; ++k) s2 += std::pow(y[(n * 3 + c) * 16 + k] - mean, 2);
      CHECK(mean == doctest::Approx(3.0).epsilon(1e-6));
      CHECK(std::sqrt(s2 / m) == doctest::Approx(2.0).epsilon(1e-5));
    }

    BatchNormState<double> fresh;
    Tape<double> t;
    CHECK_THROWS_AS(batch_norm(t, t.constant(x), t.constant(Tensor<double>({3}, 1.0)),
                               t.constant(Tensor<double>({3}, 0.0)), fresh, Mode::Eval),
                    std::logic_error);
  }

  TEST_CASE("batch norm eval after repeated training on one batch follows the EMA closed form") {
    std::mt19937_64 rng(4);
    const auto x = random_tensor({8, 2, 3, 3}, rng, 0, 4);
    BatchNormState<double> st;
    const Tensor<double> g({2}, 1.0), b({2}, 0.0);
    Tensor<double> train_out;
    const int steps = 60;
    for (int i = 0; i < steps; ++i) {
      train_out = run([&](Tape<double>& t) {
        return batch_norm(t, t.constant(x), t.constant(g), t.constant(b), st, Mode::Train);
      });
    }
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0, s2 = 0;
      for (std::size_t n = 0; n < 8; ++n)
        for (std::size_t k = 0; k < 9; ++k) s += x[(n * 2 + c) * 9 + k];
      const double mean = s / 72;
      for (std::size_t n = 0; n < 8; ++n)
        for (std::size_t k = 0; k < 9; ++k) s2 += std::pow(x[(n * 2 + c) * 9 + k] - mean, 2);
      const double var = s2 / 72;
      const double decay = std::pow(0.9, steps);
      CHECK(st.running_mean[c] == doctest::Approx(mean * (1 - decay)).epsilon(1e-12));
      CHECK(st.running_var[c] == doctest::Approx(var + (1 - var) * decay).epsilon(1e-12));
    }
    const auto eval_out = run([&](Tape<double>& t) {
      return batch_norm(t, t.constant(x), t.constant(g), t.constant(b), st, Mode::Eval);
    });
    double worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(eval_out[i] - train_out[i]));
    CHECK(worst < 0.01);
  }

  TEST_CASE("relu") {
    const auto y = run([](Tape<double>& t) { return relu(t, t.constant(Tensor<double>({3}, {-1, 0, 2}))); });
    CHECK(y.values() == std::vector<double>{0, 0, 2});
    const auto z = run([](Tape<double>& t) { return relu(t, t.constant(Tensor<double>({4}, -3.0))); });
    for (double v : z.values()) CHECK(v == 0.0);
    Tape<double> t;
    const Var x = t.variable(Tensor<double>({3}, {-1, 0, 2}));
    t.backward(weighted_sum(t, relu(t, x), Tensor<double>({3}, 1.0)));
    CHECK(t.grad(x).values() == std::vector<double>{0, 0, 1});
  }

  TEST_CASE("global average pool") {
    const auto c = run([](Tape<double>& t) { return global_avg_pool(t, t.constant(Tensor<double>({2, 3, 4, 4}, 7.0))); });
    CHECK(c.shape() == Shape{2, 3});
    for (double v : c.values()) CHECK(v == 7.0);
    const auto m = run([](Tape<double>& t) {
      return global_avg_pool(t, t.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4})));
    });
    CHECK(m[0] == 2.5);
    Tape<double> t;
    const Var x = t.variable(Tensor<double>({1, 1, 2, 3}, 1.0));
    t.backward(weighted_sum(t, global_avg_pool(t, x), Tensor<double>({1, 1}, 1.0)));
    const auto gx = t.grad(x);
    for (double g : gx.values()) CHECK(g == doctest::Approx(1.0 / 6));
  }

  TEST_CASE("softmax cross-entropy") {
    {
      Tape<double> t;
      const std::vector<int> labels{0};
      const auto r = softmax_xent(t, t.constant(Tensor<double>({1, 2}, {0, 0})), labels);
      CHECK(r.probabilities[0] == 0.5);
      CHECK(t.value(r.loss)[0] == doctest::Approx(std::log(2.0)));
    }
    {
      Tape<double> t;
      const std::vector<int> labels{0};
      const auto r = softmax_xent(t, t.constant(Tensor<double>({1, 2}, {1000, 0})), labels);
      CHECK(std::isfinite(t.value(r.loss)[0]));
      CHECK(r.probabilities[0] == doctest::Approx(1.0));
      CHECK(t.value(r.loss)[0] >= 0.0);
      CHECK(t.value(r.loss)[0] < 1e-12);
    }
    {
      Tape<double> t;
      const std::vector<int> labels{0};
      CHECK_THROWS_AS(softmax_xent(t, t.constant(Tensor<double>({1, 2}, {NAN, 0})), labels), NumericError);
      const std::vector<int> bad{2};
      CHECK_THROWS_AS(softmax_xent(t, t.constant(Tensor<double>({1, 2}, {0, 0})), bad), std::invalid_argument);
    }
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
      const auto p = softmax(random_tensor({4, 2}, rng, -30, 30));
      for (std::size_t r = 0; r < 4; ++r) CHECK(std::abs(p[2 * r] + p[2 * r + 1] - 1.0) <= 1e-12);
    }
  }

  TEST_CASE("dense softmax cross-entropy gradient") {
    std::mt19937_64 rng(6);
    const std::vector<int> labels{0, 1, 1};
    const auto r = grad_check(
        [&](Tape<double>& t, std::span<const Var> v) { return dense_softmax_xent(t, v[0], v[1], v[2], labels).loss; },
        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng), random_tensor({2}, rng)});
    CHECK(r.max_rel_error <= 1e-6);
  }

  TEST_CASE("sgd step recurrences") {
    auto one = [](double w, double g) {
      Parameter<double> p("w", Tensor<double>({1}, w));
      p.grad = Tensor<double>({1}, g);
      return p;
    };
    auto p = one(1.0, 0.5);
    std::vector<Parameter<double>*> ps{&p};
    sgd_step<double>(ps, {0.1, 0.0, 0.0});
    CHECK(p.value[0] == doctest::Approx(0.95));

    auto q = one(1.0, 0.5);
    std::vector<Parameter<double>*> qs{&q};
    sgd_step<double>(qs, {0.1, 0.9, 0.0});
    sgd_step<double>(qs, {0.1, 0.9, 0.0});
    CHECK(q.velocity[0] == doctest::Approx(1.9 * 0.5));
    CHECK(q.value[0] == doctest::Approx(1.0 - 0.1 * 0.5 - 0.1 * 0.95));

    auto r = one(2.0, 0.0);
    std::vector<Parameter<double>*> rs{&r};
    for (int i = 0; i < 5; ++i) sgd_step<double>(rs, {0.1, 0.0, 0.5});
    CHECK(r.value[0] == doctest::Approx(2.0 * std::pow(0.95, 5)));
  }

  TEST_CASE("he init") {
    CHECK(he_init<double>({4, 4}, 3, 9) == he_init<double>({4, 4}, 3, 9));
    CHECK_FALSE(he_init<double>({4, 4}, 3, 9) == he_init<double>({4, 4}, 3, 10));
    for (std::size_t fan_in : {2u, 9u, 72u}) {
      const auto t = he_init<double>({100000}, fan_in, 77);
      double s = 0, s2 = 0;
      for (double v : t.values()) s += v;
      const double mean = s / 1e5;
      for (double v : t.values()) s2 += (v - mean) * (v - mean);
      CHECK(std::abs(mean) < 0.02 * std::sqrt(2.0 / fan_in) * 10);
      CHECK(s2 / (1e5 - 1) == doctest::Approx(2.0 / fan_in).epsilon(0.05));
    }
  }

  TEST_CASE("grad_check: exact for linear, catches a broken backward") {
    std::mt19937_64 rng(7);
    const auto w = random_tensor({5}, rng);
    const auto lin = grad_check([&](Tape<double>& t, std::span<const Var> v) { return weighted_sum(t, v[0], w); },
                                {random_tensor({5}, rng)});
    CHECK(lin.max_rel_error <= 1e-10);

    const auto broken = grad_check(
        [&](Tape<double>& t, std::span<const Var> v) {
          const auto& x = t.value(v[0]);
          Tensor<double> sq(x.shape());
          for (std::size_t i = 0; i < x.size(); ++i) sq[i] = x[i] * x[i];
          const Var y = t.record(std::move(sq), {v[0]}, [in = v[0]](Tape<double>& tt, std::size_t self) {
            const auto& gy = *tt.grad_if_any(self);
            auto& gx = tt.grad_buffer(in.id);
            const auto& xv = tt.value(in);
            for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += gy[i] * xv[i];  // missing factor 2
          });
          return weighted_sum(t, y, w);
        },
        {random_tensor({5}, rng, 0.5, 1.0)});
    CHECK(broken.max_rel_error >= 1e-2);
  }

  TEST_CASE("every op passes gradient checks on random small tensors") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto results = testing::op_grad_checks(seed);
      for (const auto& [name, r] : results) {
        INFO(name << " seed " << seed);
        CHECK(r.max_rel_error <= 1e-4);
      }
    }
  }

  TEST_CASE("residual block: zero branch is relu of input; stride-2 shape law") {
    auto blk = ResidualBlock<double>::make("b", 2, 2, 1, 1);
    blk.bn2.gamma.value.fill(0.0);
    std::mt19937_64 rng(8);
    const auto x = random_tensor({2, 2, 4, 4}, rng);
    const auto y = run([&](Tape<double>& t) { return residual_block(t, t.constant(x), blk, Mode::Train); });
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == std::max(0.0, x[i]));

    auto down = ResidualBlock<double>::make("d", 2, 4, 2, 1);
    const auto z = run([&](Tape<double>& t) { return residual_block(t, t.constant(x), down, Mode::Train); });
    CHECK(z.shape() == Shape{2, 4, 2, 2});

    auto bad = ResidualBlock<double>::make("x", 2, 4, 2, 1);
    bad.projection.reset();
    bad.projection_bn.reset();
    Tape<double> t;
    CHECK_THROWS_AS(residual_block(t, t.constant(x), bad, Mode::Train), ShapeError);
  }

  TEST_CASE("residual block and small network gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      CHECK(testing::block_grad_check(seed).max_rel_error <= 1e-4);
      CHECK(testing::network_grad_check(seed).max_rel_error <= 1e-4);
    }
  }

  TEST_CASE("single-threaded training is bit-exact") {
    auto train = [] {
      ResNetConfig cfg;
      cfg.base_channels = 4;
      cfg.stage_blocks = {1, 1};
      ResNet<float> net(cfg, 42);
      std::mt19937_64 rng(1);
      std::normal_distribution<float> n(0.0f, 1.0f);
      Tensor<float> x({8, 1, 16, 16});
      for (auto& v : x.values()) v = n(rng);
      const std::vector<int> labels{0, 1, 0, 1, 1, 0, 1, 0};
      for (int step = 0; step < 5; ++step) {
        auto params = net.parameters();
        for (auto* p : params) p->zero_grad();
        Tape<float> t;
        const auto r = softmax_xent(t, net.forward(t, t.constant(x), Mode::Train), labels);
        t.backward(r.loss);
        sgd_step<float>(params, {});
      }
      return net.export_state();
    };
    const auto a = train();
    const auto b = train();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].name == b[i].name);
      CHECK(a[i].values == b[i].values);
    }
  }

  TEST_CASE("network state export, import and checkpoint round trip") {
    ResNetConfig cfg;
    cfg.base_channels = 4;
    cfg.stage_blocks = {1, 1};
    ResNet<float> a(cfg, 1), b(cfg, 2);
    b.import_state(a.export_state());
    const auto sa = a.export_state(), sb = b.export_state();
    for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa[i].values == sb[i].values);
    CHECK(sa.front().name == "stem.conv.weight");

    testing::TempDir dir("nn");
    Checkpoint ck{"{\"k\":1}", sa};
    write_checkpoint(ck, dir / "m.ignw");
    const auto back = read_checkpoint(dir / "m.ignw");
    CHECK(back.metadata == ck.metadata);
    REQUIRE(back.tensors.size() == sa.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
      CHECK(back.tensors[i].name == sa[i].name);
      CHECK(back.tensors[i].shape == sa[i].shape);
      CHECK(back.tensors[i].values == sa[i].values);
    }
    const auto bytes = testing::slurp(dir / "m.ignw");
    CHECK(bytes.substr(0, 4) == "IGNW");
    testing::spit(dir / "bad.ignw", "XXXX" + bytes.substr(4));
    CHECK_THROWS_AS(read_checkpoint(dir / "bad.ignw"), CheckpointError);
    testing::spit(dir / "short.ignw", bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_checkpoint(dir / "short.ignw"), CheckpointError);

    auto missing = sa;
    missing.pop_back();
    CHECK_THROWS_AS(b.import_state(missing), std::invalid_argument);
  }
}
