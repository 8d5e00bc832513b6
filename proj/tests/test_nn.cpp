#include <catch2/catch_amalgamated.hpp>

#include "across/mesh.hpp"
#include "across/nn.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace across;
using namespace across::nn;

namespace {

// Resamples until no ReLU pre-activation sits within `margin` of the kink,
// so finite differences stay clean.
Mat<double> relu_safe_input(DenseLayer<double>& layer, ParamStore<double>& ps, Eigen::Index rows,
                            std::uint64_t seed, double margin = 1e-3) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    Mat<double> x = testsup::random_matrix(rows, layer.in, seed + attempt * 1000);
    layer.forward(ps, x, true);
    if (layer.z_cache.cwiseAbs().minCoeff() > margin) return x;
  }
  FAIL("could not find kink-free input");
  return {};
}

}  // namespace

TEST_CASE("dense layer basics") {
  Rng rng(1);
  ParamStore<double> ps;
  DenseLayer<double> layer;
  layer.init(ps, "lin", 4, 4, Act::none, rng);
  ps.mat("lin.w").setIdentity();

  Mat<double> x = testsup::random_matrix(3, 4, 2);
  auto y = layer.forward(ps, x, false);
  CHECK((y - x).cwiseAbs().maxCoeff() < 1e-15);  // W = I, b = 0

  Mat<double> z(1, 2);
  z << -1.0, 2.0;
  auto r = act_apply(Act::relu, z);
  CHECK(r(0, 0) == 0.0);
  CHECK(r(0, 1) == 2.0);
}

TEST_CASE("dense layer gradients match finite differences") {
  for (auto act : {Act::none, Act::relu, Act::elu, Act::tanh}) {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
      Rng rng(seed);
      ParamStore<double> ps;
      DenseLayer<double> layer;
      layer.init(ps, "lin", 5, 4, act, rng);
      Mat<double> x = act == Act::relu ? relu_safe_input(layer, ps, 3, seed * 7)
                                       : testsup::random_matrix(3, 5, seed * 7);
      Mat<double> target = testsup::random_matrix(3, 4, seed * 13);

      auto loss = [&] { return mse(target, layer.forward(ps, x, true)); };
      Eigen::MatrixXd dx;
      auto grads = [&] {
        ps.zero_grad();
        auto y = layer.forward(ps, x, true);
        dx = layer.backward(ps, mse_grad(target, y));
      };
      auto report = gradcheck::check_param_gradients(ps, loss, grads);
      INFO(report.worst);
      CHECK(report.max_rel_err < 1e-4);
      CHECK(gradcheck::check_input_gradient(x, dx, loss) < 1e-4);
    }
  }
}

TEST_CASE("graph conv layer: identity and linearity") {
  auto m = testsup::random_mesh(6, 3);
  auto L = mesh::build_cheb_basis(mesh::build_laplacian(6, m.triangles), 1);
  Eigen::SparseMatrix<double> lt = L.scaled;

  Rng rng(4);
  ParamStore<double> ps;
  GraphConvLayer<double> conv;
  conv.init(ps, "gc", &lt, 1, 3, 3, Act::none, rng);
  // K=1, W_0 = I, b = 0 -> identity.
  MatMap<double> w0(ps.at("gc.w").value.data(), 3, 3);
  w0.setIdentity();
  Mat<double> x = testsup::random_matrix(6, 3, 5);
  auto y = conv.forward(ps, x, 1, false);
  CHECK((y - x).cwiseAbs().maxCoeff() < 1e-15);

  // Superposition with act=none, b=0.
  ParamStore<double> ps2;
  GraphConvLayer<double> conv2;
  conv2.init(ps2, "gc", &lt, 1, 3, 3, Act::none, rng);
  Mat<double> x2 = testsup::random_matrix(6, 3, 6);
  auto sum = conv2.forward(ps2, x + x2, 1, false);
  auto split = conv2.forward(ps2, x, 1, false) + conv2.forward(ps2, x2, 1, false);
  CHECK((sum - split).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("graph conv gradients match finite differences") {
  for (int order : {1, 3, 6}) {
    for (std::uint64_t seed : {1ull, 2ull}) {
      auto m = testsup::random_mesh(6, seed + 40);
      auto basis = mesh::build_cheb_basis(mesh::build_laplacian(6, m.triangles), order);
      Eigen::SparseMatrix<double> lt = basis.scaled;

      Rng rng(seed);
      ParamStore<double> ps;
      GraphConvLayer<double> conv;
      conv.init(ps, "gc", &lt, order, 3, 4, Act::elu, rng);

      const int batch = 2;
      Mat<double> x = testsup::random_matrix(6 * batch, 3, seed * 101);
      Mat<double> target = testsup::random_matrix(6 * batch, 4, seed * 57);

      auto loss = [&] { return mse(target, conv.forward(ps, x, batch, true)); };
      Eigen::MatrixXd dx;
      auto grads = [&] {
        ps.zero_grad();
        auto y = conv.forward(ps, x, batch, true);
        dx = conv.backward(ps, mse_grad(target, y));
      };
      auto report = gradcheck::check_param_gradients(ps, loss, grads);
      INFO("order " << order << ": " << report.worst);
      CHECK(report.max_rel_err < 1e-4);
      CHECK(gradcheck::check_input_gradient(x, dx, loss) < 1e-4);
    }
  }
}

TEST_CASE("graph conv batched forward equals per-sample forward") {
  auto m = testsup::random_mesh(7, 70);
  auto basis = mesh::build_cheb_basis(mesh::build_laplacian(7, m.triangles), 4);
  Eigen::SparseMatrix<double> lt = basis.scaled;
  Rng rng(8);
  ParamStore<double> ps;
  GraphConvLayer<double> conv;
  conv.init(ps, "gc", &lt, 4, 2, 3, Act::tanh, rng);
  Mat<double> xa = testsup::random_matrix(7, 2, 91);
  Mat<double> xb = testsup::random_matrix(7, 2, 92);
  Mat<double> stacked(14, 2);
  stacked << xa, xb;
  auto y = conv.forward(ps, stacked, 2, false);
  auto ya = conv.forward(ps, xa, 1, false);
  auto yb = conv.forward(ps, xb, 1, false);
  CHECK((y.topRows(7) - ya).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((y.bottomRows(7) - yb).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("graph conv agrees with the standalone chebyshev op") {
  auto m = testsup::random_mesh(8, 21);
  auto basis = mesh::build_cheb_basis(mesh::build_laplacian(8, m.triangles), 3);
  Eigen::SparseMatrix<double> lt = basis.scaled;
  Rng rng(2);
  ParamStore<double> ps;
  GraphConvLayer<double> conv;
  conv.init(ps, "gc", &lt, 3, 2, 5, Act::none, rng);
  Mat<double> x = testsup::random_matrix(8, 2, 3);
  std::vector<Eigen::MatrixXd> w;
  for (int k = 0; k < 3; ++k)
    w.push_back(ConstMatMap<double>(ps.at("gc.w").value.data() + k * 10, 2, 5));
  auto expect = mesh::chebyshev_apply(basis, x, w);
  auto y = conv.forward(ps, x, 1, false);
  CHECK((y - expect).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("dropout") {
  Mat<float> x = Mat<float>::Ones(100, 1000);

  SECTION("rate 0 is identity in both modes") {
    CHECK((dropout(x, 0.0, true, 1) - x).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((dropout(x, 0.0, false, 1) - x).cwiseAbs().maxCoeff() == 0.0f);
  }
  SECTION("eval mode is identity at any rate") {
    CHECK((dropout(x, 0.5, false, 1) - x).cwiseAbs().maxCoeff() == 0.0f);
  }
  SECTION("train mode statistics at rate 0.5") {
    auto y = dropout(x, 0.5, true, 99);
    double survivors = 0.0;
    for (Eigen::Index c = 0; c < y.cols(); ++c)
      for (Eigen::Index r = 0; r < y.rows(); ++r)
        if (y(r, c) != 0.0f) ++survivors;
    double frac = survivors / static_cast<double>(x.size());
    CHECK(std::abs(frac - 0.5) < 0.01);
    double mean = y.template cast<double>().mean();
    CHECK(std::abs(mean - 1.0) < 0.02);  // inverted dropout preserves E[x]
  }
  SECTION("backward scales by the stored mask") {
    Rng rng(5);
    DropoutLayer<double> layer;
    layer.rate = 0.3;
    Mat<double> in = testsup::random_matrix(4, 6, 11);
    auto out = layer.forward(in, true, rng);
    Mat<double> dy = testsup::random_matrix(4, 6, 12);
    auto dx = layer.backward(dy);
    // FMA contraction can differ between the two evaluation sites.
    CHECK((dx - dy.cwiseProduct(layer.mask)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((out - in.cwiseProduct(layer.mask)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("reparameterize") {
  SECTION("vanishing variance collapses to mu") {
    Mat<double> mu = testsup::random_matrix(2, 8, 1);
    Mat<double> lv = Mat<double>::Constant(2, 8, -50.0);
    auto s = reparameterize(mu, lv, std::uint64_t{7});
    CHECK((s - mu).cwiseAbs().maxCoeff() < 1e-9);
  }
  SECTION("recorded noise reproduces the sample exactly") {
    Mat<double> mu = Mat<double>::Zero(3, 4);
    Mat<double> lv = testsup::random_matrix(3, 4, 2);
    Rng rng(3);
    ReparamCache<double> cache;
    auto s = reparameterize(mu, lv, rng, &cache);
    CHECK((s - cache.sd.cwiseProduct(cache.eps)).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("moments of the standard sampler") {
    Mat<double> mu = Mat<double>::Zero(1, 100000);
    Mat<double> lv = Mat<double>::Zero(1, 100000);
    auto s = reparameterize(mu, lv, std::uint64_t{12345});
    double mean = s.mean();
    double var = (s.array() - mean).square().mean();
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.02);
  }
  SECTION("gradients flow to mu and log_var") {
    ParamStore<double> ps;
    auto& mu_t = ps.add("mu", {2, 3});
    auto& lv_t = ps.add("lv", {2, 3});
    Rng init(9);
    for (Eigen::Index i = 0; i < 6; ++i) {
      mu_t.value[i] = init.uniform(-1, 1);
      lv_t.value[i] = init.uniform(-1, 1);
    }
    Mat<double> target = testsup::random_matrix(2, 3, 31);
    auto loss = [&] {
      Rng rng(42);  // fixed noise across evaluations
      Mat<double> mu = ps.mat("mu"), lv = ps.mat("lv");
      return mse(target, reparameterize(mu, lv, rng));
    };
    auto grads = [&] {
      ps.zero_grad();
      Rng rng(42);
      Mat<double> mu = ps.mat("mu"), lv = ps.mat("lv");
      ReparamCache<double> cache;
      auto s = reparameterize(mu, lv, rng, &cache);
      Mat<double> ds = mse_grad(target, s);
      Mat<double> dmu = Mat<double>::Zero(2, 3), dlv = Mat<double>::Zero(2, 3);
      reparameterize_backward(cache, ds, dmu, dlv);
      ps.grad_mat("mu") += dmu;
      ps.grad_mat("lv") += dlv;
    };
    auto report = gradcheck::check_param_gradients(ps, loss, grads);
    INFO(report.worst);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("kl divergence") {
  SECTION("prior equals posterior") {
    Mat<double> z = Mat<double>::Zero(4, 6);
    CHECK(kl_gaussian(z, z) == 0.0);
  }
  SECTION("closed form single dimension") {
    Mat<double> mu = Mat<double>::Constant(1, 1, 1.0);
    Mat<double> lv = Mat<double>::Zero(1, 1);
    CHECK(kl_gaussian(mu, lv) == Catch::Approx(0.5));
  }
  SECTION("matches quadrature oracle") {
    Mat<double> mu = testsup::random_matrix(1, 5, 3);
    Mat<double> lv = testsup::random_matrix(1, 5, 4, 0.5);
    double expect = 0.0;
    for (int d = 0; d < 5; ++d) expect += oracles::kl_quadrature_1d(mu(0, d), lv(0, d));
    CHECK(kl_gaussian(mu, lv) == Catch::Approx(expect).epsilon(1e-6));
  }
  SECTION("non-negative on random batches") {
    for (std::uint64_t s : {1ull, 2ull, 3ull, 4ull}) {
      Mat<double> mu = testsup::random_matrix(8, 16, s);
      Mat<double> lv = testsup::random_matrix(8, 16, s + 100, 0.7);
      CHECK(kl_gaussian(mu, lv) >= -1e-9);
    }
  }
  SECTION("gradient matches finite differences") {
    ParamStore<double> ps;
    auto& mu_t = ps.add("mu", {3, 4});
    auto& lv_t = ps.add("lv", {3, 4});
    Rng init(17);
    for (Eigen::Index i = 0; i < 12; ++i) {
      mu_t.value[i] = init.uniform(-1, 1);
      lv_t.value[i] = init.uniform(-1, 1);
    }
    auto loss = [&] {
      Mat<double> mu = ps.mat("mu"), lv = ps.mat("lv");
      return kl_gaussian(mu, lv);
    };
    auto grads = [&] {
      ps.zero_grad();
      Mat<double> mu = ps.mat("mu"), lv = ps.mat("lv");
      Mat<double> dmu = Mat<double>::Zero(3, 4), dlv = Mat<double>::Zero(3, 4);
      kl_gaussian_grad(mu, lv, 1.0, dmu, dlv);
      ps.grad_mat("mu") += dmu;
      ps.grad_mat("lv") += dlv;
    };
    auto report = gradcheck::check_param_gradients(ps, loss, grads);
    INFO(report.worst);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("vae and projection losses") {
  SECTION("perfect reconstruction with prior latents is zero") {
    Mat<double> x = testsup::random_matrix(3, 7, 1);
    Mat<double> z = Mat<double>::Zero(3, 2);
    CHECK(vae_loss(x, x, z, z, 0.005) == 0.0);
  }
  SECTION("beta 0 is pure mse") {
    Mat<double> x = testsup::random_matrix(3, 7, 1);
    Mat<double> xh = testsup::random_matrix(3, 7, 2);
    Mat<double> mu = testsup::random_matrix(3, 2, 3);
    Mat<double> lv = testsup::random_matrix(3, 2, 4);
    CHECK(vae_loss(x, xh, mu, lv, 0.0) == Catch::Approx(mse(x, xh)));
  }
  SECTION("hand-computed small case") {
    Mat<double> x(1, 2), xh(1, 2), mu(1, 1), lv(1, 1);
    x << 1.0, 2.0;
    xh << 1.5, 1.0;
    mu << 0.5;
    lv << -0.2;
    double mse_hand = (0.5 * 0.5 + 1.0 * 1.0) / 2.0;
    double kl_hand = -0.5 * (1.0 + (-0.2) - 0.25 - std::exp(-0.2));
    CHECK(vae_loss(x, xh, mu, lv, 0.1) == Catch::Approx(mse_hand + 0.1 * kl_hand).epsilon(1e-7));
  }
  SECTION("projection loss") {
    Mat<double> z = testsup::random_matrix(4, 8, 5);
    CHECK(projection_loss(z, z) == 0.0);
    Mat<double> shifted = z.array() + 1.0;
    CHECK(projection_loss(shifted, z) == Catch::Approx(1.0));
    Mat<double> other = testsup::random_matrix(4, 8, 6);
    double brute = 0.0;
    for (Eigen::Index c = 0; c < 8; ++c)
      for (Eigen::Index r = 0; r < 4; ++r) brute += std::pow(z(r, c) - other(r, c), 2);
    brute /= 32.0;
    CHECK(projection_loss(z, other) == Catch::Approx(brute).epsilon(1e-9));
    Mat<double> wrong(4, 7);
    CHECK_THROWS_AS(projection_loss(z, wrong), Error);
  }
}

TEST_CASE("adam") {
  SECTION("zero gradient leaves parameters unchanged") {
    ParamStore<float> ps;
    auto& t = ps.add("p", {2, 2});
    t.value << 1.0f, 2.0f, 3.0f, 4.0f;
    ps.zero_grad();
    ps.note_grad_write();
    Vec<float> before = t.value;
    adam_step(ps, 0.1, 1);
    CHECK((t.value - before).cwiseAbs().maxCoeff() == 0.0f);
  }
  SECTION("first step with unit gradient moves by ~lr") {
    ParamStore<double> ps;
    auto& t = ps.add("p", {1, 1});
    t.value[0] = 0.7;
    ps.zero_grad();
    t.grad[0] = 1.0;
    ps.note_grad_write();
    adam_step(ps, 0.01, 1);
    CHECK(t.value[0] == Catch::Approx(0.7 - 0.01).epsilon(1e-6));
  }
  SECTION("lr 0 is the identity") {
    ParamStore<double> ps;
    auto& t = ps.add("p", {1, 3});
    t.value << 1.0, -2.0, 0.5;
    ps.zero_grad();
    t.grad << 0.3, -0.7, 2.0;
    ps.note_grad_write();
    adam_step(ps, 0.0, 1);
    CHECK(t.value[0] == 1.0);
    CHECK(t.value[1] == -2.0);
    CHECK(t.value[2] == 0.5);
  }
  SECTION("three steps on a scalar quadratic match the reference trace") {
    ParamStore<double> ps;
    auto& t = ps.add("theta", {1, 1});
    t.value[0] = 1.0;
    oracles::ScalarAdamOracle oracle;
    double theta_ref = 1.0;
    for (int step = 1; step <= 3; ++step) {
      double grad = t.value[0];  // d/dtheta of theta^2/2
      ps.zero_grad();
      t.grad[0] = grad;
      ps.note_grad_write();
      adam_step(ps, 0.1, step);
      theta_ref = oracle.step(theta_ref, theta_ref, 0.1);
      CHECK(std::abs(t.value[0] - theta_ref) < 1e-12);
    }
  }
  SECTION("requires accumulated gradients") {
    ParamStore<double> ps;
    ps.add("p", {1, 1});
    ps.zero_grad();
    CHECK_THROWS_MATCHES(adam_step(ps, 0.1, 1), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == Errc::uninitialized_gradient;
                         }));
  }
}

namespace {

template <class S>
struct ToyRegression {
  ParamStore<S> ps;
  DenseLayer<S> layer;

  ToyRegression(int in, int out, std::uint64_t seed) {
    Rng rng(seed);
    layer.init(ps, "lin", in, out, Act::none, rng);
  }
  ParamStore<S>& params() { return ps; }
  double train_step(const Mat<S>& x, const Mat<S>& y, Rng&) {
    auto pred = layer.forward(ps, x, true);
    double loss = mse(y, pred);
    layer.backward(ps, mse_grad(y, pred));
    return loss;
  }
  double eval_loss(const Mat<S>& x, const Mat<S>& y) {
    return mse(y, layer.forward(ps, x, false));
  }
};

}  // namespace

TEST_CASE("train_loop stopping and decay contracts") {
  ToyRegression<float> model(3, 2, 1);
  DenseBatcher<float> data;
  data.x = testsup::random_matrix(32, 3, 2).cast<float>();
  data.y = testsup::random_matrix(32, 2, 3).cast<float>();
  DenseBatcher<float> val = data;

  SECTION("patience 0 stops one epoch after the first non-improvement") {
    TrainConfig cfg;
    cfg.learning_rate = 1e-25;  // updates vanish in f32, so val never improves after epoch 1
    cfg.max_epochs = 5;
    cfg.early_stop_patience = 0;
    cfg.batch_size = 8;
    auto result = train_loop<float>(model, data, val, cfg);
    CHECK(result.history.size() == 2);
    CHECK(result.best_epoch == 1);
  }
  SECTION("geometric decay") {
    TrainConfig cfg;
    cfg.learning_rate = 0.001;
    cfg.lr_decay_per_epoch = 0.99;
    cfg.max_epochs = 2;
    cfg.early_stop_patience = 10;
    cfg.batch_size = 8;
    auto result = train_loop<float>(model, data, val, cfg);
    REQUIRE(result.history.size() == 2);
    CHECK(result.history[0].lr == Catch::Approx(0.001));
    CHECK(result.history[1].lr == Catch::Approx(0.00099));
    CHECK(result.lr_after == Catch::Approx(0.0009801));
  }
}

TEST_CASE("train_loop converges to the least-squares solution") {
  // Noisy linear data; compare against the normal-equations solution.
  Eigen::MatrixXd x = testsup::random_matrix(64, 3, 10);
  Eigen::MatrixXd w_true = testsup::random_matrix(3, 2, 11);
  Eigen::MatrixXd noise = testsup::random_matrix(64, 2, 12, 0.01);
  Eigen::MatrixXd y = x * w_true + noise;
  Eigen::MatrixXd xh(64, 4);
  xh << x, Eigen::VectorXd::Ones(64);
  Eigen::MatrixXd beta = (xh.transpose() * xh).ldlt().solve(xh.transpose() * y);

  ToyRegression<double> model(3, 2, 21);
  DenseBatcher<double> data{x, y};
  DenseBatcher<double> val = data;
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.lr_decay_per_epoch = 0.98;
  cfg.max_epochs = 200;
  cfg.early_stop_patience = 200;
  cfg.batch_size = 16;
  cfg.seed = 5;
  auto result = train_loop<double>(model, data, val, cfg);
  CHECK(result.history.size() <= 200);

  Eigen::MatrixXd w_learned = model.ps.mat("lin.w");
  Eigen::MatrixXd b_learned = model.ps.mat("lin.b");
  CHECK((w_learned - beta.topRows(3)).cwiseAbs().maxCoeff() < 1e-3);
  CHECK((b_learned.row(0) - beta.row(3)).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("train_loop rejects empty splits and diverged losses") {
  ToyRegression<float> model(2, 1, 3);
  DenseBatcher<float> empty;
  empty.x.resize(0, 2);
  empty.y.resize(0, 1);
  DenseBatcher<float> data;
  data.x = testsup::random_matrix(8, 2, 1).cast<float>();
  data.y = testsup::random_matrix(8, 1, 2).cast<float>();
  TrainConfig cfg;
  CHECK_THROWS_MATCHES((train_loop<float>(model, empty, data, cfg)), Error,
                       Catch::Matchers::Predicate<Error>(
                           [](const Error& e) { return e.code() == Errc::empty_dataset; }));

  TrainConfig wild;
  wild.learning_rate = 1e38;  // one Adam step saturates f32, next forward overflows
  wild.max_epochs = 50;
  wild.batch_size = 8;
  DenseBatcher<float> spiky = data;
  spiky.x(0, 0) = 1e5f;
  ToyRegression<float> doomed(2, 1, 4);
  CHECK_THROWS_MATCHES((train_loop<float>(doomed, spiky, spiky, wild)), Error,
                       Catch::Matchers::Predicate<Error>(
                           [](const Error& e) { return e.code() == Errc::diverged_loss; }));
}

TEST_CASE("training is reproducible given the seed") {
  auto run = [] {
    ToyRegression<float> model(3, 2, 77);
    DenseBatcher<float> data;
    data.x = testsup::random_matrix(24, 3, 5).cast<float>();
    data.y = testsup::random_matrix(24, 2, 6).cast<float>();
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.max_epochs = 5;
    cfg.batch_size = 8;
    cfg.seed = 9;
    train_loop<float>(model, data, data, cfg);
    return checkpoint_to_bytes(model.ps);
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip, scalars, and corruption detection") {
  Rng rng(6);
  ParamStore<float> ps;
  DenseLayer<float> layer;
  layer.init(ps, "lin", 3, 2, Act::tanh, rng);
  ps.at("lin.w").adam_m = Vec<float>::Constant(6, 0.25f);
  ps.at("lin.w").adam_v = Vec<float>::Constant(6, 0.125f);

  auto bytes = checkpoint_to_bytes(ps, {{"epoch", 7.0}, {"lr", 0.5}});
  auto raw = checkpoint_parse(bytes);
  CHECK(raw.count("lin.w") == 1);
  CHECK(raw.count("adam.m:lin.w") == 1);

  ParamStore<float> ps2;
  DenseLayer<float> layer2;
  Rng rng2(1234);
  layer2.init(ps2, "lin", 3, 2, Act::tanh, rng2);
  checkpoint_into_store(raw, ps2);
  CHECK((ps2.at("lin.w").value - ps.at("lin.w").value).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((ps2.at("lin.w").adam_m - ps.at("lin.w").adam_m).cwiseAbs().maxCoeff() == 0.0f);
  auto scalars = checkpoint_scalars(raw);
  CHECK(scalars.at("epoch") == 7.0);
  CHECK(scalars.at("lr") == 0.5);

  auto corrupted = bytes;
  corrupted[bytes.size() / 2] ^= 0x5A;
  CHECK_THROWS_AS(checkpoint_parse(corrupted), Error);

  // Missing tensor.
  ParamStore<float> ps3;
  DenseLayer<float> l3;
  Rng rng3(5);
  l3.init(ps3, "other", 3, 2, Act::none, rng3);
  CHECK_THROWS_MATCHES(checkpoint_into_store(raw, ps3), Error,
                       Catch::Matchers::Predicate<Error>(
                           [](const Error& e) { return e.code() == Errc::missing_checkpoint; }));
}

TEST_CASE("param hash is order and value sensitive") {
  Rng rng(3);
  ParamStore<float> a, b;
  DenseLayer<float> la, lb;
  la.init(a, "x", 2, 2, Act::none, rng);
  Rng rng2(3);
  lb.init(b, "x", 2, 2, Act::none, rng2);
  CHECK(param_hash(a) == param_hash(b));
  b.at("x.w").value[0] += 1.0f;
  CHECK(param_hash(a) != param_hash(b));
}
