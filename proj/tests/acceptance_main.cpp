// Acceptance suite: runs every acceptance criterion and prints one
// PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

#include <chrono>
#include <cstdlib>
#include <iostream>

#include "across/run.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace across;
using Clock = std::chrono::steady_clock;

namespace {

struct Harness {
  int failures = 0;

  void record(int id, const std::string& name, bool pass, const std::string& detail) {
    std::cout << "CRITERION " << id << ": " << (pass ? "PASS" : "FAIL") << " - " << name;
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << std::endl;
    if (!pass) ++failures;
  }
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(ACROSS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  return WEXITSTATUS(std::system(cmd.c_str()));
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness on >= 20 seeds per layer/loss
// ---------------------------------------------------------------------------

double check_dense(std::uint64_t seed, nn::Act act) {
  Rng rng(seed);
  nn::ParamStore<double> ps;
  nn::DenseLayer<double> layer;
  layer.init(ps, "l", 5, 4, act, rng);
  nn::Mat<double> x;
  for (int attempt = 0;; ++attempt) {
    x = testsup::random_matrix(3, 5, seed * 7 + 1000 * static_cast<std::uint64_t>(attempt));
    layer.forward(ps, x, true);
    if (act != nn::Act::relu || layer.z_cache.cwiseAbs().minCoeff() > 1e-3) break;
  }
  nn::Mat<double> target = testsup::random_matrix(3, 4, seed * 13);
  auto loss = [&] { return nn::mse(target, layer.forward(ps, x, true)); };
  auto grads = [&] {
    ps.zero_grad();
    auto y = layer.forward(ps, x, true);
    layer.backward(ps, nn::mse_grad(target, y));
  };
  return gradcheck::check_param_gradients(ps, loss, grads).max_rel_err;
}

double check_graphconv(std::uint64_t seed, int order) {
  auto m = testsup::random_mesh(6, seed + 40);
  auto basis = mesh::build_cheb_basis(mesh::build_laplacian(6, m.triangles), order);
  Eigen::SparseMatrix<double> lt = basis.scaled;
  Rng rng(seed);
  nn::ParamStore<double> ps;
  nn::GraphConvLayer<double> conv;
  conv.init(ps, "g", &lt, order, 3, 4, nn::Act::elu, rng);
  nn::Mat<double> x = testsup::random_matrix(12, 3, seed * 101);
  nn::Mat<double> target = testsup::random_matrix(12, 4, seed * 57);
  auto loss = [&] { return nn::mse(target, conv.forward(ps, x, 2, true)); };
  auto grads = [&] {
    ps.zero_grad();
    auto y = conv.forward(ps, x, 2, true);
    conv.backward(ps, nn::mse_grad(target, y));
  };
  return gradcheck::check_param_gradients(ps, loss, grads).max_rel_err;
}

double check_reparam(std::uint64_t seed) {
  nn::ParamStore<double> ps;
  auto& mu_t = ps.add("mu", {2, 3});
  auto& lv_t = ps.add("lv", {2, 3});
  Rng init(seed);
  for (Eigen::Index i = 0; i < 6; ++i) {
    mu_t.value[i] = init.uniform(-1, 1);
    lv_t.value[i] = init.uniform(-1, 1);
  }
  nn::Mat<double> target = testsup::random_matrix(2, 3, seed + 31);
  auto loss = [&] {
    Rng rng(seed + 42);
    nn::Mat<double> mu = ps.mat("mu"), lv = ps.mat("lv");
    return nn::mse(target, nn::reparameterize(mu, lv, rng));
  };
  auto grads = [&] {
    ps.zero_grad();
    Rng rng(seed + 42);
    nn::Mat<double> mu = ps.mat("mu"), lv = ps.mat("lv");
    nn::ReparamCache<double> cache;
    auto s = nn::reparameterize(mu, lv, rng, &cache);
    nn::Mat<double> dmu = nn::Mat<double>::Zero(2, 3), dlv = nn::Mat<double>::Zero(2, 3);
    nn::reparameterize_backward(cache, nn::mse_grad(target, s), dmu, dlv);
    ps.grad_mat("mu") += dmu;
    ps.grad_mat("lv") += dlv;
  };
  return gradcheck::check_param_gradients(ps, loss, grads).max_rel_err;
}

double check_kl(std::uint64_t seed) {
  nn::ParamStore<double> ps;
  auto& mu_t = ps.add("mu", {3, 4});
  auto& lv_t = ps.add("lv", {3, 4});
  Rng init(seed);
  for (Eigen::Index i = 0; i < 12; ++i) {
    mu_t.value[i] = init.uniform(-1, 1);
    lv_t.value[i] = init.uniform(-1, 1);
  }
  auto loss = [&] {
    nn::Mat<double> mu = ps.mat("mu"), lv = ps.mat("lv");
    return nn::kl_gaussian(mu, lv);
  };
  auto grads = [&] {
    ps.zero_grad();
    nn::Mat<double> mu = ps.mat("mu"), lv = ps.mat("lv");
    nn::Mat<double> dmu = nn::Mat<double>::Zero(3, 4), dlv = nn::Mat<double>::Zero(3, 4);
    nn::kl_gaussian_grad(mu, lv, 1.0, dmu, dlv);
    ps.grad_mat("mu") += dmu;
    ps.grad_mat("lv") += dlv;
  };
  return gradcheck::check_param_gradients(ps, loss, grads).max_rel_err;
}

double check_signal_vae_loss(std::uint64_t seed) {
  models::ModelSpec spec = models::ModelSpec::defaults(models::ModelKind::svb);
  spec.layer_sizes = {8, 6};
  spec.latent_dim = 4;
  spec.hidden_activation = nn::Act::elu;
  models::SignalVae<double> vae(spec, seed);
  nn::Mat<double> x = testsup::random_matrix(3, 19, seed + 4, 0.5);
  auto loss = [&] {
    Rng rng(seed + 11);
    return vae.train_step(x, x, rng);
  };
  auto grads = [&] {
    vae.params().zero_grad();
    Rng rng(seed + 11);
    vae.train_step(x, x, rng);
  };
  return gradcheck::check_param_gradients(vae.params(), loss, grads).max_rel_err;
}

double check_mesh_vae_loss(std::uint64_t seed) {
  auto g = testsup::grid_mesh(4, 4);
  mesh::MeshTopology topo(g.positions, g.triangles);
  mesh::build_pooling_hierarchy(topo, 2, 2);
  models::ModelSpec spec = models::ModelSpec::defaults(models::ModelKind::mvd);
  spec.conv_channels = {3, 4};
  spec.kernel_size = 3;
  spec.dense_size = 12;
  spec.latent_dim = 5;
  spec.hidden_activation = nn::Act::elu;
  models::MeshVae<double> vae(spec, &topo, seed);
  nn::Mat<double> x = testsup::random_matrix(32, 3, seed + 10, 0.5);
  auto loss = [&] {
    Rng rng(seed + 21);
    return vae.train_step(x, x, rng);
  };
  auto grads = [&] {
    vae.params().zero_grad();
    Rng rng(seed + 21);
    vae.train_step(x, x, rng);
  };
  return gradcheck::check_param_gradients(vae.params(), loss, grads).max_rel_err;
}

double check_projection_loss(std::uint64_t seed) {
  models::ModelSpec spec = models::ModelSpec::defaults(models::ModelKind::s2mpn);
  spec.layer_sizes = {9, 7};
  spec.dropout_rates = {0.3, 0.2};
  spec.output_dim = 6;
  spec.latent_dim = 6;
  models::ProjectionMlp<double> proj(spec, seed);
  nn::Mat<double> x = testsup::random_matrix(3, 8, seed + 18, 0.8);
  nn::Mat<double> target = testsup::random_matrix(3, 6, seed + 19, 0.8);
  auto loss = [&] {
    Rng rng(seed + 33);
    return proj.train_step(x, target, rng);
  };
  auto grads = [&] {
    proj.params().zero_grad();
    Rng rng(seed + 33);
    proj.train_step(x, target, rng);
  };
  return gradcheck::check_param_gradients(proj.params(), loss, grads).max_rel_err;
}

void criterion_gradients(Harness& h) {
  auto start = Clock::now();
  double worst = 0.0;
  std::string worst_what;
  auto track = [&](const char* what, double err) {
    if (err > worst) {
      worst = err;
      worst_what = what;
    }
  };
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (auto act : {nn::Act::none, nn::Act::relu, nn::Act::elu, nn::Act::tanh})
      track("dense", check_dense(seed, act));
    for (int order : {1, 3, 6}) track("graphconv", check_graphconv(seed, order));
    track("reparameterize", check_reparam(seed));
    track("kl", check_kl(seed));
    track("signal vae loss", check_signal_vae_loss(seed));
    track("mesh vae loss", check_mesh_vae_loss(seed));
    track("projection loss", check_projection_loss(seed));
  }
  double elapsed = seconds_since(start);
  h.record(1, "gradient correctness", worst < 1e-4 && elapsed < 60.0,
           "max rel err " + fmt(worst) + " in " + worst_what + ", " + fmt(elapsed, 3) + " s");
}

// ---------------------------------------------------------------------------
// Criterion 2: spectral oracle
// ---------------------------------------------------------------------------

void criterion_spectral(Harness& h) {
  double worst = 0.0;
  for (int v : {5, 8, 12, 16, 20}) {
    for (int order = 1; order <= 6; ++order) {
      auto m = testsup::random_mesh(v, static_cast<std::uint64_t>(100 * v + order));
      auto lap = mesh::build_laplacian(v, m.triangles);
      auto basis = mesh::build_cheb_basis(lap, order);
      Eigen::MatrixXd x = testsup::random_matrix(v, 3, static_cast<std::uint64_t>(v + order));
      std::vector<Eigen::MatrixXd> w;
      for (int k = 0; k < order; ++k)
        w.push_back(testsup::random_matrix(3, 4, static_cast<std::uint64_t>(10 * v + k)));
      auto y = mesh::chebyshev_apply(basis, x, w);
      auto expect = oracles::cheb_eigen_oracle(Eigen::MatrixXd(lap), 2.0, x, w);
      worst = std::max(worst, (y - expect).cwiseAbs().maxCoeff());
    }
  }
  h.record(2, "spectral oracle", worst < 1e-10, "max abs err " + fmt(worst));
}

// ---------------------------------------------------------------------------
// Criterion 3: closed-form unit values
// ---------------------------------------------------------------------------

void criterion_closed_form(Harness& h) {
  bool pass = true;
  std::string detail;

  nn::Mat<double> mu = nn::Mat<double>::Constant(1, 1, 1.0);
  nn::Mat<double> lv = nn::Mat<double>::Zero(1, 1);
  if (std::abs(nn::kl_gaussian(mu, lv) - 0.5) > 1e-12) {
    pass = false;
    detail += "KL(1,1) != 0.5; ";
  }

  signal::FrameSeq frames;
  for (double v : {100.0, 200.0}) {
    signal::SignalFrame f;
    f.electrodes.fill(v);
    f.timestamp_index = static_cast<std::int64_t>(frames.size());
    frames.push_back(f);
  }
  auto stats = signal::compute_channel_stats(frames);
  signal::SignalFrame mid;
  mid.electrodes.fill(150.0);
  auto norm = signal::normalize_frame(mid, stats);
  if (std::abs(norm.electrodes[0]) > 1e-12) {
    pass = false;
    detail += "midpoint != 0; ";
  }

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(4, 3), b = Eigen::MatrixXd::Zero(4, 3);
  b(1, 0) = 3.0 / 1000.0;
  b(1, 2) = 4.0 / 1000.0;
  std::vector<bool> only(4, false);
  only[1] = true;
  if (std::abs(metrics::mesh_euclidean_um(b, a, &only) - 5.0) > 1e-9) {
    pass = false;
    detail += "euclidean (3,0,4) != 5 um; ";
  }

  // Learning-rate decay after two epochs from 0.001 at 0.99.
  struct Null {
    nn::ParamStore<float> ps;
    Null() { ps.add("p", {1, 1}); }
    nn::ParamStore<float>& params() { return ps; }
    double train_step(const nn::Mat<float>&, const nn::Mat<float>&, Rng&) {
      ps.note_grad_write();
      return 1.0;
    }
    double eval_loss(const nn::Mat<float>&, const nn::Mat<float>&) { return 1.0; }
  } model;
  nn::DenseBatcher<float> data;
  data.x = nn::Mat<float>::Zero(4, 1);
  data.y = nn::Mat<float>::Zero(4, 0);
  nn::TrainConfig cfg;
  cfg.learning_rate = 0.001;
  cfg.lr_decay_per_epoch = 0.99;
  cfg.max_epochs = 2;
  cfg.early_stop_patience = 10;
  cfg.batch_size = 4;
  auto result = nn::train_loop<float>(model, data, data, cfg);
  if (std::abs(result.lr_after - 0.0009801) > 1e-12) {
    pass = false;
    detail += "lr after 2 epochs != 0.0009801; ";
  }

  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(3, 3), gt = ref;
  gt(0, 0) = 10.0 / 1000.0;  // exactly 10 um
  gt(1, 0) = 9.999 / 1000.0;
  auto mask = metrics::deformation_mask(gt, ref);
  if (!(mask.selected[0] && !mask.selected[1])) {
    pass = false;
    detail += "10 um threshold not inclusive; ";
  }

  h.record(3, "closed-form unit values", pass,
           detail.empty() ? "all five pinned values hold" : detail);
}

// ---------------------------------------------------------------------------
// Criterion 4: architecture conformance
// ---------------------------------------------------------------------------

void criterion_architecture(Harness& h) {
  bool pass = true;
  std::string detail;
  auto expect = [&](bool cond, const std::string& what) {
    if (!cond) {
      pass = false;
      detail += what + "; ";
    }
  };

  auto svb_spec = models::ModelSpec::defaults(models::ModelKind::svb);
  expect(svb_spec.layer_sizes == std::vector<int>{256, 128, 64}, "svb trunk sizes");
  expect(svb_spec.latent_dim == 8, "svb latent");
  expect(svb_spec.beta == 0.005, "svb beta");
  expect(svb_spec.learning_rate == 0.0001, "svb lr");
  expect(svb_spec.lr_decay == 0.99, "svb decay");
  expect(svb_spec.max_epochs == 300, "svb max epochs");
  models::SignalVae<float> svb(svb_spec, 1);
  expect(svb.params().at("enc0.w").shape == std::vector<int>{19, 256}, "svb enc0 shape");
  expect(svb.params().at("enc1.w").shape == std::vector<int>{256, 128}, "svb enc1 shape");
  expect(svb.params().at("enc2.w").shape == std::vector<int>{128, 64}, "svb enc2 shape");
  expect(svb.params().at("mu.w").shape == std::vector<int>{64, 8}, "svb mu head");
  expect(svb.params().at("logvar.w").shape == std::vector<int>{64, 8}, "svb logvar head");
  expect(svb.params().at("dec0.w").shape == std::vector<int>{8, 64}, "svb dec0");
  expect(svb.params().at("dec1.w").shape == std::vector<int>{64, 128}, "svb dec1");
  expect(svb.params().at("dec2.w").shape == std::vector<int>{128, 256}, "svb dec2");
  expect(svb.params().at("out.w").shape == std::vector<int>{256, 19}, "svb out");

  auto g = testsup::grid_mesh(8, 8);
  mesh::MeshTopology topo(g.positions, g.triangles);
  mesh::build_pooling_hierarchy(topo, 4, 2);
  for (auto kind : {models::ModelKind::mvb, models::ModelKind::mvd}) {
    auto spec = models::ModelSpec::defaults(kind);
    expect(spec.conv_channels == std::vector<int>{16, 16, 16, 32}, "mesh conv channels");
    expect(spec.kernel_size == 6, "mesh kernel size");
    expect(spec.pool_factor == 2, "mesh pool factor");
    expect(spec.dense_size == 512, "mesh dense size");
    expect(spec.latent_dim == 128, "mesh latent");
    expect(spec.beta == 0.005, "mesh beta");
    expect(spec.learning_rate == 0.001, "mesh lr");
    expect(spec.lr_decay == 0.99, "mesh decay");
    expect(spec.max_epochs == 300, "mesh max epochs");
    models::MeshVae<float> vae(spec, &topo, 1);
    expect(vae.params().at("enc_conv0.w").shape == std::vector<int>{6, 3, 16}, "mesh enc_conv0");
    expect(vae.params().at("enc_conv1.w").shape == std::vector<int>{6, 16, 16}, "mesh enc_conv1");
    expect(vae.params().at("enc_conv2.w").shape == std::vector<int>{6, 16, 16}, "mesh enc_conv2");
    expect(vae.params().at("enc_conv3.w").shape == std::vector<int>{6, 16, 32}, "mesh enc_conv3");
    expect(vae.params().at("mu.w").shape == std::vector<int>{512, 128}, "mesh mu head");
    expect(vae.params().at("logvar.w").shape == std::vector<int>{512, 128}, "mesh logvar head");
    expect(vae.params().at("out_conv.w").shape == std::vector<int>{6, 16, 3}, "mesh out conv");
  }

  auto s2_spec = models::ModelSpec::defaults(models::ModelKind::s2mpn);
  expect(s2_spec.layer_sizes == std::vector<int>{512, 128, 256, 256}, "s2mpn sizes");
  expect(s2_spec.dropout_rates == std::vector<double>{0.4, 0.3, 0.2, 0.5}, "s2mpn dropout");
  expect(s2_spec.learning_rate == 0.0005, "s2mpn lr");
  expect(s2_spec.input_dim == 8 && s2_spec.output_dim == 128, "s2mpn dims");
  models::ProjectionMlp<float> s2(s2_spec, 1);
  expect(s2.params().at("hidden0.w").shape == std::vector<int>{8, 512}, "s2mpn h0");
  expect(s2.params().at("out.w").shape == std::vector<int>{256, 128}, "s2mpn out");

  auto m2_spec = models::ModelSpec::defaults(models::ModelKind::m2mpn);
  expect(m2_spec.layer_sizes == std::vector<int>{512, 1024, 1024, 256}, "m2mpn sizes");
  expect(m2_spec.dropout_rates == std::vector<double>{0.2, 0.4, 0.0, 0.0}, "m2mpn dropout");
  expect(m2_spec.learning_rate == 0.001, "m2mpn lr");
  expect(m2_spec.input_dim == 128 && m2_spec.output_dim == 128, "m2mpn dims");
  models::ProjectionMlp<float> m2(m2_spec, 1);
  expect(m2.params().at("hidden1.w").shape == std::vector<int>{512, 1024}, "m2mpn h1");
  expect(m2.params().at("out.w").shape == std::vector<int>{256, 128}, "m2mpn out");

  h.record(4, "architecture conformance", pass, detail.empty() ? "specs and shapes match" : detail);
}

// ---------------------------------------------------------------------------
// Criterion 6: renderer properties
// ---------------------------------------------------------------------------

void criterion_renderer(Harness& h) {
  bool pass = true;
  std::string detail;

  for (int k : render::kPyramidKernelSizes) {
    auto kern = render::gaussian_kernel(k);
    double sum = 0.0;
    for (double v : kern) sum += v;
    if (std::abs(sum - 1.0) >= 1e-12) {
      pass = false;
      detail += "kernel " + std::to_string(k) + " not normalized; ";
    }
  }

  auto constant = render::SensorImage::filled(64, 64, 40, 90, 160);
  if (render::pyramid_gaussian_blur(constant).rgb != constant.rgb) {
    pass = false;
    detail += "constant image not a fixed point; ";
  }

  {
    const int n = 61;
    auto img = render::SensorImage::filled(n, n, 0, 0, 0);
    img.at(30, 30, 0) = 255;
    auto ours = render::pyramid_gaussian_blur(img);
    std::vector<double> plane(static_cast<std::size_t>(n) * n, 0.0);
    plane[30 * n + 30] = 255.0;
    for (int k : render::kPyramidKernelSizes) {
      auto k1 = render::gaussian_kernel(k);
      std::vector<double> k2(static_cast<std::size_t>(k) * k);
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c)
          k2[static_cast<std::size_t>(r) * k + c] =
              k1[static_cast<std::size_t>(r)] * k1[static_cast<std::size_t>(c)];
      plane = oracles::conv2d_replicate(plane, n, n, k2, k, k);
    }
    int worst = 0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        int expect = static_cast<int>(std::lround(plane[static_cast<std::size_t>(y) * n + x]));
        worst = std::max(worst, std::abs(static_cast<int>(ours.at(x, y, 0)) - expect));
      }
    if (worst > 1) {
      pass = false;
      detail += "impulse response off by " + std::to_string(worst) + " levels; ";
    }
  }

  {
    auto truth = render::PhotometricTable::default_table();
    std::mt19937_64 gen(5);
    std::normal_distribution<double> dist(0.0, 0.5);
    std::vector<render::PhotometricSample> samples;
    for (int i = 0; i < 30; ++i) {
      render::PhotometricSample s;
      s.nx = dist(gen);
      s.ny = dist(gen);
      for (int c = 0; c < 3; ++c) s.delta_color[c] = truth.delta(c, s.nx, s.ny);
      samples.push_back(s);
    }
    auto fitted = render::fit_photometric(samples);
    double err = (fitted.coeff - truth.coeff).cwiseAbs().maxCoeff();
    if (err > 1e-9) {
      pass = false;
      detail += "photometric recovery err " + fmt(err) + "; ";
    }
  }

  h.record(6, "renderer properties", pass,
           detail.empty() ? "kernels, fixed point, impulse, fit" : detail);
}

// ---------------------------------------------------------------------------
// Criterion 7: drift correction
// ---------------------------------------------------------------------------

void criterion_drift(Harness& h) {
  bool pass = true;
  std::string detail;
  std::mt19937_64 gen(41);
  std::normal_distribution<double> noise(0.0, 0.3);

  signal::FrameSeq frames;
  for (int t = 0; t < 400; ++t) {
    signal::SignalFrame f;
    f.timestamp_index = t;
    f.contact = (t % 13 == 0);
    for (int c = 0; c < signal::kNumElectrodes; ++c) {
      double base = 2550.0 + 6.0 * c;
      double drift = (0.04 + 0.001 * c) * t;
      f.electrodes[static_cast<std::size_t>(c)] =
          base + drift + (f.contact ? -60.0 : 0.0) + noise(gen);
    }
    frames.push_back(f);
  }
  signal::FrameSeq rest(frames.begin(), frames.begin() + 25);
  auto stats = signal::compute_channel_stats(rest);
  auto model = signal::fit_drift(frames, stats);
  auto mad = [&](const signal::FrameSeq& seq) {
    double total = 0.0;
    int n = 0;
    for (const auto& f : seq) {
      if (f.contact) continue;
      for (int c = 0; c < signal::kNumElectrodes; ++c) {
        total += std::abs(f.electrodes[static_cast<std::size_t>(c)] -
                          stats.default_value[static_cast<std::size_t>(c)]);
        ++n;
      }
    }
    return total / n;
  };
  signal::FrameSeq corrected;
  for (const auto& f : frames) corrected.push_back(signal::correct_drift(f, model, stats));
  double before = mad(frames), after = mad(corrected);
  if (!(after < 0.10 * before)) {
    pass = false;
    detail += "deviation reduced only " + fmt(100.0 * (1.0 - after / before), 3) + "%; ";
  }
  auto refit = signal::fit_drift(corrected, stats);
  double max_slope = 0.0;
  for (int c = 0; c < signal::kNumElectrodes; ++c)
    max_slope = std::max(max_slope, std::abs(refit.slope[static_cast<std::size_t>(c)]));
  if (max_slope > 1e-6) {
    pass = false;
    detail += "refit slope " + fmt(max_slope) + "; ";
  }
  h.record(7, "drift correction", pass,
           detail.empty() ? "MAD reduced " + fmt(100.0 * (1.0 - after / before), 3) +
                                "%, refit slope " + fmt(max_slope)
                          : detail);
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism, and criterion 9: split hygiene
// ---------------------------------------------------------------------------

void criteria_determinism_and_splits(Harness& h, const fs::path& scratch) {
  bool pass8 = true;
  std::string detail8;

  auto micro_run = [&](const fs::path& dir) {
    run::CommonOpts opts;
    opts.out = dir;
    opts.seed = 21;
    {
      run::Config cfg =
          run::Config::from_text("trajectories=8\nbiotac_vertices=200\ndigit_vertices=260\n");
      run::cmd_gen_dataset(cfg, opts);
    }
    for (auto kind : {models::ModelKind::svb, models::ModelKind::mvb, models::ModelKind::mvd,
                      models::ModelKind::s2mpn, models::ModelKind::m2mpn}) {
      run::Config cfg = run::Config::from_text("epochs=2\n");
      run::cmd_train(kind, cfg, opts);
    }
    {
      auto rows = synth::manifest_from_csv(io::read_file(dir / "dataset" / "manifest.csv"));
      signal::FrameSeq frames = signal::load_csv(dir / "dataset" / rows.front().signal_path);
      signal::save_csv(dir / "input.csv", frames);
      run::Config cfg = run::Config::from_text("image_width=96\nimage_height=72\n");
      cfg.set("input", (dir / "input.csv").string());
      cfg.set("bundle", dir.string());
      run::CommonOpts copts = opts;
      copts.out = dir / "convert";
      run::cmd_convert(cfg, copts);
    }
    {
      run::Config cfg = run::Config::from_text("image_width=96\nimage_height=72\n");
      cfg.set("bundle", dir.string());
      run::cmd_eval(cfg, opts);
    }
  };

  fs::path a = scratch / "det_a", b = scratch / "det_b";
  micro_run(a);
  micro_run(b);

  auto compare = [&](const fs::path& rel, const char* what) {
    if (io::read_file(a / rel) != io::read_file(b / rel)) {
      pass8 = false;
      detail8 += std::string(what) + " differs; ";
    }
  };
  compare(fs::path("dataset") / "manifest.csv", "manifest");
  for (const char* kind : {"svb", "mvb", "mvd", "s2mpn", "m2mpn"})
    compare(fs::path(kind) / "checkpoint.acrw", kind);
  compare(fs::path("eval") / "report.csv", "report");
  compare(fs::path("convert") / "frame_00000_digit.ppm", "image");
  compare(fs::path("convert") / "index.csv", "convert index");
  h.record(8, "determinism across identical runs", pass8,
           detail8.empty() ? "manifests, checkpoints, reports, images bit-identical" : detail8);

  bool pass9 = true;
  std::string detail9;
  {
    std::vector<int> ids(100);
    std::iota(ids.begin(), ids.end(), 0);
    auto s = synth::split_by_trajectory(ids, 0.15, 0.12, 3);
    if (s.test.size() != 15) {
      pass9 = false;
      detail9 += "test size " + std::to_string(s.test.size()) + " != 15; ";
    }
    std::vector<int> all;
    for (const auto* part : {&s.train, &s.val, &s.test})
      all.insert(all.end(), part->begin(), part->end());
    std::sort(all.begin(), all.end());
    if (all != ids) {
      pass9 = false;
      detail9 += "splits are not a partition; ";
    }
  }
  {
    // Contaminated split must be refused with exit code 5 (CLI-level check).
    fs::path split = a / "dataset" / "splits" / "test.txt";
    auto original = io::read_file(split);
    io::write_file(split, original + "424242\n");
    fs::remove_all(a / "eval");
    int code = run_cli("eval --out " + a.string() + " bundle=" + a.string() +
                       " image_width=96 image_height=72");
    io::write_file(split, original);
    if (code != 5) {
      pass9 = false;
      detail9 += "contaminated eval exited " + std::to_string(code) + " != 5; ";
    }
  }
  h.record(9, "split hygiene", pass9,
           detail9.empty() ? "partition, 15% count, contamination refused" : detail9);
}

// ---------------------------------------------------------------------------
// Criterion 5: desk-scale pipeline
// ---------------------------------------------------------------------------

struct PixelPoint {
  double x = 0, y = 0;
  bool valid = false;
};

PixelPoint image_diff_centroid(const render::SensorImage& img, const render::SensorImage& bg,
                               int threshold) {
  PixelPoint p;
  double wsum = 0.0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      int diff = 0;
      for (int c = 0; c < 3; ++c)
        diff = std::max(diff, std::abs(static_cast<int>(img.at(x, y, c)) -
                                       static_cast<int>(bg.at(x, y, c))));
      if (diff >= threshold) {
        p.x += diff * x;
        p.y += diff * y;
        wsum += diff;
      }
    }
  if (wsum > 0) {
    p.x /= wsum;
    p.y /= wsum;
    p.valid = true;
  }
  return p;
}

void criterion_desk_pipeline(Harness& h, const fs::path& scratch) {
  auto start = Clock::now();
  bool pass = true;
  std::string detail;
  fs::path dir = scratch / "desk";

  run::CommonOpts opts;
  opts.out = dir;
  opts.seed = 1;
  opts.desk_scale = true;

  {
    run::Config cfg;
    run::cmd_gen_dataset(cfg, opts);
  }
  auto rows = synth::manifest_from_csv(io::read_file(dir / "dataset" / "manifest.csv"));
  if (rows.size() != 50u * 9u * 20u) {
    pass = false;
    detail += "manifest rows " + std::to_string(rows.size()) + " != 9000; ";
  }

  // Train all five networks; (a) best val < 50% of epoch-1 val.
  for (auto kind : {models::ModelKind::svb, models::ModelKind::mvb, models::ModelKind::mvd,
                    models::ModelKind::s2mpn, models::ModelKind::m2mpn}) {
    run::Config cfg;
    run::cmd_train(kind, cfg, opts);
    auto history = io::read_file(dir / models::model_kind_name(kind) / "history.csv");
    std::istringstream in(history);
    std::string line;
    std::getline(in, line);  // header
    double first_val = -1.0, best_val = std::numeric_limits<double>::infinity();
    while (std::getline(in, line)) {
      auto cells = split(trim(line), ',');
      if (cells.size() != 4) continue;
      double val = parse_double(cells[2], "history");
      if (first_val < 0) first_val = val;
      best_val = std::min(best_val, val);
    }
    if (!(best_val < 0.5 * first_val)) {
      pass = false;
      detail += std::string(models::model_kind_name(kind)) + " val " + fmt(best_val) +
                " !< 50% of " + fmt(first_val) + "; ";
    }
  }

  auto d = run::load_dataset(dir / "dataset", 0);
  auto test_rows = d.rows_in(run::Split::test);
  if (test_rows.empty()) {
    h.record(5, "desk-scale pipeline", false, "empty test split");
    return;
  }

  // Convert one test trajectory through the command-level path.
  {
    run::Config cfg;
    cfg.set("input", (dir / "dataset" / test_rows.front()->signal_path).string());
    cfg.set("bundle", dir.string());
    run::CommonOpts copts = opts;
    copts.out = dir / "convert";
    copts.desk_scale = false;
    run::cmd_convert(cfg, copts);
    int images = 0;
    for (const auto& e : fs::directory_iterator(dir / "convert"))
      if (e.path().extension() == ".ppm") ++images;
    if (images != 21) {  // rest frame + 20 depths
      pass = false;
      detail += "convert produced " + std::to_string(images) + " images != 21; ";
    }
  }

  // Eval through the command, plus an in-process pass for the sequences.
  {
    run::Config cfg;
    run::cmd_eval(cfg, opts);
  }
  render::RenderConfig rc;
  auto bundle = run::load_bundle(dir, rc);
  auto full = run::load_dataset(dir / "dataset", 0);
  run::SignalTable table(full);
  auto outcome = run::evaluate_bundle(bundle, full, table);

  // (b) MVD reconstruction deformation-region RMSE < 10% of the max depth.
  double mvd_region = outcome.report.rows[2].rmse_region.mean;
  if (!(mvd_region < 0.10 * 2000.0)) {
    pass = false;
    detail += "MVD region RMSE " + fmt(mvd_region) + " um !< 200 um; ";
  } else {
    detail += "MVD region RMSE " + fmt(mvd_region, 4) + " um; ";
  }
  // Desk-scale SVB reconstruction quality.
  double svb_rmse = outcome.report.signal_stats.mean;
  if (!(svb_rmse < 0.15)) {
    pass = false;
    detail += "SVB recon RMSE " + fmt(svb_rmse) + " !< 0.15; ";
  }

  // Rest-state signals must reproduce the background image.
  {
    auto rest = table.rest_for(test_rows.front()->signal_path);
    auto out = models::run_pipeline(bundle, rest);
    double total = 0.0;
    for (std::size_t i = 0; i < out.image.rgb.size(); ++i)
      total += std::abs(static_cast<int>(out.image.rgb[i]) -
                        static_cast<int>(bundle.background.rgb[i]));
    double mean_abs = total / static_cast<double>(out.image.rgb.size());
    if (!(mean_abs <= 2.0)) {
      pass = false;
      detail += "rest image diff " + fmt(mean_abs) + " levels !<= 2; ";
    } else {
      detail += "rest image diff " + fmt(mean_abs, 3) + "; ";
    }
  }

  // (c) end-to-end contact centroid within 10% of image width on >= 90% of
  // single-contact test frames.
  {
    const auto& digit_ref = bundle.digit_topology->reference(0);
    Eigen::VectorXd digit_areas =
        mesh::vertex_areas(digit_ref, bundle.digit_topology->triangles(0));
    const auto& img_cfg = bundle.render_config;
    int usable = 0, within = 0;
    for (const auto* row : full.rows_in(run::Split::test)) {
      Eigen::MatrixXd gt_digit = mesh::load_frame(full.layout.root / row->digit_mesh_path);
      Eigen::VectorXd disp = (gt_digit - digit_ref).rowwise().norm();
      if (disp.maxCoeff() * 1000.0 < metrics::kDeformationThresholdUm) continue;
      Eigen::Vector3d gt_centroid = synth::deformation_centroid(digit_ref, disp, digit_areas);
      double gx = (gt_centroid.x() - img_cfg.center_x_mm) / img_cfg.pixel_pitch_mm +
                  0.5 * img_cfg.width - 0.5;
      double gy = 0.5 * img_cfg.height - 0.5 -
                  (gt_centroid.y() - img_cfg.center_y_mm) / img_cfg.pixel_pitch_mm;

      auto out = models::run_pipeline(bundle, table.frame_for(*row));
      auto px = image_diff_centroid(out.image, bundle.background, 3);
      ++usable;
      if (px.valid && std::hypot(px.x - gx, px.y - gy) < 0.10 * img_cfg.width) ++within;
    }
    double frac = usable > 0 ? static_cast<double>(within) / usable : 0.0;
    if (!(frac >= 0.90)) pass = false;
    detail += "centroid within 10% on " + fmt(100.0 * frac, 4) + "% of " +
              std::to_string(usable) + " frames; ";
  }

  // (d) predicted DIGIT region area non-decreasing in depth for >= 95% of
  // test trajectories.
  {
    int total = 0, monotone = 0;
    for (const auto& [key, areas] : outcome.predicted_region_area) {
      if (areas.size() < 2) continue;
      ++total;
      bool ok = true;
      for (std::size_t i = 1; i < areas.size(); ++i)
        if (areas[i] < areas[i - 1]) ok = false;
      if (ok) ++monotone;
    }
    double frac = total > 0 ? static_cast<double>(monotone) / total : 0.0;
    if (!(frac >= 0.95)) pass = false;
    detail += "area monotone on " + fmt(100.0 * frac, 4) + "% of " + std::to_string(total) +
              " sequences; ";
  }

  double elapsed = seconds_since(start);
  if (!(elapsed < 1800.0)) {
    pass = false;
    detail += "wall time " + fmt(elapsed, 4) + " s !< 1800 s";
  } else {
    detail += "wall " + fmt(elapsed, 4) + " s";
  }
  h.record(5, "desk-scale pipeline", pass, detail);
}

}  // namespace

int main() {
  Harness h;
  fs::path scratch = fs::temp_directory_path() / "across_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  try {
    criterion_gradients(h);
    criterion_spectral(h);
    criterion_closed_form(h);
    criterion_architecture(h);
    criterion_renderer(h);
    criterion_drift(h);
    criteria_determinism_and_splits(h, scratch);
    criterion_desk_pipeline(h, scratch);
  } catch (const std::exception& e) {
    std::cout << "ACCEPTANCE ABORTED: " << e.what() << std::endl;
    return 2;
  }

  std::cout << (h.failures == 0 ? "ALL CRITERIA PASSED"
                                : "FAILURES: " + std::to_string(h.failures))
            << std::endl;
  return h.failures == 0 ? 0 : 1;
}
