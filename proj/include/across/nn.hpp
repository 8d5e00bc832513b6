#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <functional>
#include <map>
#include <numeric>
#include <unordered_map>

#include "across/common.hpp"

// Minimal trainable-network engine with explicit per-layer backward passes:
// dense and Chebyshev graph-convolution layers, inverted dropout,
// reparameterized sampling, the VAE and latent-projection losses, Adam with
// per-epoch learning-rate decay, and an early-stopping training loop.
//
// Everything is templated on the scalar type: training runs in float,
// gradient checks instantiate the same code in double.

namespace across::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

template <class S>
struct Tensor {
  std::vector<int> shape;
  Vec<S> value;
  Vec<S> grad;
  Vec<S> adam_m, adam_v;  // allocated on first optimizer step

  Eigen::Index size() const { return value.size(); }
};

template <class S>
class ParamStore {
 public:
  Tensor<S>& add(const std::string& name, std::vector<int> shape) {
    require(!items_.count(name), Errc::spec_mismatch, "duplicate parameter name " + name);
    Eigen::Index n = 1;
    for (int d : shape) {
      require(d > 0, Errc::shape_mismatch, "bad tensor dim for " + name);
      n *= d;
    }
    Tensor<S> t;
    t.shape = std::move(shape);
    t.value = Vec<S>::Zero(n);
    t.grad = Vec<S>::Zero(n);
    order_.push_back(name);
    return items_.emplace(name, std::move(t)).first->second;
  }

  bool contains(const std::string& name) const { return items_.count(name) != 0; }

  Tensor<S>& at(const std::string& name) {
    auto it = items_.find(name);
    require(it != items_.end(), Errc::spec_mismatch, "unknown parameter " + name);
    return it->second;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = items_.find(name);
    require(it != items_.end(), Errc::spec_mismatch, "unknown parameter " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  void zero_grad() {
    for (auto& name : order_) items_.at(name).grad.setZero();
    grads_written_ = false;
  }

  void note_grad_write() { grads_written_ = true; }
  bool grads_written() const { return grads_written_; }

  Eigen::Index total_params() const {
    Eigen::Index n = 0;
    for (const auto& name : order_) n += items_.at(name).size();
    return n;
  }

  // Matrix views (tensors are flat row-major).
  MatMap<S> mat(const std::string& name) {
    Tensor<S>& t = at(name);
    require(t.shape.size() == 2, Errc::shape_mismatch, name + " is not rank 2");
    return MatMap<S>(t.value.data(), t.shape[0], t.shape[1]);
  }
  ConstMatMap<S> mat(const std::string& name) const {
    const Tensor<S>& t = at(name);
    require(t.shape.size() == 2, Errc::shape_mismatch, name + " is not rank 2");
    return ConstMatMap<S>(t.value.data(), t.shape[0], t.shape[1]);
  }
  MatMap<S> grad_mat(const std::string& name) {
    note_grad_write();
    Tensor<S>& t = at(name);
    require(t.shape.size() == 2, Errc::shape_mismatch, name + " is not rank 2");
    return MatMap<S>(t.grad.data(), t.shape[0], t.shape[1]);
  }

  std::vector<Vec<S>> snapshot_values() const {
    std::vector<Vec<S>> out;
    out.reserve(order_.size());
    for (const auto& name : order_) out.push_back(items_.at(name).value);
    return out;
  }
  void restore_values(const std::vector<Vec<S>>& snap) {
    require(snap.size() == order_.size(), Errc::shape_mismatch, "snapshot size mismatch");
    for (std::size_t i = 0; i < order_.size(); ++i) items_.at(order_[i]).value = snap[i];
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor<S>> items_;
  bool grads_written_ = false;
};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Act { none, relu, elu, tanh };

inline const char* act_name(Act a) {
  switch (a) {
    case Act::none: return "none";
    case Act::relu: return "relu";
    case Act::elu: return "elu";
    case Act::tanh: return "tanh";
  }
  return "?";
}

template <class S>
inline Mat<S> act_apply(Act a, const Mat<S>& z) {
  switch (a) {
    case Act::none: return z;
    case Act::relu: return z.cwiseMax(S(0));
    case Act::elu:
      return z.unaryExpr([](S v) { return v > S(0) ? v : S(std::expm1(static_cast<double>(v))); });
    case Act::tanh:
      return z.unaryExpr([](S v) { return S(std::tanh(static_cast<double>(v))); });
  }
  return z;
}

// Derivative as a function of the cached pre-activation.
template <class S>
inline Mat<S> act_deriv(Act a, const Mat<S>& z) {
  switch (a) {
    case Act::none: return Mat<S>::Ones(z.rows(), z.cols());
    case Act::relu:
      return z.unaryExpr([](S v) { return v > S(0) ? S(1) : S(0); });
    case Act::elu:
      return z.unaryExpr(
          [](S v) { return v > S(0) ? S(1) : S(std::exp(static_cast<double>(v))); });
    case Act::tanh:
      return z.unaryExpr([](S v) {
        double t = std::tanh(static_cast<double>(v));
        return S(1.0 - t * t);
      });
  }
  return Mat<S>::Ones(z.rows(), z.cols());
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <class S>
inline void glorot_uniform(Tensor<S>& t, int fan_in, int fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / (static_cast<double>(fan_in) + static_cast<double>(fan_out)));
  for (Eigen::Index i = 0; i < t.size(); ++i) t.value[i] = S(rng.uniform(-limit, limit));
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

template <class S>
struct DenseLayer {
  std::string w_name, b_name;
  int in = 0, out = 0;
  Act act = Act::none;

  Mat<S> x_cache, z_cache;

  void init(ParamStore<S>& ps, const std::string& prefix, int in_dim, int out_dim, Act a,
            Rng& rng) {
    in = in_dim;
    out = out_dim;
    act = a;
    w_name = prefix + ".w";
    b_name = prefix + ".b";
    glorot_uniform(ps.add(w_name, {in, out}), in, out, rng);
    ps.add(b_name, {1, out});
  }

  Mat<S> forward(ParamStore<S>& ps, const Mat<S>& x, bool cache) {
    require(x.cols() == in, Errc::shape_mismatch,
            w_name + ": input has " + std::to_string(x.cols()) + " features, expected " +
                std::to_string(in));
    Mat<S> z = x * ps.mat(w_name);
    z.rowwise() += ps.mat(b_name).row(0);
    if (cache) {
      x_cache = x;
      z_cache = z;
    }
    return act_apply(act, z);
  }

  Mat<S> backward(ParamStore<S>& ps, const Mat<S>& dy) {
    require(dy.rows() == z_cache.rows() && dy.cols() == out, Errc::shape_mismatch,
            w_name + ": bad upstream gradient shape");
    Mat<S> dz = dy.cwiseProduct(act_deriv(act, z_cache));
    ps.grad_mat(w_name).noalias() += x_cache.transpose() * dz;
    ps.grad_mat(b_name).row(0) += dz.colwise().sum();
    return dz * ps.mat(w_name).transpose();
  }
};

// ---------------------------------------------------------------------------
// Chebyshev graph convolution
// ---------------------------------------------------------------------------

// Applies a (possibly rectangular) sparse operator to every block of a
// stacked batch: input blocks of op.cols() rows map to output blocks of
// op.rows() rows.
template <class S>
inline Mat<S> sparse_apply_batched(const Eigen::SparseMatrix<S>& op, const Mat<S>& x, int batch) {
  const Eigen::Index v_in = op.cols(), v_out = op.rows();
  require(x.rows() == v_in * batch, Errc::shape_mismatch, "stacked batch rows mismatch");
  Mat<S> y(v_out * batch, x.cols());
  for (int b = 0; b < batch; ++b)
    y.middleRows(b * v_out, v_out).noalias() = op * x.middleRows(b * v_in, v_in);
  return y;
}

// Y = sum_k T_k(L~) X W_k + b, applied per sample of a stacked (B*V) x F
// batch. The Chebyshev recurrence stacks T_k X for the backward pass; the
// reverse pass propagates through the recurrence (L~ is symmetric, so the
// adjoint operator is L~ itself).
template <class S>
struct GraphConvLayer {
  std::string w_name, b_name;
  int order = 0, fin = 0, fout = 0;
  Act act = Act::none;
  const Eigen::SparseMatrix<S>* scaled_laplacian = nullptr;

  std::vector<Mat<S>> xk_cache;
  Mat<S> z_cache;
  int batch_cache = 0;

  void init(ParamStore<S>& ps, const std::string& prefix, const Eigen::SparseMatrix<S>* lt,
            int order_, int fin_, int fout_, Act a, Rng& rng) {
    scaled_laplacian = lt;
    order = order_;
    fin = fin_;
    fout = fout_;
    act = a;
    w_name = prefix + ".w";
    b_name = prefix + ".b";
    glorot_uniform(ps.add(w_name, {order, fin, fout}), order * fin, fout, rng);
    ps.add(b_name, {1, fout});
  }

  ConstMatMap<S> weight_k(const ParamStore<S>& ps, int k) const {
    const Tensor<S>& t = ps.at(w_name);
    return ConstMatMap<S>(t.value.data() + static_cast<std::ptrdiff_t>(k) * fin * fout, fin, fout);
  }
  MatMap<S> grad_k(ParamStore<S>& ps, int k) const {
    ps.note_grad_write();
    Tensor<S>& t = ps.at(w_name);
    return MatMap<S>(t.grad.data() + static_cast<std::ptrdiff_t>(k) * fin * fout, fin, fout);
  }

  Mat<S> forward(ParamStore<S>& ps, const Mat<S>& x, int batch, bool cache) {
    require(x.cols() == fin, Errc::shape_mismatch, w_name + ": bad input feature count");
    const Eigen::Index v = scaled_laplacian->rows();
    require(x.rows() == v * batch, Errc::shape_mismatch, w_name + ": bad stacked batch");
    std::vector<Mat<S>> xk;
    xk.reserve(static_cast<std::size_t>(order));
    xk.push_back(x);
    if (order > 1) xk.push_back(sparse_apply_batched(*scaled_laplacian, x, batch));
    for (int k = 2; k < order; ++k) {
      Mat<S> cur = S(2) * sparse_apply_batched(*scaled_laplacian, xk[static_cast<std::size_t>(k - 1)], batch) -
                   xk[static_cast<std::size_t>(k - 2)];
      xk.push_back(std::move(cur));
    }
    Mat<S> z = Mat<S>::Zero(x.rows(), fout);
    for (int k = 0; k < order; ++k) z.noalias() += xk[static_cast<std::size_t>(k)] * weight_k(ps, k);
    z.rowwise() += ps.mat(b_name).row(0);
    if (cache) {
      xk_cache = std::move(xk);
      z_cache = z;
      batch_cache = batch;
    }
    return act_apply(act, z);
  }

  Mat<S> backward(ParamStore<S>& ps, const Mat<S>& dy) {
    Mat<S> dz = dy.cwiseProduct(act_deriv(act, z_cache));
    ps.grad_mat(b_name).row(0) += dz.colwise().sum();
    std::vector<Mat<S>> g(static_cast<std::size_t>(order));
    for (int k = 0; k < order; ++k) {
      grad_k(ps, k).noalias() += xk_cache[static_cast<std::size_t>(k)].transpose() * dz;
      g[static_cast<std::size_t>(k)].noalias() = dz * weight_k(ps, k).transpose();
    }
    for (int k = order - 1; k >= 2; --k) {
      g[static_cast<std::size_t>(k - 1)] +=
          S(2) * sparse_apply_batched(*scaled_laplacian, g[static_cast<std::size_t>(k)], batch_cache);
      g[static_cast<std::size_t>(k - 2)] -= g[static_cast<std::size_t>(k)];
    }
    Mat<S> dx = std::move(g[0]);
    if (order > 1) dx += sparse_apply_batched(*scaled_laplacian, g[1], batch_cache);
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Dropout (inverted: survivors scaled by 1/(1-rate), eval is identity)
// ---------------------------------------------------------------------------

template <class S>
struct DropoutLayer {
  double rate = 0.0;
  Mat<S> mask;

  Mat<S> forward(const Mat<S>& x, bool train, Rng& rng) {
    require(rate >= 0.0 && rate < 1.0, Errc::shape_mismatch, "dropout rate must be in [0, 1)");
    if (!train || rate == 0.0) {
      mask = Mat<S>::Ones(x.rows(), x.cols());
      return x;
    }
    const S scale = S(1.0 / (1.0 - rate));
    mask.resize(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      for (Eigen::Index r = 0; r < x.rows(); ++r)
        mask(r, c) = rng.uniform() < rate ? S(0) : scale;
    return x.cwiseProduct(mask);
  }

  Mat<S> backward(const Mat<S>& dy) const { return dy.cwiseProduct(mask); }
};

template <class S>
inline Mat<S> dropout(const Mat<S>& x, double rate, bool train, std::uint64_t seed) {
  Rng rng(seed);
  DropoutLayer<S> layer;
  layer.rate = rate;
  return layer.forward(x, train, rng);
}

// ---------------------------------------------------------------------------
// Reparameterized sampling
// ---------------------------------------------------------------------------

// Clamp keeps exp(log_var) finite in f32 while leaving tiny variances
// (which underflow harmlessly) intact.
inline constexpr double kLogVarClamp = 60.0;

template <class S>
struct ReparamCache {
  Mat<S> eps, sd;       // recorded noise and exp(clamped log_var / 2)
  Mat<S> clamp_active;  // 1 where log_var was inside the clamp range
};

template <class S>
inline Mat<S> reparameterize(const Mat<S>& mu, const Mat<S>& log_var, Rng& rng,
                             ReparamCache<S>* cache = nullptr) {
  require(mu.rows() == log_var.rows() && mu.cols() == log_var.cols(), Errc::shape_mismatch,
          "reparameterize: mu/log_var shapes differ");
  Mat<S> eps(mu.rows(), mu.cols());
  for (Eigen::Index c = 0; c < eps.cols(); ++c)
    for (Eigen::Index r = 0; r < eps.rows(); ++r) eps(r, c) = S(rng.normal());
  Mat<S> sd = log_var.unaryExpr([](S v) {
    double clamped = std::clamp(static_cast<double>(v), -kLogVarClamp, kLogVarClamp);
    return S(std::exp(0.5 * clamped));
  });
  if (cache) {
    cache->eps = eps;
    cache->sd = sd;
    cache->clamp_active = log_var.unaryExpr([](S v) {
      double d = static_cast<double>(v);
      return (d > -kLogVarClamp && d < kLogVarClamp) ? S(1) : S(0);
    });
  }
  return mu + sd.cwiseProduct(eps);
}

template <class S>
inline Mat<S> reparameterize(const Mat<S>& mu, const Mat<S>& log_var, std::uint64_t seed) {
  Rng rng(seed);
  return reparameterize(mu, log_var, rng);
}

// Adds the gradient of `sample` w.r.t. mu and log_var.
template <class S>
inline void reparameterize_backward(const ReparamCache<S>& cache, const Mat<S>& d_sample,
                                    Mat<S>& d_mu, Mat<S>& d_log_var) {
  d_mu += d_sample;
  d_log_var += S(0.5) * d_sample.cwiseProduct(cache.eps)
                   .cwiseProduct(cache.sd)
                   .cwiseProduct(cache.clamp_active);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean over every element of the squared difference.
template <class S>
inline double mse(const Mat<S>& target, const Mat<S>& pred) {
  require(target.rows() == pred.rows() && target.cols() == pred.cols(), Errc::shape_mismatch,
          "mse: shape mismatch");
  return (pred - target).template cast<double>().squaredNorm() /
         static_cast<double>(target.size());
}

template <class S>
inline Mat<S> mse_grad(const Mat<S>& target, const Mat<S>& pred) {
  return (pred - target) * S(2.0 / static_cast<double>(target.size()));
}

// KL(N(mu, exp(log_var)) || N(0, 1)) summed over dimensions, averaged over
// the batch rows: -1/2 sum_d (1 + lv - mu^2 - exp(lv)).
template <class S>
inline double kl_gaussian(const Mat<S>& mu, const Mat<S>& log_var) {
  require(mu.rows() == log_var.rows() && mu.cols() == log_var.cols(), Errc::shape_mismatch,
          "kl_gaussian: shape mismatch");
  double total = 0.0;
  for (Eigen::Index c = 0; c < mu.cols(); ++c)
    for (Eigen::Index r = 0; r < mu.rows(); ++r) {
      double m = static_cast<double>(mu(r, c));
      double lv = static_cast<double>(log_var(r, c));
      total += -0.5 * (1.0 + lv - m * m - std::exp(lv));
    }
  return total / static_cast<double>(mu.rows());
}

template <class S>
inline void kl_gaussian_grad(const Mat<S>& mu, const Mat<S>& log_var, double weight,
                             Mat<S>& d_mu, Mat<S>& d_log_var) {
  const double inv_b = weight / static_cast<double>(mu.rows());
  d_mu += (mu * S(inv_b));
  d_log_var += log_var.unaryExpr([inv_b](S v) {
    return S(0.5 * inv_b * (std::exp(static_cast<double>(v)) - 1.0));
  });
}

// Reconstruction + beta * KL (equations for both VAE families).
template <class S>
inline double vae_loss(const Mat<S>& x, const Mat<S>& x_hat, const Mat<S>& mu,
                       const Mat<S>& log_var, double beta) {
  return mse(x, x_hat) + beta * kl_gaussian(mu, log_var);
}

// MSE between latent vectors (projection-network objective).
template <class S>
inline double projection_loss(const Mat<S>& z_pred, const Mat<S>& z_target) {
  require(z_pred.rows() == z_target.rows() && z_pred.cols() == z_target.cols(),
          Errc::shape_mismatch, "projection_loss: latent dimensions differ");
  return mse(z_target, z_pred);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
inline void adam_step(ParamStore<S>& ps, double lr, long long t, const AdamConfig& cfg = {}) {
  require(t >= 1, Errc::uninitialized_gradient, "adam_step: t must be >= 1");
  require(ps.grads_written(), Errc::uninitialized_gradient,
          "adam_step: no gradients accumulated since zero_grad");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (const auto& name : ps.names()) {
    Tensor<S>& p = ps.at(name);
    if (p.adam_m.size() != p.size()) {
      p.adam_m = Vec<S>::Zero(p.size());
      p.adam_v = Vec<S>::Zero(p.size());
    }
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      double g = static_cast<double>(p.grad[i]);
      double m = cfg.beta1 * static_cast<double>(p.adam_m[i]) + (1.0 - cfg.beta1) * g;
      double v = cfg.beta2 * static_cast<double>(p.adam_v[i]) + (1.0 - cfg.beta2) * g * g;
      p.adam_m[i] = S(m);
      p.adam_v[i] = S(v);
      double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      p.value[i] = S(static_cast<double>(p.value[i]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-3;
  double lr_decay_per_epoch = 0.99;
  double beta_kl = 0.005;
  int batch_size = 32;
  int max_epochs = 300;
  int early_stop_patience = 10;
  // Epochs over which the KL weight ramps linearly from ~0 to its full
  // value during training (0 disables). Guards VAEs against posterior
  // collapse; validation always scores the full objective.
  int beta_warmup_epochs = 0;
  std::uint64_t seed = 0;

  void validate() const {
    require(learning_rate > 0, Errc::config_error, "learning_rate must be > 0");
    require(lr_decay_per_epoch > 0 && lr_decay_per_epoch <= 1, Errc::config_error,
            "lr_decay_per_epoch must be in (0, 1]");
    require(batch_size >= 1, Errc::config_error, "batch_size must be >= 1");
    require(max_epochs >= 1, Errc::config_error, "max_epochs must be >= 1");
    require(early_stop_patience >= 0, Errc::config_error, "early_stop_patience must be >= 0");
  }
};

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // learning rate used during this epoch
};

struct TrainResult {
  std::vector<EpochStat> history;
  int best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  double lr_after = 0.0;
  long long steps = 0;
};

// Optimizer/trainer state carried across resume.
struct TrainState {
  int start_epoch = 0;
  long long step = 0;
  double lr = -1.0;  // negative: take from config
};

// Epoch loop with seeded shuffling, per-epoch learning-rate decay and early
// stopping on the validation loss. The model is left holding the
// best-validation parameters.
//
// Model requirements:
//   ParamStore<S>& params();
//   double train_step(const Mat<S>& x, const Mat<S>& y, Rng& rng);  // fwd+bwd
//   double eval_loss(const Mat<S>& x, const Mat<S>& y);
// Batcher requirements:
//   Eigen::Index count(); void gather(span of indices, Mat& x, Mat& y);
template <class S, class Model, class Batcher>
TrainResult train_loop(Model& model, Batcher& train_data, Batcher& val_data,
                       const TrainConfig& cfg, const TrainState& state = {},
                       const std::function<void(const EpochStat&)>& on_epoch = nullptr) {
  cfg.validate();
  require(train_data.count() > 0 && val_data.count() > 0, Errc::empty_dataset,
          "train_loop: empty train or validation split");

  Rng rng(cfg.seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(state.start_epoch + 1));
  TrainResult result;
  result.steps = state.step;
  double lr = state.lr > 0 ? state.lr : cfg.learning_rate;

  auto eval_split = [&](Batcher& data) {
    double total = 0.0;
    Eigen::Index n = data.count();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Mat<S> x, y;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      Eigen::Index len = std::min<Eigen::Index>(cfg.batch_size, n - start);
      data.gather(idx.data() + start, len, x, y);
      total += model.eval_loss(x, y) * static_cast<double>(len);
    }
    return total / static_cast<double>(n);
  };

  auto snapshot = model.params().snapshot_values();
  int bad_epochs = 0;

  for (int epoch = state.start_epoch + 1; epoch <= cfg.max_epochs; ++epoch) {
    if constexpr (requires(Model& m) { m.set_beta_scale(1.0); }) {
      double scale = cfg.beta_warmup_epochs > 0
                         ? std::min(1.0, static_cast<double>(epoch) / cfg.beta_warmup_epochs)
                         : 1.0;
      model.set_beta_scale(scale);
    }
    std::vector<Eigen::Index> order(static_cast<std::size_t>(train_data.count()));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    double train_total = 0.0;
    Mat<S> x, y;
    for (Eigen::Index start = 0; start < train_data.count(); start += cfg.batch_size) {
      Eigen::Index len = std::min<Eigen::Index>(cfg.batch_size, train_data.count() - start);
      train_data.gather(order.data() + start, len, x, y);
      model.params().zero_grad();
      double loss = model.train_step(x, y, rng);
      if (!std::isfinite(loss)) fail(Errc::diverged_loss, "training loss is not finite");
      adam_step(model.params(), lr, ++result.steps);
      train_total += loss * static_cast<double>(len);
    }
    double train_loss = train_total / static_cast<double>(train_data.count());
    double val_loss = eval_split(val_data);
    if (!std::isfinite(val_loss)) fail(Errc::diverged_loss, "validation loss is not finite");

    EpochStat stat{epoch, train_loss, val_loss, lr};
    result.history.push_back(stat);
    if (on_epoch) on_epoch(stat);

    lr *= cfg.lr_decay_per_epoch;

    if (val_loss < result.best_val) {
      result.best_val = val_loss;
      result.best_epoch = epoch;
      snapshot = model.params().snapshot_values();
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (bad_epochs > cfg.early_stop_patience) break;
    }
  }

  result.lr_after = lr;
  if constexpr (requires(Model& m) { m.set_beta_scale(1.0); }) model.set_beta_scale(1.0);
  model.params().restore_values(snapshot);
  return result;
}

// Row-indexed batcher for plain feature matrices.
template <class S>
struct DenseBatcher {
  Mat<S> x, y;

  Eigen::Index count() const { return x.rows(); }
  void gather(const Eigen::Index* idx, Eigen::Index len, Mat<S>& bx, Mat<S>& by) const {
    bx.resize(len, x.cols());
    by.resize(len, y.cols());
    for (Eigen::Index i = 0; i < len; ++i) {
      bx.row(i) = x.row(idx[i]);
      by.row(i) = y.row(idx[i]);
    }
  }
};

inline std::string history_to_csv(const std::vector<EpochStat>& history) {
  std::string out = "epoch,train_loss,val_loss,lr\n";
  for (const auto& h : history) {
    out += std::to_string(h.epoch) + "," + format_double(h.train_loss) + "," +
           format_double(h.val_loss) + "," + format_double(h.lr) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format "ACRW"
//
// Magic "ACRW", u32 version=1, u32 tensor count; per tensor u16 name length,
// UTF-8 name, u8 rank, u32 dims, f32 row-major data; trailing CRC32 of every
// preceding byte (magic included). Adam moments are stored as companion
// tensors named "adam.m:<name>" / "adam.v:<name>"; trainer scalars as
// 1-element tensors named "scalar:<key>".
// ---------------------------------------------------------------------------

namespace detail {

inline void put_tensor(std::string& out, const std::string& name, const std::vector<int>& shape,
                       const float* data, std::size_t count) {
  require(name.size() <= 0xFFFF, Errc::format_error, "tensor name too long");
  io::put_u16(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  io::put_u8(out, static_cast<std::uint8_t>(shape.size()));
  for (int d : shape) io::put_u32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < count; ++i) io::put_f32(out, data[i]);
}

}  // namespace detail

struct RawTensor {
  std::vector<int> shape;
  std::vector<float> data;
};

template <class S>
inline std::string checkpoint_to_bytes(const ParamStore<S>& ps,
                                       const std::map<std::string, double>& scalars = {}) {
  std::uint32_t count = 0;
  std::string body;
  for (const auto& name : ps.names()) {
    const Tensor<S>& t = ps.at(name);
    std::vector<float> buf(static_cast<std::size_t>(t.size()));
    for (Eigen::Index i = 0; i < t.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(t.value[i]);
    detail::put_tensor(body, name, t.shape, buf.data(), buf.size());
    ++count;
    if (t.adam_m.size() == t.size()) {
      for (Eigen::Index i = 0; i < t.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(t.adam_m[i]);
      detail::put_tensor(body, "adam.m:" + name, t.shape, buf.data(), buf.size());
      for (Eigen::Index i = 0; i < t.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(t.adam_v[i]);
      detail::put_tensor(body, "adam.v:" + name, t.shape, buf.data(), buf.size());
      count += 2;
    }
  }
  for (const auto& [key, value] : scalars) {
    float v = static_cast<float>(value);
    detail::put_tensor(body, "scalar:" + key, {1}, &v, 1);
    ++count;
  }
  std::string out = "ACRW";
  io::put_u32(out, 1);
  io::put_u32(out, count);
  out += body;
  io::put_u32(out, crc32(out.data(), out.size()));
  return out;
}

inline std::map<std::string, RawTensor> checkpoint_parse(const std::string& data,
                                                         const std::string& name = "checkpoint") {
  require(data.size() >= 16, Errc::format_error, name + ": too short");
  std::uint32_t stored_crc;
  {
    io::Reader tail(data, name);
    tail.bytes(data.size() - 4);
    std::string crc_bytes = tail.bytes(4);
    io::Reader cr(crc_bytes, name);
    stored_crc = cr.u32();
  }
  std::uint32_t actual = crc32(data.data(), data.size() - 4);
  require(stored_crc == actual, Errc::format_error, name + ": CRC mismatch (corrupt file)");

  io::Reader r(data, name);
  if (r.bytes(4) != "ACRW") fail(Errc::format_error, name + ": bad magic (expected ACRW)");
  std::uint32_t version = r.u32();
  require(version == 1, Errc::format_error, name + ": unsupported version");
  std::uint32_t count = r.u32();
  std::map<std::string, RawTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = r.u16();
    std::string tname = r.bytes(len);
    std::uint8_t rank = r.u8();
    RawTensor t;
    std::size_t total = 1;
    for (int d = 0; d < rank; ++d) {
      std::uint32_t dim = r.u32();
      t.shape.push_back(static_cast<int>(dim));
      total *= dim;
    }
    t.data.resize(total);
    for (std::size_t j = 0; j < total; ++j) t.data[j] = r.f32();
    out.emplace(std::move(tname), std::move(t));
  }
  return out;
}

// Loads values (and Adam moments when present) into an already-built store.
template <class S>
inline void checkpoint_into_store(const std::map<std::string, RawTensor>& raw, ParamStore<S>& ps,
                                  const std::string& name = "checkpoint") {
  for (const auto& pname : ps.names()) {
    auto it = raw.find(pname);
    require(it != raw.end(), Errc::missing_checkpoint, name + ": missing tensor " + pname);
    const RawTensor& t = it->second;
    const Tensor<S>& dst = ps.at(pname);
    require(t.shape == dst.shape, Errc::spec_mismatch, name + ": shape mismatch for " + pname);
    Tensor<S>& d = ps.at(pname);
    for (std::size_t i = 0; i < t.data.size(); ++i) d.value[static_cast<Eigen::Index>(i)] = S(t.data[i]);
    auto im = raw.find("adam.m:" + pname);
    auto iv = raw.find("adam.v:" + pname);
    if (im != raw.end() && iv != raw.end()) {
      d.adam_m.resize(d.size());
      d.adam_v.resize(d.size());
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        d.adam_m[static_cast<Eigen::Index>(i)] = S(im->second.data[i]);
        d.adam_v[static_cast<Eigen::Index>(i)] = S(iv->second.data[i]);
      }
    }
  }
}

inline std::map<std::string, double> checkpoint_scalars(
    const std::map<std::string, RawTensor>& raw) {
  std::map<std::string, double> out;
  for (const auto& [key, t] : raw) {
    if (key.rfind("scalar:", 0) == 0 && t.data.size() == 1)
      out[key.substr(7)] = static_cast<double>(t.data[0]);
  }
  return out;
}

// CRC over the serialized parameter values; used to verify frozen networks
// stay frozen.
template <class S>
inline std::uint32_t param_hash(const ParamStore<S>& ps) {
  std::string bytes;
  for (const auto& name : ps.names()) {
    const Tensor<S>& t = ps.at(name);
    for (Eigen::Index i = 0; i < t.size(); ++i) io::put_f32(bytes, static_cast<float>(t.value[i]));
  }
  return crc32(bytes);
}

}  // namespace across::nn
