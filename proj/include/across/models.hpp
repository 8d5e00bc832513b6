#pragma once

#include <memory>

#include "across/mesh.hpp"
#include "across/nn.hpp"
#include "across/render.hpp"
#include "across/signal.hpp"

// The five concrete networks: SVB (signal beta-VAE), MVB/MVD (CoMA-style
// mesh beta-VAEs), S2MPN and M2MPN (latent projection MLPs), plus the
// frozen-component pipeline that chains them signal -> BioTac mesh ->
// DIGIT mesh -> rendered image.

namespace across::models {

using nn::Act;
using nn::Mat;
using nn::ParamStore;

enum class ModelKind { svb, mvb, mvd, s2mpn, m2mpn };

inline const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::svb: return "svb";
    case ModelKind::mvb: return "mvb";
    case ModelKind::mvd: return "mvd";
    case ModelKind::s2mpn: return "s2mpn";
    case ModelKind::m2mpn: return "m2mpn";
  }
  return "?";
}

inline ModelKind model_kind_from_name(const std::string& name) {
  if (name == "svb") return ModelKind::svb;
  if (name == "mvb") return ModelKind::mvb;
  if (name == "mvd") return ModelKind::mvd;
  if (name == "s2mpn") return ModelKind::s2mpn;
  if (name == "m2mpn") return ModelKind::m2mpn;
  fail(Errc::spec_mismatch, "unknown model kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// ModelSpec
// ---------------------------------------------------------------------------

struct ModelSpec {
  ModelKind kind = ModelKind::svb;
  int input_dim = 0;   // svb: electrodes; projections: source latent; mesh VAEs: per-vertex channels
  int latent_dim = 0;  // VAE latent size / projection target latent size
  int output_dim = 0;  // projections only
  std::vector<int> layer_sizes;       // dense trunk (svb encoder / projection hidden layers)
  std::vector<int> conv_channels;     // mesh VAE graph-conv output channels
  std::vector<double> dropout_rates;  // projections, per hidden layer
  Act hidden_activation = Act::relu;
  int kernel_size = 6;
  int pool_factor = 2;
  int dense_size = 512;
  double beta = 0.005;
  double learning_rate = 1e-3;
  double lr_decay = 0.99;
  int max_epochs = 300;

  static ModelSpec defaults(ModelKind kind) {
    ModelSpec s;
    s.kind = kind;
    switch (kind) {
      case ModelKind::svb:
        s.input_dim = signal::kNumElectrodes;
        s.latent_dim = 8;
        s.layer_sizes = {256, 128, 64};
        s.hidden_activation = Act::relu;
        s.learning_rate = 0.0001;
        break;
      case ModelKind::mvb:
      case ModelKind::mvd:
        s.input_dim = 3;
        s.latent_dim = 128;
        s.conv_channels = {16, 16, 16, 32};
        s.kernel_size = 6;
        s.pool_factor = 2;
        s.dense_size = 512;
        s.hidden_activation = Act::relu;
        s.learning_rate = 0.001;
        break;
      case ModelKind::s2mpn:
        s.input_dim = 8;
        s.output_dim = 128;
        s.latent_dim = 128;
        s.layer_sizes = {512, 128, 256, 256};
        s.dropout_rates = {0.4, 0.3, 0.2, 0.5};
        s.hidden_activation = Act::elu;
        s.learning_rate = 0.0005;
        break;
      case ModelKind::m2mpn:
        s.input_dim = 128;
        s.output_dim = 128;
        s.latent_dim = 128;
        s.layer_sizes = {512, 1024, 1024, 256};
        s.dropout_rates = {0.2, 0.4, 0.0, 0.0};
        s.hidden_activation = Act::elu;
        s.learning_rate = 0.001;
        break;
    }
    return s;
  }

  void validate() const {
    require(input_dim > 0 && latent_dim > 0, Errc::spec_mismatch, "spec: bad dimensions");
    require(beta >= 0, Errc::spec_mismatch, "spec: beta must be >= 0");
    require(learning_rate > 0, Errc::spec_mismatch, "spec: learning rate must be > 0");
    require(lr_decay > 0 && lr_decay <= 1, Errc::spec_mismatch, "spec: decay must be in (0, 1]");
    require(max_epochs >= 1, Errc::spec_mismatch, "spec: max_epochs must be >= 1");
    switch (kind) {
      case ModelKind::svb:
        require(input_dim == signal::kNumElectrodes, Errc::spec_mismatch,
                "svb: input must be 19 electrodes");
        require(!layer_sizes.empty(), Errc::spec_mismatch, "svb: missing layer sizes");
        break;
      case ModelKind::mvb:
      case ModelKind::mvd:
        require(input_dim == 3, Errc::spec_mismatch, "mesh vae: input channels must be 3");
        require(!conv_channels.empty(), Errc::spec_mismatch, "mesh vae: missing conv channels");
        require(kernel_size >= 1, Errc::spec_mismatch, "mesh vae: kernel size must be >= 1");
        require(pool_factor >= 2, Errc::spec_mismatch, "mesh vae: pool factor must be >= 2");
        break;
      case ModelKind::s2mpn:
      case ModelKind::m2mpn:
        require(output_dim > 0, Errc::spec_mismatch, "projection: missing output dim");
        require(layer_sizes.size() == dropout_rates.size(), Errc::spec_mismatch,
                "projection: dropout schedule must match hidden layers");
        for (double r : dropout_rates)
          require(r >= 0 && r < 1, Errc::spec_mismatch, "projection: dropout rate out of range");
        break;
    }
  }

  nn::TrainConfig train_config() const {
    nn::TrainConfig cfg;
    cfg.learning_rate = learning_rate;
    cfg.lr_decay_per_epoch = lr_decay;
    cfg.beta_kl = beta;
    cfg.max_epochs = max_epochs;
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// ModelSpec file format (key=value, unknown keys rejected)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}
inline std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}
inline std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  if (trim(s).empty()) return out;
  for (const auto& cell : split(s, ',')) out.push_back(static_cast<int>(parse_int(trim(cell), what)));
  return out;
}
inline std::vector<double> parse_double_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  if (trim(s).empty()) return out;
  for (const auto& cell : split(s, ',')) out.push_back(parse_double(trim(cell), what));
  return out;
}
inline Act act_from_name(const std::string& name) {
  if (name == "none") return Act::none;
  if (name == "relu") return Act::relu;
  if (name == "elu") return Act::elu;
  if (name == "tanh") return Act::tanh;
  fail(Errc::spec_mismatch, "unknown activation '" + name + "'");
}

}  // namespace detail

inline std::string spec_to_text(const ModelSpec& s) {
  std::string out;
  out += "kind=" + std::string(model_kind_name(s.kind)) + "\n";
  out += "input_dim=" + std::to_string(s.input_dim) + "\n";
  out += "latent_dim=" + std::to_string(s.latent_dim) + "\n";
  out += "output_dim=" + std::to_string(s.output_dim) + "\n";
  out += "layer_sizes=" + detail::join_ints(s.layer_sizes) + "\n";
  out += "conv_channels=" + detail::join_ints(s.conv_channels) + "\n";
  out += "dropout_rates=" + detail::join_doubles(s.dropout_rates) + "\n";
  out += "hidden_activation=" + std::string(nn::act_name(s.hidden_activation)) + "\n";
  out += "kernel_size=" + std::to_string(s.kernel_size) + "\n";
  out += "pool_factor=" + std::to_string(s.pool_factor) + "\n";
  out += "dense_size=" + std::to_string(s.dense_size) + "\n";
  out += "beta=" + format_double(s.beta) + "\n";
  out += "learning_rate=" + format_double(s.learning_rate) + "\n";
  out += "lr_decay=" + format_double(s.lr_decay) + "\n";
  out += "max_epochs=" + std::to_string(s.max_epochs) + "\n";
  return out;
}

inline ModelSpec spec_from_text(const std::string& text, const std::string& name = "model spec") {
  ModelSpec s;
  bool saw_kind = false;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string l = trim(line);
    if (l.empty() || l[0] == '#') continue;
    auto eq = l.find('=');
    require(eq != std::string::npos, Errc::spec_mismatch,
            name + ": line " + std::to_string(lineno) + " is not key=value");
    std::string key = trim(l.substr(0, eq)), value = trim(l.substr(eq + 1));
    if (key == "kind") {
      s.kind = model_kind_from_name(value);
      saw_kind = true;
    } else if (key == "input_dim") s.input_dim = static_cast<int>(parse_int(value, name));
    else if (key == "latent_dim") s.latent_dim = static_cast<int>(parse_int(value, name));
    else if (key == "output_dim") s.output_dim = static_cast<int>(parse_int(value, name));
    else if (key == "layer_sizes") s.layer_sizes = detail::parse_int_list(value, name);
    else if (key == "conv_channels") s.conv_channels = detail::parse_int_list(value, name);
    else if (key == "dropout_rates") s.dropout_rates = detail::parse_double_list(value, name);
    else if (key == "hidden_activation") s.hidden_activation = detail::act_from_name(value);
    else if (key == "kernel_size") s.kernel_size = static_cast<int>(parse_int(value, name));
    else if (key == "pool_factor") s.pool_factor = static_cast<int>(parse_int(value, name));
    else if (key == "dense_size") s.dense_size = static_cast<int>(parse_int(value, name));
    else if (key == "beta") s.beta = parse_double(value, name);
    else if (key == "learning_rate") s.learning_rate = parse_double(value, name);
    else if (key == "lr_decay") s.lr_decay = parse_double(value, name);
    else if (key == "max_epochs") s.max_epochs = static_cast<int>(parse_int(value, name));
    else fail(Errc::spec_mismatch, name + ": unknown key '" + key + "'");
  }
  require(saw_kind, Errc::spec_mismatch, name + ": missing 'kind'");
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// SVB: signal beta-VAE
// ---------------------------------------------------------------------------

template <class S>
class SignalVae {
 public:
  SignalVae(const ModelSpec& spec, std::uint64_t init_seed) : spec_(spec) {
    spec_.validate();
    require(spec_.kind == ModelKind::svb, Errc::spec_mismatch, "SignalVae needs an svb spec");
    Rng rng(init_seed);
    int prev = spec_.input_dim;
    for (std::size_t i = 0; i < spec_.layer_sizes.size(); ++i) {
      nn::DenseLayer<S> layer;
      layer.init(ps_, "enc" + std::to_string(i), prev, spec_.layer_sizes[i],
                 spec_.hidden_activation, rng);
      prev = spec_.layer_sizes[i];
      enc_.push_back(std::move(layer));
    }
    mu_head_.init(ps_, "mu", prev, spec_.latent_dim, Act::none, rng);
    lv_head_.init(ps_, "logvar", prev, spec_.latent_dim, Act::none, rng);

    // Decoder mirrors the encoder trunk and ends in a linear output layer.
    prev = spec_.latent_dim;
    std::vector<int> dec_sizes(spec_.layer_sizes.rbegin(), spec_.layer_sizes.rend());
    for (std::size_t i = 0; i < dec_sizes.size(); ++i) {
      nn::DenseLayer<S> layer;
      layer.init(ps_, "dec" + std::to_string(i), prev, dec_sizes[i], spec_.hidden_activation, rng);
      prev = dec_sizes[i];
      dec_.push_back(std::move(layer));
    }
    out_.init(ps_, "out", prev, spec_.input_dim, Act::none, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  ParamStore<S>& params() { return ps_; }
  const ParamStore<S>& params() const { return ps_; }

  // Training-side KL weight multiplier (warmup); validation keeps full beta.
  void set_beta_scale(double scale) { beta_scale_ = scale; }

  void encode(const Mat<S>& x, bool cache, Mat<S>& mu, Mat<S>& log_var) {
    Mat<S> h = x;
    for (auto& layer : enc_) h = layer.forward(ps_, h, cache);
    mu = mu_head_.forward(ps_, h, cache);
    log_var = lv_head_.forward(ps_, h, cache);
  }

  Mat<S> encode_mu(const Mat<S>& x) {
    Mat<S> mu, lv;
    encode(x, false, mu, lv);
    return mu;
  }

  Mat<S> decode(const Mat<S>& z, bool cache = false) {
    Mat<S> h = z;
    for (auto& layer : dec_) h = layer.forward(ps_, h, cache);
    return out_.forward(ps_, h, cache);
  }

  double train_step(const Mat<S>& x, const Mat<S>&, Rng& rng) {
    const double beta = spec_.beta * beta_scale_;
    Mat<S> mu, lv;
    encode(x, true, mu, lv);
    nn::ReparamCache<S> rc;
    Mat<S> z = nn::reparameterize(mu, lv, rng, &rc);
    Mat<S> x_hat = decode(z, true);
    double loss = nn::vae_loss(x, x_hat, mu, lv, beta);

    Mat<S> dz = backprop_decoder(nn::mse_grad(x, x_hat));
    Mat<S> dmu = Mat<S>::Zero(mu.rows(), mu.cols());
    Mat<S> dlv = Mat<S>::Zero(lv.rows(), lv.cols());
    nn::reparameterize_backward(rc, dz, dmu, dlv);
    nn::kl_gaussian_grad(mu, lv, beta, dmu, dlv);
    backprop_encoder(dmu, dlv);
    return loss;
  }

  // Validation uses the posterior mean (no sampling).
  double eval_loss(const Mat<S>& x, const Mat<S>&) {
    Mat<S> mu, lv;
    encode(x, false, mu, lv);
    Mat<S> x_hat = decode(mu, false);
    return nn::vae_loss(x, x_hat, mu, lv, spec_.beta);
  }

  Mat<S> reconstruct_mu(const Mat<S>& x) { return decode(encode_mu(x)); }

 private:
  Mat<S> backprop_decoder(const Mat<S>& d_out) {
    Mat<S> d = out_.backward(ps_, d_out);
    for (auto it = dec_.rbegin(); it != dec_.rend(); ++it) d = it->backward(ps_, d);
    return d;
  }
  void backprop_encoder(const Mat<S>& dmu, const Mat<S>& dlv) {
    Mat<S> dh = mu_head_.backward(ps_, dmu) + lv_head_.backward(ps_, dlv);
    for (auto it = enc_.rbegin(); it != enc_.rend(); ++it) dh = it->backward(ps_, dh);
  }

  ModelSpec spec_;
  double beta_scale_ = 1.0;
  ParamStore<S> ps_;
  std::vector<nn::DenseLayer<S>> enc_, dec_;
  nn::DenseLayer<S> mu_head_, lv_head_, out_;
};

// ---------------------------------------------------------------------------
// Mesh beta-VAE (MVB and MVD share this architecture)
// ---------------------------------------------------------------------------

// Reshape between stacked per-vertex features (B*V, C) and flattened
// per-sample rows (B, V*C).
template <class S>
inline Mat<S> stack_to_flat(const Mat<S>& x, int batch, int v) {
  const int c = static_cast<int>(x.cols());
  Mat<S> out(batch, v * c);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < v; ++i)
      out.block(b, i * c, 1, c) = x.row(b * v + i);
  return out;
}

template <class S>
inline Mat<S> flat_to_stack(const Mat<S>& x, int batch, int v, int c) {
  require(x.cols() == v * c, Errc::shape_mismatch, "flat_to_stack: bad width");
  Mat<S> out(static_cast<Eigen::Index>(batch) * v, c);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < v; ++i)
      out.row(b * v + i) = x.block(b, i * c, 1, c);
  return out;
}

template <class S>
class MeshVae {
 public:
  MeshVae(const ModelSpec& spec, const mesh::MeshTopology* topo, std::uint64_t init_seed)
      : spec_(spec), topo_(topo) {
    spec_.validate();
    require(spec_.kind == ModelKind::mvb || spec_.kind == ModelKind::mvd, Errc::spec_mismatch,
            "MeshVae needs an mvb/mvd spec");
    const int levels = static_cast<int>(spec_.conv_channels.size());
    require(topo_->pool_levels() == levels, Errc::hierarchy_depth_mismatch,
            "topology has " + std::to_string(topo_->pool_levels()) + " pooling levels, spec needs " +
                std::to_string(levels));
    for (int l = 0; l <= levels; ++l) {
      v_.push_back(topo_->vertex_count(l));
      if (l > 0)
        require(v_[static_cast<std::size_t>(l)] ==
                    (v_[static_cast<std::size_t>(l - 1)] + spec_.pool_factor - 1) / spec_.pool_factor,
                Errc::hierarchy_depth_mismatch, "pooling factor mismatch at level " + std::to_string(l));
    }

    scaled_.resize(static_cast<std::size_t>(levels));
    down_.resize(static_cast<std::size_t>(levels));
    down_t_.resize(static_cast<std::size_t>(levels));
    up_.resize(static_cast<std::size_t>(levels));
    up_t_.resize(static_cast<std::size_t>(levels));
    for (int l = 0; l < levels; ++l) {
      auto basis = mesh::build_cheb_basis(topo_->laplacian(l), spec_.kernel_size);
      scaled_[static_cast<std::size_t>(l)] = basis.scaled.cast<S>();
      down_[static_cast<std::size_t>(l)] = topo_->down(l).cast<S>();
      down_t_[static_cast<std::size_t>(l)] = Eigen::SparseMatrix<S>(down_[static_cast<std::size_t>(l)].transpose());
      up_[static_cast<std::size_t>(l)] = topo_->up(l).cast<S>();
      up_t_[static_cast<std::size_t>(l)] = Eigen::SparseMatrix<S>(up_[static_cast<std::size_t>(l)].transpose());
    }

    Rng rng(init_seed);
    int prev = spec_.input_dim;
    for (int l = 0; l < levels; ++l) {
      nn::GraphConvLayer<S> conv;
      conv.init(ps_, "enc_conv" + std::to_string(l), &scaled_[static_cast<std::size_t>(l)],
                spec_.kernel_size, prev, spec_.conv_channels[static_cast<std::size_t>(l)],
                spec_.hidden_activation, rng);
      prev = spec_.conv_channels[static_cast<std::size_t>(l)];
      enc_convs_.push_back(std::move(conv));
    }
    const int coarse_v = v_.back();
    const int coarse_c = spec_.conv_channels.back();
    enc_dense_.init(ps_, "enc_dense", coarse_v * coarse_c, spec_.dense_size,
                    spec_.hidden_activation, rng);
    mu_head_.init(ps_, "mu", spec_.dense_size, spec_.latent_dim, Act::none, rng);
    lv_head_.init(ps_, "logvar", spec_.dense_size, spec_.latent_dim, Act::none, rng);

    dec_dense1_.init(ps_, "dec_dense1", spec_.latent_dim, spec_.dense_size,
                     spec_.hidden_activation, rng);
    dec_dense2_.init(ps_, "dec_dense2", spec_.dense_size, coarse_v * coarse_c,
                     spec_.hidden_activation, rng);
    // Decoder convs run at levels (levels-1) .. 0 with the channel list
    // reversed; a final linear conv maps back to 3 coordinates.
    std::vector<int> dec_channels(spec_.conv_channels.rbegin(), spec_.conv_channels.rend());
    prev = coarse_c;
    for (int j = 0; j < levels; ++j) {
      const int level = levels - 1 - j;
      nn::GraphConvLayer<S> conv;
      conv.init(ps_, "dec_conv" + std::to_string(j), &scaled_[static_cast<std::size_t>(level)],
                spec_.kernel_size, prev, dec_channels[static_cast<std::size_t>(j)],
                spec_.hidden_activation, rng);
      prev = dec_channels[static_cast<std::size_t>(j)];
      dec_convs_.push_back(std::move(conv));
    }
    out_conv_.init(ps_, "out_conv", &scaled_[0], spec_.kernel_size, prev, spec_.input_dim,
                   Act::none, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  const mesh::MeshTopology* topology() const { return topo_; }
  ParamStore<S>& params() { return ps_; }
  const ParamStore<S>& params() const { return ps_; }
  int vertex_count() const { return v_.front(); }

  void set_beta_scale(double scale) { beta_scale_ = scale; }

  void encode(const Mat<S>& x, int batch, bool cache, Mat<S>& mu, Mat<S>& log_var) {
    const int levels = static_cast<int>(enc_convs_.size());
    Mat<S> cur = x;
    for (int l = 0; l < levels; ++l) {
      cur = enc_convs_[static_cast<std::size_t>(l)].forward(ps_, cur, batch, cache);
      cur = nn::sparse_apply_batched(down_[static_cast<std::size_t>(l)], cur, batch);
    }
    Mat<S> flat = stack_to_flat(cur, batch, v_.back());
    Mat<S> h = enc_dense_.forward(ps_, flat, cache);
    mu = mu_head_.forward(ps_, h, cache);
    log_var = lv_head_.forward(ps_, h, cache);
  }

  Mat<S> encode_mu(const Mat<S>& x, int batch) {
    Mat<S> mu, lv;
    encode(x, batch, false, mu, lv);
    return mu;
  }

  Mat<S> decode(const Mat<S>& z, int batch, bool cache = false) {
    const int levels = static_cast<int>(dec_convs_.size());
    Mat<S> h = dec_dense1_.forward(ps_, z, cache);
    Mat<S> flat = dec_dense2_.forward(ps_, h, cache);
    Mat<S> cur = flat_to_stack(flat, batch, v_.back(), spec_.conv_channels.back());
    for (int j = 0; j < levels; ++j) {
      const int level = levels - 1 - j;
      cur = nn::sparse_apply_batched(up_[static_cast<std::size_t>(level)], cur, batch);
      cur = dec_convs_[static_cast<std::size_t>(j)].forward(ps_, cur, batch, cache);
    }
    return out_conv_.forward(ps_, cur, batch, cache);
  }

  double train_step(const Mat<S>& x, const Mat<S>&, Rng& rng) {
    const double beta = spec_.beta * beta_scale_;
    const int batch = static_cast<int>(x.rows()) / v_.front();
    Mat<S> mu, lv;
    encode(x, batch, true, mu, lv);
    nn::ReparamCache<S> rc;
    Mat<S> z = nn::reparameterize(mu, lv, rng, &rc);
    Mat<S> x_hat = decode(z, batch, true);
    double loss = nn::vae_loss(x, x_hat, mu, lv, beta);

    Mat<S> dz = backprop_decoder(nn::mse_grad(x, x_hat), batch);
    Mat<S> dmu = Mat<S>::Zero(mu.rows(), mu.cols());
    Mat<S> dlv = Mat<S>::Zero(lv.rows(), lv.cols());
    nn::reparameterize_backward(rc, dz, dmu, dlv);
    nn::kl_gaussian_grad(mu, lv, beta, dmu, dlv);
    backprop_encoder(dmu, dlv, batch);
    return loss;
  }

  double eval_loss(const Mat<S>& x, const Mat<S>&) {
    const int batch = static_cast<int>(x.rows()) / v_.front();
    Mat<S> mu, lv;
    encode(x, batch, false, mu, lv);
    Mat<S> x_hat = decode(mu, batch, false);
    return nn::vae_loss(x, x_hat, mu, lv, spec_.beta);
  }

  Mat<S> reconstruct_mu(const Mat<S>& x, int batch) {
    return decode(encode_mu(x, batch), batch);
  }

 private:
  Mat<S> backprop_decoder(const Mat<S>& d_out, int batch) {
    const int levels = static_cast<int>(dec_convs_.size());
    Mat<S> d = out_conv_.backward(ps_, d_out);
    for (int j = levels - 1; j >= 0; --j) {
      const int level = levels - 1 - j;
      d = dec_convs_[static_cast<std::size_t>(j)].backward(ps_, d);
      d = nn::sparse_apply_batched(up_t_[static_cast<std::size_t>(level)], d, batch);
    }
    Mat<S> dflat = stack_to_flat(d, batch, v_.back());
    Mat<S> dh = dec_dense2_.backward(ps_, dflat);
    return dec_dense1_.backward(ps_, dh);
  }

  void backprop_encoder(const Mat<S>& dmu, const Mat<S>& dlv, int batch) {
    const int levels = static_cast<int>(enc_convs_.size());
    Mat<S> dh = mu_head_.backward(ps_, dmu) + lv_head_.backward(ps_, dlv);
    Mat<S> dflat = enc_dense_.backward(ps_, dh);
    Mat<S> d = flat_to_stack(dflat, batch, v_.back(), spec_.conv_channels.back());
    for (int l = levels - 1; l >= 0; --l) {
      d = nn::sparse_apply_batched(down_t_[static_cast<std::size_t>(l)], d, batch);
      d = enc_convs_[static_cast<std::size_t>(l)].backward(ps_, d);
    }
  }

  ModelSpec spec_;
  double beta_scale_ = 1.0;
  const mesh::MeshTopology* topo_;
  std::vector<int> v_;
  std::vector<Eigen::SparseMatrix<S>> scaled_, down_, down_t_, up_, up_t_;
  ParamStore<S> ps_;
  std::vector<nn::GraphConvLayer<S>> enc_convs_, dec_convs_;
  nn::DenseLayer<S> enc_dense_, mu_head_, lv_head_, dec_dense1_, dec_dense2_;
  nn::GraphConvLayer<S> out_conv_;
};

// ---------------------------------------------------------------------------
// Latent projection MLP (S2MPN and M2MPN)
// ---------------------------------------------------------------------------

template <class S>
class ProjectionMlp {
 public:
  ProjectionMlp(const ModelSpec& spec, std::uint64_t init_seed) : spec_(spec) {
    spec_.validate();
    require(spec_.kind == ModelKind::s2mpn || spec_.kind == ModelKind::m2mpn, Errc::spec_mismatch,
            "ProjectionMlp needs an s2mpn/m2mpn spec");
    Rng rng(init_seed);
    int prev = spec_.input_dim;
    for (std::size_t i = 0; i < spec_.layer_sizes.size(); ++i) {
      nn::DenseLayer<S> layer;
      layer.init(ps_, "hidden" + std::to_string(i), prev, spec_.layer_sizes[i],
                 spec_.hidden_activation, rng);
      prev = spec_.layer_sizes[i];
      hidden_.push_back(std::move(layer));
      nn::DropoutLayer<S> drop;
      drop.rate = spec_.dropout_rates[i];
      drops_.push_back(drop);
    }
    out_.init(ps_, "out", prev, spec_.output_dim, Act::none, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  ParamStore<S>& params() { return ps_; }
  const ParamStore<S>& params() const { return ps_; }

  Mat<S> forward(const Mat<S>& x, bool train, Rng& rng, bool cache) {
    Mat<S> h = x;
    for (std::size_t i = 0; i < hidden_.size(); ++i) {
      h = hidden_[i].forward(ps_, h, cache);
      h = drops_[i].forward(h, train, rng);
    }
    return out_.forward(ps_, h, cache);
  }

  Mat<S> forward_eval(const Mat<S>& x) {
    Rng unused(0);
    return forward(x, false, unused, false);
  }

  double train_step(const Mat<S>& x, const Mat<S>& target, Rng& rng) {
    Mat<S> pred = forward(x, true, rng, true);
    double loss = nn::projection_loss(pred, target);
    Mat<S> d = out_.backward(ps_, nn::mse_grad(target, pred));
    for (std::size_t i = hidden_.size(); i-- > 0;) {
      d = drops_[i].backward(d);
      d = hidden_[i].backward(ps_, d);
    }
    return loss;
  }

  double eval_loss(const Mat<S>& x, const Mat<S>& target) {
    return nn::projection_loss(forward_eval(x), target);
  }

 private:
  ModelSpec spec_;
  ParamStore<S> ps_;
  std::vector<nn::DenseLayer<S>> hidden_;
  std::vector<nn::DropoutLayer<S>> drops_;
  nn::DenseLayer<S> out_;
};

// ---------------------------------------------------------------------------
// Batching for stacked mesh datasets
// ---------------------------------------------------------------------------

// In-place per-vertex z-scoring of a stacked (N*V, 3) batch matrix.
template <class S>
inline void normalize_stacked(Mat<S>& stacked, const mesh::MeshNormStats& stats) {
  stats.validate();
  const int v = stats.vertex_count();
  require(stacked.rows() % v == 0, Errc::stats_mismatch, "normalize_stacked: bad stack height");
  Mat<S> mean = stats.mean.cast<S>();
  Mat<S> inv_std = stats.std.cast<S>().cwiseInverse();
  const Eigen::Index n = stacked.rows() / v;
  for (Eigen::Index i = 0; i < n; ++i)
    stacked.middleRows(i * v, v) =
        (stacked.middleRows(i * v, v) - mean).cwiseProduct(inv_std);
}

// Holds N meshes as one stacked (N*V, 3) matrix; batches gather V-row
// blocks. Targets are the inputs (autoencoder), exposed as empty matrices.
template <class S>
struct MeshBatcher {
  Mat<S> stacked;
  int v = 1;

  Eigen::Index count() const { return stacked.rows() / v; }
  void gather(const Eigen::Index* idx, Eigen::Index len, Mat<S>& bx, Mat<S>& by) const {
    bx.resize(len * v, 3);
    for (Eigen::Index i = 0; i < len; ++i)
      bx.middleRows(i * v, v) = stacked.middleRows(idx[i] * v, v);
    by.resize(0, 0);
  }
};

// ---------------------------------------------------------------------------
// Pipeline composition
// ---------------------------------------------------------------------------

struct PipelineBundle {
  std::unique_ptr<mesh::MeshTopology> biotac_topology, digit_topology;
  std::unique_ptr<SignalVae<float>> svb;
  std::unique_ptr<MeshVae<float>> mvb, mvd;
  std::unique_ptr<ProjectionMlp<float>> s2mpn, m2mpn;
  signal::ChannelStats signal_stats;
  mesh::MeshNormStats biotac_stats, digit_stats;
  render::RenderConfig render_config;
  render::PhotometricTable photometric = render::PhotometricTable::default_table();
  render::SensorImage background;

  // Latent chain 8 -> (S2MPN) -> 128 -> (M2MPN) -> 128 must type-check.
  void validate() const {
    require(svb && mvb && mvd && s2mpn && m2mpn, Errc::missing_checkpoint,
            "bundle: missing networks");
    require(svb->spec().latent_dim == s2mpn->spec().input_dim, Errc::spec_mismatch,
            "bundle: SVB latent does not feed S2MPN");
    require(s2mpn->spec().output_dim == mvb->spec().latent_dim, Errc::spec_mismatch,
            "bundle: S2MPN output does not match MVB latent");
    require(mvb->spec().latent_dim == m2mpn->spec().input_dim, Errc::spec_mismatch,
            "bundle: MVB latent does not feed M2MPN");
    require(m2mpn->spec().output_dim == mvd->spec().latent_dim, Errc::spec_mismatch,
            "bundle: M2MPN output does not match MVD latent");
    require(signal_stats.channels() == signal::kNumElectrodes, Errc::stats_mismatch,
            "bundle: missing signal stats");
    require(background.width == render_config.width && background.height == render_config.height,
            Errc::dimension_mismatch, "bundle: background size mismatch");
  }
};

struct PipelineOutput {
  signal::SignalFrame normalized;
  Eigen::VectorXd z_signal;        // SVB posterior mean (8)
  Eigen::VectorXd z_mesh_biotac;   // S2MPN output (128)
  Eigen::VectorXd z_mesh_digit;    // M2MPN output (128)
  Eigen::MatrixXd biotac_mesh;     // denormalized, mm (diagnostic)
  Eigen::MatrixXd digit_mesh;      // denormalized, mm
  render::HeightMap height_map;
  render::SensorImage image;       // after pyramid blur
};

// Deterministic inference: posterior means only, no sampling anywhere.
inline PipelineOutput run_pipeline(PipelineBundle& bundle, const signal::SignalFrame& raw) {
  bundle.validate();
  PipelineOutput out;
  out.normalized = signal::normalize_frame(raw, bundle.signal_stats);

  Mat<float> x(1, signal::kNumElectrodes);
  for (int c = 0; c < signal::kNumElectrodes; ++c)
    x(0, c) = static_cast<float>(out.normalized.electrodes[c]);

  Mat<float> zs = bundle.svb->encode_mu(x);
  Mat<float> zb = bundle.s2mpn->forward_eval(zs);
  Mat<float> biotac_norm = bundle.mvb->decode(zb, 1);
  out.biotac_mesh = mesh::denormalize_mesh(biotac_norm.cast<double>(), bundle.biotac_stats);

  Mat<float> zd = bundle.m2mpn->forward_eval(zb);
  Mat<float> digit_norm = bundle.mvd->decode(zd, 1);
  out.digit_mesh = mesh::denormalize_mesh(digit_norm.cast<double>(), bundle.digit_stats);

  out.z_signal = zs.row(0).transpose().cast<double>();
  out.z_mesh_biotac = zb.row(0).transpose().cast<double>();
  out.z_mesh_digit = zd.row(0).transpose().cast<double>();

  mesh::SurfaceMesh digit_surface{bundle.digit_topology.get(), out.digit_mesh};
  out.height_map = render::rasterize_heightmap(digit_surface, bundle.render_config);
  auto rendered = render::render_image(out.height_map, bundle.photometric, bundle.background);
  out.image = render::pyramid_gaussian_blur(rendered);
  return out;
}

}  // namespace across::models
