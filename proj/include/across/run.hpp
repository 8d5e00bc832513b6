#pragma once

#include <set>

#include "across/metrics.hpp"
#include "across/models.hpp"
#include "across/synth.hpp"

// Command orchestration: run directories, key=value configuration with
// unknown-key rejection, provenance records, dataset generation, the five
// training commands, conversion and evaluation. The CLI binary and the
// acceptance suite both drive these entry points.

namespace across::run {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration (key=value lines, '#' comments, unknown keys rejected)
// ---------------------------------------------------------------------------

class Config {
 public:
  Config() = default;

  static Config from_text(const std::string& text, const std::string& name = "config") {
    Config c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string l = trim(line);
      if (l.empty() || l[0] == '#') continue;
      auto eq = l.find('=');
      require(eq != std::string::npos, Errc::config_error,
              name + ": line " + std::to_string(lineno) + " is not key=value");
      c.set(trim(l.substr(0, eq)), trim(l.substr(eq + 1)));
    }
    return c;
  }

  static Config from_file(const fs::path& path) {
    return from_text(io::read_file(path), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    require(!key.empty(), Errc::config_error, "empty config key");
    kv_[key] = value;
  }

  void merge(const Config& other) {
    for (const auto& [k, v] : other.kv_) kv_[k] = v;
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }
  std::string require_str(const std::string& key) const {
    used_.insert(key);
    auto it = kv_.find(key);
    require(it != kv_.end(), Errc::config_error, "missing required config key '" + key + "'");
    return it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return parse_double(it->second, "config key " + key);
    } catch (const Error&) {
      fail(Errc::config_error, "config key '" + key + "' is not a number");
    }
  }
  long long get_int(const std::string& key, long long fallback) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return parse_int(it->second, "config key " + key);
    } catch (const Error&) {
      fail(Errc::config_error, "config key '" + key + "' is not an integer");
    }
  }
  bool get_bool(const std::string& key, bool fallback) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "1" || it->second == "true") return true;
    if (it->second == "0" || it->second == "false") return false;
    fail(Errc::config_error, "config key '" + key + "' must be a boolean");
  }

  // Every present key must have been read by the command.
  void reject_unknown() const {
    for (const auto& [k, v] : kv_) {
      if (!used_.count(k)) fail(Errc::config_error, "unknown config key '" + k + "'");
    }
  }

  std::string resolved_text() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + "=" + v + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Run directory ownership and provenance
// ---------------------------------------------------------------------------

// Exclusive ownership of a run directory for the duration of a command.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / "LOCK") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (fs::exists(path_))
      fail(Errc::io_error, "run directory is locked by another process: " + path_.string());
    std::ofstream out(path_);
    if (!out) fail(Errc::io_error, "cannot create lock file " + path_.string());
    out << "locked\n";
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

inline std::uint32_t file_crc(const fs::path& path) { return crc32(io::read_file(path)); }

inline std::string crc_hex(std::uint32_t crc) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", crc);
  return buf;
}

struct Provenance {
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> entries;  // label -> value

  void add_file(const std::string& label, const fs::path& path) {
    entries.emplace_back(label, crc_hex(file_crc(path)) + " " + path.string());
  }
  void add(const std::string& label, const std::string& value) { entries.emplace_back(label, value); }

  std::string to_text() const {
    std::string out = "seed " + std::to_string(seed) + "\n";
    for (const auto& [label, value] : entries) out += label + " " + value + "\n";
    return out;
  }
};

inline std::map<std::string, std::string> provenance_from_file(const fs::path& path) {
  std::map<std::string, std::string> out;
  std::istringstream in(io::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    auto sp = line.find(' ');
    if (sp == std::string::npos) continue;
    out[line.substr(0, sp)] = line.substr(sp + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Common options and presets
// ---------------------------------------------------------------------------

struct CommonOpts {
  fs::path out;
  std::uint64_t seed = 0;
  bool desk_scale = false;
  bool emit_intermediates = false;
  fs::path resume_from;
};

// Desk-scale preset: decimated meshes and shortened schedules so the whole
// pipeline (generate, five trainings, convert, eval) finishes on a laptop.
// Explicit config keys override any of these.
inline void apply_desk_preset(Config& cfg) {
  Config preset = Config::from_text(
      "trajectories=50\n"
      "biotac_vertices=260\n"
      "digit_vertices=384\n"
      "svb_epochs=40\n"
      "mesh_epochs=18\n"
      "s2mpn_epochs=80\n"
      "m2mpn_epochs=60\n"
      "batch_size=64\n"
      "proj_batch_size=512\n");
  preset.merge(cfg);
  cfg = preset;
}

inline synth::RigConfig rig_from_config(const Config& cfg) {
  synth::RigConfig rig;
  rig.biotac_vertices = static_cast<int>(cfg.get_int("biotac_vertices", rig.biotac_vertices));
  rig.digit_vertices = static_cast<int>(cfg.get_int("digit_vertices", rig.digit_vertices));
  rig.biotac_cap_radius = cfg.get_double("biotac_cap_radius", rig.biotac_cap_radius);
  rig.biotac_extent = cfg.get_double("biotac_extent", rig.biotac_extent);
  rig.digit_width = cfg.get_double("digit_width", rig.digit_width);
  rig.digit_height = cfg.get_double("digit_height", rig.digit_height);
  rig.digit_corner_radius = cfg.get_double("digit_corner_radius", rig.digit_corner_radius);
  rig.falloff_radius = cfg.get_double("falloff_radius", rig.falloff_radius);
  rig.contact_margin = cfg.get_double("contact_margin", rig.contact_margin);
  rig.signal_gain = cfg.get_double("signal_gain", rig.signal_gain);
  rig.signal_d0 = cfg.get_double("signal_d0", rig.signal_d0);
  return rig;
}

inline render::RenderConfig render_from_config(const Config& cfg) {
  render::RenderConfig rc;
  rc.width = static_cast<int>(cfg.get_int("image_width", rc.width));
  rc.height = static_cast<int>(cfg.get_int("image_height", rc.height));
  rc.pixel_pitch_mm = cfg.get_double("pixel_pitch", rc.pixel_pitch_mm);
  return rc;
}

// ---------------------------------------------------------------------------
// Dataset layout
// ---------------------------------------------------------------------------

struct DatasetLayout {
  fs::path root;

  fs::path manifest() const { return root / "manifest.csv"; }
  fs::path biotac_topology() const { return root / "biotac_topology.txt"; }
  fs::path digit_topology() const { return root / "digit_topology.txt"; }
  fs::path meta() const { return root / "dataset_meta.txt"; }
  fs::path splits_dir() const { return root / "splits"; }
  fs::path split_file(const char* which) const {
    return splits_dir() / (std::string(which) + ".txt");
  }
  fs::path splits_crc() const { return root / "splits.crc"; }
  fs::path meshes_dir() const { return root / "meshes"; }
  fs::path signals_dir() const { return root / "signals"; }
};

inline std::string split_ids_to_text(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) out += std::to_string(id) + "\n";
  return out;
}

inline std::vector<int> split_ids_from_text(const std::string& text) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) out.push_back(static_cast<int>(parse_int(trim(line), "split file")));
  }
  return out;
}

inline std::uint32_t compute_splits_crc(const DatasetLayout& ds) {
  std::string all = io::read_file(ds.split_file("train")) + io::read_file(ds.split_file("val")) +
                    io::read_file(ds.split_file("test"));
  return crc32(all);
}

// ---------------------------------------------------------------------------
// gen-dataset
// ---------------------------------------------------------------------------

inline void cmd_gen_dataset(Config& cfg, const CommonOpts& opts) {
  if (opts.desk_scale) apply_desk_preset(cfg);
  DirLock lock(opts.out);
  DatasetLayout ds{opts.out / "dataset"};

  const int trajectories = static_cast<int>(cfg.get_int("trajectories", 860));
  const double test_fraction = cfg.get_double("test_fraction", 0.15);
  const double val_fraction = cfg.get_double("val_fraction", 0.12);
  cfg.get_int("svb_epochs", 0);  // preset keys owned by the training commands
  cfg.get_int("mesh_epochs", 0);
  cfg.get_int("s2mpn_epochs", 0);
  cfg.get_int("m2mpn_epochs", 0);
  cfg.get_int("proj_batch_size", 0);
  cfg.get_int("batch_size", 0);
  auto rig_cfg = rig_from_config(cfg);
  cfg.reject_unknown();

  auto rig = synth::build_sensor_rig(rig_cfg);
  auto trajs = synth::sample_trajectories(rig, trajectories, opts.seed);
  std::vector<synth::IndenterKind> kinds(synth::all_indenter_kinds().begin(),
                                         synth::all_indenter_kinds().end());

  std::error_code ec;
  fs::create_directories(ds.meshes_dir(), ec);
  fs::create_directories(ds.signals_dir(), ec);
  fs::create_directories(ds.splits_dir(), ec);

  mesh::MeshTopology biotac_topo(rig.biotac.positions, rig.biotac.triangles);
  mesh::MeshTopology digit_topo(rig.digit.positions, rig.digit.triangles);
  mesh::save_topology(ds.biotac_topology(), biotac_topo);
  mesh::save_topology(ds.digit_topology(), digit_topo);

  std::vector<synth::ManifestRow> rows;
  // One signal file per (trajectory, indenter): rest frame then 20 depths.
  std::map<std::string, signal::FrameSeq> signal_files;
  generate_paired_dataset(rig, trajs, kinds, [&](const synth::PairedSample& s) {
    char base[128];
    std::snprintf(base, sizeof(base), "t%04d_%s_%02d", s.trajectory_id,
                  synth::indenter_kind_name(s.indenter_kind), s.depth_index);
    synth::ManifestRow row;
    row.trajectory_id = s.trajectory_id;
    row.indenter_kind = s.indenter_kind;
    row.depth_mm = s.depth_mm;
    row.biotac_mesh_path = "meshes/" + std::string(base) + "_b.acrm";
    row.digit_mesh_path = "meshes/" + std::string(base) + "_d.acrm";
    char sig[64];
    std::snprintf(sig, sizeof(sig), "signals/t%04d_%s.csv", s.trajectory_id,
                  synth::indenter_kind_name(s.indenter_kind));
    row.signal_path = sig;
    row.contact = s.contact_biotac;
    mesh::save_frame(ds.root / row.biotac_mesh_path, s.biotac_positions);
    mesh::save_frame(ds.root / row.digit_mesh_path, s.digit_positions);
    auto& frames = signal_files[row.signal_path];
    if (frames.empty()) frames.push_back(rig.rest_signal(0));
    frames.push_back(s.signal);
    rows.push_back(std::move(row));
  });
  io::write_file(ds.manifest(), synth::manifest_to_csv(rows));
  for (const auto& [path, frames] : signal_files) signal::save_csv(ds.root / path, frames);

  std::vector<int> ids;
  for (const auto& t : trajs) ids.push_back(t.trajectory_id);
  auto splits = synth::split_by_trajectory(ids, test_fraction, val_fraction, opts.seed + 1);
  io::write_file(ds.split_file("train"), split_ids_to_text(splits.train));
  io::write_file(ds.split_file("val"), split_ids_to_text(splits.val));
  io::write_file(ds.split_file("test"), split_ids_to_text(splits.test));
  io::write_file(ds.splits_crc(), crc_hex(compute_splits_crc(ds)) + "\n");

  std::string meta;
  meta += "# FEM reference constants (provenance only; the analytic generator does not use them)\n";
  meta += "fem_elasticity_kpa=" + format_double(synth::kFemElasticityKPa) + "\n";
  meta += "fem_poisson_ratio=" + format_double(synth::kFemPoissonRatio) + "\n";
  meta += "fem_friction_coefficient=" + format_double(synth::kFemFrictionCoefficient) + "\n";
  meta += "biotac_vertices=" + std::to_string(rig.biotac.positions.rows()) + "\n";
  meta += "digit_vertices=" + std::to_string(rig.digit.positions.rows()) + "\n";
  meta += "trajectories=" + std::to_string(trajectories) + "\n";
  meta += "samples=" + std::to_string(rows.size()) + "\n";
  io::write_file(ds.meta(), meta);

  Provenance prov;
  prov.seed = opts.seed;
  prov.add("config_crc", crc_hex(crc32(cfg.resolved_text())));
  prov.add("manifest_crc", crc_hex(file_crc(ds.manifest())));
  prov.add("splits_crc", crc_hex(compute_splits_crc(ds)));
  io::write_file(ds.root / "provenance.txt", prov.to_text());
  io::write_file(ds.root / "config.resolved", cfg.resolved_text());
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

enum class Split { train, val, test };

struct LoadedDataset {
  DatasetLayout layout;
  std::vector<synth::ManifestRow> rows;
  synth::SplitSets splits;
  mesh::MeshTopology biotac_topology, digit_topology;

  Split row_split(const synth::ManifestRow& row) const {
    if (std::binary_search(splits.test.begin(), splits.test.end(), row.trajectory_id))
      return Split::test;
    if (std::binary_search(splits.val.begin(), splits.val.end(), row.trajectory_id))
      return Split::val;
    return Split::train;
  }

  std::vector<const synth::ManifestRow*> rows_in(Split split) const {
    std::vector<const synth::ManifestRow*> out;
    for (const auto& r : rows)
      if (row_split(r) == split) out.push_back(&r);
    return out;
  }
};

inline LoadedDataset load_dataset(const fs::path& dataset_dir, int hierarchy_levels = 4,
                                  int pool_factor = 2) {
  LoadedDataset d;
  d.layout.root = dataset_dir;
  require(fs::exists(d.layout.manifest()), Errc::io_error,
          "no dataset manifest at " + d.layout.manifest().string());
  d.rows = synth::manifest_from_csv(io::read_file(d.layout.manifest()));
  d.splits.train = split_ids_from_text(io::read_file(d.layout.split_file("train")));
  d.splits.val = split_ids_from_text(io::read_file(d.layout.split_file("val")));
  d.splits.test = split_ids_from_text(io::read_file(d.layout.split_file("test")));
  d.biotac_topology = mesh::load_topology(d.layout.biotac_topology());
  d.digit_topology = mesh::load_topology(d.layout.digit_topology());
  if (hierarchy_levels > 0) {
    mesh::build_pooling_hierarchy(d.biotac_topology, hierarchy_levels, pool_factor);
    mesh::build_pooling_hierarchy(d.digit_topology, hierarchy_levels, pool_factor);
  }
  return d;
}

// Stacks the selected meshes into one (N*V, 3) float matrix.
inline nn::Mat<float> load_stacked_meshes(const LoadedDataset& d,
                                          const std::vector<const synth::ManifestRow*>& rows,
                                          bool digit) {
  const auto& topo = digit ? d.digit_topology : d.biotac_topology;
  const int v = topo.vertex_count(0);
  nn::Mat<float> out(static_cast<Eigen::Index>(rows.size()) * v, 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& path = digit ? rows[i]->digit_mesh_path : rows[i]->biotac_mesh_path;
    Eigen::MatrixXd pos = mesh::load_frame(d.layout.root / path);
    require(pos.rows() == v, Errc::topology_mismatch, "mesh size mismatch in " + path);
    out.middleRows(static_cast<Eigen::Index>(i) * v, v) = pos.cast<float>();
  }
  return out;
}

// Signal frame for a manifest row (depth index == timestamp) plus access to
// the per-file rest frames.
class SignalTable {
 public:
  explicit SignalTable(const LoadedDataset& d) : dataset_(d) {}

  const signal::FrameSeq& file(const std::string& rel_path) {
    auto it = cache_.find(rel_path);
    if (it == cache_.end()) {
      it = cache_.emplace(rel_path, signal::load_csv(dataset_.layout.root / rel_path)).first;
    }
    return it->second;
  }

  signal::SignalFrame frame_for(const synth::ManifestRow& row) {
    const auto& frames = file(row.signal_path);
    auto t = static_cast<std::int64_t>(std::llround(row.depth_mm / 0.1));
    for (const auto& f : frames)
      if (f.timestamp_index == t) return f;
    fail(Errc::format_error, "no signal frame for depth " + std::to_string(row.depth_mm) + " in " +
                                 row.signal_path);
  }

  signal::SignalFrame rest_for(const std::string& rel_path) {
    const auto& frames = file(rel_path);
    for (const auto& f : frames)
      if (f.timestamp_index == 0) return f;
    fail(Errc::format_error, "no rest frame in " + rel_path);
  }

 private:
  const LoadedDataset& dataset_;
  std::map<std::string, signal::FrameSeq> cache_;
};

inline nn::Mat<float> frames_to_matrix(const signal::FrameSeq& frames) {
  nn::Mat<float> out(static_cast<Eigen::Index>(frames.size()), signal::kNumElectrodes);
  for (std::size_t i = 0; i < frames.size(); ++i)
    for (int c = 0; c < signal::kNumElectrodes; ++c)
      out(static_cast<Eigen::Index>(i), c) = static_cast<float>(frames[i].electrodes[static_cast<std::size_t>(c)]);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct RunLayout {
  fs::path root;

  fs::path model_dir(models::ModelKind kind) const { return root / models::model_kind_name(kind); }
  fs::path checkpoint(models::ModelKind kind) const { return model_dir(kind) / "checkpoint.acrw"; }
  fs::path history(models::ModelKind kind) const { return model_dir(kind) / "history.csv"; }
  fs::path model_spec(models::ModelKind kind) const { return model_dir(kind) / "model_spec.txt"; }
  fs::path signal_stats() const { return model_dir(models::ModelKind::svb) / "signal_stats.csv"; }
  fs::path mesh_stats(models::ModelKind kind) const { return model_dir(kind) / "mesh_stats.txt"; }
  fs::path dataset() const { return root / "dataset"; }
};

namespace detail {

inline void require_checkpoint(const fs::path& path, const std::string& what) {
  if (!fs::exists(path))
    fail(Errc::missing_prerequisite, what + " checkpoint missing: " + path.string());
}

struct TrainSetup {
  nn::TrainConfig train_cfg;
  nn::TrainState state;
  std::map<std::string, nn::RawTensor> resume_raw;
  bool resuming = false;
};

inline TrainSetup setup_training(const models::ModelSpec& spec, Config& cfg,
                                 const CommonOpts& opts, const char* epochs_key) {
  TrainSetup s;
  s.train_cfg = spec.train_config();
  s.train_cfg.seed = opts.seed;
  s.train_cfg.max_epochs =
      static_cast<int>(cfg.get_int(epochs_key, cfg.get_int("epochs", s.train_cfg.max_epochs)));
  s.train_cfg.batch_size = static_cast<int>(cfg.get_int("batch_size", s.train_cfg.batch_size));
  s.train_cfg.early_stop_patience =
      static_cast<int>(cfg.get_int("patience", s.train_cfg.early_stop_patience));
  // VAEs ramp the KL weight over the first quarter of the schedule unless
  // overridden; the projections have no KL term.
  const bool is_vae = spec.kind == models::ModelKind::svb || spec.kind == models::ModelKind::mvb ||
                      spec.kind == models::ModelKind::mvd;
  int default_warmup = is_vae ? std::max(1, s.train_cfg.max_epochs / 4) : 0;
  s.train_cfg.beta_warmup_epochs =
      static_cast<int>(cfg.get_int("beta_warmup", default_warmup));
  if (!opts.resume_from.empty()) {
    s.resume_raw = nn::checkpoint_parse(io::read_file(opts.resume_from), opts.resume_from.string());
    auto scalars = nn::checkpoint_scalars(s.resume_raw);
    s.state.start_epoch = static_cast<int>(scalars.count("epoch") ? scalars.at("epoch") : 0);
    s.state.step = static_cast<long long>(scalars.count("step") ? scalars.at("step") : 0);
    s.state.lr = scalars.count("lr") ? scalars.at("lr") : -1.0;
    s.resuming = true;
  }
  return s;
}

template <class Model>
void finish_training(Model& model, const nn::TrainResult& result, const RunLayout& run,
                     models::ModelKind kind, const models::ModelSpec& spec, Config& cfg,
                     Provenance& prov) {
  std::map<std::string, double> scalars;
  scalars["epoch"] = result.history.empty() ? 0.0 : result.history.back().epoch;
  scalars["step"] = static_cast<double>(result.steps);
  scalars["lr"] = result.lr_after;
  scalars["best_val"] = result.best_val;
  io::write_file(run.checkpoint(kind), nn::checkpoint_to_bytes(model.params(), scalars));
  io::write_file(run.history(kind), nn::history_to_csv(result.history));
  io::write_file(run.model_spec(kind), models::spec_to_text(spec));
  io::write_file(run.model_dir(kind) / "config.resolved", cfg.resolved_text());
  io::write_file(run.model_dir(kind) / "provenance.txt", prov.to_text());
}

}  // namespace detail

inline models::ModelSpec spec_for(models::ModelKind kind, Config& cfg) {
  auto spec_path = cfg.get_str("model_spec", "");
  if (!spec_path.empty()) {
    auto spec = models::spec_from_text(io::read_file(spec_path), spec_path);
    require(spec.kind == kind, Errc::spec_mismatch, "model spec file is for another model kind");
    return spec;
  }
  return models::ModelSpec::defaults(kind);
}

inline void cmd_train(models::ModelKind kind, Config& cfg, const CommonOpts& opts) {
  if (opts.desk_scale) apply_desk_preset(cfg);
  RunLayout run{opts.out};
  fs::path dataset_dir = cfg.get_str("dataset", (run.dataset()).string());
  DirLock lock(run.model_dir(kind));

  Provenance prov;
  prov.seed = opts.seed;

  auto spec = spec_for(kind, cfg);
  // Presets carry keys for all commands; mark the ones this command ignores.
  for (const char* k :
       {"trajectories", "biotac_vertices", "digit_vertices", "svb_epochs", "mesh_epochs",
        "s2mpn_epochs", "m2mpn_epochs", "proj_batch_size"})
    cfg.get_str(k, "");

  switch (kind) {
    case models::ModelKind::svb: {
      auto d = load_dataset(dataset_dir, 0);
      prov.add_file("manifest", d.layout.manifest());
      prov.add("splits_crc", crc_hex(compute_splits_crc(d.layout)));

      // Gather every signal file once, grouped by trajectory split.
      SignalTable table(d);
      std::set<std::string> seen;
      signal::FrameSeq train_frames, val_frames;
      double keep_nc = cfg.get_double("keep_noncontact_fraction", 1.0);
      for (const auto& row : d.rows) {
        if (!seen.insert(row.signal_path).second) continue;
        const auto& frames = table.file(row.signal_path);
        auto split = d.row_split(row);
        if (split == Split::test) continue;
        auto& bucket = split == Split::train ? train_frames : val_frames;
        bucket.insert(bucket.end(), frames.begin(), frames.end());
      }
      require(!train_frames.empty() && !val_frames.empty(), Errc::empty_dataset,
              "svb: empty train or val signal set");
      train_frames = signal::balance_dataset(train_frames, keep_nc, opts.seed + 2);

      auto stats = signal::compute_channel_stats(train_frames);
      auto normalize_all = [&](const signal::FrameSeq& frames) {
        signal::FrameSeq out;
        out.reserve(frames.size());
        for (const auto& f : frames) out.push_back(signal::normalize_frame(f, stats));
        return out;
      };
      auto setup = detail::setup_training(spec, cfg, opts, "svb_epochs");
      cfg.reject_unknown();

      models::SignalVae<float> model(spec, opts.seed + 10);
      if (setup.resuming) nn::checkpoint_into_store(setup.resume_raw, model.params());
      nn::DenseBatcher<float> train_b{frames_to_matrix(normalize_all(train_frames)),
                                      nn::Mat<float>(static_cast<Eigen::Index>(train_frames.size()), 0)};
      nn::DenseBatcher<float> val_b{frames_to_matrix(normalize_all(val_frames)),
                                    nn::Mat<float>(static_cast<Eigen::Index>(val_frames.size()), 0)};
      auto result = nn::train_loop<float>(model, train_b, val_b, setup.train_cfg, setup.state);
      io::write_file(run.signal_stats(), signal::stats_to_csv(stats));
      detail::finish_training(model, result, run, kind, spec, cfg, prov);
      break;
    }
    case models::ModelKind::mvb:
    case models::ModelKind::mvd: {
      const bool digit = kind == models::ModelKind::mvd;
      auto d = load_dataset(dataset_dir, static_cast<int>(spec.conv_channels.size()),
                            spec.pool_factor);
      prov.add_file("manifest", d.layout.manifest());
      prov.add("splits_crc", crc_hex(compute_splits_crc(d.layout)));

      auto train_rows = d.rows_in(Split::train);
      auto val_rows = d.rows_in(Split::val);
      require(!train_rows.empty() && !val_rows.empty(), Errc::empty_dataset,
              "mesh vae: empty train or val split");
      auto train_stack = load_stacked_meshes(d, train_rows, digit);
      auto val_stack = load_stacked_meshes(d, val_rows, digit);

      const auto& topo = digit ? d.digit_topology : d.biotac_topology;
      auto stats = mesh::compute_mesh_norm_stats_stacked(train_stack, topo.vertex_count(0));
      models::normalize_stacked(train_stack, stats);
      models::normalize_stacked(val_stack, stats);

      auto setup = detail::setup_training(spec, cfg, opts, "mesh_epochs");
      cfg.reject_unknown();

      models::MeshVae<float> model(spec, &topo, opts.seed + 11);
      if (setup.resuming) nn::checkpoint_into_store(setup.resume_raw, model.params());
      models::MeshBatcher<float> train_b{std::move(train_stack), topo.vertex_count(0)};
      models::MeshBatcher<float> val_b{std::move(val_stack), topo.vertex_count(0)};
      auto result = nn::train_loop<float>(model, train_b, val_b, setup.train_cfg, setup.state);
      io::write_file(run.mesh_stats(kind), mesh::mesh_stats_to_text(stats));
      detail::finish_training(model, result, run, kind, spec, cfg, prov);
      break;
    }
    case models::ModelKind::s2mpn:
    case models::ModelKind::m2mpn: {
      const bool s2 = kind == models::ModelKind::s2mpn;
      // Frozen prerequisites.
      detail::require_checkpoint(run.checkpoint(models::ModelKind::mvb), "MVB");
      if (s2) detail::require_checkpoint(run.checkpoint(models::ModelKind::svb), "SVB");
      else detail::require_checkpoint(run.checkpoint(models::ModelKind::mvd), "MVD");

      auto d = load_dataset(dataset_dir, 4, 2);
      prov.add_file("manifest", d.layout.manifest());
      prov.add("splits_crc", crc_hex(compute_splits_crc(d.layout)));
      prov.add_file("mvb_checkpoint", run.checkpoint(models::ModelKind::mvb));

      auto mvb_spec = models::spec_from_text(io::read_file(run.model_spec(models::ModelKind::mvb)));
      models::MeshVae<float> mvb(mvb_spec, &d.biotac_topology, 1);
      nn::checkpoint_into_store(nn::checkpoint_parse(io::read_file(run.checkpoint(models::ModelKind::mvb))),
                                mvb.params());
      auto biotac_stats =
          mesh::mesh_stats_from_text(io::read_file(run.mesh_stats(models::ModelKind::mvb)));

      auto train_rows = d.rows_in(Split::train);
      auto val_rows = d.rows_in(Split::val);
      require(!train_rows.empty() && !val_rows.empty(), Errc::empty_dataset,
              "projection: empty train or val split");

      // Latent inputs and targets from the frozen encoders (posterior means).
      auto encode_meshes = [&](models::MeshVae<float>& vae, const mesh::MeshNormStats& stats,
                               const std::vector<const synth::ManifestRow*>& rows, bool digit) {
        auto stack = load_stacked_meshes(d, rows, digit);
        models::normalize_stacked(stack, stats);
        // Encode in slabs to bound the activation memory.
        const int v = digit ? d.digit_topology.vertex_count(0) : d.biotac_topology.vertex_count(0);
        const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
        nn::Mat<float> z(n, vae.spec().latent_dim);
        const Eigen::Index slab = 256;
        for (Eigen::Index start = 0; start < n; start += slab) {
          Eigen::Index len = std::min(slab, n - start);
          z.middleRows(start, len) =
              vae.encode_mu(stack.middleRows(start * v, len * v), static_cast<int>(len));
        }
        return z;
      };

      nn::Mat<float> z_in_train, z_in_val, z_tgt_train, z_tgt_val;
      if (s2) {
        prov.add_file("svb_checkpoint", run.checkpoint(models::ModelKind::svb));
        auto svb_spec = models::spec_from_text(io::read_file(run.model_spec(models::ModelKind::svb)));
        models::SignalVae<float> svb(svb_spec, 1);
        nn::checkpoint_into_store(
            nn::checkpoint_parse(io::read_file(run.checkpoint(models::ModelKind::svb))), svb.params());
        auto signal_stats = signal::stats_from_csv(io::read_file(run.signal_stats()));

        SignalTable table(d);
        auto signals_of = [&](const std::vector<const synth::ManifestRow*>& rows) {
          signal::FrameSeq frames;
          std::set<std::string> seen;
          std::vector<const synth::ManifestRow*> order;
          for (const auto* r : rows) {
            frames.push_back(signal::normalize_frame(table.frame_for(*r), signal_stats));
            order.push_back(r);
          }
          // Rest pairs anchor the zero-deformation point of the mapping.
          for (const auto* r : rows) {
            if (!seen.insert(r->signal_path).second) continue;
            frames.push_back(signal::normalize_frame(table.rest_for(r->signal_path), signal_stats));
            order.push_back(nullptr);
          }
          return std::make_pair(frames, order);
        };
        auto [train_frames, train_order] = signals_of(train_rows);
        auto [val_frames, val_order] = signals_of(val_rows);
        z_in_train = svb.encode_mu(frames_to_matrix(train_frames));
        z_in_val = svb.encode_mu(frames_to_matrix(val_frames));

        auto targets_of = [&](const std::vector<const synth::ManifestRow*>& order) {
          std::vector<const synth::ManifestRow*> mesh_rows;
          for (const auto* r : order)
            if (r) mesh_rows.push_back(r);
          auto z = encode_meshes(mvb, biotac_stats, mesh_rows, false);
          // The reference (undeformed) mesh is the target for rest frames.
          nn::Mat<float> ref_stack = d.biotac_topology.reference(0).cast<float>();
          models::normalize_stacked(ref_stack, biotac_stats);
          nn::Mat<float> z_ref = mvb.encode_mu(ref_stack, 1);
          nn::Mat<float> out(static_cast<Eigen::Index>(order.size()), z.cols());
          Eigen::Index zi = 0;
          for (std::size_t i = 0; i < order.size(); ++i) {
            if (order[i]) out.row(static_cast<Eigen::Index>(i)) = z.row(zi++);
            else out.row(static_cast<Eigen::Index>(i)) = z_ref.row(0);
          }
          return out;
        };
        z_tgt_train = targets_of(train_order);
        z_tgt_val = targets_of(val_order);
      } else {
        prov.add_file("mvd_checkpoint", run.checkpoint(models::ModelKind::mvd));
        auto mvd_spec = models::spec_from_text(io::read_file(run.model_spec(models::ModelKind::mvd)));
        models::MeshVae<float> mvd(mvd_spec, &d.digit_topology, 1);
        nn::checkpoint_into_store(
            nn::checkpoint_parse(io::read_file(run.checkpoint(models::ModelKind::mvd))), mvd.params());
        auto digit_stats =
            mesh::mesh_stats_from_text(io::read_file(run.mesh_stats(models::ModelKind::mvd)));
        z_in_train = encode_meshes(mvb, biotac_stats, train_rows, false);
        z_in_val = encode_meshes(mvb, biotac_stats, val_rows, false);
        z_tgt_train = encode_meshes(mvd, digit_stats, train_rows, true);
        z_tgt_val = encode_meshes(mvd, digit_stats, val_rows, true);
      }

      auto setup = detail::setup_training(spec, cfg, opts, s2 ? "s2mpn_epochs" : "m2mpn_epochs");
      setup.train_cfg.batch_size = static_cast<int>(
          cfg.get_int("proj_batch_size", setup.train_cfg.batch_size));
      cfg.reject_unknown();

      models::ProjectionMlp<float> model(spec, opts.seed + 12);
      if (setup.resuming) nn::checkpoint_into_store(setup.resume_raw, model.params());
      nn::DenseBatcher<float> train_b{std::move(z_in_train), std::move(z_tgt_train)};
      nn::DenseBatcher<float> val_b{std::move(z_in_val), std::move(z_tgt_val)};
      auto result = nn::train_loop<float>(model, train_b, val_b, setup.train_cfg, setup.state);
      detail::finish_training(model, result, run, kind, spec, cfg, prov);
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Bundle loading
// ---------------------------------------------------------------------------

inline models::PipelineBundle load_bundle(const fs::path& root, const render::RenderConfig& rc) {
  RunLayout run{root};
  for (auto kind : {models::ModelKind::svb, models::ModelKind::mvb, models::ModelKind::mvd,
                    models::ModelKind::s2mpn, models::ModelKind::m2mpn}) {
    if (!fs::exists(run.checkpoint(kind)))
      fail(Errc::missing_checkpoint,
           std::string("bundle: missing checkpoint for ") + models::model_kind_name(kind));
  }

  models::PipelineBundle b;
  auto mvb_spec = models::spec_from_text(io::read_file(run.model_spec(models::ModelKind::mvb)));
  auto mvd_spec = models::spec_from_text(io::read_file(run.model_spec(models::ModelKind::mvd)));

  auto d = load_dataset(run.dataset(), static_cast<int>(mvb_spec.conv_channels.size()),
                        mvb_spec.pool_factor);
  b.biotac_topology = std::make_unique<mesh::MeshTopology>(std::move(d.biotac_topology));
  b.digit_topology = std::make_unique<mesh::MeshTopology>(std::move(d.digit_topology));

  auto svb_spec = models::spec_from_text(io::read_file(run.model_spec(models::ModelKind::svb)));
  auto s2_spec = models::spec_from_text(io::read_file(run.model_spec(models::ModelKind::s2mpn)));
  auto m2_spec = models::spec_from_text(io::read_file(run.model_spec(models::ModelKind::m2mpn)));

  b.svb = std::make_unique<models::SignalVae<float>>(svb_spec, 1);
  b.mvb = std::make_unique<models::MeshVae<float>>(mvb_spec, b.biotac_topology.get(), 1);
  b.mvd = std::make_unique<models::MeshVae<float>>(mvd_spec, b.digit_topology.get(), 1);
  b.s2mpn = std::make_unique<models::ProjectionMlp<float>>(s2_spec, 1);
  b.m2mpn = std::make_unique<models::ProjectionMlp<float>>(m2_spec, 1);

  auto load_into = [&](models::ModelKind kind, nn::ParamStore<float>& ps) {
    nn::checkpoint_into_store(nn::checkpoint_parse(io::read_file(run.checkpoint(kind)),
                                                   run.checkpoint(kind).string()),
                              ps);
  };
  load_into(models::ModelKind::svb, b.svb->params());
  load_into(models::ModelKind::mvb, b.mvb->params());
  load_into(models::ModelKind::mvd, b.mvd->params());
  load_into(models::ModelKind::s2mpn, b.s2mpn->params());
  load_into(models::ModelKind::m2mpn, b.m2mpn->params());

  b.signal_stats = signal::stats_from_csv(io::read_file(run.signal_stats()));
  b.biotac_stats = mesh::mesh_stats_from_text(io::read_file(run.mesh_stats(models::ModelKind::mvb)));
  b.digit_stats = mesh::mesh_stats_from_text(io::read_file(run.mesh_stats(models::ModelKind::mvd)));
  b.render_config = rc;
  b.photometric = render::PhotometricTable::default_table();
  b.background = render::synthetic_background(rc.width, rc.height);
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// convert
// ---------------------------------------------------------------------------

inline void cmd_convert(Config& cfg, const CommonOpts& opts) {
  if (opts.desk_scale) apply_desk_preset(cfg);
  fs::path input = cfg.require_str("input");
  fs::path bundle_dir = cfg.require_str("bundle");
  auto rc = render_from_config(cfg);
  bool drift_correct = cfg.get_bool("drift_correct", false);
  for (const char* k :
       {"trajectories", "biotac_vertices", "digit_vertices", "svb_epochs", "mesh_epochs",
        "s2mpn_epochs", "m2mpn_epochs", "batch_size", "proj_batch_size"})
    cfg.get_str(k, "");
  cfg.reject_unknown();

  DirLock lock(opts.out);
  auto bundle = load_bundle(bundle_dir, rc);
  auto frames = signal::load_csv(input);
  require(!frames.empty(), Errc::empty_input, "convert: no frames in " + input.string());

  if (drift_correct) {
    auto model = signal::fit_drift(frames, bundle.signal_stats);
    for (auto& f : frames) f = signal::correct_drift(f, model, bundle.signal_stats);
  }

  std::string index = "frame,t,contact,image_path,digit_mesh_path,biotac_mesh_path\n";
  for (std::size_t i = 0; i < frames.size(); ++i) {
    auto out = models::run_pipeline(bundle, frames[i]);
    char name[64];
    std::snprintf(name, sizeof(name), "frame_%05zu", i);
    std::string image_rel = std::string(name) + "_digit.ppm";
    std::string digit_rel, biotac_rel;
    render::save_ppm(opts.out / image_rel, out.image);
    if (opts.emit_intermediates) {
      digit_rel = std::string(name) + "_digit.acrm";
      biotac_rel = std::string(name) + "_biotac.acrm";
      mesh::save_frame(opts.out / digit_rel, out.digit_mesh);
      mesh::save_frame(opts.out / biotac_rel, out.biotac_mesh);
      io::write_file(opts.out / (std::string(name) + "_height.acrh"),
                     render::heightmap_to_acrh(out.height_map));
    }
    index += std::string(name) + "," + std::to_string(frames[i].timestamp_index) + "," +
             (frames[i].contact ? "1" : "0") + "," + image_rel + "," + digit_rel + "," +
             biotac_rel + "\n";
  }
  io::write_file(opts.out / "index.csv", index);

  Provenance prov;
  prov.seed = opts.seed;
  prov.add_file("input", input);
  prov.add_file("svb_checkpoint", RunLayout{bundle_dir}.checkpoint(models::ModelKind::svb));
  io::write_file(opts.out / "provenance.txt", prov.to_text());
  io::write_file(opts.out / "config.resolved", cfg.resolved_text());
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOutcome {
  metrics::EvalReport report;
  // Per-sample digit deformation-region areas by (trajectory, indenter),
  // ordered by depth; used for monotonicity checks.
  std::map<std::pair<int, std::string>, std::vector<double>> predicted_region_area;
};

inline EvalOutcome evaluate_bundle(models::PipelineBundle& bundle, const LoadedDataset& d,
                                   SignalTable& table) {
  auto test_rows = d.rows_in(Split::test);
  require(!test_rows.empty(), Errc::empty_dataset, "eval: empty test split");

  const auto& biotac_ref = bundle.biotac_topology->reference(0);
  const auto& digit_ref = bundle.digit_topology->reference(0);
  Eigen::VectorXd digit_areas =
      mesh::vertex_areas(digit_ref, bundle.digit_topology->triangles(0));

  struct Accum {
    std::vector<double> rmse_all, euc_all, rmse_region, euc_region;
  };
  Accum s2, mvb, mvd, m2;
  std::vector<double> svb_frame_rmse;
  signal::FrameSeq svb_pred, svb_target;
  EvalOutcome outcome;

  auto add_mesh_metrics = [](Accum& acc, const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt,
                             const metrics::DeformationMask& mask) {
    acc.rmse_all.push_back(metrics::mesh_rmse_um(pred, gt));
    acc.euc_all.push_back(metrics::mesh_euclidean_um(pred, gt));
    if (mask.count() > 0) {
      acc.rmse_region.push_back(metrics::mesh_rmse_um(pred, gt, &mask.selected));
      acc.euc_region.push_back(metrics::mesh_euclidean_um(pred, gt, &mask.selected));
    }
  };

  for (const auto* row : test_rows) {
    Eigen::MatrixXd gt_biotac = mesh::load_frame(d.layout.root / row->biotac_mesh_path);
    Eigen::MatrixXd gt_digit = mesh::load_frame(d.layout.root / row->digit_mesh_path);
    auto biotac_mask = metrics::deformation_mask(gt_biotac, biotac_ref);
    auto digit_mask = metrics::deformation_mask(gt_digit, digit_ref);

    // Normalized inputs.
    auto raw = table.frame_for(*row);
    auto normalized = signal::normalize_frame(raw, bundle.signal_stats);
    nn::Mat<float> x(1, signal::kNumElectrodes);
    for (int c = 0; c < signal::kNumElectrodes; ++c)
      x(0, c) = static_cast<float>(normalized.electrodes[static_cast<std::size_t>(c)]);

    nn::Mat<float> gt_biotac_norm =
        mesh::normalize_mesh(gt_biotac, bundle.biotac_stats).cast<float>();
    nn::Mat<float> gt_digit_norm =
        mesh::normalize_mesh(gt_digit, bundle.digit_stats).cast<float>();

    // SVB reconstruction in signal space.
    {
      auto recon = bundle.svb->reconstruct_mu(x);
      signal::SignalFrame pred = normalized;
      for (int c = 0; c < signal::kNumElectrodes; ++c)
        pred.electrodes[static_cast<std::size_t>(c)] = recon(0, c);
      svb_frame_rmse.push_back(metrics::frame_rmse(pred, normalized));
      svb_pred.push_back(pred);
      svb_target.push_back(normalized);
    }

    // MVB / MVD reconstructions.
    {
      auto recon = bundle.mvb->reconstruct_mu(gt_biotac_norm, 1);
      Eigen::MatrixXd pred = mesh::denormalize_mesh(recon.cast<double>(), bundle.biotac_stats);
      add_mesh_metrics(mvb, pred, gt_biotac, biotac_mask);
    }
    {
      auto recon = bundle.mvd->reconstruct_mu(gt_digit_norm, 1);
      Eigen::MatrixXd pred = mesh::denormalize_mesh(recon.cast<double>(), bundle.digit_stats);
      add_mesh_metrics(mvd, pred, gt_digit, digit_mask);
    }

    // S2MPN: signal -> BioTac mesh through the frozen MVB decoder.
    nn::Mat<float> z_signal = bundle.svb->encode_mu(x);
    nn::Mat<float> z_biotac_pred = bundle.s2mpn->forward_eval(z_signal);
    {
      auto decoded = bundle.mvb->decode(z_biotac_pred, 1);
      Eigen::MatrixXd pred = mesh::denormalize_mesh(decoded.cast<double>(), bundle.biotac_stats);
      add_mesh_metrics(s2, pred, gt_biotac, biotac_mask);
    }

    // M2MPN: ground-truth BioTac mesh -> DIGIT mesh through the frozen MVD
    // decoder (the paper's per-network protocol).
    {
      nn::Mat<float> z_mvb = bundle.mvb->encode_mu(gt_biotac_norm, 1);
      nn::Mat<float> z_digit_pred = bundle.m2mpn->forward_eval(z_mvb);
      auto decoded = bundle.mvd->decode(z_digit_pred, 1);
      Eigen::MatrixXd pred = mesh::denormalize_mesh(decoded.cast<double>(), bundle.digit_stats);
      add_mesh_metrics(m2, pred, gt_digit, digit_mask);
    }

    // Full-chain predicted DIGIT mesh region area for the monotonicity
    // check.
    {
      nn::Mat<float> z_digit = bundle.m2mpn->forward_eval(z_biotac_pred);
      auto decoded = bundle.mvd->decode(z_digit, 1);
      Eigen::MatrixXd pred = mesh::denormalize_mesh(decoded.cast<double>(), bundle.digit_stats);
      auto mask = metrics::deformation_mask(pred, digit_ref);
      double area = 0.0;
      for (Eigen::Index v = 0; v < digit_areas.size(); ++v)
        if (mask.selected[static_cast<std::size_t>(v)]) area += digit_areas[v];
      outcome
          .predicted_region_area[{row->trajectory_id,
                                  synth::indenter_kind_name(row->indenter_kind)}]
          .push_back(area);
    }
  }

  auto row_of = [](const char* name, const Accum& a) {
    metrics::EvalRow r;
    r.network = name;
    r.rmse_all = metrics::aggregate(a.rmse_all);
    r.euc_all = metrics::aggregate(a.euc_all);
    r.rmse_region = metrics::aggregate(a.rmse_region);
    r.euc_region = metrics::aggregate(a.euc_region);
    return r;
  };
  outcome.report.rows.push_back(row_of("S2MPN", s2));
  outcome.report.rows.push_back(row_of("MVB", mvb));
  outcome.report.rows.push_back(row_of("MVD", mvd));
  outcome.report.rows.push_back(row_of("M2MPN", m2));
  outcome.report.has_signal_rmse = true;
  outcome.report.signal_stats = metrics::aggregate(svb_frame_rmse);
  outcome.report.signal_pooled = metrics::signal_rmse(svb_pred, svb_target);
  return outcome;
}

inline void cmd_eval(Config& cfg, const CommonOpts& opts) {
  if (opts.desk_scale) apply_desk_preset(cfg);
  fs::path bundle_dir = cfg.get_str("bundle", opts.out.string());
  auto rc = render_from_config(cfg);
  for (const char* k :
       {"trajectories", "biotac_vertices", "digit_vertices", "svb_epochs", "mesh_epochs",
        "s2mpn_epochs", "m2mpn_epochs", "batch_size", "proj_batch_size"})
    cfg.get_str(k, "");
  cfg.reject_unknown();

  RunLayout run{bundle_dir};
  fs::path out_dir = opts.out / "eval";
  DirLock lock(out_dir);

  // The test split must be exactly the one every training run saw.
  auto d = load_dataset(run.dataset(), 0);
  std::string current_crc = crc_hex(compute_splits_crc(d.layout));
  for (auto kind : {models::ModelKind::svb, models::ModelKind::mvb, models::ModelKind::mvd,
                    models::ModelKind::s2mpn, models::ModelKind::m2mpn}) {
    fs::path prov_path = run.model_dir(kind) / "provenance.txt";
    if (!fs::exists(prov_path))
      fail(Errc::missing_prerequisite,
           std::string("eval: no training provenance for ") + models::model_kind_name(kind));
    auto prov = provenance_from_file(prov_path);
    auto it = prov.find("splits_crc");
    if (it == prov.end() || it->second != current_crc)
      fail(Errc::split_contamination,
           std::string("split provenance mismatch for ") + models::model_kind_name(kind) +
               ": the split files changed since training");
  }

  auto bundle = load_bundle(bundle_dir, rc);
  auto full = load_dataset(run.dataset(), 0);
  SignalTable table(full);
  auto outcome = evaluate_bundle(bundle, full, table);

  io::write_file(out_dir / "report.txt", metrics::report_to_text(outcome.report));
  io::write_file(out_dir / "report.csv", metrics::report_to_csv(outcome.report));

  Provenance prov;
  prov.seed = opts.seed;
  prov.add("splits_crc", current_crc);
  io::write_file(out_dir / "provenance.txt", prov.to_text());
  io::write_file(out_dir / "config.resolved", cfg.resolved_text());
}

// ---------------------------------------------------------------------------
// render (Step III standalone)
// ---------------------------------------------------------------------------

inline void cmd_render(Config& cfg, const CommonOpts& opts) {
  fs::path mesh_path = cfg.require_str("mesh");
  fs::path topology_path = cfg.require_str("topology");
  std::string table_path = cfg.get_str("photometric", "");
  std::string background_path = cfg.get_str("background", "");
  auto rc = render_from_config(cfg);
  cfg.reject_unknown();

  DirLock lock(opts.out);
  auto topo = mesh::load_topology(topology_path);
  Eigen::MatrixXd pos = mesh::load_frame(mesh_path);
  require(pos.rows() == topo.vertex_count(0), Errc::topology_mismatch,
          "render: mesh frame does not match topology");
  mesh::SurfaceMesh m{&topo, pos};

  auto table = table_path.empty() ? render::PhotometricTable::default_table()
                                  : render::photometric_from_csv(io::read_file(table_path));
  auto background = background_path.empty() ? render::synthetic_background(rc.width, rc.height)
                                            : render::load_ppm(background_path);

  auto hm = render::rasterize_heightmap(m, rc);
  auto img = render::pyramid_gaussian_blur(render::render_image(hm, table, background));
  render::save_ppm(opts.out / "image.ppm", img);
  io::write_file(opts.out / "height.acrh", render::heightmap_to_acrh(hm));
  if (opts.emit_intermediates)
    render::save_ppm(opts.out / "image_raw.ppm", render::render_image(hm, table, background));
  io::write_file(opts.out / "config.resolved", cfg.resolved_text());
}

}  // namespace across::run
