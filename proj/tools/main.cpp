// across: synthetic cross-modal tactile translation pipeline.
//
// Subcommands cover the full workflow: gen-dataset, train-{svb,mvb,mvd,
// s2mpn,m2mpn}, convert, eval, render. Configuration comes from an optional
// key=value file plus key=value overrides on the command line; unknown keys
// are rejected.

#include <CLI11.hpp>

#include "across/run.hpp"

namespace {

struct CliState {
  std::string config_file;
  std::string out;
  std::string resume_from;
  std::uint64_t seed = 0;
  bool desk_scale = false;
  bool emit_intermediates = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CliState& s) {
  sub->add_option("--config", s.config_file, "key=value config file ('#' comments)");
  sub->add_option("--seed", s.seed, "global seed (default 0)");
  sub->add_option("--out", s.out, "run directory")->required();
  sub->add_flag("--desk-scale", s.desk_scale, "desk-scale preset (small meshes, short schedules)");
  sub->add_flag("--emit-intermediates", s.emit_intermediates,
                "write intermediate meshes and height maps");
  sub->add_option("--resume-from", s.resume_from, "checkpoint to resume training from");
  sub->add_option("overrides", s.overrides, "key=value config overrides");
}

across::run::Config build_config(const CliState& s) {
  across::run::Config cfg;
  if (!s.config_file.empty()) cfg = across::run::Config::from_file(s.config_file);
  for (const auto& kv : s.overrides) {
    auto eq = kv.find('=');
    across::require(eq != std::string::npos, across::Errc::config_error,
                    "override '" + kv + "' is not key=value");
    cfg.set(across::trim(kv.substr(0, eq)), across::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

across::run::CommonOpts build_opts(const CliState& s) {
  across::run::CommonOpts o;
  o.out = s.out;
  o.seed = s.seed;
  o.desk_scale = s.desk_scale;
  o.emit_intermediates = s.emit_intermediates;
  o.resume_from = s.resume_from;
  return o;
}

int exit_code_for(across::Errc code) {
  switch (code) {
    case across::Errc::config_error:
    case across::Errc::spec_mismatch:
      return 2;
    case across::Errc::io_error:
    case across::Errc::format_error:
      return 3;
    case across::Errc::missing_prerequisite:
    case across::Errc::missing_checkpoint:
      return 4;
    case across::Errc::split_contamination:
      return 5;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ACROSS synthetic tactile translation pipeline"};
  app.require_subcommand(1);

  CliState state;
  auto* gen = app.add_subcommand("gen-dataset", "generate a paired BioTac/DIGIT dataset");
  auto* train_svb = app.add_subcommand("train-svb", "train the signal VAE");
  auto* train_mvb = app.add_subcommand("train-mvb", "train the BioTac mesh VAE");
  auto* train_mvd = app.add_subcommand("train-mvd", "train the DIGIT mesh VAE");
  auto* train_s2 = app.add_subcommand("train-s2mpn", "train the signal-to-mesh projection");
  auto* train_m2 = app.add_subcommand("train-m2mpn", "train the mesh-to-mesh projection");
  auto* convert = app.add_subcommand("convert", "convert signal frames to DIGIT images");
  auto* eval = app.add_subcommand("eval", "evaluate the trained bundle on the test split");
  auto* render = app.add_subcommand("render", "render a DIGIT mesh frame to an image");
  for (auto* sub : {gen, train_svb, train_mvb, train_mvd, train_s2, train_m2, convert, eval, render})
    add_common(sub, state);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto cfg = build_config(state);
    auto opts = build_opts(state);
    using across::models::ModelKind;
    if (gen->parsed()) across::run::cmd_gen_dataset(cfg, opts);
    else if (train_svb->parsed()) across::run::cmd_train(ModelKind::svb, cfg, opts);
    else if (train_mvb->parsed()) across::run::cmd_train(ModelKind::mvb, cfg, opts);
    else if (train_mvd->parsed()) across::run::cmd_train(ModelKind::mvd, cfg, opts);
    else if (train_s2->parsed()) across::run::cmd_train(ModelKind::s2mpn, cfg, opts);
    else if (train_m2->parsed()) across::run::cmd_train(ModelKind::m2mpn, cfg, opts);
    else if (convert->parsed()) across::run::cmd_convert(cfg, opts);
    else if (eval->parsed()) across::run::cmd_eval(cfg, opts);
    else if (render->parsed()) across::run::cmd_render(cfg, opts);
    return 0;
  } catch (const across::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
