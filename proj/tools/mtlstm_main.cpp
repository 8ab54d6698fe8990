#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtlstm/experiment.hpp"

using namespace mtlstm;

int main(int argc, char** argv) {
  CLI::App app{"multi-task recurrent text classification: training, "
               "sampling sweeps and pair-wise gain experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string corrupt;
  std::optional<std::uint64_t> seed_override;
  std::vector<std::size_t> n0_values;
  double tolerance = 1e-4;

  auto add_common = [&](CLI::App* cmd, bool with_out) {
    cmd->add_option("--config", config_path, "experiment config (json)")
        ->required();
    cmd->add_option("--seed", seed_override, "override the config seed");
    if (with_out) {
      cmd->add_option("--out", out_dir,
                      "output directory (default: $MTLSTM_OUT_ROOT or ./runs, "
                      "timestamped per run)");
    }
  };

  CLI::App* cmd_train = app.add_subcommand(
      "train", "train the joint model and write checkpoint + metrics");
  add_common(cmd_train, true);

  CLI::App* cmd_gradcheck = app.add_subcommand(
      "gradcheck", "verify backpropagation against finite differences");
  add_common(cmd_gradcheck, false);
  cmd_gradcheck->add_option("--tolerance", tolerance, "relative error bound");
  cmd_gradcheck
      ->add_option("--corrupt", corrupt,
                   "fault injection: perturb this parameter group's gradient")
      ->group("");  // test hook, hidden from help

  CLI::App* cmd_sweep = app.add_subcommand(
      "sweep-n0", "train once per n0 value and emit accuracy-vs-n0 rows");
  add_common(cmd_sweep, true);
  cmd_sweep->add_option("--n0", n0_values, "comma-separated n0 values")
      ->required()
      ->delimiter(',');

  CLI::App* cmd_ppg = app.add_subcommand(
      "ppg", "pair-wise performance gain matrix over all task pairs");
  add_common(cmd_ppg, true);

  CLI::App* cmd_synth = app.add_subcommand(
      "synth", "generate the configured synthetic scenario datasets");
  add_common(cmd_synth, true);

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    if (seed_override.has_value()) cfg.seed = *seed_override;
    if (cmd_train->parsed()) return run_train(cfg, out_dir);
    if (cmd_gradcheck->parsed()) return run_gradcheck(cfg, tolerance, corrupt);
    if (cmd_sweep->parsed()) return run_sweep(cfg, n0_values, out_dir);
    if (cmd_ppg->parsed()) return run_ppg(cfg, out_dir);
    if (cmd_synth->parsed()) return run_synth(cfg, out_dir);
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
