// Command-line front end over the stquant C API.
//
// Exit codes: 0 success, 1 usage error, 2 data error (unreadable traces,
// missing run directories, malformed inputs). STQUANT_THREADS caps the
// library's internal parallelism.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "stquant.h"

namespace {

int status_to_exit(stq_status status) {
  switch (status) {
    case STQ_OK: return 0;
    case STQ_ERR_INVALID_ARGUMENT: return 1;
    default: return 2;
  }
}

int fail_with_error(stq_status status) {
  std::fprintf(stderr, "error: %s\n", stq_last_error());
  return status_to_exit(status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stquant: adaptive bit-width quantized optimizer experiments"};
  app.set_version_flag("--version", stq_version());
  app.require_subcommand(1);

  stq_train_options train_opts;
  stq_train_options_init(&train_opts);
  std::string train_problem = train_opts.problem;
  std::string train_optimizer = train_opts.optimizer;
  std::string train_out;

  CLI::App* train = app.add_subcommand("train", "run a training experiment");
  train->add_option("--problem", train_problem, "quadratic, logistic or mlp")
      ->check(CLI::IsMember({"quadratic", "logistic", "mlp"}));
  train
      ->add_option("--optimizer", train_optimizer,
                   "oracle32, fixed8 or stquant")
      ->check(CLI::IsMember({"oracle32", "fixed8", "stquant"}));
  train->add_option("--steps", train_opts.steps, "training steps")
      ->check(CLI::NonNegativeNumber);
  train->add_option("--seed", train_opts.seed, "random seed");
  train->add_option("--layers", train_opts.layers,
                    "quadratic blocks / mlp depth (0 = problem default)");
  train->add_option("--dim", train_opts.dim,
                    "problem dimension (0 = problem default)");
  train->add_option("--lr", train_opts.lr, "learning rate")
      ->check(CLI::PositiveNumber);
  train->add_option("--tau", train_opts.tau,
                    "annealing time constant (0 = derive from depth and batch)");
  train->add_option("--phi", train_opts.phi, "score offset");
  train->add_option("--u", train_opts.update_freq, "policy refresh period")
      ->check(CLI::PositiveNumber);
  train->add_option("--block-size", train_opts.block_size,
                    "quantization block size")
      ->check(CLI::PositiveNumber);
  train->add_option("--workers", train_opts.workers,
                    "virtual workers for statistics aggregation")
      ->check(CLI::PositiveNumber);
  train->add_option("--out", train_out, "output directory")->required();

  stq_replay_options replay_opts;
  stq_replay_options_init(&replay_opts);
  std::string replay_trace;
  std::string replay_out;

  CLI::App* replay = app.add_subcommand("replay", "replay a statistics trace");
  replay->add_option("--trace", replay_trace, "JSONL trace file")->required();
  replay->add_option("--tau", replay_opts.tau, "annealing time constant")
      ->check(CLI::PositiveNumber);
  replay->add_option("--phi", replay_opts.phi, "score offset");
  replay->add_option("--alpha", replay_opts.alpha, "EMA smoothing factor")
      ->check(CLI::PositiveNumber);
  replay->add_option("--u", replay_opts.update_freq,
                     "cadence filter over trace steps (1 = every record)")
      ->check(CLI::PositiveNumber);
  replay->add_option("--out", replay_out, "output directory")->required();

  std::string report_run;
  CLI::App* report = app.add_subcommand("report", "print a run's memory table");
  report->add_option("--run", report_run, "run directory from train")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (train->parsed()) {
    train_opts.problem = train_problem.c_str();
    train_opts.optimizer = train_optimizer.c_str();
    const stq_status status = stq_train_run(&train_opts, train_out.c_str());
    if (status != STQ_OK) return fail_with_error(status);
    std::printf("wrote %s\n", train_out.c_str());
    return 0;
  }

  if (replay->parsed()) {
    const stq_status status =
        stq_replay_run(&replay_opts, replay_trace.c_str(), replay_out.c_str());
    if (status != STQ_OK) return fail_with_error(status);
    std::printf("wrote %s\n", replay_out.c_str());
    return 0;
  }

  if (report->parsed()) {
    char* text = nullptr;
    const stq_status status = stq_report_render(report_run.c_str(), &text);
    if (status != STQ_OK) return fail_with_error(status);
    std::fputs(text, stdout);
    stq_string_free(text);
    return 0;
  }

  return 1;
}
