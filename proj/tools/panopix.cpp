// Command-line front end: dataset synthesis, pretraining, downstream
// training, evaluation, A/B reports, and history plotting.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include "panopix/config.hpp"
#include "panopix/dataset.hpp"
#include "panopix/downstream.hpp"
#include "panopix/experiment.hpp"
#include "panopix/pretrain.hpp"
#include "panopix/report.hpp"
#include "panopix/synth.hpp"

#include "CLI11.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

using namespace panopix;

// All heavy math runs in double; float stays available through the library
// headers for callers that want it.
using Scalar = double;

// PANOPIX_THREADS is accepted for forward compatibility. Execution is
// single-threaded either way, so anything above 1 just earns a note.
void apply_thread_override() {
  const char* raw = std::getenv("PANOPIX_THREADS");
  if (raw == nullptr) return;
  const std::string s(raw);
  int64_t n = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc{} || ptr != s.data() + s.size() || n < 1)
    throw UsageError("PANOPIX_THREADS must be a positive integer, got \"" + s + "\"");
  if (n > 1)
    std::cerr << "note: PANOPIX_THREADS=" << n
              << " requested; this build runs single-threaded\n";
}

// --data accepts either the dataset directory or the manifest file itself.
Dataset open_dataset(const std::string& arg) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= "manifest.txt";
  return load_dataset(p);
}

std::vector<double> parse_double_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string item = detail::trim(text.substr(pos, comma - pos));
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc{} || ptr != item.data() + item.size())
      throw UsageError(flag + ": expected comma-separated numbers, got \"" + text + "\"");
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& text, const std::string& flag) {
  std::vector<uint64_t> out;
  for (double v : parse_double_list(text, flag)) {
    const auto s = static_cast<uint64_t>(v);
    if (static_cast<double>(s) != v)
      throw UsageError(flag + ": seeds must be non-negative integers, got \"" + text + "\"");
    out.push_back(s);
  }
  return out;
}

void ensure_out_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw DataError("cannot create " + out + ": " + ec.message());
}

void print_echo(const ConfigEcho& echo) {
  for (const auto& [key, value] : echo) std::cout << key << " " << value << "\n";
}

// synth: generate a labelled dataset from a domain preset or spec file.
int cmd_synth(const std::string& spec_arg, int64_t n, uint64_t seed, const std::string& out) {
  DomainSpec spec;
  if (spec_arg == "domain-a")
    spec = DomainSpec::domain_a();
  else if (spec_arg == "domain-b")
    spec = DomainSpec::domain_b();
  else if (fs::is_regular_file(spec_arg))
    spec = load_domain_spec(spec_arg);
  else
    throw UsageError("--spec: unknown preset \"" + spec_arg +
                     "\" (expected domain-a, domain-b, or a spec file)");
  const Dataset ds = generate_dataset(spec, n, seed, out);
  std::cout << "wrote " << ds.size() << " scene pairs to " << out << "\n";
  return 0;
}

// pretrain: self-supervised pretraining over one or more datasets. With a
// single dataset its stats flow into the config echo; with several, each
// image keeps its own dataset's normalization.
int cmd_pretrain(const std::vector<std::string>& data, const std::string& config_path,
                 const std::string& out, int64_t seed) {
  PretrainConfig cfg =
      config_path.empty() ? PretrainConfig{} : load_pretrain_config(config_path);
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  ensure_out_dir(out);

  PretrainOutcome<Scalar> outcome;
  if (data.size() == 1) {
    outcome = pretrain<Scalar>(open_dataset(data.front()), cfg, &std::cerr);
  } else {
    std::vector<CorpusImage> corpus;
    for (const std::string& arg : data) {
      std::vector<CorpusImage> part = pretrain_corpus(open_dataset(arg));
      corpus.insert(corpus.end(), std::make_move_iterator(part.begin()),
                    std::make_move_iterator(part.end()));
    }
    outcome = pretrain<Scalar>(corpus, cfg, &std::cerr);
  }

  const fs::path dir(out);
  save_checkpoint((dir / "checkpoint.bin").string(), outcome.checkpoint.config,
                  outcome.checkpoint.params, CheckpointPart::BackboneOnly);
  save_history((dir / "history.txt").string(), outcome.history);
  print_echo(outcome.history.config);
  std::cout << "final loss " << outcome.history.rows.back()[0] << "\n";
  std::cout << "wrote " << (dir / "checkpoint.bin").string() << "\n";
  return 0;
}

// train: supervised downstream training from random or pretrained weights.
int cmd_train(const std::string& data, const std::string& init, const std::string& config_path,
              const std::string& out, int64_t seed) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  const Dataset ds = open_dataset(data);
  ensure_out_dir(out);

  TrainOutcome<Scalar> outcome;
  if (init == "random") {
    outcome = train_downstream<Scalar>(ds, cfg);
  } else {
    const Checkpoint<Scalar> ck = load_checkpoint<Scalar>(init);
    outcome = train_downstream<Scalar>(ds, cfg, &ck);
  }

  const fs::path dir(out);
  save_seg_model((dir / "model.bin").string(), outcome.model);
  save_history((dir / "history.txt").string(), outcome.history);
  print_echo(outcome.history.config);
  std::cout << "final loss " << outcome.history.rows.back()[0] << "\n";
  std::cout << "wrote " << (dir / "model.bin").string() << "\n";
  return 0;
}

// eval: panoptic + semantic evaluation of a model file, or of the oracle
// that reads predictions straight from the ground truth.
int cmd_eval(const std::string& model_arg, const std::string& data, const std::string& out) {
  const Dataset ds = open_dataset(data);
  EvalReport rep;
  if (model_arg == "oracle") {
    rep = evaluate_oracle(ds);
  } else {
    const SegModel<Scalar> model = load_seg_model<Scalar>(model_arg);
    rep = evaluate_panoptic(model, ds);
  }
  save_eval_report(out, rep);
  std::cout << "images " << rep.images << "\n";
  std::cout << "PQ " << rep.pq.pq << "\n";
  std::cout << "SQ " << rep.pq.sq << "\n";
  std::cout << "RQ " << rep.pq.rq << "\n";
  std::cout << "mIoU " << rep.sem.miou << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

// ab: paired pretrained-vs-random experiment with per-seed deltas and a
// loss-weight sweep, written as one machine-readable report.
int cmd_ab(const std::string& train_data, const std::string& eval_data,
           const std::string& pretrain_config, const std::string& train_config,
           const std::string& seeds_arg, const std::string& alphas_arg, const std::string& out) {
  AbConfig cfg;
  if (!pretrain_config.empty()) cfg.pretrain = load_pretrain_config(pretrain_config);
  if (!train_config.empty()) cfg.train = load_train_config(train_config);
  if (!seeds_arg.empty()) cfg.seeds = parse_seed_list(seeds_arg, "--seeds");
  if (!alphas_arg.empty()) cfg.alphas = parse_double_list(alphas_arg, "--alphas");

  const Dataset train_ds = open_dataset(train_data);
  const Dataset eval_ds = open_dataset(eval_data);
  const AbReport rep = run_ab_experiment<Scalar>(train_ds, eval_ds, cfg, &std::cerr);
  save_ab_report(out, rep);
  std::cout << "pretrained PQ mean " << rep.pretrained_pq_mean << "\n";
  std::cout << "random PQ mean " << rep.random_pq_mean << "\n";
  std::cout << "delta PQ " << rep.delta_pq << "\n";
  std::cout << "delta sidewalk IoU " << rep.delta_sidewalk_iou << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

// plot-history: render a training history file to an SVG line chart.
int cmd_plot_history(const std::string& history_path, const std::string& out) {
  const History h = load_history(history_path);
  const std::string svg = render_history_svg(h);
  write_bytes(out, std::vector<uint8_t>(svg.begin(), svg.end()));
  std::cout << "wrote " << out << "\n";
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"panopix: panoramic panoptic segmentation toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_spec = "domain-a";
  int64_t synth_n = 16;
  uint64_t synth_seed = 1;
  std::string synth_out;
  synth->add_option("--spec", synth_spec, "domain preset (domain-a, domain-b) or spec file");
  synth->add_option("--n", synth_n, "number of scenes")->required();
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory")->required();

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "self-supervised pretraining");
  std::vector<std::string> pre_data;
  std::string pre_config;
  std::string pre_out;
  int64_t pre_seed = -1;
  pretrain->add_option("--data", pre_data, "dataset directory or manifest (repeatable)")
      ->required();
  pretrain->add_option("--config", pre_config, "pretraining config file");
  pretrain->add_option("--out", pre_out, "output directory")->required();
  pretrain->add_option("--seed", pre_seed, "override the config seed");

  // train
  auto* train = app.add_subcommand("train", "supervised downstream training");
  std::string tr_data;
  std::string tr_init = "random";
  std::string tr_config;
  std::string tr_out;
  int64_t tr_seed = -1;
  train->add_option("--data", tr_data, "dataset directory or manifest")->required();
  train->add_option("--init", tr_init, "random, or a checkpoint file");
  train->add_option("--config", tr_config, "training config file");
  train->add_option("--out", tr_out, "output directory")->required();
  train->add_option("--seed", tr_seed, "override the config seed");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a model on a dataset");
  std::string ev_model;
  std::string ev_data;
  std::string ev_out;
  eval->add_option("--model", ev_model, "model file, or the literal word oracle")->required();
  eval->add_option("--data", ev_data, "dataset directory or manifest")->required();
  eval->add_option("--out", ev_out, "report file")->required();

  // ab
  auto* ab = app.add_subcommand("ab", "paired pretrained-vs-random experiment");
  std::string ab_train_data;
  std::string ab_eval_data;
  std::string ab_pre_config;
  std::string ab_tr_config;
  std::string ab_seeds;
  std::string ab_alphas;
  std::string ab_out;
  ab->add_option("--train-data", ab_train_data, "labelled training dataset")->required();
  ab->add_option("--eval-data", ab_eval_data, "evaluation dataset")->required();
  ab->add_option("--pretrain-config", ab_pre_config, "pretraining config file");
  ab->add_option("--train-config", ab_tr_config, "training config file");
  ab->add_option("--seeds", ab_seeds, "comma-separated seed list");
  ab->add_option("--alphas", ab_alphas, "comma-separated loss-weight sweep");
  ab->add_option("--out", ab_out, "report file")->required();

  // plot-history
  auto* plot = app.add_subcommand("plot-history", "render a history file to SVG");
  std::string pl_history;
  std::string pl_out;
  plot->add_option("--history", pl_history, "history file")->required();
  plot->add_option("--out", pl_out, "SVG file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  apply_thread_override();

  if (synth->parsed()) return cmd_synth(synth_spec, synth_n, synth_seed, synth_out);
  if (pretrain->parsed()) return cmd_pretrain(pre_data, pre_config, pre_out, pre_seed);
  if (train->parsed()) return cmd_train(tr_data, tr_init, tr_config, tr_out, tr_seed);
  if (eval->parsed()) return cmd_eval(ev_model, ev_data, ev_out);
  if (ab->parsed())
    return cmd_ab(ab_train_data, ab_eval_data, ab_pre_config, ab_tr_config, ab_seeds, ab_alphas,
                  ab_out);
  if (plot->parsed()) return cmd_plot_history(pl_history, pl_out);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const panopix::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const panopix::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const panopix::Error& e) {
    // DataError, ShapeError, NoOverlapError: bad inputs rather than bad usage.
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
