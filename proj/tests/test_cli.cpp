// End-to-end checks of the command-line tool, run as subprocesses so exit
// codes and stdout/stderr wiring are exercised for real.

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "panopix/checkpoint.hpp"
#include "panopix/encoder.hpp"
#include "panopix/png_io.hpp"
#include "panopix/report.hpp"

using namespace panopix;
namespace fs = std::filesystem;

#ifndef PANOPIX_CLI_PATH
#error "PANOPIX_CLI_PATH must point at the panopix binary"
#endif

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Runs the CLI through the shell; `prefix` can set environment variables.
RunResult run_cli(const fs::path& dir, const std::string& args, const std::string& prefix = "") {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = "cd " + dir.string() + " && " + prefix + PANOPIX_CLI_PATH + " " + args +
                          " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  r.exit_code = WEXITSTATUS(status);
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

bool same_file(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

}  // namespace

TEST_CASE("synth generates deterministic datasets") {
  const fs::path dir = fresh_dir("panopix_cli_synth");

  RunResult r = run_cli(dir, "synth --spec domain-a --n 3 --seed 7 --out ds1");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("wrote 3 scene pairs") != std::string::npos);
  CHECK(fs::is_regular_file(dir / "ds1" / "manifest.txt"));
  CHECK(fs::is_regular_file(dir / "ds1" / "scene_0002_gt.png"));

  REQUIRE(run_cli(dir, "synth --spec domain-a --n 3 --seed 7 --out ds2").exit_code == 0);
  for (const auto& entry : fs::directory_iterator(dir / "ds1")) {
    const fs::path other = dir / "ds2" / entry.path().filename();
    CAPTURE(entry.path().filename().string());
    CHECK(same_file(entry.path(), other));
  }

  // A different seed must actually change the pixels.
  REQUIRE(run_cli(dir, "synth --spec domain-b --n 3 --seed 8 --out ds3").exit_code == 0);
  CHECK_FALSE(same_file(dir / "ds1" / "scene_0000.png", dir / "ds3" / "scene_0000.png"));
}

TEST_CASE("usage errors exit with code 1") {
  const fs::path dir = fresh_dir("panopix_cli_usage");

  RunResult bad_preset = run_cli(dir, "synth --spec mars --n 2 --out x");
  CHECK(bad_preset.exit_code == 1);
  CHECK(bad_preset.err.find("mars") != std::string::npos);

  CHECK(run_cli(dir, "pretrain --out y").exit_code == 1);
  CHECK(run_cli(dir, "frobnicate").exit_code == 1);
  CHECK(run_cli(dir, "").exit_code == 1);

  RunResult help = run_cli(dir, "--help");
  CHECK(help.exit_code == 0);
  CHECK(help.out.find("synth") != std::string::npos);

  REQUIRE(run_cli(dir, "synth --spec domain-a --n 2 --seed 1 --out ds").exit_code == 0);
  write_text(dir / "bad.cfg", "[run]\nepoochs = 3\n");
  RunResult bad_cfg = run_cli(dir, "pretrain --data ds --config bad.cfg --out p");
  CHECK(bad_cfg.exit_code == 1);
  CHECK(bad_cfg.err.find("line 2") != std::string::npos);
  CHECK(bad_cfg.err.find("epoochs") != std::string::npos);

  RunResult bad_env = run_cli(dir, "eval --model oracle --data ds --out r.txt",
                              "PANOPIX_THREADS=many ");
  CHECK(bad_env.exit_code == 1);
  CHECK(bad_env.err.find("PANOPIX_THREADS") != std::string::npos);

  RunResult env_ok = run_cli(dir, "eval --model oracle --data ds --out r.txt",
                             "PANOPIX_THREADS=4 ");
  CHECK(env_ok.exit_code == 0);
  CHECK(env_ok.err.find("single-threaded") != std::string::npos);
}

TEST_CASE("pretrain writes a checkpoint, history, and config echo") {
  const fs::path dir = fresh_dir("panopix_cli_pretrain");
  REQUIRE(run_cli(dir, "synth --spec domain-a --n 4 --seed 3 --out ds").exit_code == 0);
  write_text(dir / "pre.cfg", "[run]\nepochs = 1\nbatch_size = 4\n[loss]\nalpha = 2\n");

  RunResult r = run_cli(dir, "pretrain --data ds --config pre.cfg --out p1");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("loss.alpha 2\n") != std::string::npos);
  CHECK(r.out.find("final loss ") != std::string::npos);

  // The resolved config rides along in the history header.
  const std::string history = slurp(dir / "p1" / "history.txt");
  CHECK(history.find("loss.alpha 2\n") != std::string::npos);
  CHECK(history.find("kind pretrain") != std::string::npos);

  const auto ck = load_checkpoint<double>((dir / "p1" / "checkpoint.bin").string());
  CHECK(ck.part == CheckpointPart::BackboneOnly);
  CHECK(ck.config == EncoderConfig::desk());

  // Same flags, same bytes.
  REQUIRE(run_cli(dir, "pretrain --data ds --config pre.cfg --out p2").exit_code == 0);
  CHECK(same_file(dir / "p1" / "checkpoint.bin", dir / "p2" / "checkpoint.bin"));
  CHECK(same_file(dir / "p1" / "history.txt", dir / "p2" / "history.txt"));

  // --seed overrides the config seed and changes the result.
  REQUIRE(run_cli(dir, "pretrain --data ds --config pre.cfg --seed 9 --out p3").exit_code == 0);
  CHECK_FALSE(same_file(dir / "p1" / "checkpoint.bin", dir / "p3" / "checkpoint.bin"));

  // Two --data flags build a joint corpus without labels.
  REQUIRE(run_cli(dir, "synth --spec domain-b --n 2 --seed 4 --out ds_b").exit_code == 0);
  REQUIRE(run_cli(dir, "pretrain --data ds --data ds_b --config pre.cfg --out p4").exit_code == 0);
  CHECK_FALSE(same_file(dir / "p1" / "checkpoint.bin", dir / "p4" / "checkpoint.bin"));
}

TEST_CASE("train consumes checkpoints and reports shape mismatches") {
  const fs::path dir = fresh_dir("panopix_cli_train");
  REQUIRE(run_cli(dir, "synth --spec domain-a --n 4 --seed 3 --out ds").exit_code == 0);
  write_text(dir / "pre.cfg", "[run]\nepochs = 1\nbatch_size = 4\n");
  write_text(dir / "tr.cfg", "[run]\nepochs = 2\n");
  REQUIRE(run_cli(dir, "pretrain --data ds --config pre.cfg --out p").exit_code == 0);

  RunResult rand_run = run_cli(dir, "train --data ds --init random --config tr.cfg --out m_rand");
  REQUIRE(rand_run.exit_code == 0);
  CHECK(rand_run.out.find("kind train") == std::string::npos);  // echo has no kind line
  CHECK(rand_run.out.find("run.epochs 2\n") != std::string::npos);

  REQUIRE(run_cli(dir, "train --data ds --init p/checkpoint.bin --config tr.cfg --out m_pre")
              .exit_code == 0);
  CHECK_FALSE(same_file(dir / "m_rand" / "model.bin", dir / "m_pre" / "model.bin"));

  // Determinism again, this time through the checkpoint path.
  REQUIRE(run_cli(dir, "train --data ds --init p/checkpoint.bin --config tr.cfg --out m_pre2")
              .exit_code == 0);
  CHECK(same_file(dir / "m_pre" / "model.bin", dir / "m_pre2" / "model.bin"));

  RunResult missing = run_cli(dir, "train --data ds --init nope.bin --config tr.cfg --out m_x");
  CHECK(missing.exit_code == 2);
  CHECK(missing.err.find("nope.bin") != std::string::npos);

  // A checkpoint from a different encoder is refused with a clear message.
  {
    Encoder<double> big(EncoderConfig::large());
    Rng rng(1);
    NetworkParams<double> params = big.init(rng);
    save_checkpoint((dir / "big.bin").string(), big.config(), params,
                    CheckpointPart::BackboneOnly);
  }
  RunResult mismatch = run_cli(dir, "train --data ds --init big.bin --config tr.cfg --out m_y");
  CHECK(mismatch.exit_code == 2);
  CHECK(mismatch.err.find("does not match") != std::string::npos);
}

TEST_CASE("eval reports oracle perfection and stable files") {
  const fs::path dir = fresh_dir("panopix_cli_eval");
  REQUIRE(run_cli(dir, "synth --spec domain-b --n 3 --seed 5 --out ds").exit_code == 0);

  RunResult oracle = run_cli(dir, "eval --model oracle --data ds --out oracle.txt");
  REQUIRE(oracle.exit_code == 0);
  CHECK(oracle.out.find("PQ 1\n") != std::string::npos);
  const EvalReport rep = load_eval_report((dir / "oracle.txt").string());
  CHECK(rep.images == 3);
  CHECK(rep.pq.pq == 1.0);
  CHECK(rep.sem.miou == 1.0);

  write_text(dir / "tr.cfg", "[run]\nepochs = 1\n");
  REQUIRE(run_cli(dir, "train --data ds --init random --config tr.cfg --out m").exit_code == 0);
  REQUIRE(run_cli(dir, "eval --model m/model.bin --data ds --out e1.txt").exit_code == 0);
  REQUIRE(run_cli(dir, "eval --model m/model.bin --data ds --out e2.txt").exit_code == 0);
  CHECK(same_file(dir / "e1.txt", dir / "e2.txt"));

  // --data also accepts the manifest path itself.
  REQUIRE(run_cli(dir, "eval --model oracle --data ds/manifest.txt --out o2.txt").exit_code == 0);
  CHECK(same_file(dir / "oracle.txt", dir / "o2.txt"));

  CHECK(run_cli(dir, "eval --model oracle --data missing_ds --out o3.txt").exit_code == 2);
}

TEST_CASE("ab emits a paired report with delta fields") {
  const fs::path dir = fresh_dir("panopix_cli_ab");
  REQUIRE(run_cli(dir, "synth --spec domain-a --n 3 --seed 1 --out tr_ds").exit_code == 0);
  REQUIRE(run_cli(dir, "synth --spec domain-b --n 2 --seed 2 --out ev_ds").exit_code == 0);
  write_text(dir / "pre.cfg", "[run]\nepochs = 1\nbatch_size = 8\n");
  write_text(dir / "tr.cfg", "[run]\nepochs = 1\n");

  RunResult r = run_cli(dir,
                        "ab --train-data tr_ds --eval-data ev_ds --pretrain-config pre.cfg "
                        "--train-config tr.cfg --seeds 11 --alphas 2 --out ab.txt");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("delta PQ ") != std::string::npos);

  const AbReport rep = load_ab_report((dir / "ab.txt").string());
  CHECK(rep.seeds == std::vector<uint64_t>{11});
  CHECK(rep.train_images == 3);
  CHECK(rep.eval_images == 2);
  REQUIRE(rep.alpha_sweep.size() == 1);
  CHECK(rep.alpha_sweep[0].alpha == 2.0);
  CHECK(rep.delta_pq == rep.pretrained_pq_mean - rep.random_pq_mean);

  CHECK(run_cli(dir, "ab --train-data tr_ds --eval-data ev_ds --seeds 1,nope --out ab2.txt")
            .exit_code == 1);
}

TEST_CASE("plot-history renders an SVG chart") {
  const fs::path dir = fresh_dir("panopix_cli_plot");
  REQUIRE(run_cli(dir, "synth --spec domain-a --n 2 --seed 1 --out ds").exit_code == 0);
  write_text(dir / "tr.cfg", "[run]\nepochs = 3\n");
  REQUIRE(run_cli(dir, "train --data ds --init random --config tr.cfg --out m").exit_code == 0);

  REQUIRE(run_cli(dir, "plot-history --history m/history.txt --out h.svg").exit_code == 0);
  const std::string svg = slurp(dir / "h.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("polyline") != std::string::npos);

  CHECK(run_cli(dir, "plot-history --history missing.txt --out h2.svg").exit_code == 2);
}
