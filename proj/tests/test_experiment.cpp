#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <sstream>
#include <string>

#include "panopix/experiment.hpp"
#include "panopix/synth.hpp"

using namespace panopix;
namespace fs = std::filesystem;

namespace {

Dataset make_ds(const DomainSpec& spec, int64_t n, uint64_t seed, const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return generate_dataset(spec, n, seed, dir);
}

AbConfig smoke_config() {
  AbConfig cfg;
  cfg.pretrain.epochs = 1;
  cfg.pretrain.batch_size = 4;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 4;
  cfg.seeds = {1, 2};
  cfg.alphas = {2.0};
  return cfg;
}

}  // namespace

TEST_CASE("the transfer experiment aggregates both arms") {
  Dataset a = make_ds(DomainSpec::domain_a(), 4, 91, "panopix_ab_a");
  Dataset b = make_ds(DomainSpec::domain_b(), 4, 92, "panopix_ab_b");
  AbConfig cfg = smoke_config();

  std::ostringstream log;
  AbReport rep = run_ab_experiment<double>(a, b, cfg, &log);

  REQUIRE(rep.train_images == 4);
  REQUIRE(rep.eval_images == 4);
  REQUIRE(rep.seeds == cfg.seeds);
  REQUIRE(rep.pretrained_pq.size() == 2);
  REQUIRE(rep.random_pq.size() == 2);
  REQUIRE(rep.class_iou.size() == 4);
  REQUIRE(rep.alpha_sweep.size() == 1);

  SECTION("aggregates recompute from the per-seed entries") {
    REQUIRE(rep.pretrained_pq_mean ==
            Catch::Approx((rep.pretrained_pq[0] + rep.pretrained_pq[1]) / 2.0).margin(1e-15));
    REQUIRE(rep.delta_pq ==
            Catch::Approx(rep.pretrained_pq_mean - rep.random_pq_mean).margin(1e-15));
    for (const AbClassRow& row : rep.class_iou)
      REQUIRE(row.delta == Catch::Approx(row.pretrained_iou - row.random_iou).margin(1e-15));
    REQUIRE(rep.class_iou[1].name == "sidewalk");
    REQUIRE(rep.class_iou[1].pretrained_iou ==
            Catch::Approx(rep.pretrained_sidewalk_iou).margin(1e-15));
  }

  SECTION("the sweep entry at the preset weight matches the first seed's run") {
    REQUIRE(rep.alpha_sweep[0].alpha == 2.0);
    REQUIRE(rep.alpha_sweep[0].pq == rep.pretrained_pq[0]);
  }

  SECTION("the report codec carries the full structure") {
    AbReport back = decode_ab_report(encode_ab_report(rep));
    REQUIRE(encode_ab_report(back) == encode_ab_report(rep));
  }

  SECTION("progress lands in the log") {
    REQUIRE(log.str().find("ab: seed 1:") != std::string::npos);
    REQUIRE(log.str().find("ab: alpha 2") != std::string::npos);
  }
}

TEST_CASE("experiment configuration is validated") {
  AbConfig cfg = smoke_config();
  cfg.seeds.clear();
  REQUIRE_THROWS_AS(cfg.validate(), DataError);

  cfg = smoke_config();
  cfg.train.encoder = EncoderConfig::large();
  REQUIRE_THROWS_AS(cfg.validate(), DataError);
}
