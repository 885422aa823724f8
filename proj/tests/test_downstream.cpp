#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "panopix/checkpoint.hpp"
#include "panopix/downstream.hpp"
#include "panopix/synth.hpp"

using namespace panopix;
namespace fs = std::filesystem;

namespace {

template <typename E, typename F>
std::string message_of(F&& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  FAIL("expected exception was not thrown");
  return {};
}

template <typename T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

Dataset tiny_dataset(const DomainSpec& spec, int64_t n, uint64_t seed, const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return generate_dataset(spec, n, seed, dir);
}

TrainConfig quick_config(int64_t epochs, int64_t batch, uint64_t seed, bool freeze = false) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.seed = seed;
  cfg.freeze_backbone = freeze;
  return cfg;
}

}  // namespace

TEST_CASE("seg_forward shapes, zero-head uniformity, frozen gradients") {
  const ClassTable table = ClassTable::desk();
  TrainConfig cfg = quick_config(1, 2, 5);
  SegModel<double> m = init_seg_model<double>(cfg, table);

  REQUIRE(m.params.tensors.count("head.conv.weight") == 1);
  REQUIRE(m.params.tensors.at("head.conv.weight").shape ==
          std::vector<int64_t>({4, 64, 1, 1}));
  REQUIRE(m.params.tensors.at("head.conv.bias").shape == std::vector<int64_t>({4}));

  Encoder<double> enc(cfg.encoder);
  Rng rng(99);
  Tensor<double> input({2, 3, 32, 32});
  for (double& v : input.data) v = rng.uniform();

  SECTION("logits come back at input resolution") {
    Tape<double> tape;
    int x = tape.leaf(input, false);
    int logits = seg_forward(tape, enc, m.params, m.head(), x, detail::BnMode::Eval, false,
                             false, nullptr);
    REQUIRE(tape.value(logits).shape == std::vector<int64_t>({2, 4, 32, 32}));
  }

  SECTION("a zeroed head yields identically zero logits") {
    for (double& v : m.params.tensors.at("head.conv.weight").data) v = 0.0;
    for (double& v : m.params.tensors.at("head.conv.bias").data) v = 0.0;
    Tape<double> tape;
    int x = tape.leaf(input, false);
    int logits = seg_forward(tape, enc, m.params, m.head(), x, detail::BnMode::Eval, false,
                             false, nullptr);
    for (double v : tape.value(logits).data) REQUIRE(v == 0.0);
  }

  SECTION("a frozen backbone receives zero gradients while the head learns") {
    Tape<double> tape;
    Encoder<double>::Bound bound;
    int x = tape.leaf(input, false);
    int logits =
        seg_forward(tape, enc, m.params, m.head(), x, detail::BnMode::Eval, false, true, &bound);
    std::vector<int32_t> labels(2 * 32 * 32, 1);
    int loss = cross_entropy_loss(tape, logits, labels, table);
    tape.backward(loss);
    Tensor<double> gw = tape.grad(bound.node("head.conv.weight"));
    double head_mag = 0.0;
    for (double v : gw.data) head_mag += std::abs(v);
    REQUIRE(head_mag > 0.0);
    for (const auto& [path, id] : bound.nodes) {
      if (!is_backbone_path(path)) continue;
      for (double v : tape.grad(id).data) REQUIRE(v == 0.0);
    }
  }

  SECTION("head weight shape is checked") {
    m.params.tensors.at("head.conv.weight") = Tensor<double>({4, 63, 1, 1});
    Tape<double> tape;
    int x = tape.leaf(input, false);
    REQUIRE_THROWS_AS(seg_forward(tape, enc, m.params, m.head(), x, detail::BnMode::Eval, false,
                                  false, nullptr),
                      ShapeError);
  }
}

TEST_CASE("cross entropy closed forms") {
  const ClassTable table = ClassTable::desk();

  SECTION("uniform logits over four classes cost ln 4") {
    Tape<double> tape;
    int logits = tape.leaf(Tensor<double>({1, 4, 2, 2}, 0.37), false);
    std::vector<int32_t> ids{1, 2, 3, 4};
    int loss = cross_entropy_loss(tape, logits, ids, table);
    REQUIRE(tape.value(loss)[0] == Catch::Approx(std::log(4.0)).margin(1e-12));
  }

  SECTION("a 50-logit margin drives the loss below 1e-9") {
    Tensor<double> L({1, 4, 1, 4});
    std::vector<int32_t> ids{1, 3, 4, 2};
    const int32_t channel_of[] = {0, 2, 3, 1};
    for (int64_t p = 0; p < 4; ++p) L.data[static_cast<size_t>(channel_of[p] * 4 + p)] = 50.0;
    Tape<double> tape;
    int loss = cross_entropy_loss(tape, tape.leaf(L, false), ids, table);
    REQUIRE(tape.value(loss)[0] >= 0.0);
    REQUIRE(tape.value(loss)[0] < 1e-9);
  }

  SECTION("two-pixel value matches a scalar recomputation") {
    Tensor<double> L({1, 4, 1, 2});
    const double col0[] = {0.3, -0.7, 1.1, 0.2};
    const double col1[] = {-1.2, 0.4, 0.0, 2.5};
    for (int64_t c = 0; c < 4; ++c) {
      L.data[static_cast<size_t>(c * 2 + 0)] = col0[c];
      L.data[static_cast<size_t>(c * 2 + 1)] = col1[c];
    }
    auto nll = [](const double* z, int k) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) s += std::exp(z[c]);
      return std::log(s) - z[k];
    };
    Tape<double> tape;
    int node = tape.leaf(L, false);

    std::vector<int32_t> both{3, 4};  // person -> channel 2, car -> channel 3
    int loss = cross_entropy_loss(tape, node, both, table);
    REQUIRE(tape.value(loss)[0] ==
            Catch::Approx(0.5 * (nll(col0, 2) + nll(col1, 3))).margin(1e-12));

    std::vector<int32_t> one_void{0, 4};  // void pixel drops out of the mean
    int loss2 = cross_entropy_loss(tape, node, one_void, table);
    REQUIRE(tape.value(loss2)[0] == Catch::Approx(nll(col1, 3)).margin(1e-12));
  }

  SECTION("degenerate labelings are rejected") {
    Tape<double> tape;
    int logits = tape.leaf(Tensor<double>({1, 4, 1, 2}, 0.0), false);
    std::vector<int32_t> all_void{0, 0};
    REQUIRE_THROWS_AS(cross_entropy_loss(tape, logits, all_void, table), DataError);
    std::vector<int32_t> unknown{1, 9};
    const std::string msg = message_of<DataError>(
        [&] { cross_entropy_loss(tape, logits, unknown, table); });
    REQUIRE(msg.find("9") != std::string::npos);
  }
}

TEST_CASE("training runs deterministically and reduces the loss") {
  Dataset ds = tiny_dataset(DomainSpec::domain_a(), 4, 71, "panopix_down_train");
  TrainConfig cfg = quick_config(30, 4, 9);

  TrainOutcome<double> a = train_downstream<double>(ds, cfg);
  REQUIRE(a.history.kind == "train");
  REQUIRE(a.history.columns == std::vector<std::string>({"loss", "lr"}));
  REQUIRE(a.history.rows.size() == 30);
  for (const auto& row : a.history.rows) REQUIRE(std::isfinite(row[0]));

  SECTION("thirty epochs end below the first epoch") {
    REQUIRE(a.history.rows[29][0] < a.history.rows[0][0]);
  }

  SECTION("the step schedule drops at 60% and 85% of the run") {
    // 1 step per epoch over 30 epochs: milestones land at steps 18 and 25.
    REQUIRE(a.history.rows[17][1] == Catch::Approx(1e-2).margin(1e-15));
    REQUIRE(a.history.rows[18][1] == Catch::Approx(1e-3).margin(1e-15));
    REQUIRE(a.history.rows[24][1] == Catch::Approx(1e-3).margin(1e-15));
    REQUIRE(a.history.rows[25][1] == Catch::Approx(1e-4).margin(1e-15));
  }

  SECTION("a rerun with the same seed reproduces the model bitwise") {
    TrainOutcome<double> b = train_downstream<double>(ds, cfg);
    REQUIRE(encode_seg_model(a.model) == encode_seg_model(b.model));
    REQUIRE(a.history.rows == b.history.rows);
  }

  SECTION("the config echo lands in the history") {
    REQUIRE(a.history.config_double("run.epochs") == 30.0);
    REQUIRE(a.history.config_double("optimizer.base_lr") == 1e-2);
  }

  SECTION("an empty dataset is rejected") {
    Dataset empty = ds;
    empty.entries.clear();
    REQUIRE_THROWS_AS(train_downstream<double>(empty, cfg), DataError);
  }
}

TEST_CASE("a frozen backbone trains only the head") {
  Dataset ds = tiny_dataset(DomainSpec::domain_a(), 4, 72, "panopix_down_frozen");
  TrainConfig cfg = quick_config(2, 2, 13, true);

  SegModel<double> before = init_seg_model<double>(cfg, ds.classes);
  TrainOutcome<double> out = train_downstream<double>(ds, cfg);

  for (const auto& [path, t] : before.params.tensors) {
    if (is_backbone_path(path)) {
      REQUIRE(same_bits(t, out.model.params.tensors.at(path)));
    }
  }
  for (const auto& [path, t] : before.params.stats)
    REQUIRE(same_bits(t, out.model.params.stats.at(path)));
  REQUIRE_FALSE(same_bits(before.params.tensors.at("head.conv.weight"),
                          out.model.params.tensors.at("head.conv.weight")));
}

TEST_CASE("checkpoint initialization transfers the backbone bitwise") {
  const ClassTable table = ClassTable::desk();
  TrainConfig cfg = quick_config(1, 2, 21);

  Encoder<double> enc(cfg.encoder);
  Rng rng(4242);
  Checkpoint<double> ckpt{cfg.encoder, enc.init(rng), CheckpointPart::Full};

  SegModel<double> with = init_seg_model<double>(cfg, table, &ckpt);
  SegModel<double> without = init_seg_model<double>(cfg, table);

  for (const auto& [path, t] : with.params.tensors) {
    if (is_backbone_path(path)) {
      REQUIRE(same_bits(t, ckpt.params.tensors.at(path)));
    }
  }
  for (const auto& [path, t] : with.params.stats)
    REQUIRE(same_bits(t, ckpt.params.stats.at(path)));

  SECTION("the head draw is independent of the backbone source") {
    REQUIRE(same_bits(with.params.tensors.at("head.conv.weight"),
                      without.params.tensors.at("head.conv.weight")));
    REQUIRE(same_bits(with.params.tensors.at("head.conv.bias"),
                      without.params.tensors.at("head.conv.bias")));
  }

  SECTION("a file round trip feeds the same bytes back") {
    const fs::path path = fs::temp_directory_path() / "panopix_down_ckpt.bin";
    save_checkpoint(path.string(), ckpt.config, ckpt.params, CheckpointPart::BackboneOnly);
    Checkpoint<double> loaded = load_checkpoint<double>(path.string());
    SegModel<double> with2 = init_seg_model<double>(cfg, table, &loaded);
    REQUIRE(encode_seg_model(with) == encode_seg_model(with2));
  }

  SECTION("an encoder mismatch is called out") {
    TrainConfig big = cfg;
    big.encoder = EncoderConfig::large();
    const std::string msg =
        message_of<DataError>([&] { init_seg_model<double>(big, table, &ckpt); });
    REQUIRE(msg.find("does not match") != std::string::npos);
  }

  SECTION("a malformed tensor shape is called out by path") {
    Checkpoint<double> bad = ckpt;
    const std::string victim = bad.params.tensors.begin()->first;
    bad.params.tensors.at(victim) = Tensor<double>({1});
    const std::string msg =
        message_of<DataError>([&] { init_seg_model<double>(cfg, table, &bad); });
    REQUIRE(msg.find(victim) != std::string::npos);
  }
}

TEST_CASE("evaluation is exact on the oracle and near the floor at random") {
  Dataset dsA = tiny_dataset(DomainSpec::domain_a(), 6, 73, "panopix_down_eval_a");
  Dataset dsB = tiny_dataset(DomainSpec::domain_b(), 6, 74, "panopix_down_eval_b");

  SECTION("reading the ground truth back scores a perfect PQ") {
    for (const Dataset* ds : {&dsA, &dsB}) {
      EvalReport rep = evaluate_oracle(*ds);
      REQUIRE(rep.images == 6);
      REQUIRE(rep.pq.pq == Catch::Approx(1.0).margin(1e-12));
      REQUIRE(rep.pq.sq == Catch::Approx(1.0).margin(1e-12));
      REQUIRE(rep.pq.rq == Catch::Approx(1.0).margin(1e-12));
      REQUIRE(rep.sem.miou == Catch::Approx(1.0).margin(1e-12));
    }
  }

  SECTION("untrained models stay under the random floor") {
    double total = 0.0;
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
      TrainConfig cfg = quick_config(1, 2, seed);
      SegModel<double> m = init_seg_model<double>(cfg, dsB.classes);
      total += evaluate_panoptic(m, dsB).pq.pq;
    }
    REQUIRE(total / 5.0 < 0.2);
  }

  SECTION("evaluation leaves the model untouched and repeats bitwise") {
    TrainConfig cfg = quick_config(1, 2, 3);
    SegModel<double> m = init_seg_model<double>(cfg, dsA.classes);
    const std::vector<uint8_t> before = encode_seg_model(m);
    EvalReport r1 = evaluate_panoptic(m, dsA);
    EvalReport r2 = evaluate_panoptic(m, dsA);
    REQUIRE(encode_seg_model(m) == before);
    REQUIRE(encode_eval_report(r1) == encode_eval_report(r2));
  }

  SECTION("a zeroed head predicts the lowest class id everywhere") {
    TrainConfig cfg = quick_config(1, 2, 3);
    SegModel<double> m = init_seg_model<double>(cfg, dsA.classes);
    for (double& v : m.params.tensors.at("head.conv.weight").data) v = 0.0;
    for (double& v : m.params.tensors.at("head.conv.bias").data) v = 0.0;
    EvalReport rep = evaluate_panoptic(m, dsA);
    int64_t gt_road = 0, gt_total = 0;
    for (int64_t i = 0; i < dsA.size(); ++i) {
      for (int32_t id : load_pair(dsA, i).gt.semantic()) {
        gt_total += id != 0;
        gt_road += id == 1;
      }
    }
    // Void ground truth is ignored, so the all-road prediction unions to
    // exactly the labeled pixel count.
    REQUIRE(rep.sem.per_class[0].intersection == gt_road);
    REQUIRE(rep.sem.per_class[0].union_ == gt_total);
    for (size_t k : {1u, 2u, 3u}) REQUIRE(rep.sem.per_class[k].intersection == 0);
  }

  SECTION("the report schema carries the headline metrics") {
    EvalReport rep = evaluate_oracle(dsA);
    const std::string text = encode_eval_report(rep);
    for (const char* key : {"scalar PQ ", "scalar PQ_stuff ", "scalar PQ_things ",
                            "scalar mIoU ", "sidewalk", "person", "car", "road"})
      REQUIRE(text.find(key) != std::string::npos);
  }
}

TEST_CASE("seg model files round trip bitwise") {
  const ClassTable table = ClassTable::desk();
  TrainConfig cfg = quick_config(1, 2, 77);
  SegModel<double> m = init_seg_model<double>(cfg, table);

  const std::vector<uint8_t> bytes = encode_seg_model(m);
  SegModel<double> back = decode_seg_model<double>(bytes);
  REQUIRE(encode_seg_model(back) == bytes);
  REQUIRE(back.encoder == m.encoder);
  REQUIRE(back.num_classes == m.num_classes);
  for (const auto& [path, t] : m.params.tensors)
    REQUIRE(same_bits(t, back.params.tensors.at(path)));

  SECTION("files persist the exact bytes") {
    const fs::path path = fs::temp_directory_path() / "panopix_down_model.bin";
    save_seg_model(path.string(), m);
    SegModel<double> loaded = load_seg_model<double>(path.string());
    REQUIRE(encode_seg_model(loaded) == bytes);
  }

  SECTION("corruption is rejected") {
    std::vector<uint8_t> truncated(bytes.begin(), bytes.end() - 9);
    REQUIRE_THROWS_AS(decode_seg_model<double>(truncated), DataError);

    std::vector<uint8_t> wrong_header = bytes;
    wrong_header[9] = 'X';
    REQUIRE_THROWS_AS(decode_seg_model<double>(wrong_header), DataError);

    std::vector<uint8_t> padded = bytes;
    padded.push_back(0);
    REQUIRE_THROWS_AS(decode_seg_model<double>(padded), DataError);
  }

  SECTION("missing and surplus tensors are rejected") {
    SegModel<double> gutted = m;
    gutted.params.tensors.erase("head.conv.bias");
    const std::string msg = message_of<DataError>(
        [&] { decode_seg_model<double>(encode_seg_model(gutted)); });
    REQUIRE(msg.find("head.conv.bias") != std::string::npos);

    SegModel<double> bloated = m;
    bloated.params.tensors.emplace("head.extra", Tensor<double>({2}));
    REQUIRE_THROWS_AS(decode_seg_model<double>(encode_seg_model(bloated)), DataError);
  }

  SECTION("precision never coerces silently") {
    SegModel<float> mf = init_seg_model<float>(cfg, table);
    const std::string msg = message_of<DataError>(
        [&] { decode_seg_model<double>(encode_seg_model(mf)); });
    REQUIRE(msg.find("f32") != std::string::npos);
  }
}

TEST_CASE("batch normalization by dataset channel statistics") {
  Image img;
  img.height = 2;
  img.width = 2;
  img.data.assign(3 * 4, 0.f);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) / 12.f;
  const std::array<double, 3> mean{0.1, 0.2, 0.3};
  const std::array<double, 3> sd{0.5, 0.25, 2.0};

  Tensor<double> dst({1, 3, 2, 2});
  detail::write_normalized(img, mean, sd, 0, dst);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t p = 0; p < 4; ++p) {
      const double raw = static_cast<double>(img.data[static_cast<size_t>(c * 4 + p)]);
      REQUIRE(dst.data[static_cast<size_t>(c * 4 + p)] ==
              Catch::Approx((raw - mean[static_cast<size_t>(c)]) / sd[static_cast<size_t>(c)])
                  .margin(1e-15));
    }

  const std::array<double, 3> bad{0.5, 0.0, 2.0};
  REQUIRE_THROWS_AS(detail::write_normalized(img, mean, bad, 0, dst), DataError);

  Tensor<double> small({1, 3, 2, 1});
  REQUIRE_THROWS_AS(detail::write_normalized(img, mean, sd, 0, small), ShapeError);
}
