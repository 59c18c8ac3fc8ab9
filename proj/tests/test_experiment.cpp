#include <doctest.h>

#include <cmath>
#include <cstring>

#include "feddva/experiment.hpp"

using namespace feddva;

TEST_CASE("an empty config gives the documented defaults") {
  const ExperimentConfig c = parse_config("");
  CHECK(c.batch_size == 256);
  CHECK(c.lr_eta == 0.001);
  CHECK(c.lr_lambda == 0.001);
  CHECK(c.rounds == 200);
  CHECK(c.epochs_per_phase == 5);
  CHECK(c.alpha == 1.0);
  CHECK(c.beta == 0.75);
  CHECK(c.resolved_d_z() == 4);
  CHECK(c.resolved_d_c() == 4);
  CHECK(c.xi() == 32.0);
  CHECK(c == ExperimentConfig{});
}

TEST_CASE("classification defaults to 8-dimensional latents") {
  const ExperimentConfig c = parse_config("task = classify\n");
  CHECK(c.resolved_d_z() == 8);
  CHECK(c.resolved_d_c() == 8);
  CHECK(c.xi() == 64.0);
}

TEST_CASE("overriding d_c moves the default xi") {
  const ExperimentConfig c = parse_config("d_c = 8\n");
  CHECK(c.xi() == 64.0);
  CHECK(parse_config("d_c = 8\nxi_scale = 0.5\n").xi() == 32.0);
}

TEST_CASE("config errors name the offending key") {
  CHECK_THROWS_WITH(parse_config("bogus = 1\n"), doctest::Contains("'bogus'"));
  CHECK_THROWS_WITH(parse_config("rounds = many\n"), doctest::Contains("'rounds'"));
  CHECK_THROWS_WITH(parse_config("lr_eta = -0.1\n"), doctest::Contains("lr_eta"));
  CHECK_THROWS_WITH(parse_config("lr_lambda = nan\n"), doctest::Contains("lr_lambda"));
  CHECK_THROWS(parse_config("just some words\n"));
  CHECK_THROWS_WITH(parse_config("activation = sigmoid\n"), doctest::Contains("activation"));
  CHECK_THROWS_WITH(parse_config("classifier_input = both-ish\n"), doctest::Contains("classifier_input"));
}

TEST_CASE("comments and blank lines are ignored") {
  const ExperimentConfig c = parse_config("# run\n\n  K = 6   # six clients\nm=3\n");
  CHECK(c.K == 6);
  CHECK(c.m == 3);
}

TEST_CASE("method and task must agree") {
  CHECK_THROWS(parse_config("method = fedavg\n"));
  CHECK_NOTHROW(parse_config("method = fedavg\ntask = classify\n"));
  CHECK_THROWS(parse_config("method = vanilla-vae\ntask = classify\n"));
  CHECK_THROWS(parse_config("K = 2\nm = 3\n"));
}

TEST_CASE("format and parse round-trip bit-exactly") {
  ExperimentConfig c;
  c.lr_eta = 0.1 + 0.2;
  c.lr_lambda = 1e-300;
  c.alpha = 1.0 / 3.0;
  c.d_z = 7;
  c.hidden = {33, 5, 2};
  c.dataset = "/data/mnist";
  c.frozen_representation = true;
  c.classifier_input = "c";
  const std::string text = format_config(c);
  const ExperimentConfig back = parse_config(text);
  CHECK(back == c);
  CHECK(std::memcmp(&back.lr_eta, &c.lr_eta, sizeof(double)) == 0);
  CHECK(format_config(back) == text);
}

TEST_CASE("every key can be read and written by name") {
  ExperimentConfig c;
  for (const auto& key : config_keys()) {
    const std::string v = get_config_value(c, key);
    set_config_value(c, key, v);
  }
  CHECK(c == ExperimentConfig{});
  set_config_value(c, "d_z", "auto");
  CHECK_FALSE(c.d_z.has_value());
  CHECK_THROWS(get_config_value(c, "nope"));
}

TEST_CASE("architecture follows method and task") {
  ExperimentConfig c;
  c.task = Task::kClassify;
  c.n_classes = 4;
  c.classifier_input = "z";
  ArchitectureConfig a = architecture_for(c, 64);
  CHECK(a.variant == ModelVariant::kDual);
  CHECK(a.n_classes == 4);
  CHECK(a.classifier_input == ClassifierInput::kZOnly);
  c = {};
  c.method = Method::kVanillaVae;
  a = architecture_for(c, 64);
  CHECK(a.variant == ModelVariant::kVanilla);
  CHECK(a.n_classes == 0);
}

TEST_CASE("experiment data is reproducible from the seed") {
  ExperimentConfig c;
  c.K = 3;
  c.m = 3;
  c.samples_per_class = 5;
  c.n_classes = 4;
  c.image_size = 8;
  const ExperimentData a = build_experiment_data(c);
  const ExperimentData b = build_experiment_data(c);
  REQUIRE(a.shards.size() == 3);
  CHECK(a.input_dim == 64);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(a.shards[k].train.pixels == b.shards[k].train.pixels);
    CHECK(a.shards[k].heldout.labels == b.shards[k].heldout.labels);
    CHECK(a.shards[k].heldout.size() > 0);
    CHECK(a.shards[k].xi == 32.0);
  }
  c.seed = 2;
  CHECK(build_experiment_data(c).shards[0].train.pixels != a.shards[0].train.pixels);
}

TEST_CASE("label-skew experiment data keeps every client usable") {
  ExperimentConfig c;
  c.task = Task::kClassify;
  c.partition = "label-skew";
  c.K = 8;
  c.m = 8;
  c.n_classes = 4;
  c.samples_per_class = 40;
  c.image_size = 8;
  const ExperimentData d = build_experiment_data(c);
  CHECK(d.shards.size() == 8);
  for (const auto& s : d.shards) {
    CHECK(s.train.size() >= 2);
    CHECK(s.heldout.size() >= 1);
  }
  CHECK(d.plan.scheme == PartitionScheme::kLabelSkew);
}
