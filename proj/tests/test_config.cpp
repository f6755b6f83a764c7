#include <catch2/catch.hpp>

#include <cstdlib>
#include <string>

#include "fedqsn/config.hpp"

using namespace fedqsn;

namespace {

const char* kMinimal =
    "[model]\n"
    "input_dim = 8\n"
    "output_dim = 1\n"
    "\n"
    "[data]\n"
    "source = synthetic\n";

}  // namespace

TEST_CASE("a minimal config gets the documented defaults") {
  const RunConfig cfg = parse_config_text(kMinimal);
  REQUIRE(cfg.fed.rounds == 10);
  REQUIRE(cfg.fed.batch_size == 16);
  REQUIRE(cfg.fed.quant.has_value());
  REQUIRE(cfg.fed.quant->block_size == 256);
  REQUIRE(cfg.fed.quant->bit_width == 2);
  REQUIRE(cfg.fed.p1 == 0.1);
  REQUIRE(cfg.fed.p2 == 0.1);
  REQUIRE(cfg.fed.clients_total == 5);
  REQUIRE(cfg.fed.clients_per_round == 5);
  REQUIRE(cfg.fed.reselect_each_round);
  REQUIRE(cfg.model.kind == ModelKind::Linear);
  REQUIRE_FALSE(cfg.model_seed_explicit);
}

TEST_CASE("invariant violations surface as ValidationError") {
  const std::string bad = std::string(kMinimal) + "\n[fed]\np1 = 1.0\n";
  try {
    parse_config_text(bad);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    REQUIRE(std::string(e.what()).find("p1") != std::string::npos);
  }
  REQUIRE_THROWS_AS(parse_config_text(std::string(kMinimal) + "\n[fed]\nrounds = 0\n"),
                    ValidationError);
  REQUIRE_THROWS_AS(parse_config_text("[data]\nsource = synthetic\n"), ValidationError);
}

TEST_CASE("unknown keys are named in the error") {
  const std::string bad = std::string(kMinimal) + "\n[fed]\npq = 3\n";
  try {
    parse_config_text(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    REQUIRE(std::string(e.what()).find("pq") != std::string::npos);
  }
  REQUIRE_THROWS_AS(parse_config_text(std::string(kMinimal) + "\n[nonsense]\nx = 1\n"),
                    ParseError);
  REQUIRE_THROWS_AS(parse_config_text(std::string(kMinimal) + "\n[fed]\nrounds = ten\n"),
                    ParseError);
  REQUIRE_THROWS_AS(parse_config_text(std::string(kMinimal) + "\n[fed]\nrounds = 10\nrounds = 9\n"),
                    ParseError);
}

TEST_CASE("quant_bits = 0 disables quantization") {
  const RunConfig cfg = parse_config_text(std::string(kMinimal) + "\n[fed]\nquant_bits = 0\n");
  REQUIRE_FALSE(cfg.fed.quant.has_value());
}

TEST_CASE("loss and data kinds must pair up") {
  REQUIRE_THROWS_AS(
      parse_config_text("[model]\ninput_dim = 4\noutput_dim = 3\nloss = cross_entropy\n"
                        "[data]\nsource = synthetic\n"),
      ValidationError);
  const RunConfig ok =
      parse_config_text("[model]\ninput_dim = 4\noutput_dim = 3\nloss = cross_entropy\n"
                        "[data]\nsource = synthetic\nkind = gaussian_clusters\n");
  REQUIRE(ok.data.kind == SyntheticKind::GaussianClusters);
}

TEST_CASE("the environment can override the master seed") {
  setenv("FEDQSN_MASTER_SEED", "424242", 1);
  const RunConfig cfg = parse_config_text(kMinimal);
  unsetenv("FEDQSN_MASTER_SEED");
  REQUIRE(cfg.fed.master_seed == 424242);
  const RunConfig plain = parse_config_text(kMinimal);
  REQUIRE(plain.fed.master_seed == 12345);
}

TEST_CASE("the config hash ignores formatting but tracks content") {
  const RunConfig a = parse_config_text(kMinimal);
  const RunConfig b = parse_config_text(
      "[data]\nsource = synthetic\n\n[model]\n  output_dim = 1\n# comment\ninput_dim   =   8\n");
  REQUIRE(config_hash(a) == config_hash(b));

  const RunConfig c = parse_config_text(std::string(kMinimal) + "\n[fed]\np2 = 0.2\n");
  REQUIRE(config_hash(a) != config_hash(c));

  // artifact destinations do not change experiment identity
  RunConfig moved = a;
  moved.output_dir = "elsewhere";
  REQUIRE(config_hash(a) == config_hash(moved));
}

TEST_CASE("mlp and partition settings parse end to end") {
  const RunConfig cfg = parse_config_text(
      "[model]\n"
      "kind = mlp\n"
      "input_dim = 6\n"
      "output_dim = 2\n"
      "hidden_dims = 16, 8\n"
      "activation = relu\n"
      "init_seed = 99\n"
      "[data]\n"
      "source = synthetic\n"
      "train_samples = 512\n"
      "[partition]\n"
      "clients = 8\n"
      "scheme = size_skew\n"
      "weights = 0.3,0.2,0.2,0.1,0.05,0.05,0.05,0.05\n"
      "[fed]\n"
      "clients_per_round = 4\n"
      "secure_agg = true\n"
      "[run]\n"
      "emit = summary_json\n"
      "[pretrain]\n"
      "epochs = 0\n");
  REQUIRE(cfg.model.hidden_dims == std::vector<std::size_t>{16, 8});
  REQUIRE(cfg.model.activation == Activation::ReLU);
  REQUIRE(cfg.model_seed_explicit);
  REQUIRE(cfg.partition.scheme == PartitionScheme::SizeSkew);
  REQUIRE(cfg.partition.weights.size() == 8);
  REQUIRE(cfg.fed.clients_total == 8);
  REQUIRE(cfg.fed.clients_per_round == 4);
  REQUIRE(cfg.fed.secure_agg);
  REQUIRE_FALSE(cfg.emit.round_csv);
  REQUIRE(cfg.emit.summary_json);
  REQUIRE(cfg.pretrain.epochs == 0);
}

TEST_CASE("missing files raise IoError") {
  REQUIRE_THROWS_AS(parse_config("/nonexistent/config.ini"), IoError);
}
