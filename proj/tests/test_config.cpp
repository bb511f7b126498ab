#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vpr/config.hpp"

using namespace vpr;

TEST_CASE("config parses sections, comments, and typed values") {
  Config cfg = Config::parse_string(
      "# run settings\n"
      "[train]\n"
      "epochs = 12      # short run\n"
      "lr = 0.0005\n"
      "margin = 0.1\n"
      "\n"
      "[encoder]\n"
      "dim = 64\n"
      "\n"
      "[ablation]\n"
      "zero_correlation = true\n"
      "name = \"quoted value\"\n");
  CHECK(cfg.get_int("train.epochs", 0) == 12);
  CHECK(cfg.get_num("train.lr", 0) == doctest::Approx(5e-4));
  CHECK(cfg.get_bool("ablation.zero_correlation", false));
  CHECK(cfg.get_str("ablation.name", "") == "quoted value");
  CHECK(cfg.get_int("train.missing", 7) == 7);

  TrainConfig tc;
  cfg.apply(tc);
  CHECK(tc.epochs == 12);
  CHECK(tc.encoder.dim == 64);
  CHECK(tc.ablation.zero_correlation);
  CHECK(tc.margin == doctest::Approx(0.1));
}

TEST_CASE("config rejects malformed input") {
  CHECK_THROWS_AS((void)Config::parse_string("[unterminated\nx = 1\n"), ConfigError);
  CHECK_THROWS_AS((void)Config::parse_string("just some words\n"), ConfigError);
  Config cfg = Config::parse_string("[a]\nx = notanumber\n");
  CHECK_THROWS_AS((void)cfg.get_num("a.x", 0), ConfigError);
  CHECK_THROWS_AS((void)cfg.get_bool("a.x", false), ConfigError);
}

TEST_CASE("config hash is stable and order-insensitive") {
  Config a = Config::parse_string("[s]\nx = 1\ny = 2\n");
  Config b = Config::parse_string("[s]\ny = 2\nx = 1\n");
  Config c = Config::parse_string("[s]\nx = 1\ny = 3\n");
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
}
