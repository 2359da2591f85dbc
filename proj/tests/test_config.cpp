// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "fedsim/config.hpp"
#include "fedsim/errors.hpp"

using namespace fedsim;

TEST_CASE("empty document gives the defaults") {
  const RunConfig c = parse_config("");
  CHECK(c == RunConfig{});
  CHECK(c.rounds == 50);
  CHECK(c.epochs == 5);
  CHECK(c.lr == 1e-3);
  CHECK(c.alpha == 0.98);
  CHECK(c.mode == Mode::fedmic);
}

TEST_CASE("documented defaults are accepted") {
  const RunConfig c = parse_config("rounds=50\nepochs=5\nlr=1e-3\nalpha=0.98\n");
  CHECK(c == RunConfig{});
}

TEST_CASE("parsing values, comments and whitespace") {
  const RunConfig c = parse_config(
      "# comment\n"
      "mode = fedavg\n"
      "n_clients=8   # trailing\n"
      "\n"
      "ratio=0.5\n"
      "seeds=1,2,3\n"
      "hidden=64,32\n"
      "eval=current\n"
      "train_aux=false\n");
  CHECK(c.mode == Mode::fedavg);
  CHECK(c.n_clients == 8);
  CHECK(c.ratio == 0.5);
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(c.hidden == std::vector<std::size_t>{64, 32});
  CHECK(c.eval == EvalPoint::current);
  CHECK_FALSE(c.train_aux);
  CHECK(parse_config("seed=7").seeds == std::vector<std::uint64_t>{7});
}

TEST_CASE("errors name the key and line") {
  try {
    parse_config("rounds=3\nalpha=1.5\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    const std::string what = e.what();
    CHECK(what.find("line 2") != std::string::npos);
    CHECK(what.find("alpha") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("colour=red"), ParseError);
  CHECK_THROWS_AS(parse_config("rounds"), ParseError);
  CHECK_THROWS_AS(parse_config("rounds=ten"), ParseError);
  CHECK_THROWS_AS(parse_config("rounds=-1"), ParseError);
  CHECK_THROWS_AS(parse_config("mode=fedprox"), UserError);
  CHECK_THROWS_AS(parse_config("ratio=0"), UserError);
}

TEST_CASE("overrides take precedence") {
  const std::vector<std::string> over{"--rounds=7", "--mode=local"};
  const RunConfig c = parse_config("rounds=3\nmode=fedavg\nepochs=2\n", over);
  CHECK(c.rounds == 7);
  CHECK(c.mode == Mode::local);
  CHECK(c.epochs == 2);
  const std::vector<std::string> bad{"rounds=7"};
  CHECK_THROWS_AS(parse_config("", bad), ParseError);
  const std::vector<std::string> unknown{"--nope=1"};
  CHECK_THROWS_AS(parse_config("", unknown), ParseError);
}

TEST_CASE("serialize round trip") {
  RunConfig c;
  c.mode = Mode::fedmic_b;
  c.lr = 0.1 + 0.2;
  c.tau = 1e-3;
  c.seeds = {4, 5};
  c.hidden = {128, 64};
  c.faulty_clients = {2};
  c.dump_packets = "/tmp/x";
  c.eval = EvalPoint::current;
  CHECK(parse_config(serialize_config(c)) == c);
  CHECK(parse_config(serialize_config(RunConfig{})) == RunConfig{});
  CHECK(format_real(0.1) == "0.1");
  CHECK(std::stod(format_real(0.1 + 0.2)) == 0.1 + 0.2);
}
