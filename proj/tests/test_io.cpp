#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "pilnm/dataset_io.hpp"
#include "pilnm/rng.hpp"
#include "test_util.hpp"

using namespace pilnm;

TEST_CASE("numeric fields round-trip exactly at 17 significant digits", "[io]") {
  Rng rng(21);
  std::vector<double> values = {0.0, -0.0, 1.0, -1.0, 1e-300, -1e300, M_PI,
                                std::numeric_limits<double>::denorm_min(),
                                std::numeric_limits<double>::max()};
  for (int i = 0; i < 500; ++i)
    values.push_back(std::ldexp(rng.uniform(-1, 1), rng.uniform_int(80) - 40));
  for (double v : values) {
    const std::string s = io::fmt_double(v);
    const char* p = s.c_str();
    const double back = io::parse_double(p);
    CHECK(std::memcmp(&back, &v, sizeof v) == 0);
  }
}

TEST_CASE("dataset round-trips bit-identically", "[io]") {
  GenerateConfig cfg;
  cfg.horizon = 0.5;
  const Dataset ds = generate_dataset(3, {0.5, 5.0}, cfg, 13);

  const auto dir1 = testutil::fresh_dir("ds1");
  save_dataset(ds, dir1);
  const Dataset back = load_dataset(dir1);

  REQUIRE(back.trajectories.size() == ds.trajectories.size());
  CHECK(back.dt == ds.dt);
  CHECK(back.horizon == ds.horizon);
  CHECK(back.seed == ds.seed);
  CHECK(back.t_m == ds.t_m);
  CHECK(back.params_true.m_p == ds.params_true.m_p);
  CHECK(back.params_true.omega_b == ds.params_true.omega_b);
  CHECK(back.net.X_line == ds.net.X_line);
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    CHECK(back.trajectories[i].load_level == ds.trajectories[i].load_level);
    CHECK(back.trajectories[i].times == ds.trajectories[i].times);
    CHECK(back.trajectories[i].observations == ds.trajectories[i].observations);
  }

  // write-after-read reproduces the exact bytes
  const auto dir2 = testutil::fresh_dir("ds2");
  save_dataset(back, dir2);
  CHECK(testutil::same_tree(dir1, dir2));
  CHECK(dataset_digest(dir1) == dataset_digest(dir2));
}

TEST_CASE("digest reacts to content changes", "[io]") {
  GenerateConfig cfg;
  cfg.horizon = 0.2;
  const auto dir1 = testutil::fresh_dir("dga");
  const auto dir2 = testutil::fresh_dir("dgb");
  save_dataset(generate_dataset(2, {0.5, 5.0}, cfg, 1), dir1);
  save_dataset(generate_dataset(2, {0.5, 5.0}, cfg, 2), dir2);
  CHECK(dataset_digest(dir1) != dataset_digest(dir2));
}
