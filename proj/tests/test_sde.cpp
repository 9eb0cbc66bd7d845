#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <set>
#include <vector>

#include "kcg/grid.hpp"
#include "kcg/potentials.hpp"
#include "kcg/rng.hpp"
#include "kcg/sde.hpp"

using namespace kcg;

namespace {

PotentialSpec well1d() {
  return PotentialSpec::from_sigma(PotentialKind::DoubleWell1D, std::sqrt(2.0));
}

}  // namespace

TEST_CASE("a single integration step matches the update rule") {
  PotentialSpec spec = well1d();
  double dt = 1e-3;
  rng_stream ref = rng_stream::keyed(7, 0, 0);
  double xi = ref.normal();
  // V'(0.5) = 4 * 0.5 * (0.25 - 1) = -1.5
  double expect = 0.5 + 1.5 * dt + spec.sigma * std::sqrt(dt) * xi;

  rng_stream stream = rng_stream::keyed(7, 0, 0);
  std::array<double, 1> x0{0.5};
  auto x = simulate_path(spec, x0, dt, dt, stream);
  REQUIRE(x[0] == Catch::Approx(expect).epsilon(1e-15));
}

TEST_CASE("paths are deterministic given the stream key") {
  PotentialSpec spec = well1d();
  std::array<double, 1> x0{-0.3};
  rng_stream a = rng_stream::keyed(42, 3, 1);
  rng_stream b = rng_stream::keyed(42, 3, 1);
  auto xa = simulate_path(spec, x0, 0.1, 1e-3, a);
  auto xb = simulate_path(spec, x0, 1e-1, 1e-3, b);
  REQUIRE(xa[0] == xb[0]);

  rng_stream c = rng_stream::keyed(42, 3, 2);  // different replica key
  auto xc = simulate_path(spec, x0, 0.1, 1e-3, c);
  REQUIRE(xa[0] != xc[0]);
}

TEST_CASE("zero total time returns the start point") {
  PotentialSpec spec = well1d();
  std::array<double, 1> x0{0.77};
  rng_stream s = rng_stream::keyed(1, 0, 0);
  auto x = simulate_path(spec, x0, 0.0, 1e-3, s);
  REQUIRE(x[0] == 0.77);
}

TEST_CASE("path input validation") {
  PotentialSpec spec = well1d();
  std::array<double, 1> x0{0.0};
  std::array<double, 2> x2{0.0, 0.0};
  rng_stream s = rng_stream::keyed(1, 0, 0);
  REQUIRE_THROWS_AS(simulate_path(spec, x0, 1.0, 0.0, s), error);
  REQUIRE_THROWS_AS(simulate_path(spec, x0, 1.0, -1e-3, s), error);
  REQUIRE_THROWS_AS(simulate_path(spec, x0, 0.0005, 0.0002, s), error);
  REQUIRE_THROWS_AS(simulate_path(spec, x2, 1.0, 1e-3, s), error);
}

TEST_CASE("burst plan validation and step count") {
  BurstPlan plan{100, 16, 1.0, 5e-4, 9};
  plan.validate();
  REQUIRE(plan.steps() == 2000);
  REQUIRE_THROWS_AS((BurstPlan{0, 16, 1.0, 5e-4, 9}).validate(), error);
  REQUIRE_THROWS_AS((BurstPlan{100, 0, 1.0, 5e-4, 9}).validate(), error);
  REQUIRE_THROWS_AS((BurstPlan{100, 16, 0.0, 5e-4, 9}).validate(), error);
  REQUIRE_THROWS_AS((BurstPlan{100, 16, 1.0, 3e-4, 9}).validate(), error);
}

TEST_CASE("bursts reproduce per-replica paths exactly") {
  PotentialSpec spec = well1d();
  BurstPlan plan{4, 3, 0.05, 1e-3, 123};
  BurstData data = generate_bursts(spec, plan, StartsMode::uniform_box());

  REQUIRE(data.dim == 1);
  REQUIRE(data.n_start() == 4);
  REQUIRE(data.n_replicas() == 3);
  REQUIRE(data.ends.rows() == 12);

  // starts draw from the stream keyed one past the last replica
  for (int i = 0; i < 4; ++i) {
    rng_stream s = rng_stream::keyed(123, i, 3);
    double expect = spec.box.lo[0] + s.uniform() * (spec.box.hi[0] - spec.box.lo[0]);
    REQUIRE(data.starts(i, 0) == expect);
  }

  // each endpoint equals an independent integration with the (i, k) stream
  for (int i = 0; i < 4; ++i) {
    for (int k = 0; k < 3; ++k) {
      rng_stream s = rng_stream::keyed(123, i, k);
      std::array<double, 1> x0{data.starts(i, 0)};
      auto x = simulate_path(spec, x0, plan.lag, plan.dt, s);
      REQUIRE(data.ends(i * 3 + k, 0) == x[0]);
    }
  }

  BurstData again = generate_bursts(spec, plan, StartsMode::uniform_box());
  REQUIRE((data.starts - again.starts).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((data.ends - again.ends).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("start modes: grid centers and provided points") {
  PotentialSpec spec = well1d();
  std::array<int, 1> bins{8};
  RegularGrid grid = build_grid(spec.box, bins);
  BurstPlan plan{8, 2, 0.01, 1e-3, 5};
  BurstData data = generate_bursts(spec, plan, StartsMode::grid_centers(grid));
  for (int i = 0; i < 8; ++i) REQUIRE(data.starts(i, 0) == grid.center(i)[0]);

  Eigen::MatrixXd pts(2, 1);
  pts << -0.5, 0.5;
  BurstPlan plan2{2, 2, 0.01, 1e-3, 5};
  BurstData data2 = generate_bursts(spec, plan2, StartsMode::provided(pts));
  REQUIRE(data2.starts(0, 0) == -0.5);
  REQUIRE(data2.starts(1, 0) == 0.5);

  BurstPlan bad{3, 2, 0.01, 1e-3, 5};
  REQUIRE_THROWS_AS(generate_bursts(spec, bad, StartsMode::provided(pts)), error);
  REQUIRE_THROWS_AS(generate_bursts(spec, bad, StartsMode::grid_centers(grid)), error);
}

TEST_CASE("endpoints outside the inflated box are reported") {
  PotentialSpec spec = well1d();
  spec.box = box1d(-0.01, 0.01);  // drift carries every path far past this
  BurstPlan plan{3, 2, 0.5, 1e-3, 17};
  BurstData data = generate_bursts(spec, plan, StartsMode::uniform_box());
  REQUIRE(data.box_violations.size() == 6);
  std::set<std::pair<int, int>> seen(data.box_violations.begin(), data.box_violations.end());
  REQUIRE(seen.size() == 6);
  for (auto [i, k] : data.box_violations) {
    REQUIRE((i >= 0 && i < 3));
    REQUIRE((k >= 0 && k < 2));
    REQUIRE(std::abs(data.ends(i * 2 + k, 0)) > 0.012);
  }
}

TEST_CASE("long bursts settle into the wells") {
  PotentialSpec spec = well1d();
  Eigen::MatrixXd pts(1, 1);
  pts << 0.0;
  BurstPlan plan{1, 200, 1.0, 1e-3, 31};
  BurstData data = generate_bursts(spec, plan, StartsMode::provided(pts));
  double mean_abs = data.ends.cwiseAbs().mean();
  REQUIRE(mean_abs > 0.7);
  REQUIRE(mean_abs < 1.3);
  // both wells get visited from a start on the barrier
  REQUIRE(data.ends.minCoeff() < -0.5);
  REQUIRE(data.ends.maxCoeff() > 0.5);
}
