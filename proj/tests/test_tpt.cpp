#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "kcg/effective.hpp"
#include "kcg/grid.hpp"
#include "kcg/membership.hpp"
#include "kcg/potentials.hpp"
#include "kcg/spectral.hpp"
#include "kcg/sqra.hpp"
#include "kcg/tpt.hpp"

using namespace kcg;

namespace {

constexpr double kinf = std::numeric_limits<double>::infinity();

struct Setup {
  RegularGrid grid;
  std::vector<double> v;
  SparseGenerator gen;
  ChiTable chi;
};

Setup bench1d(int bins) {
  Setup s;
  PotentialSpec spec = PotentialSpec::from_sigma(PotentialKind::DoubleWell1D, std::sqrt(2.0));
  s.grid = build_grid(spec.box, std::array<int, 1>{bins});
  s.v.resize(s.grid.n_cells);
  for (int i = 0; i < s.grid.n_cells; ++i) {
    auto c = s.grid.center(i);
    s.v[i] = eval_potential(spec, std::span<const double>(c.data(), 1));
  }
  s.gen = sqra_generator(s.grid, s.v, spec.beta, spec.sigma);
  s.chi = pcca_chi(dominant_eigs(s.gen, 5), 1, s.v);
  return s;
}

Setup bench2d() {
  Setup s;
  PotentialSpec spec =
      PotentialSpec::from_sigma(PotentialKind::EnthalpicEntropic2D, std::sqrt(2.0));
  s.grid = build_grid(spec.box, std::array<int, 2>{100, 100});
  s.v.resize(s.grid.n_cells);
  for (int i = 0; i < s.grid.n_cells; ++i) {
    auto c = s.grid.center(i);
    s.v[i] = eval_potential(spec, std::span<const double>(c.data(), 2));
  }
  s.gen = sqra_generator(s.grid, s.v, spec.beta, spec.sigma);
  s.chi = pcca_chi(dominant_eigs(s.gen, 6), 1, s.v);
  return s;
}

// free diffusion on [0,1] with sigma = sqrt(2): every neighbor rate is 1/h^2
SparseGenerator flat_chain(int bins) {
  RegularGrid grid = build_grid(box1d(0, 1), std::array<int, 1>{bins});
  std::vector<double> v(grid.n_cells, 0.0);
  return sqra_generator(grid, v, 1.0, std::sqrt(2.0));
}

std::string thrown_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const error& e) {
    return e.code();
  }
  return "";
}

}  // namespace

TEST_CASE("four-cell flat chain reproduces hand kinetics") {
  // h = 1/4, neighbor rate 16; A = {0}, B = {3}
  RegularGrid grid = build_grid(box1d(0, 1), std::array<int, 1>{4});
  std::vector<double> v(4, 0.0);
  SparseGenerator gen = sqra_generator(grid, v, 1.0, std::sqrt(2.0));
  std::vector<char> a{1, 0, 0, 0};
  std::vector<char> b{0, 0, 0, 1};

  Eigen::VectorXd m = mfpt(gen, b);
  REQUIRE(m[0] == Catch::Approx(0.375).margin(1e-12));
  REQUIRE(m[1] == Catch::Approx(0.3125).margin(1e-12));
  REQUIRE(m[2] == Catch::Approx(0.1875).margin(1e-12));
  REQUIRE(m[3] == 0.0);

  Eigen::VectorXd q = committor(gen, a, b);
  REQUIRE(q[0] == 0.0);
  REQUIRE(q[1] == Catch::Approx(1.0 / 3.0).margin(1e-13));
  REQUIRE(q[2] == Catch::Approx(2.0 / 3.0).margin(1e-13));
  REQUIRE(q[3] == 1.0);

  // np.gradient style: every cell sees slope 4/3, transition cells are 1 and 2
  TptResult r = reactive_quantities(gen, grid, q, a, b, std::sqrt(2.0));
  REQUIRE(r.mu_a == Catch::Approx(0.25).margin(1e-15));
  REQUIRE(r.rate == Catch::Approx(32.0 / 9.0).margin(1e-12));
  REQUIRE(r.flux(1, 0) == Catch::Approx(1.0 / 3.0).margin(1e-13));
  REQUIRE(r.flux(2, 0) == Catch::Approx(1.0 / 3.0).margin(1e-13));
  REQUIRE(r.reactive_density[1] == Catch::Approx(1.0 / 18.0).margin(1e-14));
  REQUIRE(r.reactive_density[0] == 0.0);

  // one cut pair (1 -> 2): 0.25 * 16 * (1/3) / 0.25
  REQUIRE(cut_rate(gen, q, a) == Catch::Approx(16.0 / 3.0).margin(1e-12));
}

TEST_CASE("mfpt with an all-absorbing target is zero") {
  SparseGenerator gen = flat_chain(6);
  std::vector<char> b(6, 1);
  Eigen::VectorXd m = mfpt(gen, b);
  REQUIRE(m.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("boundary sets are validated") {
  SparseGenerator gen = flat_chain(4);
  std::vector<char> none(4, 0);
  std::vector<char> first{1, 0, 0, 0};
  std::vector<char> tail{0, 1, 0, 1};
  std::vector<char> head{1, 1, 0, 0};
  REQUIRE_THROWS_AS(mfpt(gen, none), error);
  REQUIRE_THROWS_AS(committor(gen, none, first), error);
  REQUIRE_THROWS_AS(committor(gen, first, none), error);
  try {
    committor(gen, head, tail);
    FAIL("overlap not rejected");
  } catch (const error& e) {
    REQUIRE(e.code() == "tpt.region");
    REQUIRE(e.message().find("cell 1") != std::string::npos);
  }
  std::vector<char> short_mask(3, 1);
  REQUIRE_THROWS_AS(mfpt(gen, short_mask), error);
}

TEST_CASE("cells with no path to the boundary are reported") {
  // two disconnected two-cell blocks; boundary sits entirely in the first
  SparseGenerator gen;
  gen.L.resize(4, 4);
  gen.L.insert(0, 0) = -1.0;
  gen.L.insert(0, 1) = 1.0;
  gen.L.insert(1, 0) = 1.0;
  gen.L.insert(1, 1) = -1.0;
  gen.L.insert(2, 2) = -1.0;
  gen.L.insert(2, 3) = 1.0;
  gen.L.insert(3, 2) = 1.0;
  gen.L.insert(3, 3) = -1.0;
  gen.L.makeCompressed();
  gen.mu = Eigen::VectorXd::Constant(4, 0.25);
  gen.flux_scale = 1.0;

  std::vector<char> a{1, 0, 0, 0};
  std::vector<char> b{0, 1, 0, 0};
  REQUIRE(thrown_code([&] { committor(gen, a, b); }) == "tpt.disconnected");
  REQUIRE(thrown_code([&] { mfpt(gen, b); }) == "tpt.disconnected");
  try {
    committor(gen, a, b);
  } catch (const error& e) {
    REQUIRE(e.message().find('2') != std::string::npos);
    REQUIRE(e.message().find('3') != std::string::npos);
  }
}

TEST_CASE("symmetric wells give a half committor at the barrier") {
  Setup s = bench1d(63);
  std::vector<char> a(63, 0), b(63, 0);
  for (int i = 0; i < 16; ++i) b[i] = 1;
  for (int i = 47; i < 63; ++i) a[i] = 1;
  Eigen::VectorXd q = committor(s.gen, a, b);
  REQUIRE(q[31] == Catch::Approx(0.5).margin(1e-9));
  for (int i = 1; i < 63; ++i) REQUIRE(q[i] <= q[i - 1] + 1e-12);
  // mirror symmetry of the double well: q(i) + q(62 - i) = 1
  for (int i = 0; i < 63; ++i)
    REQUIRE(q[i] + q[62 - i] == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("double-well rates match the frozen references") {
  Setup s = bench1d(63);
  double z_a = std::clamp(s.chi.values(47, 0), 0.0, 1.0);
  double z_b = std::clamp(s.chi.values(15, 0), 0.0, 1.0);
  std::vector<char> a(63, 0), b(63, 0);
  for (int i = 0; i < 63; ++i) {
    double z = std::clamp(s.chi.values(i, 0), 0.0, 1.0);
    a[i] = z <= z_a ? 1 : 0;
    b[i] = z >= z_b ? 1 : 0;
  }
  Eigen::VectorXd q = committor(s.gen, a, b);
  TptResult r = reactive_quantities(s.gen, s.grid, q, a, b, std::sqrt(2.0));
  REQUIRE(r.rate == Catch::Approx(0.710033).epsilon(1e-5));
  REQUIRE(cut_rate(s.gen, q, a) == Catch::Approx(0.723132).epsilon(1e-5));
  REQUIRE(r.mu_a > 0.0);
  REQUIRE(r.mu_a < 1.0);
}

TEST_CASE("enthalpic-entropic rates and passage times match the frozen references") {
  Setup s = bench2d();
  RegionSpec a_spec = RegionSpec::preimage(RegionSpec::latent_interval(-kinf, 0.06));
  RegionSpec b_spec = RegionSpec::preimage(RegionSpec::latent_interval(0.94, kinf));
  std::vector<char> a = resolve_region_full(a_spec, s.chi);
  std::vector<char> b = resolve_region_full(b_spec, s.chi);

  Eigen::VectorXd q = committor(s.gen, a, b);
  TptResult r = reactive_quantities(s.gen, s.grid, q, a, b, std::sqrt(2.0));
  REQUIRE(r.rate == Catch::Approx(0.15089322562933807).epsilon(1e-9));
  REQUIRE(cut_rate(s.gen, q, a) == Catch::Approx(0.15194130156596788).epsilon(1e-9));

  Eigen::VectorXd m = mfpt(s.gen, b);
  double acc_a = 0.0, mass_a = 0.0, acc_mid = 0.0;
  int n_mid = 0;
  for (int i = 0; i < s.gen.n(); ++i) {
    if (a[i]) {
      acc_a += m[i];
      mass_a += 1.0;
    }
    double z = s.chi.values(i, 0);
    if (z > 0.4 && z < 0.6) {
      acc_mid += m[i];
      ++n_mid;
    }
  }
  REQUIRE(acc_a / mass_a == Catch::Approx(8.772).margin(2e-3));
  REQUIRE(m.maxCoeff() == Catch::Approx(8.952).margin(2e-3));
  REQUIRE(acc_mid / n_mid == Catch::Approx(4.390).margin(2e-3));

  // the reactive current crosses the q = 1/2 surface in both channels
  int upper = 0, lower = 0;
  for (int i = 0; i < s.gen.n(); ++i) {
    if (std::abs(q[i] - 0.5) >= 0.05) continue;
    auto c = s.grid.center(i);
    double speed = r.flux.row(i).norm();
    REQUIRE(speed > 0.0);
    (c[1] > 0 ? upper : lower) += 1;
  }
  REQUIRE(upper > 0);
  REQUIRE(lower > 0);
}

TEST_CASE("constant-coefficient latent chains have a linear committor") {
  int nk = 50;
  std::vector<int> cells(nk);
  for (int k = 0; k < nk; ++k) cells[k] = k;
  Eigen::VectorXd w = Eigen::VectorXd::Constant(nk, 1.0 / nk);
  Eigen::MatrixXd d = Eigen::MatrixXd::Constant(nk, 1, 1.0);
  SparseGenerator gen = effective_generator(1, nk, cells, w, d);
  std::vector<char> a(nk, 0), b(nk, 0);
  a[0] = 1;
  b[nk - 1] = 1;
  Eigen::VectorXd q = committor(gen, a, b);
  for (int k = 0; k < nk; ++k)
    REQUIRE(q[k] == Catch::Approx(k / 49.0).margin(1e-10));
}

TEST_CASE("closed-form and discrete effective kinetics match the frozen references") {
  Setup s = bench1d(63);
  EffectiveModel model = build_effective(s.chi, s.gen, s.grid, std::sqrt(2.0), 50);

  EffectiveKinetics1d ek = effective_kinetics_1d(model, 0.06, 0.94);
  REQUIRE(ek.rate == Catch::Approx(0.6464247276696647).epsilon(1e-9));
  REQUIRE(ek.z_q > 0.0);
  REQUIRE(ek.mu_a > 0.0);
  REQUIRE(ek.mu_a < 1.0);
  int nf = static_cast<int>(ek.q_fine.size());
  REQUIRE(ek.q_fine[0] == 0.0);
  REQUIRE(ek.q_fine[nf - 1] == 1.0);
  for (int i = 1; i < nf; ++i) REQUIRE(ek.q_fine[i] >= ek.q_fine[i - 1]);
  REQUIRE(ek.m_fine[nf - 1] == 0.0);
  for (int i = 1; i < nf; ++i) REQUIRE(ek.m_fine[i] <= ek.m_fine[i - 1] + 1e-15);
  REQUIRE(ek.q_bins.size() == 50);
  REQUIRE(ek.q_bins.minCoeff() >= 0.0);
  REQUIRE(ek.q_bins.maxCoeff() <= 1.0);

  std::vector<char> a_lat =
      resolve_region_latent(RegionSpec::latent_interval(-kinf, 0.06), model);
  std::vector<char> b_lat =
      resolve_region_latent(RegionSpec::latent_interval(0.94, kinf), model);
  TptResult lat = effective_kinetics_md(model, a_lat, b_lat);
  REQUIRE(lat.rate == Catch::Approx(0.6004065301617585).epsilon(1e-9));
  for (int k = 0; k < model.n_model(); ++k) {
    if (a_lat[k]) REQUIRE(lat.committor[k] == 0.0);
    if (b_lat[k]) REQUIRE(lat.committor[k] == 1.0);
  }
  Eigen::VectorXd m_direct = mfpt(model.gen, b_lat);
  REQUIRE((lat.mfpt - m_direct).cwiseAbs().maxCoeff() == 0.0);

  REQUIRE_THROWS_AS(effective_kinetics_1d(model, 0.9, 0.1), error);
  REQUIRE_THROWS_AS(effective_kinetics_1d(model, -0.1, 0.94), error);
  REQUIRE_THROWS_AS(effective_kinetics_1d(model, 0.06, 1.1), error);
  EffectiveModel planar;
  planar.m = 2;
  REQUIRE_THROWS_AS(effective_kinetics_1d(planar, 0.06, 0.94), error);
  EffectiveModel hollow;
  hollow.m = 1;
  REQUIRE(thrown_code([&] { effective_kinetics_1d(hollow, 0.06, 0.94); }) == "tpt.dim");
}

TEST_CASE("rate sweeps flag unusable thresholds and keep input order") {
  Setup s = bench1d(63);
  EffectiveModel model = build_effective(s.chi, s.gen, s.grid, std::sqrt(2.0), 50);
  std::vector<double> r_values{-1.0, 0.2, 0.99};
  RegionSpec b_spec = RegionSpec::latent_interval(0.94, kinf);

  auto rows = rate_sweep(s.gen, s.grid, s.chi, model, r_values, b_spec, std::sqrt(2.0));
  REQUIRE(rows.size() == 3);
  for (std::size_t t = 0; t < rows.size(); ++t) REQUIRE(rows[t].r_a == r_values[t]);

  REQUIRE(rows[0].flagged);  // no cell maps below z = -1
  REQUIRE(std::isnan(rows[0].k_full));
  REQUIRE(std::isnan(rows[0].rel_dev));

  REQUIRE(!rows[1].flagged);
  REQUIRE(rows[1].k_full > 0.0);
  REQUIRE(rows[1].k_effective > 0.0);
  REQUIRE(rows[1].rel_dev ==
          Catch::Approx(std::abs(rows[1].k_effective - rows[1].k_full) / rows[1].k_full)
              .margin(1e-15));
  REQUIRE(rows[1].rel_dev < 0.2);

  REQUIRE(rows[2].flagged);  // A at 0.99 runs into B at 0.94
  REQUIRE(std::isnan(rows[2].k_effective));

  auto rows2 = rate_sweep(s.gen, s.grid, s.chi, model, r_values, b_spec, std::sqrt(2.0), 2);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    REQUIRE(rows2[t].flagged == rows[t].flagged);
    if (!rows[t].flagged) {
      REQUIRE(rows2[t].k_full == rows[t].k_full);
      REQUIRE(rows2[t].k_effective == rows[t].k_effective);
    }
  }

  REQUIRE_THROWS_AS(rate_sweep(s.gen, s.grid, s.chi, model, r_values,
                               RegionSpec::latent_ball(0.0, 1.0, 0.3), std::sqrt(2.0)),
                    error);
}

TEST_CASE("region specifications resolve against chi tables and models") {
  Setup s = bench1d(63);
  EffectiveModel model = build_effective(s.chi, s.gen, s.grid, std::sqrt(2.0), 50);

  auto mask = resolve_region_full(RegionSpec::full_cells({5, 7}), s.chi);
  REQUIRE(std::count(mask.begin(), mask.end(), 1) == 2);
  REQUIRE(mask[5] == 1);
  REQUIRE(mask[7] == 1);
  REQUIRE_THROWS_AS(resolve_region_full(RegionSpec::full_cells({63}), s.chi), error);
  REQUIRE_THROWS_AS(resolve_region_full(RegionSpec::full_cells({-1}), s.chi), error);

  auto band = resolve_region_full(RegionSpec::latent_interval(0.2, 0.8), s.chi);
  for (int i = 0; i < 63; ++i) {
    bool in = s.chi.values(i, 0) >= 0.2 && s.chi.values(i, 0) <= 0.8;
    REQUIRE((band[i] == 1) == in);
  }
  REQUIRE_THROWS_AS(resolve_region_full(RegionSpec::latent_interval(0.2, 0.8, 1), s.chi),
                    error);
  REQUIRE_THROWS_AS(resolve_region_full(RegionSpec::latent_ball(0.0, 1.0, 0.3), s.chi),
                    error);

  auto lat = resolve_region_latent(RegionSpec::latent_interval(-kinf, 0.06), model);
  for (int k = 0; k < model.n_model(); ++k) {
    bool in = model.latent.center(model.cells[k], 0) <= 0.06;
    REQUIRE((lat[k] == 1) == in);
  }
  REQUIRE(std::count(lat.begin(), lat.end(), 1) > 0);
  REQUIRE_THROWS_AS(resolve_region_latent(RegionSpec::full_cells({0}), model), error);
  REQUIRE_THROWS_AS(resolve_region_latent(RegionSpec::latent_ball(0.0, 1.0, 0.3), model),
                    error);

  RegionSpec pre = RegionSpec::preimage(RegionSpec::latent_interval(-kinf, 0.06));
  REQUIRE(pre.kind == RegionSpec::Kind::Preimage);
  auto pulled = resolve_region_full(pre, s.chi);
  for (int i = 0; i < 63; ++i) REQUIRE((pulled[i] == 1) == (s.chi.values(i, 0) <= 0.06));
  REQUIRE_THROWS_AS(RegionSpec::preimage(RegionSpec::full_cells({0})), error);
}

TEST_CASE("reactive quantities validate their inputs") {
  RegularGrid grid = build_grid(box1d(0, 1), std::array<int, 1>{4});
  std::vector<double> v(4, 0.0);
  SparseGenerator gen = sqra_generator(grid, v, 1.0, std::sqrt(2.0));
  std::vector<char> a{1, 0, 0, 0};
  std::vector<char> b{0, 0, 0, 1};
  Eigen::VectorXd q = committor(gen, a, b);
  REQUIRE_THROWS_AS(reactive_quantities(gen, grid, q, a, b, 0.0), error);
  Eigen::VectorXd q_short(3);
  q_short << 0.0, 0.5, 1.0;
  REQUIRE_THROWS_AS(reactive_quantities(gen, grid, q_short, a, b, std::sqrt(2.0)), error);
  std::vector<char> no_mass(4, 0);
  REQUIRE_THROWS_AS(reactive_quantities(gen, grid, q, no_mass, b, std::sqrt(2.0)), error);
  REQUIRE_THROWS_AS(cut_rate(gen, q, no_mass), error);
  REQUIRE_THROWS_AS(cut_rate(gen, q_short, a), error);
}
