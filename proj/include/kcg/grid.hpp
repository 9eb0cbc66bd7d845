// Axis-aligned box partitions of the state space (d <= 3): cell centers,
// row-major indexing and face adjacency.
#pragma once
#include <array>
#include <cstddef>
#include <span>
#include <string>

#include "kcg/error.hpp"

namespace kcg {

struct Box {
  int dim = 0;
  std::array<double, 3> lo{};
  std::array<double, 3> hi{};
};

inline Box box1d(double lo, double hi) { return Box{1, {lo, 0, 0}, {hi, 0, 0}}; }
inline Box box2d(double lo0, double hi0, double lo1, double hi1) {
  return Box{2, {lo0, lo1, 0}, {hi0, hi1, 0}};
}
inline Box box3d(double lo0, double hi0, double lo1, double hi1, double lo2, double hi2) {
  return Box{3, {lo0, lo1, lo2}, {hi0, hi1, hi2}};
}

struct RegularGrid {
  int dim = 0;
  std::array<int, 3> bins{1, 1, 1};
  std::array<double, 3> lo{};
  std::array<double, 3> hi{};
  std::array<double, 3> h{};
  int n_cells = 0;

  int index(const std::array<int, 3>& c) const {
    int id = c[0];
    for (int a = 1; a < dim; ++a) id = id * bins[a] + c[a];
    return id;
  }

  std::array<int, 3> coords(int cell) const {
    std::array<int, 3> c{0, 0, 0};
    for (int a = dim - 1; a >= 0; --a) {
      c[a] = cell % bins[a];
      cell /= bins[a];
    }
    return c;
  }

  std::array<double, 3> center(int cell) const {
    auto c = coords(cell);
    std::array<double, 3> x{};
    for (int a = 0; a < dim; ++a) x[a] = lo[a] + (c[a] + 0.5) * h[a];
    return x;
  }

  // cell containing x, clamped onto the grid
  int cell_of(std::span<const double> x) const {
    std::array<int, 3> c{0, 0, 0};
    for (int a = 0; a < dim; ++a) {
      int i = static_cast<int>((x[a] - lo[a]) / h[a]);
      c[a] = i < 0 ? 0 : (i >= bins[a] ? bins[a] - 1 : i);
    }
    return index(c);
  }

  double cell_volume() const {
    double v = 1.0;
    for (int a = 0; a < dim; ++a) v *= h[a];
    return v;
  }

  // visit face neighbors: f(neighbor_cell, axis, direction)
  template <class F>
  void for_each_neighbor(int cell, F&& f) const {
    auto c = coords(cell);
    for (int a = 0; a < dim; ++a) {
      if (c[a] > 0) {
        auto cn = c;
        cn[a] -= 1;
        f(index(cn), a, -1);
      }
      if (c[a] + 1 < bins[a]) {
        auto cn = c;
        cn[a] += 1;
        f(index(cn), a, +1);
      }
    }
  }
};

inline RegularGrid build_grid(const Box& box, std::span<const int> bins_per_axis) {
  require(box.dim >= 1 && box.dim <= 3, "grid.dim", "box dimension must be 1, 2 or 3");
  require(static_cast<int>(bins_per_axis.size()) == box.dim, "grid.bins",
          "need one bin count per axis");
  RegularGrid g;
  g.dim = box.dim;
  g.n_cells = 1;
  for (int a = 0; a < box.dim; ++a) {
    require(box.lo[a] < box.hi[a], "grid.box",
            "degenerate box on axis " + std::to_string(a));
    require(bins_per_axis[a] >= 2, "grid.bins",
            "need at least 2 bins on axis " + std::to_string(a));
    g.bins[a] = bins_per_axis[a];
    g.lo[a] = box.lo[a];
    g.hi[a] = box.hi[a];
    g.h[a] = (box.hi[a] - box.lo[a]) / bins_per_axis[a];
    g.n_cells *= bins_per_axis[a];
  }
  return g;
}

}  // namespace kcg
