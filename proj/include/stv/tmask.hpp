#pragma once

// T-shaped pixel-weight mask: a horizontal eye band united with a vertical
// nose/mouth column, weighted tmask_alpha inside and tmask_beta outside.

#include <cmath>

#include "stv/tensor.hpp"

namespace stv::data {

struct TMaskGeometry {
  // fractions of height/width, half-open [lo, hi)
  double eye_r0 = 0.25, eye_r1 = 0.45;
  double eye_c0 = 0.10, eye_c1 = 0.90;
  double nose_r0 = 0.25, nose_r1 = 0.85;
  double nose_c0 = 0.40, nose_c1 = 0.60;
};

struct TMask {
  struct Rect {
    std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // half-open

    std::size_t area() const { return (r1 - r0) * (c1 - c0); }
    bool contains(std::size_t r, std::size_t c) const {
      return r >= r0 && r < r1 && c >= c0 && c < c1;
    }
  };

  std::size_t rows = 0, cols = 0;
  Tensor grid;  // [rows, cols], entries in {alpha, beta}
  Rect eye_band, nose_column;
  double alpha = 1.0, beta = 0.0;

  bool in_t(std::size_t r, std::size_t c) const {
    return eye_band.contains(r, c) || nose_column.contains(r, c);
  }

  std::size_t t_cell_count() const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) n += in_t(r, c) ? 1 : 0;
    return n;
  }
};

inline TMask make_tmask(std::size_t rows, std::size_t cols, const TMaskGeometry& geo,
                        double tmask_alpha, double tmask_beta) {
  auto frac_index = [](double f, std::size_t n, const char* what) {
    if (!(f > 0.0) || !(f < 1.0))
      throw DomainError(std::string("make_tmask: fraction ") + what + " = " +
                        std::to_string(f) + " outside (0,1)");
    return static_cast<std::size_t>(std::lround(f * static_cast<double>(n)));
  };
  TMask m;
  m.rows = rows;
  m.cols = cols;
  m.alpha = tmask_alpha;
  m.beta = tmask_beta;
  m.eye_band = {frac_index(geo.eye_r0, rows, "eye_r0"), frac_index(geo.eye_r1, rows, "eye_r1"),
                frac_index(geo.eye_c0, cols, "eye_c0"), frac_index(geo.eye_c1, cols, "eye_c1")};
  m.nose_column = {frac_index(geo.nose_r0, rows, "nose_r0"),
                   frac_index(geo.nose_r1, rows, "nose_r1"),
                   frac_index(geo.nose_c0, cols, "nose_c0"),
                   frac_index(geo.nose_c1, cols, "nose_c1")};
  if (m.eye_band.area() == 0 && m.nose_column.area() == 0)
    throw DomainError("make_tmask: empty T region for " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  m.grid = Tensor({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      m.grid.data[r * cols + c] = m.in_t(r, c) ? tmask_alpha : tmask_beta;
  return m;
}

}  // namespace stv::data
