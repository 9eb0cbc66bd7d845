// File formats: CSV tables with round-trip double formatting, FNV-1a content
// hashes, the KCG1 burst container with its JSON sidecar, MLP checkpoints,
// and persistence for spectra, chi tables, effective models, TPT results and
// rate sweeps.
#pragma once
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "kcg/effective.hpp"
#include "kcg/error.hpp"
#include "kcg/grid.hpp"
#include "kcg/membership.hpp"
#include "kcg/mlp.hpp"
#include "kcg/sde.hpp"
#include "kcg/tpt.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary containers are little-endian");

namespace kcg {

inline constexpr const char* version_string = "1.0.0";

namespace io {

using nlohmann::json;

// shortest representation that round-trips exactly
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc(), "io.parse", "not a number: '" + std::string(s) + "'");
  return v;
}

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = digits[h & 0xf];
    h >>= 4;
  }
  return std::string(buf, 16);
}

inline void write_text(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "io.write", "cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  require(out.good(), "io.write", "write to " + path + " failed");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "io.read", "cannot open " + path);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), "io.read", "read from " + path + " failed");
  return content;
}

inline std::string hash_file(const std::string& path) { return fnv1a_hex(read_text(path)); }

// CSV with a single header line; all cells are doubles
inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const Eigen::MatrixXd& rows) {
  require(header.size() == static_cast<std::size_t>(rows.cols()) || rows.rows() == 0,
          "io.csv", "header does not match the column count");
  std::string out;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c) out += ',';
    out += header[c];
  }
  out += '\n';
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      if (c) out += ',';
      out += format_double(rows(r, c));
    }
    out += '\n';
  }
  write_text(path, out);
}

inline Eigen::MatrixXd read_csv(const std::string& path,
                                std::vector<std::string>* header_out = nullptr) {
  std::string text = read_text(path);
  std::vector<std::vector<double>> rows;
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::size_t cpos = 0;
    while (true) {
      std::size_t comma = line.find(',', cpos);
      if (comma == std::string_view::npos) {
        cells.push_back(line.substr(cpos));
        break;
      }
      cells.push_back(line.substr(cpos, comma - cpos));
      cpos = comma + 1;
    }
    if (first) {
      first = false;
      if (header_out) {
        header_out->clear();
        for (auto c : cells) header_out->emplace_back(c);
      }
      continue;
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (auto c : cells) row.push_back(parse_double(c));
    if (!rows.empty())
      require(row.size() == rows.front().size(), "io.csv", "ragged rows in " + path);
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd m(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  return m;
}

namespace detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <class T>
inline T take(const std::string& in, std::size_t& pos) {
  T v;
  require(pos + sizeof(T) <= in.size(), "io.read", "truncated binary container");
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline void put_matrix_rowmajor(std::string& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v = m(r, c);
      put_bytes(out, &v, sizeof(v));
    }
}

}  // namespace detail

// KCG1 container: magic, d, N, M, then starts and ends row-major; the plan
// and any box violations live in a JSON sidecar next to it
inline void save_bursts(const std::string& path, const BurstData& data, const BurstPlan& plan) {
  std::string out;
  out += "KCG1";
  std::uint32_t d = static_cast<std::uint32_t>(data.dim);
  std::uint32_t n = static_cast<std::uint32_t>(data.starts.rows());
  std::uint32_t m = static_cast<std::uint32_t>(plan.n_replicas);
  detail::put_bytes(out, &d, 4);
  detail::put_bytes(out, &n, 4);
  detail::put_bytes(out, &m, 4);
  detail::put_matrix_rowmajor(out, data.starts);
  detail::put_matrix_rowmajor(out, data.ends);
  write_text(path, out);

  json side;
  side["plan"] = {{"n_start", plan.n_start},
                  {"n_replicas", plan.n_replicas},
                  {"lag", plan.lag},
                  {"dt", plan.dt},
                  {"seed", plan.seed}};
  side["box_violations"] = json::array();
  for (auto [i, k] : data.box_violations) side["box_violations"].push_back({i, k});
  write_text(path + ".json", side.dump(2) + "\n");
}

inline std::pair<BurstData, BurstPlan> load_bursts(const std::string& path) {
  std::string in = read_text(path);
  require(in.size() >= 16 && in.compare(0, 4, "KCG1") == 0, "io.read",
          path + " is not a KCG1 container");
  std::size_t pos = 4;
  int d = static_cast<int>(detail::take<std::uint32_t>(in, pos));
  int n = static_cast<int>(detail::take<std::uint32_t>(in, pos));
  int m = static_cast<int>(detail::take<std::uint32_t>(in, pos));
  BurstData data;
  data.dim = d;
  data.starts.resize(n, d);
  data.ends.resize(static_cast<Eigen::Index>(n) * m, d);
  for (Eigen::Index r = 0; r < data.starts.rows(); ++r)
    for (int c = 0; c < d; ++c) data.starts(r, c) = detail::take<double>(in, pos);
  for (Eigen::Index r = 0; r < data.ends.rows(); ++r)
    for (int c = 0; c < d; ++c) data.ends(r, c) = detail::take<double>(in, pos);

  json side = json::parse(read_text(path + ".json"));
  BurstPlan plan;
  plan.n_start = side["plan"]["n_start"].get<int>();
  plan.n_replicas = side["plan"]["n_replicas"].get<int>();
  plan.lag = side["plan"]["lag"].get<double>();
  plan.dt = side["plan"]["dt"].get<double>();
  plan.seed = side["plan"]["seed"].get<std::uint64_t>();
  for (const auto& v : side["box_violations"])
    data.box_violations.emplace_back(v[0].get<int>(), v[1].get<int>());
  require(plan.n_start == n && plan.n_replicas == m, "io.read",
          "sidecar plan disagrees with " + path);
  return {std::move(data), plan};
}

inline void export_bursts_csv(const std::string& path, const BurstData& data) {
  int d = data.dim;
  int m = static_cast<int>(data.ends.rows() / std::max<Eigen::Index>(1, data.starts.rows()));
  std::vector<std::string> header = {"start", "replica"};
  for (int a = 0; a < d; ++a) header.push_back("x" + std::to_string(a));
  for (int a = 0; a < d; ++a) header.push_back("y" + std::to_string(a));
  Eigen::MatrixXd rows(data.ends.rows(), 2 + 2 * d);
  for (Eigen::Index r = 0; r < data.ends.rows(); ++r) {
    Eigen::Index i = r / m, k = r % m;
    rows(r, 0) = static_cast<double>(i);
    rows(r, 1) = static_cast<double>(k);
    for (int a = 0; a < d; ++a) rows(r, 2 + a) = data.starts(i, a);
    for (int a = 0; a < d; ++a) rows(r, 2 + d + a) = data.ends(r, a);
  }
  write_csv(path, header, rows);
}

// chi table: cell index, grid coordinates when available, one column per component
inline void write_chi_csv(const std::string& path, const ChiTable& chi,
                          const RegularGrid* grid = nullptr) {
  int n = static_cast<int>(chi.values.rows());
  int cols = static_cast<int>(chi.values.cols());
  int d = grid ? grid->dim : 0;
  std::vector<std::string> header = {"cell"};
  for (int a = 0; a < d; ++a) header.push_back("x" + std::to_string(a));
  for (int c = 0; c < cols; ++c) header.push_back("chi" + std::to_string(c));
  Eigen::MatrixXd rows(n, 1 + d + cols);
  for (int i = 0; i < n; ++i) {
    rows(i, 0) = static_cast<double>(i);
    if (grid) {
      auto x = grid->center(i);
      for (int a = 0; a < d; ++a) rows(i, 1 + a) = x[a];
    }
    for (int c = 0; c < cols; ++c) rows(i, 1 + d + c) = chi.values(i, c);
  }
  write_csv(path, header, rows);
}

inline ChiTable read_chi_csv(const std::string& path) {
  std::vector<std::string> header;
  Eigen::MatrixXd rows = read_csv(path, &header);
  int first = -1;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (header[c].rfind("chi", 0) == 0) {
      first = static_cast<int>(c);
      break;
    }
  require(first >= 0, "io.csv", path + " has no chi columns");
  ChiTable chi;
  chi.values = rows.rightCols(rows.cols() - first);
  chi.m = static_cast<int>(chi.values.cols()) - 1;
  return chi;
}

inline void write_spectra_csv(const std::string& path, const Eigen::VectorXd& eigenvalues,
                              double tau) {
  Eigen::MatrixXd rows(eigenvalues.size(), 3);
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
    rows(i, 0) = static_cast<double>(i);
    rows(i, 1) = eigenvalues[i];
    rows(i, 2) = std::exp(tau * eigenvalues[i]);
  }
  write_csv(path, {"index", "lambda", "Lambda_tau"}, rows);
}

inline Eigen::VectorXd read_spectra_csv(const std::string& path) {
  Eigen::MatrixXd rows = read_csv(path);
  require(rows.cols() >= 2, "io.csv", path + " is not a spectra table");
  return rows.col(1);
}

// checkpoint: magic, JSON header (sizes, activation, seed), then the weight
// blob, each layer's matrix column-major followed by its bias
inline void save_mlp(const std::string& path, const Mlp& net, std::uint64_t seed) {
  json head;
  head["sizes"] = net.sizes;
  head["activation"] = net.activation == Activation::Sigmoid ? "Sigmoid" : "ReLU";
  head["seed"] = seed;
  std::string hj = head.dump();
  std::string out = "KCGM";
  std::uint64_t len = hj.size();
  detail::put_bytes(out, &len, 8);
  out += hj;
  for (int l = 0; l < net.layers(); ++l) {
    detail::put_bytes(out, net.weights[l].data(),
                      sizeof(double) * static_cast<std::size_t>(net.weights[l].size()));
    detail::put_bytes(out, net.biases[l].data(),
                      sizeof(double) * static_cast<std::size_t>(net.biases[l].size()));
  }
  write_text(path, out);
}

inline Mlp load_mlp(const std::string& path, std::uint64_t* seed_out = nullptr) {
  std::string in = read_text(path);
  require(in.size() >= 12 && in.compare(0, 4, "KCGM") == 0, "io.read",
          path + " is not a model checkpoint");
  std::size_t pos = 4;
  std::uint64_t len = detail::take<std::uint64_t>(in, pos);
  require(pos + len <= in.size(), "io.read", "truncated checkpoint header");
  json head = json::parse(in.substr(pos, len));
  pos += len;
  std::vector<int> sizes = head["sizes"].get<std::vector<int>>();
  Activation act =
      head["activation"].get<std::string>() == "ReLU" ? Activation::ReLU : Activation::Sigmoid;
  if (seed_out) *seed_out = head["seed"].get<std::uint64_t>();
  Mlp net = Mlp::init(sizes, act, 0);
  for (int l = 0; l < net.layers(); ++l) {
    for (Eigen::Index k = 0; k < net.weights[l].size(); ++k)
      net.weights[l].data()[k] = detail::take<double>(in, pos);
    for (Eigen::Index k = 0; k < net.biases[l].size(); ++k)
      net.biases[l].data()[k] = detail::take<double>(in, pos);
  }
  return net;
}

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& rows) {
  Eigen::MatrixXd m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c].get<double>();
  return m;
}

// Effective model: scalars and reduced matrices in JSON, per-cell data in
// latent_cells.csv and, for m = 1, the fine curves in effective_curves.csv.
inline void save_effective_model(const std::string& dir, const EffectiveModel& model) {
  namespace fs = std::filesystem;
  json j;
  j["m"] = model.m;
  j["bins"] = model.latent.bins;
  j["h"] = model.latent.h;
  j["z_chi"] = model.z_chi;
  j["b"] = std::vector<double>(model.b.data(), model.b.data() + model.b.size());
  j["q"] = matrix_to_json(model.q);
  write_text((fs::path(dir) / "effective_model.json").string(), j.dump(2) + "\n");

  int m = model.m;
  int nk = model.n_model();
  std::vector<std::string> header = {"cell"};
  for (int a = 0; a < m; ++a) header.push_back("z" + std::to_string(a));
  header.push_back("weight");
  header.push_back("mu_tilde");
  header.push_back("v_chi");
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b)
      header.push_back("D" + std::to_string(a) + std::to_string(b));
  Eigen::MatrixXd rows(nk, header.size());
  Eigen::VectorXd weights = model.gen.mu;  // normalized bin weights of the latent chain
  for (int k = 0; k < nk; ++k) {
    int c = 0;
    rows(k, c++) = static_cast<double>(model.cells[k]);
    for (int a = 0; a < m; ++a) rows(k, c++) = model.latent.center(model.cells[k], a);
    rows(k, c++) = weights[k];
    rows(k, c++) = model.mu_tilde[k];
    rows(k, c++) = model.v_chi[k];
    for (int e = 0; e < m * m; ++e) rows(k, c++) = model.diffusion(k, e);
  }
  write_csv((fs::path(dir) / "latent_cells.csv").string(), header, rows);

  if (m == 1) {
    Eigen::MatrixXd fine(model.zf.size(), 5);
    fine.col(0) = model.zf;
    fine.col(1) = model.df;
    fine.col(2) = model.vf;
    fine.col(3) = model.emv;
    fine.col(4) = model.cem;
    write_csv((fs::path(dir) / "effective_curves.csv").string(),
              {"z", "D", "V_chi", "boltzmann", "boltzmann_integral"}, fine);
  }
}

// Rebuild a model from its artifacts; latent membership data is not persisted,
// so only the geometry, per-cell tables and fine curves come back.
inline EffectiveModel load_effective_model(const std::string& dir) {
  namespace fs = std::filesystem;
  json j = json::parse(read_text((fs::path(dir) / "effective_model.json").string()));
  EffectiveModel model;
  model.m = j["m"].get<int>();
  model.latent.m = model.m;
  model.latent.bins = j["bins"].get<int>();
  model.latent.h = j["h"].get<double>();
  model.latent.n_full =
      model.m == 1 ? model.latent.bins : model.latent.bins * model.latent.bins;
  model.z_chi = j["z_chi"].get<double>();
  std::vector<double> b = j["b"].get<std::vector<double>>();
  model.b = Eigen::Map<Eigen::VectorXd>(b.data(), b.size());
  model.q = matrix_from_json(j["q"]);

  Eigen::MatrixXd rows = read_csv((fs::path(dir) / "latent_cells.csv").string());
  int m = model.m;
  int nk = static_cast<int>(rows.rows());
  require(rows.cols() == 1 + m + 3 + m * m, "io.csv", "latent_cells.csv has wrong shape");
  model.cells.resize(nk);
  Eigen::VectorXd weights(nk);
  model.mu_tilde.resize(nk);
  model.v_chi.resize(nk);
  model.diffusion.resize(nk, m * m);
  for (int k = 0; k < nk; ++k) {
    model.cells[k] = static_cast<int>(rows(k, 0));
    weights[k] = rows(k, 1 + m);
    model.mu_tilde[k] = rows(k, 2 + m);
    model.v_chi[k] = rows(k, 3 + m);
    for (int e = 0; e < m * m; ++e) model.diffusion(k, e) = rows(k, 4 + m + e);
  }
  model.latent.kept = model.cells;
  model.latent.pos.assign(model.latent.n_full, -1);
  for (int k = 0; k < nk; ++k) model.latent.pos[model.cells[k]] = k;
  model.gen = effective_generator(m, model.latent.bins, model.cells, weights, model.diffusion);

  if (m == 1) {
    Eigen::MatrixXd fine = read_csv((fs::path(dir) / "effective_curves.csv").string());
    require(fine.cols() == 5, "io.csv", "effective_curves.csv has wrong shape");
    model.zf = fine.col(0);
    model.df = fine.col(1);
    model.vf = fine.col(2);
    model.emv = fine.col(3);
    model.cem = fine.col(4);
  }
  return model;
}

// TPT table: one row per cell with coordinates, committor, mfpt, reactive
// density and flux components
inline void write_tpt_csv(const std::string& path, const TptResult& result,
                          const Eigen::MatrixXd& coords,
                          const std::vector<std::string>& coord_names) {
  int n = static_cast<int>(result.committor.size());
  int d = static_cast<int>(result.flux.cols());
  require(coords.rows() == n && coords.cols() == static_cast<Eigen::Index>(coord_names.size()),
          "io.csv", "coordinate table does not match the result");
  std::vector<std::string> header = {"cell"};
  for (const auto& name : coord_names) header.push_back(name);
  header.insert(header.end(), {"committor", "mfpt", "reactive_density"});
  for (int a = 0; a < d; ++a) header.push_back("flux" + std::to_string(a));
  Eigen::MatrixXd rows(n, header.size());
  bool has_mfpt = result.mfpt.size() == n;
  for (int i = 0; i < n; ++i) {
    int c = 0;
    rows(i, c++) = static_cast<double>(i);
    for (Eigen::Index a = 0; a < coords.cols(); ++a) rows(i, c++) = coords(i, a);
    rows(i, c++) = result.committor[i];
    rows(i, c++) = has_mfpt ? result.mfpt[i] : std::numeric_limits<double>::quiet_NaN();
    rows(i, c++) = result.reactive_density[i];
    for (int a = 0; a < d; ++a) rows(i, c++) = result.flux(i, a);
  }
  write_csv(path, header, rows);
}

inline void write_sweep_csv(const std::string& path, const std::vector<RateSweepRow>& rows) {
  Eigen::MatrixXd m(rows.size(), 5);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    m(r, 0) = rows[r].r_a;
    m(r, 1) = rows[r].k_full;
    m(r, 2) = rows[r].k_effective;
    m(r, 3) = rows[r].rel_dev;
    m(r, 4) = rows[r].flagged ? 1.0 : 0.0;
  }
  write_csv(path, {"r_a", "k_full", "k_effective", "rel_dev", "flagged"}, m);
}

inline std::vector<RateSweepRow> read_sweep_csv(const std::string& path) {
  Eigen::MatrixXd m = read_csv(path);
  require(m.cols() == 5, "io.csv", path + " is not a rate-sweep table");
  std::vector<RateSweepRow> rows(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows[r].r_a = m(r, 0);
    rows[r].k_full = m(r, 1);
    rows[r].k_effective = m(r, 2);
    rows[r].rel_dev = m(r, 3);
    rows[r].flagged = m(r, 4) != 0.0;
  }
  return rows;
}

}  // namespace io
}  // namespace kcg
