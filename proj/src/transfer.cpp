#include "rcadapt/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "rcadapt/errors.hpp"

namespace rcadapt {

using nlohmann::json;

namespace {

json cell_json(const std::optional<EvalResult>& r) {
  if (!r) return nullptr;
  return {{"em", r->exact_match}, {"f1", r->f1}};
}

std::optional<EvalResult> cell_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_object() || !j.contains("em") || !j.contains("f1")) {
    throw ParseError("matrix cell must be null or an object with em and f1");
  }
  EvalResult r;
  r.exact_match = j.at("em").get<double>();
  r.f1 = j.at("f1").get<double>();
  return r;
}

}  // namespace

json to_json(const TransferMatrix& m) {
  json cells = json::array();
  for (const auto& row : m.cells) {
    json r = json::array();
    for (const auto& c : row) r.push_back(cell_json(c));
    cells.push_back(std::move(r));
  }
  json diagonal = json::array();
  for (const auto& c : m.diagonal) diagonal.push_back(cell_json(c));
  return {{"datasets", m.datasets}, {"cells", std::move(cells)}, {"diagonal", std::move(diagonal)}};
}

TransferMatrix transfer_matrix_from_json(const json& j) {
  TransferMatrix m;
  try {
    m.datasets = j.at("datasets").get<std::vector<std::string>>();
    const auto n = m.datasets.size();
    const auto& cells = j.at("cells");
    if (!cells.is_array() || cells.size() != n) throw ParseError("matrix cells must be a square array");
    for (const auto& row : cells) {
      if (!row.is_array() || row.size() != n) throw ParseError("matrix cells must be a square array");
      std::vector<std::optional<EvalResult>> r;
      for (const auto& c : row) r.push_back(cell_from_json(c));
      m.cells.push_back(std::move(r));
    }
    if (j.contains("diagonal")) {
      const auto& diagonal = j.at("diagonal");
      if (!diagonal.is_array() || diagonal.size() != n) throw ParseError("matrix diagonal must have one entry per dataset");
      for (const auto& c : diagonal) m.diagonal.push_back(cell_from_json(c));
    } else {
      m.diagonal.assign(n, std::nullopt);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed matrix file: ") + e.what());
  }
  return m;
}

double compute_force(double p_ij, double p_ji, double p_i, double p_j) {
  if (!(p_i > 0.0) || !(p_j > 0.0)) throw std::invalid_argument("self performance must be positive");
  return p_ij / p_j + p_ji / p_i;
}

ForceGraph emit_graph(const TransferMatrix& matrix, const std::vector<DatasetMeta>& metadata, std::uint64_t seed,
                      int iterations) {
  const auto n = matrix.size();
  if (matrix.diagonal.size() != n) throw std::invalid_argument("matrix diagonal is missing");
  for (std::size_t i = 0; i < n; ++i) {
    if (!matrix.diagonal[i]) throw std::invalid_argument("matrix diagonal is missing for " + matrix.datasets[i]);
  }
  ForceGraph g;
  std::map<std::string, const DatasetMeta*> meta;
  for (const auto& d : metadata) meta.emplace(d.name, &d);
  int largest = 1;
  for (const auto& d : metadata) largest = std::max(largest, d.size);
  for (const auto& name : matrix.datasets) {
    GraphNode node;
    node.id = name;
    auto it = meta.find(name);
    if (it != meta.end()) {
      node.size = static_cast<double>(it->second->size) / largest;
      node.corpus = it->second->corpus;
      node.qform = it->second->qform;
    }
    g.nodes.push_back(std::move(node));
  }
  std::vector<std::vector<double>> force(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& ij = matrix.cells[i][j];
      const auto& ji = matrix.cells[j][i];
      if (!ij || !ji) throw std::invalid_argument("matrix cell missing between " + matrix.datasets[i] + " and " +
                                                  matrix.datasets[j]);
      const double f = compute_force(ij->average(), ji->average(), matrix.diagonal[i]->average(),
                                     matrix.diagonal[j]->average());
      force[i][j] = force[j][i] = f;
      g.edges.push_back({matrix.datasets[i], matrix.datasets[j], f});
    }
  }

  // Fruchterman-Reingold on the unit square with linear cooling. Stronger
  // forces pull their endpoints closer.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = uniform(rng);
    y[i] = uniform(rng);
  }
  const double k = n > 0 ? std::sqrt(1.0 / static_cast<double>(n)) : 1.0;
  for (int it = 0; it < iterations; ++it) {
    const double temperature = 0.1 * (1.0 - static_cast<double>(it) / iterations);
    std::vector<double> dx(n, 0.0), dy(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        double ddx = x[i] - x[j];
        double ddy = y[i] - y[j];
        const double dist = std::max(std::hypot(ddx, ddy), 1e-9);
        const double repulse = k * k / dist;
        const double attract = force[i][j] * dist * dist / k;
        const double push = (repulse - attract) / dist;
        dx[i] += ddx * push;
        dy[i] += ddy * push;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double len = std::max(std::hypot(dx[i], dy[i]), 1e-9);
      const double step = std::min(len, temperature);
      x[i] = std::clamp(x[i] + dx[i] / len * step, 0.0, 1.0);
      y[i] = std::clamp(y[i] + dy[i] / len * step, 0.0, 1.0);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    g.nodes[i].x = x[i];
    g.nodes[i].y = y[i];
  }
  return g;
}

json to_json(const ForceGraph& g) {
  json nodes = json::array();
  for (const auto& n : g.nodes) {
    nodes.push_back({{"id", n.id}, {"x", n.x}, {"y", n.y}, {"size", n.size}, {"corpus", n.corpus}, {"qform", n.qform}});
  }
  json edges = json::array();
  for (const auto& e : g.edges) edges.push_back({{"a", e.a}, {"b", e.b}, {"force", e.force}});
  return {{"nodes", std::move(nodes)}, {"edges", std::move(edges)}};
}

}  // namespace rcadapt
