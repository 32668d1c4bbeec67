#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "rcadapt/metrics.hpp"

namespace rcadapt {

// cells[i][j] scores a model trained on dataset i and evaluated on dataset j;
// diagonal[i] is dataset i's self-trained result.
struct TransferMatrix {
  std::vector<std::string> datasets;
  std::vector<std::vector<std::optional<EvalResult>>> cells;
  std::vector<std::optional<EvalResult>> diagonal;

  std::size_t size() const { return datasets.size(); }
};

// {"datasets": [...], "cells": [[{"em","f1"} | null]], "diagonal": [{"em","f1"} | null]}
nlohmann::json to_json(const TransferMatrix& matrix);
TransferMatrix transfer_matrix_from_json(const nlohmann::json& j);

// F_ij = P_ij / P_j + P_ji / P_i, each P the mean of EM and F1.
double compute_force(double p_ij, double p_ji, double p_i, double p_j);

struct DatasetMeta {
  std::string name;
  int size = 1;  // example count
  std::string corpus;
  std::string qform;  // question form
};

struct GraphNode {
  std::string id;
  double x = 0.0;
  double y = 0.0;
  double size = 1.0;
  std::string corpus;
  std::string qform;
};

struct GraphEdge {
  std::string a;
  std::string b;
  double force = 0.0;
};

struct ForceGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
};

inline constexpr int kLayoutIterations = 200;

// One undirected edge per dataset pair plus a seeded Fruchterman-Reingold
// layout. Node size is the example count relative to the largest dataset.
// Metadata is matched by name; unmatched datasets get size 1 and empty tags.
ForceGraph emit_graph(const TransferMatrix& matrix, const std::vector<DatasetMeta>& metadata,
                      std::uint64_t seed, int iterations = kLayoutIterations);

// {"nodes": [{"id","x","y","size","corpus","qform"}], "edges": [{"a","b","force"}]}
nlohmann::json to_json(const ForceGraph& graph);

}  // namespace rcadapt
