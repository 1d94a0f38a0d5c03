#pragma once

// Independent reference implementations used to check the library. None of
// these call into vpe algorithms; keep it that way.

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

using Edge = std::pair<int, int>;

/// Recursive three-colour DFS; true when the directed graph has a cycle.
inline bool has_cycle_dfs(const std::vector<int>& nodes, const std::vector<Edge>& edges) {
  std::map<int, std::vector<int>> adj;
  for (auto [u, v] : edges) adj[u].push_back(v);
  std::map<int, int> colour;  // 0 white, 1 grey, 2 black
  for (int n : nodes) colour[n] = 0;
  auto visit = [&](auto&& self, int u) -> bool {
    colour[u] = 1;
    for (int v : adj[u]) {
      if (colour[v] == 1) return true;
      if (colour[v] == 0 && self(self, v)) return true;
    }
    colour[u] = 2;
    return false;
  };
  for (int n : nodes) {
    if (colour[n] == 0 && visit(visit, n)) return true;
  }
  return false;
}

inline std::set<int> scan_predecessors(const std::vector<Edge>& edges, int node) {
  std::set<int> out;
  for (auto [u, v] : edges) if (v == node) out.insert(u);
  return out;
}

inline std::set<int> scan_successors(const std::vector<Edge>& edges, int node) {
  std::set<int> out;
  for (auto [u, v] : edges) if (u == node) out.insert(v);
  return out;
}

/// splitmix64 finaliser, written out from the published constants.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace oracle
