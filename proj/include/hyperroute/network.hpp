#pragma once

#include "hyperroute/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace hyperroute {

// ---------------------------------------------------------------------------
// Road network with affine latencies t_e(x) = a_e + b_e (h_e + x).
// Nodes are 0-based. Facility sets may overlap.
// ---------------------------------------------------------------------------

struct Edge {
  int tail = -1;
  int head = -1;
};

struct RoadNetwork {
  int num_nodes = 0;
  std::vector<Edge> edges;
  Vec a;  // free-flow time per edge [hours], > 0
  Vec b;  // congestion slope per edge [hours/vehicle], >= 0
  Vec h;  // exogenous background flow per edge [vehicles], >= 0
  std::vector<int> charge_nodes;  // sorted, unique
  std::vector<int> park_nodes;    // sorted, unique
  std::vector<std::uint8_t> edge_is_virtual;

  int num_edges() const { return static_cast<int>(edges.size()); }

  bool is_charge_node(int v) const {
    return std::binary_search(charge_nodes.begin(), charge_nodes.end(), v);
  }
  bool is_park_node(int v) const {
    return std::binary_search(park_nodes.begin(), park_nodes.end(), v);
  }

  std::vector<std::vector<int>> out_edges() const {
    std::vector<std::vector<int>> out(num_nodes);
    for (int e = 0; e < num_edges(); ++e) out[edges[e].tail].push_back(e);
    return out;
  }
  std::vector<std::vector<int>> in_edges() const {
    std::vector<std::vector<int>> in(num_nodes);
    for (int e = 0; e < num_edges(); ++e) in[edges[e].head].push_back(e);
    return in;
  }
};

// One pre-linearization link row: t(x) = fft * (1 + k (x / cap)^p).
struct RawTntpEdge {
  int tail = -1;  // 0-based
  int head = -1;
  double free_flow_time = 0;   // hours
  double capacity = 0;         // vehicles
  double bpr_coefficient = 0;  // k
  double bpr_power = 1;        // p
  double recorded_flow = 0;    // vehicles, from an optional flow file
};

struct TntpData {
  int num_nodes = 0;
  int first_thru_node = 1;
  std::vector<RawTntpEdge> edges;
};

// ---------------------------------------------------------------------------
// TNTP ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline std::string strip(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& tok, int line_no) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(tok, &pos);
  } catch (const std::exception&) {
    throw ParseError("TNTP: non-numeric field '" + tok + "' at line " +
                     std::to_string(line_no));
  }
  if (pos != tok.size())
    throw ParseError("TNTP: non-numeric field '" + tok + "' at line " +
                     std::to_string(line_no));
  return v;
}

inline std::optional<long> metadata_value(const std::string& line,
                                          const std::string& tag) {
  auto pos = line.find(tag);
  if (pos == std::string::npos) return std::nullopt;
  auto rest = strip(line.substr(pos + tag.size()));
  try {
    return std::stol(rest);
  } catch (const std::exception&) {
    throw ParseError("TNTP: unreadable value for metadata tag " + tag);
  }
}

}  // namespace detail

// Parses a TNTP network file (and optionally the matching flow file) into raw
// link rows. 1-based node ids from the file are converted to 0-based indices;
// row order is preserved. Comment lines start with '~'.
inline TntpData load_tntp(const std::string& net_text,
                          const std::string* flow_text = nullptr) {
  TntpData data;
  long declared_nodes = -1, declared_links = -1, first_thru = -1;

  std::istringstream in(net_text);
  std::string line;
  int line_no = 0;
  bool in_metadata = true;
  while (in_metadata && std::getline(in, line)) {
    ++line_no;
    auto s = detail::strip(line);
    if (s.empty() || s[0] == '~') continue;
    if (auto v = detail::metadata_value(s, "<NUMBER OF NODES>")) {
      declared_nodes = *v;
    } else if (auto v2 = detail::metadata_value(s, "<NUMBER OF LINKS>")) {
      declared_links = *v2;
    } else if (auto v3 = detail::metadata_value(s, "<FIRST THRU NODE>")) {
      first_thru = *v3;
    } else if (s.find("<END OF METADATA>") != std::string::npos) {
      in_metadata = false;
    }
    // unknown metadata tags (e.g. <NUMBER OF ZONES>) are ignored
  }
  if (declared_nodes < 0)
    throw ParseError("TNTP: metadata tag <NUMBER OF NODES> missing");
  if (declared_links < 0)
    throw ParseError("TNTP: metadata tag <NUMBER OF LINKS> missing");
  if (in_metadata) throw ParseError("TNTP: metadata tag <END OF METADATA> missing");
  data.num_nodes = static_cast<int>(declared_nodes);
  data.first_thru_node = first_thru < 0 ? 1 : static_cast<int>(first_thru);

  while (std::getline(in, line)) {
    ++line_no;
    auto s = detail::strip(line);
    if (s.empty() || s[0] == '~') continue;
    // row: init term capacity length fft b power speed toll type ;
    std::replace(s.begin(), s.end(), ';', ' ');
    std::istringstream row(s);
    std::vector<std::string> toks;
    std::string t;
    while (row >> t) toks.push_back(t);
    if (toks.empty()) continue;
    if (toks.size() < 7)
      throw ParseError("TNTP: truncated link row at line " +
                       std::to_string(line_no));
    RawTntpEdge e;
    long init = static_cast<long>(detail::parse_number(toks[0], line_no));
    long term = static_cast<long>(detail::parse_number(toks[1], line_no));
    if (init < 1 || init > declared_nodes || term < 1 || term > declared_nodes)
      throw ValidationError("TNTP: node id outside declared range 1.." +
                            std::to_string(declared_nodes) + " at line " +
                            std::to_string(line_no));
    e.tail = static_cast<int>(init - 1);
    e.head = static_cast<int>(term - 1);
    e.capacity = detail::parse_number(toks[2], line_no);
    e.free_flow_time = detail::parse_number(toks[4], line_no);
    e.bpr_coefficient = detail::parse_number(toks[5], line_no);
    e.bpr_power = detail::parse_number(toks[6], line_no);
    if (e.capacity <= 0)
      throw ValidationError("TNTP: capacity must be > 0 at line " +
                            std::to_string(line_no));
    if (e.free_flow_time <= 0)
      throw ValidationError("TNTP: free_flow_time must be > 0 at line " +
                            std::to_string(line_no));
    if (e.bpr_power < 1)
      throw ValidationError("TNTP: BPR power must be >= 1 at line " +
                            std::to_string(line_no));
    data.edges.push_back(e);
  }
  if (declared_links >= 0 &&
      static_cast<long>(data.edges.size()) != declared_links)
    throw ValidationError("TNTP: header declares " +
                          std::to_string(declared_links) + " links but file has " +
                          std::to_string(data.edges.size()));

  if (flow_text) {
    // flow rows: from to volume [cost]; header and metadata lines skipped
    std::istringstream fin(*flow_text);
    int fline = 0;
    std::map<std::pair<int, int>, double> volume;
    while (std::getline(fin, line)) {
      ++fline;
      auto s = detail::strip(line);
      if (s.empty() || s[0] == '~' || s[0] == '<') continue;
      std::istringstream row(s);
      std::vector<std::string> toks;
      std::string t;
      while (row >> t) toks.push_back(t);
      if (toks.empty()) continue;
      // skip a textual header such as "From To Volume Cost"
      if (!std::isdigit(static_cast<unsigned char>(toks[0][0])) &&
          toks[0][0] != '-' && toks[0][0] != '+')
        continue;
      if (toks.size() < 3)
        throw ParseError("TNTP flow: truncated row at line " +
                         std::to_string(fline));
      int from = static_cast<int>(detail::parse_number(toks[0], fline));
      int to = static_cast<int>(detail::parse_number(toks[1], fline));
      double vol = detail::parse_number(toks[2], fline);
      volume[{from - 1, to - 1}] += vol;
    }
    for (auto& e : data.edges) {
      auto it = volume.find({e.tail, e.head});
      if (it != volume.end()) e.recorded_flow = std::max(0.0, it->second);
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// BPR linearization: tangent of t(x) = fft (1 + k (x/cap)^p) at a reference
// flow, re-centered to t_lin(x) = a + b x. The intercept is floored at
// fft * 1e-6 and the slope at 0 so the affine model keeps a > 0, b >= 0.
// ---------------------------------------------------------------------------
inline std::pair<double, double> linearize_latency(const RawTntpEdge& e,
                                                   double reference_flow) {
  if (e.bpr_power < 1)
    throw ValidationError("linearize_latency: unsupported BPR exponent " +
                          std::to_string(e.bpr_power) + " (must be >= 1)");
  require(reference_flow >= 0, "linearize_latency: reference_flow must be >= 0");
  const double fft = e.free_flow_time, k = e.bpr_coefficient, p = e.bpr_power,
               cap = e.capacity;
  double ratio = reference_flow / cap;
  double t_ref = fft * (1.0 + k * std::pow(ratio, p));
  double slope;
  if (p == 1.0) {
    slope = fft * k / cap;
  } else {
    slope = fft * k * p * std::pow(reference_flow, p - 1.0) / std::pow(cap, p);
  }
  double b = std::max(slope, 0.0);
  double a = t_ref - b * reference_flow;
  a = std::max(a, fft * 1e-6);
  return {a, b};
}

// ---------------------------------------------------------------------------
// Strong connectivity (Tarjan SCC, iterative)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int> scc_components(int n, const std::vector<Edge>& edges) {
  std::vector<std::vector<int>> adj(n);
  for (const auto& e : edges) adj[e.tail].push_back(e.head);
  std::vector<int> comp(n, -1), low(n, 0), disc(n, -1), stk;
  std::vector<bool> on_stack(n, false);
  int timer = 0, ncomp = 0;
  // iterative Tarjan to avoid deep recursion on large networks
  struct Frame {
    int v;
    std::size_t child;
  };
  for (int s = 0; s < n; ++s) {
    if (disc[s] != -1) continue;
    std::vector<Frame> frames{{s, 0}};
    disc[s] = low[s] = timer++;
    stk.push_back(s);
    on_stack[s] = true;
    while (!frames.empty()) {
      auto& f = frames.back();
      if (f.child < adj[f.v].size()) {
        int w = adj[f.v][f.child++];
        if (disc[w] == -1) {
          disc[w] = low[w] = timer++;
          stk.push_back(w);
          on_stack[w] = true;
          frames.push_back({w, 0});
        } else if (on_stack[w]) {
          low[f.v] = std::min(low[f.v], disc[w]);
        }
      } else {
        if (low[f.v] == disc[f.v]) {
          while (true) {
            int w = stk.back();
            stk.pop_back();
            on_stack[w] = false;
            comp[w] = ncomp;
            if (w == f.v) break;
          }
          ++ncomp;
        }
        int v = f.v;
        frames.pop_back();
        if (!frames.empty()) low[frames.back().v] = std::min(low[frames.back().v], low[v]);
      }
    }
  }
  return comp;
}

}  // namespace detail

inline bool strongly_connected(const RoadNetwork& net,
                               std::vector<std::pair<int, int>>* unreachable = nullptr) {
  if (net.num_nodes == 0) return true;
  auto comp = detail::scc_components(net.num_nodes, net.edges);
  int ncomp = *std::max_element(comp.begin(), comp.end()) + 1;
  if (ncomp == 1) return true;
  if (unreachable) {
    // report one representative pair per offending component combination
    std::vector<int> rep(ncomp, -1);
    for (int v = 0; v < net.num_nodes; ++v)
      if (rep[comp[v]] == -1) rep[comp[v]] = v;
    for (int i = 0; i < ncomp && unreachable->size() < 32; ++i)
      for (int j = 0; j < ncomp && unreachable->size() < 32; ++j)
        if (i != j) unreachable->push_back({rep[i], rep[j]});
  }
  return false;
}

// ---------------------------------------------------------------------------
// Free-flow shortest paths. Entry (j, t) of the result is the minimum of
// sum(a_e) over directed paths j -> targets[t]; diagonal-style entries are 0.
// One reverse Dijkstra per target.
// ---------------------------------------------------------------------------
inline Mat free_flow_distances(const RoadNetwork& net,
                               const std::vector<int>& targets) {
  const int n = net.num_nodes;
  Mat dist(n, static_cast<int>(targets.size()));
  dist.setConstant(kInf);
  auto in = net.in_edges();
  using Item = std::pair<double, int>;
  for (int t = 0; t < static_cast<int>(targets.size()); ++t) {
    int target = targets[t];
    require(target >= 0 && target < n, "free_flow_distances: bad target node");
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist(target, t) = 0;
    pq.push({0.0, target});
    while (!pq.empty()) {
      auto [d, v] = pq.top();
      pq.pop();
      if (d > dist(v, t)) continue;
      for (int e : in[v]) {
        int u = net.edges[e].tail;
        double nd = d + net.a[e];
        if (nd < dist(u, t)) {
          dist(u, t) = nd;
          pq.push({nd, u});
        }
      }
    }
    for (int v = 0; v < n; ++v)
      if (!std::isfinite(dist(v, t)))
        throw ConnectivityError("free_flow_distances: node " + std::to_string(v) +
                                " cannot reach target " + std::to_string(target));
  }
  return dist;
}

// Shortest path (by free-flow time) as an edge-id sequence, or empty optional
// if unreachable.
inline std::optional<std::vector<int>> shortest_path_edges(const RoadNetwork& net,
                                                           int from, int to) {
  const int n = net.num_nodes;
  std::vector<double> dist(n, kInf);
  std::vector<int> via_edge(n, -1);
  auto out = net.out_edges();
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[from] = 0;
  pq.push({0.0, from});
  while (!pq.empty()) {
    auto [d, v] = pq.top();
    pq.pop();
    if (d > dist[v]) continue;
    if (v == to) break;
    for (int e : out[v]) {
      int w = net.edges[e].head;
      double nd = d + net.a[e];
      if (nd < dist[w]) {
        dist[w] = nd;
        via_edge[w] = e;
        pq.push({nd, w});
      }
    }
  }
  if (!std::isfinite(dist[to])) return std::nullopt;
  std::vector<int> path;
  for (int v = to; v != from;) {
    int e = via_edge[v];
    path.push_back(e);
    v = net.edges[e].tail;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

// ---------------------------------------------------------------------------
// Network assembly from raw TNTP rows
// ---------------------------------------------------------------------------

enum class ReferenceFlowPolicy { Capacity, RecordedFlow, Zero };

struct BuildOptions {
  ReferenceFlowPolicy reference_flow = ReferenceFlowPolicy::Capacity;
  double background_flow_fraction = 0.8;  // h_e = fraction * recorded flow
  std::optional<std::vector<int>> node_subset;  // 0-based; induced subgraph
  bool augment_connectivity = true;
};

// Builds the affine-latency network. If a node subset is requested, the
// induced subgraph is taken and, when augmentation is enabled, virtual edges
// along full-network shortest paths are added until the result is strongly
// connected. A virtual edge aggregates its path in series:
//   t_path(x) = sum(a_e + b_e (h_e + x)) = [sum a_e + sum b_e h_e] + [sum b_e] x,
// so it gets a = sum(a + b h), b = sum(b), h = 0.
inline RoadNetwork build_network(const TntpData& raw,
                                 std::vector<int> charge_nodes,
                                 std::vector<int> park_nodes,
                                 const BuildOptions& opt = {}) {
  require(raw.num_nodes > 0, "build_network: empty node set");
  require(0.0 <= opt.background_flow_fraction && opt.background_flow_fraction <= 1.0,
          "build_network: background_flow_fraction must be in [0,1]");

  RoadNetwork full;
  full.num_nodes = raw.num_nodes;
  full.a.resize(raw.edges.size());
  full.b.resize(raw.edges.size());
  full.h.resize(raw.edges.size());
  for (std::size_t i = 0; i < raw.edges.size(); ++i) {
    const auto& e = raw.edges[i];
    require(e.tail >= 0 && e.tail < raw.num_nodes && e.head >= 0 &&
                e.head < raw.num_nodes,
            "build_network: edge endpoint out of range");
    double ref = 0;
    switch (opt.reference_flow) {
      case ReferenceFlowPolicy::Capacity: ref = e.capacity; break;
      case ReferenceFlowPolicy::RecordedFlow: ref = e.recorded_flow; break;
      case ReferenceFlowPolicy::Zero: ref = 0; break;
    }
    auto [a, b] = linearize_latency(e, ref);
    full.edges.push_back({e.tail, e.head});
    full.a[i] = a;
    full.b[i] = b;
    full.h[i] = opt.background_flow_fraction * e.recorded_flow;
  }
  full.edge_is_virtual.assign(full.edges.size(), 0);

  RoadNetwork net;
  if (opt.node_subset) {
    const auto& subset = *opt.node_subset;
    require(!subset.empty(), "build_network: empty node subset");
    std::vector<int> old_to_new(raw.num_nodes, -1);
    for (std::size_t i = 0; i < subset.size(); ++i) {
      require(subset[i] >= 0 && subset[i] < raw.num_nodes,
              "build_network: subset node out of range");
      require(old_to_new[subset[i]] == -1, "build_network: duplicate subset node");
      old_to_new[subset[i]] = static_cast<int>(i);
    }
    net.num_nodes = static_cast<int>(subset.size());
    for (int e = 0; e < full.num_edges(); ++e) {
      int t = old_to_new[full.edges[e].tail], hd = old_to_new[full.edges[e].head];
      if (t >= 0 && hd >= 0 && t != hd) {
        net.edges.push_back({t, hd});
        net.a.conservativeResize(net.edges.size());
        net.b.conservativeResize(net.edges.size());
        net.h.conservativeResize(net.edges.size());
        net.a[net.edges.size() - 1] = full.a[e];
        net.b[net.edges.size() - 1] = full.b[e];
        net.h[net.edges.size() - 1] = full.h[e];
        net.edge_is_virtual.push_back(0);
      }
    }
    if (!strongly_connected(net)) {
      if (!opt.augment_connectivity) {
        std::vector<std::pair<int, int>> pairs;
        strongly_connected(net, &pairs);
        std::string msg = "build_network: subgraph not strongly connected;"
                          " unreachable representative pairs:";
        for (auto& [u, v] : pairs) msg += " (" + std::to_string(u) + "," + std::to_string(v) + ")";
        throw ConnectivityError(msg);
      }
      // Glue the components together with virtual edges routed through the
      // full network. Deterministic: components are processed in index order
      // and connected to the component containing subset[0].
      for (int guard = 0; guard < net.num_nodes && !strongly_connected(net); ++guard) {
        auto comp = detail::scc_components(net.num_nodes, net.edges);
        int core = comp[0];
        auto add_virtual = [&](int from_new, int to_new) {
          auto path = shortest_path_edges(full, subset[from_new], subset[to_new]);
          if (!path)
            throw ConnectivityError(
                "build_network: full network offers no path between subset nodes " +
                std::to_string(subset[from_new]) + " and " + std::to_string(subset[to_new]));
          double a_sum = 0, b_sum = 0;
          for (int e : *path) {
            a_sum += full.a[e] + full.b[e] * full.h[e];
            b_sum += full.b[e];
          }
          net.edges.push_back({from_new, to_new});
          net.a.conservativeResize(net.edges.size());
          net.b.conservativeResize(net.edges.size());
          net.h.conservativeResize(net.edges.size());
          net.a[net.edges.size() - 1] = std::max(a_sum, 1e-9);
          net.b[net.edges.size() - 1] = b_sum;
          net.h[net.edges.size() - 1] = 0.0;
          net.edge_is_virtual.push_back(1);
        };
        // reachability from the core component
        int picked = -1;
        for (int v = 0; v < net.num_nodes && picked < 0; ++v)
          if (comp[v] != core) picked = v;
        if (picked < 0) break;
        add_virtual(0, picked);
        add_virtual(picked, 0);
      }
    }
  } else {
    net = std::move(full);
  }

  std::sort(charge_nodes.begin(), charge_nodes.end());
  charge_nodes.erase(std::unique(charge_nodes.begin(), charge_nodes.end()),
                     charge_nodes.end());
  std::sort(park_nodes.begin(), park_nodes.end());
  park_nodes.erase(std::unique(park_nodes.begin(), park_nodes.end()), park_nodes.end());
  for (int v : charge_nodes)
    require(v >= 0 && v < net.num_nodes,
            "build_network: charging node " + std::to_string(v) + " not in network");
  for (int v : park_nodes)
    require(v >= 0 && v < net.num_nodes,
            "build_network: parking node " + std::to_string(v) + " not in network");
  net.charge_nodes = std::move(charge_nodes);
  net.park_nodes = std::move(park_nodes);

  if (!strongly_connected(net)) {
    std::vector<std::pair<int, int>> pairs;
    strongly_connected(net, &pairs);
    std::string msg = "build_network: network not strongly connected; pairs:";
    for (auto& [u, v] : pairs)
      msg += " (" + std::to_string(u) + "," + std::to_string(v) + ")";
    throw ConnectivityError(msg);
  }
  for (int e = 0; e < net.num_edges(); ++e) {
    require(net.a[e] > 0, "build_network: a must be > 0");
    require(net.b[e] >= 0, "build_network: b must be >= 0");
    require(net.h[e] >= 0, "build_network: h must be >= 0");
  }
  return net;
}

// ---------------------------------------------------------------------------
// JSON round trip (schema_version 1)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const RoadNetwork& net) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["num_nodes"] = net.num_nodes;
  auto edges = nlohmann::json::array();
  for (int e = 0; e < net.num_edges(); ++e) {
    edges.push_back({{"tail", net.edges[e].tail},
                     {"head", net.edges[e].head},
                     {"a", net.a[e]},
                     {"b", net.b[e]},
                     {"h", net.h[e]},
                     {"virtual", static_cast<bool>(net.edge_is_virtual[e])}});
  }
  j["edges"] = std::move(edges);
  j["charge_nodes"] = net.charge_nodes;
  j["park_nodes"] = net.park_nodes;
  return j;
}

inline RoadNetwork network_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version") || j.at("schema_version").get<int>() != 1)
    throw ParseError("network JSON: unsupported schema_version");
  RoadNetwork net;
  net.num_nodes = j.at("num_nodes").get<int>();
  const auto& edges = j.at("edges");
  net.a.resize(edges.size());
  net.b.resize(edges.size());
  net.h.resize(edges.size());
  int i = 0;
  for (const auto& je : edges) {
    net.edges.push_back({je.at("tail").get<int>(), je.at("head").get<int>()});
    net.a[i] = je.at("a").get<double>();
    net.b[i] = je.at("b").get<double>();
    net.h[i] = je.value("h", 0.0);
    net.edge_is_virtual.push_back(je.value("virtual", false) ? 1 : 0);
    ++i;
  }
  net.charge_nodes = j.value("charge_nodes", std::vector<int>{});
  net.park_nodes = j.value("park_nodes", std::vector<int>{});
  std::sort(net.charge_nodes.begin(), net.charge_nodes.end());
  std::sort(net.park_nodes.begin(), net.park_nodes.end());
  if (!strongly_connected(net))
    throw ConnectivityError("network JSON: graph is not strongly connected");
  for (int e = 0; e < net.num_edges(); ++e) {
    require(net.a[e] > 0, "network JSON: a must be > 0");
    require(net.b[e] >= 0, "network JSON: b must be >= 0");
    require(net.h[e] >= 0, "network JSON: h must be >= 0");
  }
  return net;
}

}  // namespace hyperroute
