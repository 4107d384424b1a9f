#pragma once

#include "hyperroute/common.hpp"
#include "hyperroute/network.hpp"
#include "hyperroute/projection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace hyperroute {

// ---------------------------------------------------------------------------
// Vehicle classes and their decision variables.
//
// Each agent is a population of identical vehicles choosing per-edge flow
// fractions phi and per-node charging/parking fractions g_c, g_p. The
// strategy vector is laid out as y = [phi (n_e) | g_c (n_v) | g_p (n_v)].
// Coordinates of g at non-facility nodes (and all of g_c for fuel vehicles)
// are pinned to zero through the box bounds, so every agent has the same
// dimension n_i = n_e + 2 n_v.
// ---------------------------------------------------------------------------

enum class VehicleKind { PEV, FV };

struct AgentClass {
  int id = 0;
  VehicleKind kind = VehicleKind::FV;
  double population = 0;         // P_i, vehicles
  int origin = -1;               // o_i
  int destination = -1;          // d_i
  double value_of_time = 0;      // eta_i, $/hour
  double energy_demand = 0;      // q_i, class-total kWh (0 for FV)
  double min_charge_fraction = 0;  // in [0,1], 0 for FV
  Vec charge_slot_cap;           // delta_c, aligned with network.charge_nodes
  Vec park_slot_cap;             // delta_p, aligned with network.park_nodes
  Vec last_mile_weight;          // W_i diagonal, length n_v, all > 0
};

struct StrategyLayout {
  int n_e = 0;
  int n_v = 0;
  int dim() const { return n_e + 2 * n_v; }
  int phi(int e) const { return e; }
  int gc(int v) const { return n_e + v; }
  int gp(int v) const { return n_e + n_v + v; }
};

// Discount vector layout: agent-major, charging entries first (in
// network.charge_nodes order) then parking entries. m = N (n_c + n_p).
struct DiscountLayout {
  int num_agents = 0;
  int n_c = 0;
  int n_p = 0;
  int per_agent() const { return n_c + n_p; }
  int dim() const { return num_agents * per_agent(); }
  int charge_index(int agent, int charge_pos) const {
    return agent * per_agent() + charge_pos;
  }
  int park_index(int agent, int park_pos) const {
    return agent * per_agent() + n_c + park_pos;
  }
};

struct PriceTable {
  Vec charge_price;  // base $/kWh per charging node (network order)
  Vec park_price;    // base $ per parking node
};

using Profile = std::vector<Vec>;  // one strategy vector per agent

struct Scenario {
  RoadNetwork network;
  std::vector<AgentClass> agents;
  PriceTable prices;
  Vec discount_caps;  // absolute caps theta .* base_price, length m

  int num_agents() const { return static_cast<int>(agents.size()); }
  StrategyLayout strategy_layout() const {
    return {network.num_edges(), network.num_nodes};
  }
  DiscountLayout discount_layout() const {
    return {num_agents(), static_cast<int>(network.charge_nodes.size()),
            static_cast<int>(network.park_nodes.size())};
  }
  int total_dim() const { return num_agents() * strategy_layout().dim(); }

  void validate() const {
    const auto& net = network;
    require(static_cast<int>(prices.charge_price.size()) ==
                    static_cast<int>(net.charge_nodes.size()) &&
                static_cast<int>(prices.park_price.size()) ==
                    static_cast<int>(net.park_nodes.size()),
            "scenario: price table does not match facility sets");
    for (int j = 0; j < prices.charge_price.size(); ++j)
      require(prices.charge_price[j] > 0, "scenario: charging base price must be > 0");
    for (int j = 0; j < prices.park_price.size(); ++j)
      require(prices.park_price[j] > 0, "scenario: parking base price must be > 0");
    require(discount_caps.size() == discount_layout().dim(),
            "scenario: discount cap vector has wrong length");
    require((discount_caps.array() >= 0).all(), "scenario: discount caps must be >= 0");
    for (const auto& ag : agents) {
      require(ag.population > 0, "agent: population must be > 0");
      require(ag.origin != ag.destination, "agent: origin must differ from destination");
      require(ag.origin >= 0 && ag.origin < net.num_nodes &&
                  ag.destination >= 0 && ag.destination < net.num_nodes,
              "agent: origin/destination outside network");
      require(ag.value_of_time > 0, "agent: value of time must be > 0");
      require(ag.min_charge_fraction >= 0 && ag.min_charge_fraction <= 1,
              "agent: min charge fraction must be in [0,1]");
      if (ag.kind == VehicleKind::FV) {
        require(ag.min_charge_fraction == 0, "FV agent: min charge fraction must be 0");
        require(ag.energy_demand == 0, "FV agent: energy demand must be 0");
      } else {
        require(ag.energy_demand > 0, "PEV agent: energy demand must be > 0");
      }
      require(static_cast<int>(ag.charge_slot_cap.size()) ==
                  static_cast<int>(net.charge_nodes.size()),
              "agent: charge slot caps must align with charging nodes");
      require(static_cast<int>(ag.park_slot_cap.size()) ==
                  static_cast<int>(net.park_nodes.size()),
              "agent: park slot caps must align with parking nodes");
      require((ag.charge_slot_cap.array() > 0).all() &&
                  (ag.park_slot_cap.array() > 0).all(),
              "agent: slot caps must be > 0");
      require(ag.last_mile_weight.size() == net.num_nodes,
              "agent: last-mile weights must have one entry per node");
      require((ag.last_mile_weight.array() > 0).all(),
              "agent: last-mile weights must be > 0");
    }
  }
};

// Destination indicator: all zeros except 1 at d_i.
inline Vec destination_indicator(const AgentClass& agent, int n_v) {
  Vec g = Vec::Zero(n_v);
  g[agent.destination] = 1.0;
  return g;
}

// Last-mile weights: free-flow shortest-path time to the destination on the
// facility nodes, floored at eps_w everywhere (the floor is what keeps the
// quadratic strictly positive at the destination).
inline Vec build_last_mile_weights(const RoadNetwork& net, int destination,
                                   double eps_w = 1e-3) {
  Mat dist = free_flow_distances(net, {destination});
  Vec w = Vec::Constant(net.num_nodes, eps_w);
  for (int j : net.charge_nodes) w[j] = std::max(dist(j, 0), eps_w);
  for (int j : net.park_nodes) w[j] = std::max(dist(j, 0), eps_w);
  w[destination] = eps_w;
  return w;
}

// ---------------------------------------------------------------------------
// Feasible polyhedron of one agent:
//   flow conservation (with the facility fractions absorbed at every node,
//   right-hand side -1 at the origin), the minimum-charge requirement, the
//   per-facility slot caps, and the unit box with pinned coordinates.
// ---------------------------------------------------------------------------
inline Polyhedron build_feasible_polyhedron(const AgentClass& agent,
                                            const RoadNetwork& net) {
  const StrategyLayout ly{net.num_edges(), net.num_nodes};
  const int n = ly.dim();
  const int n_v = net.num_nodes;
  const int n_c = static_cast<int>(net.charge_nodes.size());
  const int n_p = static_cast<int>(net.park_nodes.size());
  require(agent.origin >= 0 && agent.origin < n_v && agent.destination >= 0 &&
              agent.destination < n_v,
          "build_feasible_polyhedron: agent references nodes outside the network");

  Polyhedron poly;
  poly.A_eq = Mat::Zero(n_v, n);
  poly.b_eq = Vec::Zero(n_v);
  for (int e = 0; e < net.num_edges(); ++e) {
    poly.A_eq(net.edges[e].head, ly.phi(e)) += 1.0;
    poly.A_eq(net.edges[e].tail, ly.phi(e)) -= 1.0;
  }
  for (int v = 0; v < n_v; ++v) {
    poly.A_eq(v, ly.gc(v)) = -1.0;
    poly.A_eq(v, ly.gp(v)) = -1.0;
  }
  poly.b_eq[agent.origin] = -1.0;

  const int n_in = 1 + n_c + n_p;
  poly.A_in = Mat::Zero(n_in, n);
  poly.b_in = Vec::Zero(n_in);
  for (int j = 0; j < n_c; ++j) poly.A_in(0, ly.gc(net.charge_nodes[j])) = -1.0;
  poly.b_in[0] = -agent.min_charge_fraction;
  for (int j = 0; j < n_c; ++j) {
    poly.A_in(1 + j, ly.gc(net.charge_nodes[j])) = agent.population;
    poly.b_in[1 + j] = agent.charge_slot_cap[j];
  }
  for (int j = 0; j < n_p; ++j) {
    poly.A_in(1 + n_c + j, ly.gp(net.park_nodes[j])) = agent.population;
    poly.b_in[1 + n_c + j] = agent.park_slot_cap[j];
  }

  poly.lb = Vec::Zero(n);
  poly.ub = Vec::Zero(n);
  poly.ub.head(ly.n_e).setOnes();
  const bool pev = agent.kind == VehicleKind::PEV;
  for (int j : net.charge_nodes)
    if (pev) poly.ub[ly.gc(j)] = 1.0;
  for (int j : net.park_nodes) poly.ub[ly.gp(j)] = 1.0;

  // Constructive feasible point: greedily place the unit of vehicles on the
  // facilities within caps, then route it along free-flow shortest paths.
  Vec mass_c = Vec::Zero(n_c), mass_p = Vec::Zero(n_p);
  double need_charge = pev ? agent.min_charge_fraction : 0.0;
  double placed = 0;
  if (pev) {
    double total_charge_cap = 0;
    for (int j = 0; j < n_c; ++j)
      total_charge_cap += std::min(1.0, agent.charge_slot_cap[j] / agent.population);
    if (total_charge_cap + 1e-12 < need_charge)
      throw InfeasibleError(
          "agent " + std::to_string(agent.id) + ": minimum charge " +
          std::to_string(need_charge * agent.population) +
          " vehicles exceeds total charging slots " +
          std::to_string(total_charge_cap * agent.population));
    double left = need_charge;
    for (int j = 0; j < n_c && left > 0; ++j) {
      double take = std::min(left, std::min(1.0, agent.charge_slot_cap[j] / agent.population));
      mass_c[j] = take;
      left -= take;
      placed += take;
    }
  }
  double remaining = 1.0 - placed;
  for (int j = 0; j < n_p && remaining > 1e-15; ++j) {
    double cap = std::min(1.0, agent.park_slot_cap[j] / agent.population);
    double take = std::min(remaining, cap);
    mass_p[j] += take;
    remaining -= take;
  }
  if (pev) {
    for (int j = 0; j < n_c && remaining > 1e-15; ++j) {
      double cap = std::min(1.0, agent.charge_slot_cap[j] / agent.population);
      double take = std::min(remaining, cap - mass_c[j]);
      mass_c[j] += take;
      remaining -= take;
    }
  }
  if (remaining > 1e-9)
    throw InfeasibleError("agent " + std::to_string(agent.id) +
                          ": facility slot caps cannot absorb the whole class");

  Vec y = Vec::Zero(n);
  auto route_mass = [&](int node, double mass) {
    if (mass <= 0) return;
    auto path = shortest_path_edges(net, agent.origin, node);
    if (!path)
      throw ConnectivityError("build_feasible_polyhedron: no path from origin to facility");
    for (int e : *path) y[ly.phi(e)] += mass;
  };
  for (int j = 0; j < n_c; ++j) {
    y[ly.gc(net.charge_nodes[j])] = mass_c[j];
    route_mass(net.charge_nodes[j], mass_c[j]);
  }
  for (int j = 0; j < n_p; ++j) {
    y[ly.gp(net.park_nodes[j])] += mass_p[j];
    route_mass(net.park_nodes[j], mass_p[j]);
  }
  if (poly.feasibility_violation(y) > 1e-8)
    throw InfeasibleError("build_feasible_polyhedron: constructed point infeasible (violation " +
                          std::to_string(poly.feasibility_violation(y)) + ")");
  poly.feasible_point = y;
  return poly;
}

// Max violation of the strategy invariants (conservation, pinned coordinates,
// unit mass, minimum charge, caps, box). Used by tests and verify drivers.
inline double strategy_violation(const Scenario& sc, int agent_idx, const Vec& y) {
  const auto& ag = sc.agents[agent_idx];
  auto poly = build_feasible_polyhedron(ag, sc.network);
  double v = poly.feasibility_violation(y);
  const auto ly = sc.strategy_layout();
  double mass = 0;
  for (int j = 0; j < ly.n_v; ++j) mass += y[ly.gc(j)] + y[ly.gp(j)];
  return std::max(v, std::abs(mass - 1.0));
}

// ---------------------------------------------------------------------------
// Costs and the pseudo-gradient mapping
// ---------------------------------------------------------------------------

// sigma_e = sum_i P_i phi_i^e, deterministic agent-order summation.
inline Vec aggregate_flow(const Scenario& sc, const Profile& y) {
  const auto ly = sc.strategy_layout();
  Vec sigma = Vec::Zero(ly.n_e);
  for (int i = 0; i < sc.num_agents(); ++i)
    sigma += sc.agents[i].population * y[i].head(ly.n_e);
  return sigma;
}

// sigma(s) = sum_i P_i * (phi rows of s_i), an n_e x m matrix.
inline Mat aggregate_sensitivity(const Scenario& sc, const std::vector<Mat>& s) {
  const auto ly = sc.strategy_layout();
  const int m = sc.discount_layout().dim();
  Mat out = Mat::Zero(ly.n_e, m);
  for (int i = 0; i < sc.num_agents(); ++i)
    out += sc.agents[i].population * s[i].topRows(ly.n_e);
  return out;
}

// f_i = travel time + charging cost + parking cost + last-mile discomfort.
inline double agent_cost(const Scenario& sc, int i, const Vec& c, const Vec& y,
                         const Vec& sigma) {
  const auto& ag = sc.agents[i];
  const auto& net = sc.network;
  const auto ly = sc.strategy_layout();
  const auto dl = sc.discount_layout();
  require_dims(y.size() == ly.dim() && sigma.size() == ly.n_e && c.size() == dl.dim(),
               "agent_cost: dimension mismatch");
  double travel = 0;
  for (int e = 0; e < ly.n_e; ++e)
    travel += y[ly.phi(e)] * (net.a[e] + net.b[e] * (net.h[e] + sigma[e]));
  travel *= ag.value_of_time * ag.population;
  double charging = 0;
  for (int j = 0; j < dl.n_c; ++j) {
    double disc = c[dl.charge_index(i, j)];
    charging += ag.energy_demand * y[ly.gc(net.charge_nodes[j])] *
                (sc.prices.charge_price[j] - disc);
  }
  double parking = 0;
  for (int j = 0; j < dl.n_p; ++j) {
    double disc = c[dl.park_index(i, j)];
    parking += y[ly.gp(net.park_nodes[j])] * (sc.prices.park_price[j] - disc);
  }
  Vec dest = destination_indicator(ag, ly.n_v);
  double lm = 0;
  for (int v = 0; v < ly.n_v; ++v) {
    double d = y[ly.gc(v)] + y[ly.gp(v)] - dest[v];
    lm += ag.last_mile_weight[v] * d * d;
  }
  lm *= ag.value_of_time;
  return travel + charging + parking + lm;
}

// F_i(c, y_i, sigma): gradient of f_i in the agent's own variables, with the
// aggregate flow already containing the agent's own contribution.
inline Vec pseudo_gradient_block(const Scenario& sc, int i, const Vec& c,
                                 const Vec& y, const Vec& sigma) {
  const auto& ag = sc.agents[i];
  const auto& net = sc.network;
  const auto ly = sc.strategy_layout();
  const auto dl = sc.discount_layout();
  Vec F = Vec::Zero(ly.dim());
  for (int e = 0; e < ly.n_e; ++e)
    F[ly.phi(e)] = ag.value_of_time * ag.population *
                   (net.a[e] + net.b[e] * (net.h[e] + sigma[e]) +
                    net.b[e] * ag.population * y[ly.phi(e)]);
  Vec dest = destination_indicator(ag, ly.n_v);
  for (int v = 0; v < ly.n_v; ++v) {
    double lm = 2.0 * ag.value_of_time * ag.last_mile_weight[v] *
                (y[ly.gc(v)] + y[ly.gp(v)] - dest[v]);
    F[ly.gc(v)] = lm;
    F[ly.gp(v)] = lm;
  }
  for (int j = 0; j < dl.n_c; ++j)
    F[ly.gc(net.charge_nodes[j])] +=
        ag.energy_demand * (sc.prices.charge_price[j] - c[dl.charge_index(i, j)]);
  for (int j = 0; j < dl.n_p; ++j)
    F[ly.gp(net.park_nodes[j])] +=
        sc.prices.park_price[j] - c[dl.park_index(i, j)];
  return F;
}

// Stacked pseudo-gradient over the collective profile.
inline Vec pseudo_gradient(const Scenario& sc, const Vec& c, const Profile& y) {
  const int ni = sc.strategy_layout().dim();
  Vec sigma = aggregate_flow(sc, y);
  Vec F(sc.num_agents() * ni);
  for (int i = 0; i < sc.num_agents(); ++i)
    F.segment(i * ni, ni) = pseudo_gradient_block(sc, i, c, y[i], sigma);
  return F;
}

// --- constant partials of F_i (the mapping is affine) ----------------------

inline Mat pg_jacobian_own(const Scenario& sc, int i) {
  const auto& ag = sc.agents[i];
  const auto ly = sc.strategy_layout();
  Mat J = Mat::Zero(ly.dim(), ly.dim());
  for (int e = 0; e < ly.n_e; ++e)
    J(ly.phi(e), ly.phi(e)) =
        ag.value_of_time * ag.population * ag.population * sc.network.b[e];
  for (int v = 0; v < ly.n_v; ++v) {
    double w = 2.0 * ag.value_of_time * ag.last_mile_weight[v];
    J(ly.gc(v), ly.gc(v)) = w;
    J(ly.gc(v), ly.gp(v)) = w;
    J(ly.gp(v), ly.gc(v)) = w;
    J(ly.gp(v), ly.gp(v)) = w;
  }
  return J;
}

inline Mat pg_jacobian_sigma(const Scenario& sc, int i) {
  const auto& ag = sc.agents[i];
  const auto ly = sc.strategy_layout();
  Mat J = Mat::Zero(ly.dim(), ly.n_e);
  for (int e = 0; e < ly.n_e; ++e)
    J(ly.phi(e), e) = ag.value_of_time * ag.population * sc.network.b[e];
  return J;
}

inline Mat pg_jacobian_discounts(const Scenario& sc, int i) {
  const auto& ag = sc.agents[i];
  const auto ly = sc.strategy_layout();
  const auto dl = sc.discount_layout();
  Mat J = Mat::Zero(ly.dim(), dl.dim());
  for (int j = 0; j < dl.n_c; ++j)
    J(ly.gc(sc.network.charge_nodes[j]), dl.charge_index(i, j)) = -ag.energy_demand;
  for (int j = 0; j < dl.n_p; ++j)
    J(ly.gp(sc.network.park_nodes[j]), dl.park_index(i, j)) = -1.0;
  return J;
}

// ---------------------------------------------------------------------------
// Free coordinates: everything not pinned to zero by the box. Strategy
// coordinates at non-facility nodes, and the whole charging block of a fuel
// vehicle, are excluded.
// ---------------------------------------------------------------------------
inline std::vector<int> free_coordinates(const Scenario& sc, int i) {
  const auto& ag = sc.agents[i];
  const auto ly = sc.strategy_layout();
  std::vector<int> idx;
  for (int e = 0; e < ly.n_e; ++e) idx.push_back(ly.phi(e));
  if (ag.kind == VehicleKind::PEV)
    for (int j : sc.network.charge_nodes) idx.push_back(ly.gc(j));
  for (int j : sc.network.park_nodes) idx.push_back(ly.gp(j));
  return idx;
}

// Stacked free coordinates over all agents (collective indexing).
inline std::vector<int> free_coordinates(const Scenario& sc) {
  const int ni = sc.strategy_layout().dim();
  std::vector<int> idx;
  for (int i = 0; i < sc.num_agents(); ++i)
    for (int k : free_coordinates(sc, i)) idx.push_back(i * ni + k);
  return idx;
}

// Permutation that groups the collective strategy into [all phi | all g]
// blocks, under which the pseudo-gradient Jacobian is block diagonal.
// Returns p with p[k] = stacked index of the k-th permuted coordinate.
inline std::vector<int> phi_g_permutation(const Scenario& sc) {
  const auto ly = sc.strategy_layout();
  const int ni = ly.dim();
  std::vector<int> p;
  for (int i = 0; i < sc.num_agents(); ++i)
    for (int e = 0; e < ly.n_e; ++e) p.push_back(i * ni + ly.phi(e));
  for (int i = 0; i < sc.num_agents(); ++i)
    for (int v = 0; v < ly.n_v; ++v) p.push_back(i * ni + ly.gc(v));
  for (int i = 0; i < sc.num_agents(); ++i)
    for (int v = 0; v < ly.n_v; ++v) p.push_back(i * ni + ly.gp(v));
  return p;
}

// Dense Jacobian of the full pseudo-gradient in the collective strategy,
// restricted to the given stacked coordinates. Intended for tests and for
// small instances; the certificate below uses the block structure instead.
inline Mat pg_jacobian_dense(const Scenario& sc, const std::vector<int>& coords) {
  const auto ly = sc.strategy_layout();
  const int ni = ly.dim();
  const int N = sc.num_agents();
  Mat full = Mat::Zero(N * ni, N * ni);
  for (int i = 0; i < N; ++i) {
    full.block(i * ni, i * ni, ni, ni) = pg_jacobian_own(sc, i);
    Mat dsig = pg_jacobian_sigma(sc, i);
    for (int k = 0; k < N; ++k)
      full.block(i * ni, k * ni, ni, ly.n_e) +=
          sc.agents[k].population * dsig;
  }
  Mat sub(coords.size(), coords.size());
  for (std::size_t r = 0; r < coords.size(); ++r)
    for (std::size_t c = 0; c < coords.size(); ++c)
      sub(r, c) = full(coords[r], coords[c]);
  return sub;
}

// ---------------------------------------------------------------------------
// Strong-monotonicity certificate. The Jacobian of F splits into a flow block
// (coupled across agents, one N x N core per edge scaled by b_e) and a
// facility block (per-agent quadratic from the last-mile term). Eigenvalues
// are computed on the free coordinates; a positive minimum certifies a unique
// equilibrium for the instance.
// ---------------------------------------------------------------------------
struct MonotonicityReport {
  double min_eig = 0;      // min eigenvalue of the symmetrized Jacobian
  double min_eig_phi = 0;  // flow block
  double min_eig_g = 0;    // facility block
  bool strongly_monotone() const { return min_eig > 0; }
};

inline MonotonicityReport monotonicity_certificate(const Scenario& sc) {
  const int N = sc.num_agents();
  MonotonicityReport rep;
  if (N == 0) return rep;

  Mat core(N, N);
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < N; ++k) {
      const auto& ai = sc.agents[i];
      core(i, k) = ai.value_of_time * ai.population * sc.agents[k].population;
      if (i == k) core(i, k) += ai.value_of_time * ai.population * ai.population;
    }
  Mat sym = 0.5 * (core + core.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  double lam_min = es.eigenvalues().minCoeff();
  double b_min = sc.network.num_edges() > 0 ? sc.network.b.minCoeff() : 0.0;
  double b_max = sc.network.num_edges() > 0 ? sc.network.b.maxCoeff() : 0.0;
  rep.min_eig_phi = lam_min >= 0 ? b_min * lam_min : b_max * lam_min;

  double g_min = kInf;
  for (int i = 0; i < N; ++i) {
    const auto& ag = sc.agents[i];
    const bool pev = ag.kind == VehicleKind::PEV;
    for (int v = 0; v < sc.network.num_nodes; ++v) {
      bool c_free = pev && sc.network.is_charge_node(v);
      bool p_free = sc.network.is_park_node(v);
      if (c_free && p_free) {
        g_min = std::min(g_min, 0.0);  // rank-1 2x2 block has a zero eigenvalue
      } else if (c_free || p_free) {
        g_min = std::min(g_min, 2.0 * ag.value_of_time * ag.last_mile_weight[v]);
      }
    }
  }
  rep.min_eig_g = std::isfinite(g_min) ? g_min : 0.0;
  rep.min_eig = std::min(rep.min_eig_phi, rep.min_eig_g);
  return rep;
}

// Spectral norm of the Jacobian columns restricted to the free coordinates,
// by power iteration on the structured matvec (no dense assembly).
inline double pg_jacobian_free_norm(const Scenario& sc, int iters = 300) {
  const auto ly = sc.strategy_layout();
  const int ni = ly.dim();
  const int N = sc.num_agents();
  auto free_idx = free_coordinates(sc);
  const int nf = static_cast<int>(free_idx.size());
  if (nf == 0) return 0.0;

  std::vector<Mat> own(N), dsig(N);
  for (int i = 0; i < N; ++i) {
    own[i] = pg_jacobian_own(sc, i);
    dsig[i] = pg_jacobian_sigma(sc, i);
  }
  auto matvec = [&](const Vec& vfull) {
    Vec sig = Vec::Zero(ly.n_e);
    for (int i = 0; i < N; ++i)
      sig += sc.agents[i].population * vfull.segment(i * ni, ly.n_e);
    Vec out(N * ni);
    for (int i = 0; i < N; ++i) {
      out.segment(i * ni, ni) = own[i] * vfull.segment(i * ni, ni);
      out.segment(i * ni, ni).noalias() += dsig[i] * sig;
    }
    return out;
  };
  auto matvec_t = [&](const Vec& wfull) {
    Vec acc = Vec::Zero(ly.n_e);
    for (int i = 0; i < N; ++i)
      acc.noalias() += dsig[i].transpose() * wfull.segment(i * ni, ni);
    Vec out(N * ni);
    for (int i = 0; i < N; ++i) {
      out.segment(i * ni, ni) =
          own[i].transpose() * wfull.segment(i * ni, ni);
      out.segment(i * ni, ly.n_e) += sc.agents[i].population * acc;
    }
    return out;
  };

  Vec v = Vec::Ones(nf) / std::sqrt(static_cast<double>(nf));
  double norm = 0;
  for (int it = 0; it < iters; ++it) {
    Vec vfull = Vec::Zero(N * ni);
    for (int k = 0; k < nf; ++k) vfull[free_idx[k]] = v[k];
    Vec w = matvec(vfull);
    Vec back = matvec_t(w);
    Vec g(nf);
    for (int k = 0; k < nf; ++k) g[k] = back[free_idx[k]];
    double gn = g.norm();
    if (gn == 0) return 0.0;
    double next = std::sqrt(gn);
    v = g / gn;
    if (it > 10 && std::abs(next - norm) <= 1e-12 * std::max(1.0, norm)) {
      norm = next;
      break;
    }
    norm = next;
  }
  return norm;
}

// Classical strongly-monotone projected-gradient step: mu / L^2. Falls back
// to 0.5 / L when the certificate is not positive.
inline double default_inner_step(const Scenario& sc) {
  auto rep = monotonicity_certificate(sc);
  double L = pg_jacobian_free_norm(sc);
  if (L <= 0) return 1.0;
  if (rep.min_eig > 0) return rep.min_eig / (L * L);
  return 0.5 / L;
}

}  // namespace hyperroute
