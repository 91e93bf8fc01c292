#pragma once

// Scenario definition and plain-text I/O.
//
// A scenario bundles everything one coordination-plus-simulation run needs:
// the vehicle fleet, the crossing order, the intersection geometry, solver
// and channel settings, and the closed-loop simulation horizon.  Scenarios
// round-trip through a small INI-style format (sections, key = value pairs,
// '#' comments) and a factory provides the seven stock fixtures used by the
// iteration-count studies.  Vehicle ids are 1-based in files and in the
// crossing-order key; everything is 0-based in code.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "crossway/errors.hpp"
#include "crossway/runtime.hpp"
#include "crossway/sqp.hpp"

namespace crossway {

// Per-vehicle scenario data; shared fields (sampling time, horizon,
// intersection geometry, control bounds pattern) live on ScenarioConfig.
struct ScenarioVehicle {
  double Q = 1.0;          // velocity tracking weight, s^2/m^2
  double R = 1.0;          // control effort weight, s^4/m^2
  double v_desired = 0.0;  // m/s
  double p0 = 0.0;         // initial position, m
  double v0 = 0.0;         // initial velocity, m/s
  double u_min = -2.0;     // m/s^2
  double u_max = 2.0;      // m/s^2
};

struct ScenarioConfig {
  std::string name = "scenario";
  double sampling_time = 0.2;  // s
  int horizon = 30;            // stages
  double p_in = 0.0;           // intersection entry, m
  double p_out = 8.0;          // intersection exit, m
  int simulation_steps = 30;   // closed-loop samples
  double noise_position = 0.0; // measurement noise std, m
  double noise_velocity = 0.0; // measurement noise std, m/s
  std::uint64_t noise_seed = 1;
  double soft_penalty = 0.0;   // 0 = estimate from sampled multipliers
  std::vector<int> crossing_order;  // 0-based; empty = declaration order
  std::vector<ScenarioVehicle> vehicles;
  SQPConfig sqp;               // crossing_order inside is ignored until use
  ChannelConfig channel;

  int num_vehicles() const { return static_cast<int>(vehicles.size()); }

  void validate() const {
    if (vehicles.empty())
      throw invalid_parameter("scenario defines no vehicles");
    if (simulation_steps < horizon)
      throw invalid_parameter(
          "simulation must run at least one full planning horizon");
    if (noise_position < 0.0 || noise_velocity < 0.0)
      throw invalid_parameter("noise levels must be nonnegative");
    if (soft_penalty < 0.0)
      throw invalid_parameter("soft-constraint penalty must be nonnegative");
    if (!crossing_order.empty()) {
      if (crossing_order.size() != vehicles.size())
        throw invalid_parameter("crossing order must list every vehicle once");
      std::vector<bool> seen(vehicles.size(), false);
      for (int v : crossing_order) {
        if (v < 0 || v >= num_vehicles() || seen[static_cast<std::size_t>(v)])
          throw invalid_parameter("crossing order must be a permutation");
        seen[static_cast<std::size_t>(v)] = true;
      }
    }
    channel.validate();
    if (!(sqp.tolerance > 0.0) || !(sqp.hessian_floor > 0.0) ||
        !(sqp.sigma_init > 0.0) || !(sqp.curvature_step > 0.0))
      throw invalid_parameter("solver tolerances must be positive");
    vehicle_params();  // surfaces per-vehicle inconsistencies
  }

  std::vector<VehicleParams> vehicle_params() const {
    std::vector<VehicleParams> out;
    out.reserve(vehicles.size());
    for (const auto& v : vehicles)
      out.push_back(VehicleParams::make(sampling_time, horizon, v.Q, v.R,
                                        v.v_desired, v.p0, v.v0, v.u_min,
                                        v.u_max, p_in, p_out));
    return out;
  }

  // Solver configuration with the crossing order filled in.
  SQPConfig sqp_config() const { return sqp_config(sqp.mode); }
  SQPConfig sqp_config(CoordinationMode mode) const {
    SQPConfig cfg = sqp;
    cfg.mode = mode;
    cfg.crossing_order = crossing_order;
    return cfg;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto from = s.find_first_not_of(" \t\r\n");
  if (from == std::string::npos) return {};
  const auto to = s.find_last_not_of(" \t\r\n");
  return s.substr(from, to - from + 1);
}

template <typename T>
T parse_number(const std::string& token, int line) {
  T value{};
  const char* first = token.data();
  const char* last = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last)
    throw invalid_parameter("line " + std::to_string(line) +
                            ": malformed number '" + token + "'");
  return value;
}

// Shortest decimal form that parses back to the same double.
inline std::string format_number(double x) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

}  // namespace detail

inline ScenarioConfig parse_scenario(std::istream& in) {
  ScenarioConfig cfg;
  cfg.crossing_order.clear();
  cfg.vehicles.clear();

  std::string section;
  std::string line;
  int lineno = 0;
  bool order_is_one_based = false;

  auto fail = [&](const std::string& what) -> void {
    throw invalid_parameter("line " + std::to_string(lineno) + ": " + what);
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.rfind("vehicle", 0) == 0) {
        const int id =
            detail::parse_number<int>(detail::trim(section.substr(7)), lineno);
        if (id != static_cast<int>(cfg.vehicles.size()) + 1)
          fail("vehicle sections must be numbered consecutively from 1");
        cfg.vehicles.emplace_back();
        section = "vehicle";
      } else if (section != "scenario" && section != "sqp" &&
                 section != "channel") {
        fail("unknown section '" + section + "'");
      }
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) fail("expected 'key = value'");
    auto num = [&]() -> double {
      return detail::parse_number<double>(value, lineno);
    };
    auto integer = [&]() -> int {
      return detail::parse_number<int>(value, lineno);
    };

    if (section == "scenario") {
      if (key == "name") cfg.name = value;
      else if (key == "sampling_time") cfg.sampling_time = num();
      else if (key == "horizon") cfg.horizon = integer();
      else if (key == "p_in") cfg.p_in = num();
      else if (key == "p_out") cfg.p_out = num();
      else if (key == "simulation_steps") cfg.simulation_steps = integer();
      else if (key == "noise_position") cfg.noise_position = num();
      else if (key == "noise_velocity") cfg.noise_velocity = num();
      else if (key == "noise_seed")
        cfg.noise_seed = detail::parse_number<std::uint64_t>(value, lineno);
      else if (key == "soft_penalty") cfg.soft_penalty = num();
      else if (key == "crossing_order") {
        std::istringstream toks(value);
        std::string tok;
        while (toks >> tok)
          cfg.crossing_order.push_back(detail::parse_number<int>(tok, lineno));
        order_is_one_based = true;
      } else fail("unknown scenario key '" + key + "'");
    } else if (section == "sqp") {
      if (key == "mode") {
        if (value == "projection") cfg.sqp.mode = CoordinationMode::projection;
        else if (value == "relaxation")
          cfg.sqp.mode = CoordinationMode::relaxation;
        else fail("mode must be 'projection' or 'relaxation'");
      }
      else if (key == "tolerance") cfg.sqp.tolerance = num();
      else if (key == "armijo") cfg.sqp.armijo = num();
      else if (key == "backtrack") cfg.sqp.backtrack = num();
      else if (key == "max_iterations") cfg.sqp.max_iterations = integer();
      else if (key == "max_linesearch") cfg.sqp.max_linesearch = integer();
      else if (key == "hessian_floor") cfg.sqp.hessian_floor = num();
      else if (key == "curvature_step") cfg.sqp.curvature_step = num();
      else if (key == "precedence_margin") cfg.sqp.precedence_margin = num();
      else if (key == "initial_margin") cfg.sqp.initial_margin = num();
      else if (key == "sigma_init") cfg.sqp.sigma_init = num();
      else fail("unknown sqp key '" + key + "'");
    } else if (section == "channel") {
      if (key == "drop_probability") cfg.channel.drop_probability = num();
      else if (key == "latency_base") cfg.channel.latency_base = integer();
      else if (key == "latency_jitter") cfg.channel.latency_jitter = integer();
      else if (key == "seed")
        cfg.channel.seed = detail::parse_number<std::uint64_t>(value, lineno);
      else if (key == "retransmit_timeout")
        cfg.channel.retransmit_timeout = integer();
      else if (key == "max_retransmissions")
        cfg.channel.max_retransmissions = integer();
      else fail("unknown channel key '" + key + "'");
    } else if (section == "vehicle") {
      ScenarioVehicle& v = cfg.vehicles.back();
      if (key == "Q") v.Q = num();
      else if (key == "R") v.R = num();
      else if (key == "v_desired") v.v_desired = num();
      else if (key == "p0") v.p0 = num();
      else if (key == "v0") v.v0 = num();
      else if (key == "u_min") v.u_min = num();
      else if (key == "u_max") v.u_max = num();
      else fail("unknown vehicle key '" + key + "'");
    } else {
      fail("key outside of any section");
    }
  }

  if (order_is_one_based)
    for (int& v : cfg.crossing_order) --v;
  cfg.validate();
  return cfg;
}

inline ScenarioConfig parse_scenario_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw invalid_parameter("cannot open scenario file: " + path);
  try {
    return parse_scenario(in);
  } catch (const invalid_parameter& e) {
    throw invalid_parameter(path + ": " + e.what());
  }
}

inline void serialize_scenario(const ScenarioConfig& cfg, std::ostream& os) {
  using detail::format_number;
  os << "# Intersection crossing scenario (times s, positions m, speeds m/s,"
        " accelerations m/s^2)\n\n";
  os << "[scenario]\n";
  os << "name = " << cfg.name << '\n';
  os << "sampling_time = " << format_number(cfg.sampling_time) << '\n';
  os << "horizon = " << cfg.horizon << '\n';
  os << "p_in = " << format_number(cfg.p_in) << '\n';
  os << "p_out = " << format_number(cfg.p_out) << '\n';
  os << "simulation_steps = " << cfg.simulation_steps << '\n';
  os << "crossing_order =";
  for (int v : cfg.crossing_order) os << ' ' << v + 1;  // 1-based on disk
  os << '\n';
  os << "noise_position = " << format_number(cfg.noise_position) << '\n';
  os << "noise_velocity = " << format_number(cfg.noise_velocity) << '\n';
  os << "noise_seed = " << cfg.noise_seed << '\n';
  os << "soft_penalty = " << format_number(cfg.soft_penalty)
     << "  # 0 = estimate\n";
  os << '\n';
  os << "[sqp]\n";
  os << "mode = " << to_string(cfg.sqp.mode) << '\n';
  os << "tolerance = " << format_number(cfg.sqp.tolerance) << '\n';
  os << "armijo = " << format_number(cfg.sqp.armijo) << '\n';
  os << "backtrack = " << format_number(cfg.sqp.backtrack) << '\n';
  os << "max_iterations = " << cfg.sqp.max_iterations << '\n';
  os << "max_linesearch = " << cfg.sqp.max_linesearch << '\n';
  os << "hessian_floor = " << format_number(cfg.sqp.hessian_floor) << '\n';
  os << "curvature_step = " << format_number(cfg.sqp.curvature_step) << '\n';
  os << "precedence_margin = " << format_number(cfg.sqp.precedence_margin)
     << '\n';
  os << "initial_margin = " << format_number(cfg.sqp.initial_margin) << '\n';
  os << "sigma_init = " << format_number(cfg.sqp.sigma_init) << '\n';
  os << '\n';
  os << "[channel]\n";
  os << "drop_probability = " << format_number(cfg.channel.drop_probability)
     << '\n';
  os << "latency_base = " << cfg.channel.latency_base << '\n';
  os << "latency_jitter = " << cfg.channel.latency_jitter << '\n';
  os << "seed = " << cfg.channel.seed << '\n';
  os << "retransmit_timeout = " << cfg.channel.retransmit_timeout << '\n';
  os << "max_retransmissions = " << cfg.channel.max_retransmissions << '\n';
  for (std::size_t i = 0; i < cfg.vehicles.size(); ++i) {
    const auto& v = cfg.vehicles[i];
    os << '\n' << "[vehicle " << i + 1 << "]\n";
    os << "Q = " << format_number(v.Q) << '\n';
    os << "R = " << format_number(v.R) << '\n';
    os << "v_desired = " << format_number(v.v_desired) << '\n';
    os << "p0 = " << format_number(v.p0) << '\n';
    os << "v0 = " << format_number(v.v0) << '\n';
    os << "u_min = " << format_number(v.u_min) << '\n';
    os << "u_max = " << format_number(v.u_max) << '\n';
  }
}

inline void write_scenario_file(const ScenarioConfig& cfg,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw invalid_parameter("cannot write scenario file: " + path);
  serialize_scenario(cfg, out);
}

// The seven stock six-vehicle fixtures: a shared fleet crossing an 8 m zone
// in seven different orders.  Desired speeds are 80/80/65/70/70/60 km/h,
// converted to m/s here; every vehicle starts at its desired speed.
inline std::vector<ScenarioConfig> builtin_scenarios() {
  const double kmh = 1.0 / 3.6;
  const std::vector<ScenarioVehicle> fleet = {
      {1.0, 1.0, 80.0 * kmh, -55.0, 80.0 * kmh, -2.0, 2.0},
      {1.0, 1.0, 80.0 * kmh, -60.0, 80.0 * kmh, -2.0, 2.0},
      {10.0, 1.0, 65.0 * kmh, -55.0, 65.0 * kmh, -2.0, 2.0},
      {10.0, 1.0, 70.0 * kmh, -70.0, 70.0 * kmh, -2.0, 2.0},
      {1.0, 1.0, 70.0 * kmh, -70.0, 70.0 * kmh, -2.0, 2.0},
      {1.0, 1.0, 60.0 * kmh, -60.0, 60.0 * kmh, -2.0, 2.0},
  };
  const std::vector<std::vector<int>> orders = {
      {0, 1, 5, 2, 3, 4}, {0, 1, 3, 2, 4, 5}, {1, 0, 2, 3, 4, 5},
      {0, 1, 4, 3, 2, 5}, {0, 1, 2, 3, 5, 4}, {1, 0, 2, 3, 5, 4},
      {1, 0, 2, 5, 3, 4},
  };

  std::vector<ScenarioConfig> all;
  all.reserve(orders.size());
  for (std::size_t k = 0; k < orders.size(); ++k) {
    ScenarioConfig cfg;
    cfg.name = "s" + std::to_string(k + 1);
    cfg.vehicles = fleet;
    cfg.crossing_order = orders[k];
    cfg.sqp.max_linesearch = 30;
    all.push_back(std::move(cfg));
  }
  return all;
}

inline ScenarioConfig builtin_scenario(const std::string& name) {
  for (auto& cfg : builtin_scenarios())
    if (cfg.name == name) return cfg;
  throw invalid_parameter("no builtin scenario named '" + name + "'");
}

}  // namespace crossway
