#pragma once

// Plain-text table formats. One header line, then one entry per line:
//
//   klq-policy 1 <S> <A>     s a prob log_prob
//   klq-q 1 <S> <A>          s a value
//   klq-v 1 <S>              s value
//
// Values are written with 17 significant digits and read back exactly.

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "klq/error.hpp"
#include "klq/tables.hpp"

namespace klq {

namespace detail {

inline std::pair<std::size_t, std::size_t> read_table_header(std::istream& is, const std::string& magic,
                                                             bool has_actions) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("empty table file");
  std::istringstream hs(line);
  std::string tag;
  int version = 0;
  std::size_t S = 0, A = 1;
  hs >> tag >> version >> S;
  if (has_actions) hs >> A;
  if (!hs || tag != magic || version != 1) throw ConfigError("expected header '" + magic + " 1'");
  if (S == 0 || A == 0) throw ConfigError("table has zero size");
  return {S, A};
}

inline double parse_real(const std::string& tok) {
  try {
    std::size_t used = 0;
    const double v = std::stod(tok, &used);
    if (used != tok.size()) throw ConfigError("bad number '" + tok + "'");
    return v;
  } catch (const std::invalid_argument&) {
    throw ConfigError("bad number '" + tok + "'");
  } catch (const std::out_of_range&) {
    // Denormal or underflowing magnitudes; strtod still returns the nearest value.
    return std::strtod(tok.c_str(), nullptr);
  }
}

// Reads `S*A` lines "s a v1 [v2]" and calls `sink(s, a, values)`.
template <typename Sink>
void read_entries(std::istream& is, std::size_t S, std::size_t A, bool has_action, std::size_t n_values,
                  Sink&& sink) {
  std::string line;
  std::size_t count = 0;
  std::vector<bool> seen(S * A, false);
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t s = 0, a = 0;
    ls >> s;
    if (has_action) ls >> a;
    std::vector<double> vals(n_values);
    for (auto& v : vals) {
      std::string tok;
      ls >> tok;
      if (!ls) throw ConfigError("truncated table line: " + line);
      v = parse_real(tok);
    }
    if (!ls || s >= S || a >= A) throw ConfigError("bad table line: " + line);
    if (seen[s * A + a]) throw ConfigError("duplicate table entry: " + line);
    seen[s * A + a] = true;
    sink(s, a, vals);
    ++count;
  }
  if (count != S * A) throw ConfigError("table has " + std::to_string(count) + " entries, expected " +
                                        std::to_string(S * A));
}

}  // namespace detail

inline void write_policy(std::ostream& os, const PolicyTable& pi) {
  os << "klq-policy 1 " << pi.num_states() << ' ' << pi.num_actions() << '\n' << std::setprecision(17);
  for (std::size_t s = 0; s < pi.num_states(); ++s)
    for (std::size_t a = 0; a < pi.num_actions(); ++a)
      os << s << ' ' << a << ' ' << pi.prob(s, a) << ' ' << pi.log_prob(s, a) << '\n';
}

inline PolicyTable read_policy(std::istream& is) {
  const auto [S, A] = detail::read_table_header(is, "klq-policy", true);
  Matrix p(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A));
  Matrix lp(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A));
  detail::read_entries(is, S, A, true, 2, [&](std::size_t s, std::size_t a, const std::vector<double>& v) {
    p(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = v[0];
    lp(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = v[1];
  });
  auto pi = PolicyTable::from_parts(std::move(p), std::move(lp));
  try {
    pi.check_valid(1e-9);
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
  return pi;
}

inline void write_q(std::ostream& os, const QTable& q) {
  os << "klq-q 1 " << q.num_states() << ' ' << q.num_actions() << '\n' << std::setprecision(17);
  for (std::size_t s = 0; s < q.num_states(); ++s)
    for (std::size_t a = 0; a < q.num_actions(); ++a) os << s << ' ' << a << ' ' << q(s, a) << '\n';
}

inline QTable read_q(std::istream& is) {
  const auto [S, A] = detail::read_table_header(is, "klq-q", true);
  QTable q = QTable::zeros(S, A);
  detail::read_entries(is, S, A, true, 1,
                       [&](std::size_t s, std::size_t a, const std::vector<double>& v) { q(s, a) = v[0]; });
  return q;
}

inline void write_v(std::ostream& os, const VTable& v) {
  os << "klq-v 1 " << v.num_states() << '\n' << std::setprecision(17);
  for (std::size_t s = 0; s < v.num_states(); ++s) os << s << ' ' << v(s) << '\n';
}

inline VTable read_v(std::istream& is) {
  const auto [S, A] = detail::read_table_header(is, "klq-v", false);
  (void)A;
  VTable v = VTable::zeros(S);
  detail::read_entries(is, S, 1, false, 1,
                       [&](std::size_t s, std::size_t, const std::vector<double>& x) { v(s) = x[0]; });
  return v;
}

template <typename T, typename Writer>
void save_table(const std::string& path, const T& table, Writer&& write) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write(os, table);
  if (!os) throw Error("write failed: " + path);
}

inline PolicyTable load_policy(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open policy file " + path);
  return read_policy(is);
}

inline VTable load_v(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open value file " + path);
  return read_v(is);
}

inline QTable load_q(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open Q file " + path);
  return read_q(is);
}

}  // namespace klq
