#pragma once

// CSV ingestion of long-format longitudinal data, plain CSV tables with
// round-trippable numbers, and a minimal SVG band plot.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gplsim/errors.hpp"
#include "gplsim/model.hpp"

namespace gplsim::io {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    else if (c == ',' && !quoted) {
      out.push_back(trim(cur));
      cur.clear();
    } else cur += c;
  }
  out.push_back(trim(cur));
  return out;
}

/// Shortest text that parses back to the identical double.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, std::size_t line, const std::string& path) {
  const std::string t = trim(s);
  if (t == "inf" || t == "Inf") return std::numeric_limits<double>::infinity();
  if (t == "-inf" || t == "-Inf") return -std::numeric_limits<double>::infinity();
  if (t == "nan" || t == "NaN" || t == "NA") return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ParseError(path + ":" + std::to_string(line) + ": cannot parse '" + t + "' as a number");
  }
}

struct IngestOptions {
  bool standardize = false;
};

/// Reads `subject_id,visit,y,x1..xp,z1..zq`. Rows are grouped by subject in
/// order of first appearance and sorted by visit within a subject. With
/// `standardize`, every x/z column with more than two distinct values is
/// centered and scaled to unit sample standard deviation.
inline LongitudinalDataset ingest_csv(const std::string& path, const IngestOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) {
      header = split_csv_line(line);
      break;
    }
  }
  if (header.empty()) throw SchemaError(path + ": missing header");
  if (!header[0].empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0] = header[0].substr(3);

  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (col.count(header[c])) throw SchemaError(path + ": duplicate column '" + header[c] + "'");
    col[header[c]] = c;
  }
  std::vector<std::string> missing;
  for (const char* need : {"subject_id", "visit", "y"})
    if (!col.count(need)) missing.push_back(need);
  const std::regex xre("x([0-9]+)"), zre("z([0-9]+)");
  std::set<int> xs, zs;
  for (const auto& h : header) {
    std::smatch m;
    if (std::regex_match(h, m, xre)) xs.insert(std::stoi(m[1]));
    else if (std::regex_match(h, m, zre)) zs.insert(std::stoi(m[1]));
  }
  const int p = xs.empty() ? 0 : *xs.rbegin();
  const int q = zs.empty() ? 0 : *zs.rbegin();
  for (int k = 1; k <= p; ++k)
    if (!xs.count(k)) missing.push_back("x" + std::to_string(k));
  if (q == 0) missing.push_back("z1");
  for (int k = 1; k <= q; ++k)
    if (!zs.count(k)) missing.push_back("z" + std::to_string(k));
  if (!missing.empty()) {
    std::string msg = path + ": missing column(s):";
    for (const auto& m : missing) msg += " " + m;
    throw SchemaError(msg);
  }

  struct Row {
    double visit;
    double y;
    std::vector<double> x, z;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Row>> rows;
  std::map<std::string, std::set<double>> seen_visits;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                       " fields, found " + std::to_string(f.size()));
    const std::string id = f[col["subject_id"]];
    if (id.empty()) throw ParseError(path + ":" + std::to_string(lineno) + ": empty subject_id");
    Row r;
    r.visit = parse_double(f[col["visit"]], lineno, path);
    r.y = parse_double(f[col["y"]], lineno, path);
    for (int k = 1; k <= p; ++k) r.x.push_back(parse_double(f[col["x" + std::to_string(k)]], lineno, path));
    for (int k = 1; k <= q; ++k) r.z.push_back(parse_double(f[col["z" + std::to_string(k)]], lineno, path));
    auto check = [&](double v, const char* what) {
      if (!std::isfinite(v))
        throw ParseError(path + ":" + std::to_string(lineno) + ": non-finite " + what);
    };
    check(r.visit, "visit");
    check(r.y, "y");
    for (double v : r.x) check(v, "x value");
    for (double v : r.z) check(v, "z value");
    if (!seen_visits[id].insert(r.visit).second)
      throw DuplicateVisit(path + ":" + std::to_string(lineno) + ": subject '" + id + "' repeats visit " +
                           trim(f[col["visit"]]));
    if (!rows.count(id)) order.push_back(id);
    rows[id].push_back(std::move(r));
  }

  std::vector<SubjectBlock> subjects;
  for (const auto& id : order) {
    auto& rs = rows[id];
    std::stable_sort(rs.begin(), rs.end(), [](const Row& a, const Row& b) { return a.visit < b.visit; });
    SubjectBlock s;
    s.id = id;
    const auto m = static_cast<Eigen::Index>(rs.size());
    s.y.resize(m);
    s.X.resize(m, p);
    s.Z.resize(m, q);
    for (Eigen::Index j = 0; j < m; ++j) {
      s.y(j) = rs[j].y;
      for (int k = 0; k < p; ++k) s.X(j, k) = rs[j].x[k];
      for (int k = 0; k < q; ++k) s.Z(j, k) = rs[j].z[k];
    }
    subjects.push_back(std::move(s));
  }

  if (opt.standardize) {
    auto standardize = [&](bool is_x, int k) {
      std::set<double> distinct;
      double sum = 0.0, N = 0.0;
      for (const auto& s : subjects) {
        const auto& M = is_x ? s.X : s.Z;
        for (Eigen::Index j = 0; j < M.rows(); ++j) {
          distinct.insert(M(j, k));
          sum += M(j, k);
          N += 1.0;
        }
      }
      if (distinct.size() <= 2) return;
      const double mean = sum / N;
      double ss = 0.0;
      for (const auto& s : subjects) {
        const auto& M = is_x ? s.X : s.Z;
        for (Eigen::Index j = 0; j < M.rows(); ++j) ss += (M(j, k) - mean) * (M(j, k) - mean);
      }
      const double sd = std::sqrt(ss / (N - 1.0));
      for (auto& s : subjects) {
        auto& M = is_x ? s.X : s.Z;
        M.col(k) = (M.col(k).array() - mean) / sd;
      }
    };
    for (int k = 0; k < p; ++k) standardize(true, k);
    for (int k = 0; k < q; ++k) standardize(false, k);
  }
  return LongitudinalDataset(std::move(subjects), p, q);
}

/// Writes the dataset back in the ingestion layout (visits numbered 1..m_i).
inline void write_dataset_csv(const std::string& path, const LongitudinalDataset& data) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << "subject_id,visit,y";
  for (Eigen::Index k = 1; k <= data.p(); ++k) out << ",x" << k;
  for (Eigen::Index k = 1; k <= data.q(); ++k) out << ",z" << k;
  out << "\n";
  for (const auto& s : data.subjects())
    for (Eigen::Index j = 0; j < s.size(); ++j) {
      out << s.id << "," << (j + 1) << "," << fmt(s.y(j));
      for (Eigen::Index k = 0; k < data.p(); ++k) out << "," << fmt(s.X(j, k));
      for (Eigen::Index k = 0; k < data.q(); ++k) out << "," << fmt(s.Z(j, k));
      out << "\n";
    }
}

/// A small string table with a header row.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return c;
    throw SchemaError("table has no column '" + name + "'");
  }
};

inline void write_table(const std::string& path, const Table& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  auto emit = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "," : "") << r[c];
    out << "\n";
  };
  emit(t.header);
  for (const auto& r : t.rows) emit(r);
}

inline Table read_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  Table t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(f);
      continue;
    }
    if (f.size() != t.header.size())
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                       " fields");
    t.rows.push_back(std::move(f));
  }
  if (t.header.empty()) throw SchemaError(path + ": missing header");
  return t;
}

inline std::vector<double> numeric_column(const Table& t, const std::string& name, const std::string& path = "") {
  const std::size_t c = t.column(name);
  std::vector<double> v;
  for (std::size_t r = 0; r < t.rows.size(); ++r) v.push_back(parse_double(t.rows[r][c], r + 2, path));
  return v;
}

struct SvgBand {
  std::vector<double> x, center, lo, hi;
  double sup_radius = -1.0;  // < 0: no simultaneous band
  std::string title;
  std::string xlabel = "rescaled index";
  std::string ylabel = "eta";
};

struct SvgCurve {
  std::string label;
  std::vector<double> x, y;
};

namespace detail {

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 420, L = 60, R = 20, T = 40, B = 50;
  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline void axes(std::ostringstream& o, const Frame& f, const std::string& title, const std::string& xl,
                 const std::string& yl) {
  o << "<rect x=\"0\" y=\"0\" width=\"640\" height=\"420\" fill=\"white\"/>\n";
  o << "<line x1=\"" << num(f.L) << "\" y1=\"" << num(f.H - f.B) << "\" x2=\"" << num(f.W - f.R) << "\" y2=\""
    << num(f.H - f.B) << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << num(f.L) << "\" y1=\"" << num(f.T) << "\" x2=\"" << num(f.L) << "\" y2=\"" << num(f.H - f.B)
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.x0 + k * (f.x1 - f.x0) / 4.0;
    const double yv = f.y0 + k * (f.y1 - f.y0) / 4.0;
    o << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << num(f.H - f.B + 18)
      << "\" font-size=\"11\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
    o << "<text x=\"" << num(f.L - 6) << "\" y=\"" << num(f.py(yv) + 4)
      << "\" font-size=\"11\" text-anchor=\"end\">" << num(yv) << "</text>\n";
  }
  o << "<text x=\"320\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">" << escape(title) << "</text>\n";
  o << "<text x=\"" << num((f.L + f.W - f.R) / 2) << "\" y=\"" << num(f.H - 10)
    << "\" font-size=\"12\" text-anchor=\"middle\">" << escape(xl) << "</text>\n";
  o << "<text x=\"16\" y=\"" << num((f.T + f.H - f.B) / 2) << "\" font-size=\"12\" text-anchor=\"middle\" "
    << "transform=\"rotate(-90 16 " << num((f.T + f.H - f.B) / 2) << ")\">" << escape(yl) << "</text>\n";
}

inline std::string polyline(const Frame& f, const std::vector<double>& x, const std::vector<double>& y) {
  std::string pts;
  for (std::size_t i = 0; i < x.size(); ++i) pts += (i ? " " : "") + num(f.px(x[i])) + "," + num(f.py(y[i]));
  return pts;
}

}  // namespace detail

/// Pointwise band polygon, fitted curve, and dashed simultaneous band.
inline std::string band_svg(const SvgBand& b) {
  double y0 = *std::min_element(b.lo.begin(), b.lo.end());
  double y1 = *std::max_element(b.hi.begin(), b.hi.end());
  for (std::size_t i = 0; i < b.center.size(); ++i) {
    y0 = std::min(y0, b.center[i] - std::max(b.sup_radius, 0.0));
    y1 = std::max(y1, b.center[i] + std::max(b.sup_radius, 0.0));
  }
  const double pad = 0.05 * std::max(y1 - y0, 1e-9);
  const detail::Frame f{b.x.front(), b.x.back(), y0 - pad, y1 + pad};
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" viewBox=\"0 0 640 420\">\n";
  detail::axes(o, f, b.title, b.xlabel, b.ylabel);
  std::vector<double> rx(b.x.rbegin(), b.x.rend()), rlo(b.lo.rbegin(), b.lo.rend());
  std::vector<double> px = b.x, py = b.hi;
  px.insert(px.end(), rx.begin(), rx.end());
  py.insert(py.end(), rlo.begin(), rlo.end());
  o << "<polygon points=\"" << detail::polyline(f, px, py) << "\" fill=\"#9ecae1\" fill-opacity=\"0.6\" stroke=\"none\"/>\n";
  if (b.sup_radius >= 0.0) {
    std::vector<double> up, dn;
    for (double c : b.center) {
      up.push_back(c + b.sup_radius);
      dn.push_back(c - b.sup_radius);
    }
    for (const auto* v : {&up, &dn})
      o << "<polyline points=\"" << detail::polyline(f, b.x, *v)
        << "\" fill=\"none\" stroke=\"#3182bd\" stroke-dasharray=\"6,4\"/>\n";
  }
  o << "<polyline points=\"" << detail::polyline(f, b.x, b.center) << "\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>\n";
  o << "</svg>\n";
  return o.str();
}

inline std::string curves_svg(const std::vector<SvgCurve>& curves, const std::string& title) {
  static const char* colors[] = {"#000000", "#e6550d", "#3182bd", "#31a354", "#756bb1"};
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& c : curves) {
    x0 = std::min(x0, *std::min_element(c.x.begin(), c.x.end()));
    x1 = std::max(x1, *std::max_element(c.x.begin(), c.x.end()));
    y0 = std::min(y0, *std::min_element(c.y.begin(), c.y.end()));
    y1 = std::max(y1, *std::max_element(c.y.begin(), c.y.end()));
  }
  const double pad = 0.05 * std::max(y1 - y0, 1e-9);
  const detail::Frame f{x0, x1, y0 - pad, y1 + pad};
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" viewBox=\"0 0 640 420\">\n";
  detail::axes(o, f, title, "rescaled index", "eta (centered)");
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const char* col = colors[k % 5];
    o << "<polyline points=\"" << detail::polyline(f, curves[k].x, curves[k].y) << "\" fill=\"none\" stroke=\"" << col
      << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << detail::num(f.W - f.R - 120) << "\" y=\"" << detail::num(f.T + 16 * (k + 1))
      << "\" font-size=\"12\" fill=\"" << col << "\">" << detail::escape(curves[k].label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

}  // namespace gplsim::io
