#pragma once

// CSV emitters for experiment records and standalone SVG charts.
//
// Every CSV starts with a schema line "# instxai <schema> v<N>" followed by
// the column header. Numbers are printed with 10 significant digits, so the
// same records always give the same bytes.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "instxai/experiments.hpp"

namespace instxai {

inline std::string num(double v) {
  if (v == 0) return "0";  // no negative zero
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline void schema_line(std::ostream& os, const std::string& schema, int version = 1) {
  os << "# instxai " << schema << " v" << version << '\n';
}

inline void write_loss_csv(std::ostream& os, const std::vector<double>& history) {
  schema_line(os, "loss-history");
  os << "epoch,loss\n";
  for (std::size_t i = 0; i < history.size(); ++i) os << i + 1 << ',' << num(history[i]) << '\n';
}

inline void write_extrema_rows_csv(std::ostream& os, const ExtremaTable& t) {
  schema_line(os, "extrema-rows");
  os << "volume,instance,category,modality,max,min,omega_median,omega_size\n";
  for (const auto& r : t.rows)
    os << r.volume << ',' << r.instance << ',' << to_string(r.category) << ',' << r.modality
       << ',' << num(r.max) << ',' << num(r.min) << ',' << num(r.omega_median) << ','
       << r.omega_size << '\n';
}

inline void write_extrema_summary_csv(std::ostream& os, const ExtremaTable& t) {
  schema_line(os, "extrema-summary");
  os << "category,modality,stat,count,median,ci_lo,ci_hi,empty\n";
  for (const auto& s : t.summary)
    os << to_string(s.category) << ',' << s.modality << ',' << s.stat << ',' << s.count << ','
       << num(s.ci.median) << ',' << num(s.ci.lo) << ',' << num(s.ci.hi) << ','
       << (s.empty ? 1 : 0) << '\n';
}

inline void write_extrema_tests_csv(std::ostream& os, const ExtremaTable& t) {
  schema_line(os, "extrema-tests");
  os << "a,b,modality,stat,u,p,exact,skipped\n";
  for (const auto& p : t.tests)
    os << to_string(p.a) << ',' << to_string(p.b) << ',' << p.modality << ',' << p.stat << ','
       << num(p.test.u) << ',' << num(p.test.p) << ',' << (p.test.exact ? 1 : 0) << ','
       << (p.skipped ? 1 : 0) << '\n';
}

inline void write_context_csv(std::ostream& os, const ContextCurve& c) {
  schema_line(os, "context-curve");
  os << "k,radius_mm,mean_score,sd_score,detected,lesions\n";
  for (const auto& p : c.points)
    os << p.k << ',' << num(p.radius_mm) << ',' << num(p.mean_score) << ',' << num(p.sd_score)
       << ',' << p.detected << ',' << p.lesions << '\n';
}

inline void write_context_lesions_csv(std::ostream& os, const ContextCurve& c) {
  schema_line(os, "context-lesions");
  os << "instance,k,score,detected\n";
  for (std::size_t l = 0; l < c.scores.size(); ++l)
    for (std::size_t k = 0; k < c.scores[l].size(); ++k)
      os << c.instance_ids[l] << ',' << k << ',' << num(c.scores[l][k]) << ','
         << (c.detections[l][k] ? 1 : 0) << '\n';
}

inline void write_relocation_csv(std::ostream& os, const std::vector<RelocationReport>& reps,
                                 int volume = 0) {
  schema_line(os, "relocation");
  os << "volume,instance,destination,margin_mm,placed,target_z,target_y,target_x,max_score,"
        "detected,peak,max_m0,min_m0,max_m1,min_m1,failure\n";
  for (const auto& r : reps)
    for (const auto& c : r.cases) {
      os << volume << ',' << r.instance << ',' << to_string(c.destination) << ','
         << num(c.margin_mm) << ',' << (c.placed ? 1 : 0) << ',' << c.target_centre[0] << ','
         << c.target_centre[1] << ',' << c.target_centre[2] << ',' << num(c.max_score) << ','
         << (c.detected ? 1 : 0) << ',' << num(c.peak);
      for (int m = 0; m < 2; ++m) {
        const bool have = std::size_t(m) < c.extrema.size();
        os << ',' << num(have ? c.extrema[std::size_t(m)].max : 0.0) << ','
           << num(have ? c.extrema[std::size_t(m)].min : 0.0);
      }
      std::string f = c.failure;
      std::replace(f.begin(), f.end(), ',', ';');
      os << ',' << f << '\n';
    }
}

// key,value records for small reports.
inline void write_kv_csv(std::ostream& os, const std::string& schema,
                         const std::vector<std::pair<std::string, std::string>>& items) {
  schema_line(os, schema);
  os << "key,value\n";
  for (const auto& [k, v] : items) os << k << ',' << v << '\n';
}

// ------------------------------------------------------------- reading

struct CsvTable {
  std::string schema;  // e.g. "context-curve"
  int version = 0;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    throw error("CSV has no column '" + name + "'");
  }
  std::vector<double> numbers(const std::string& name) const {
    const int c = column(name);
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(std::stod(r.at(std::size_t(c))));
    return v;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline CsvTable read_csv(std::istream& is) {
  CsvTable t;
  std::string line;
  if (!std::getline(is, line) || line.rfind("# instxai ", 0) != 0)
    throw error("CSV lacks the '# instxai <schema> v<N>' line");
  {
    std::istringstream ss(line.substr(10));
    std::string v;
    ss >> t.schema >> v;
    if (v.size() < 2 || v[0] != 'v') throw error("malformed CSV schema line: " + line);
    t.version = std::stoi(v.substr(1));
  }
  if (!std::getline(is, line)) throw error("CSV lacks a header row");
  t.header = split_csv_line(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split_csv_line(line));
    if (t.rows.back().size() != t.header.size())
      throw error("CSV row has " + std::to_string(t.rows.back().size()) + " fields, header has " +
                  std::to_string(t.header.size()));
  }
  return t;
}

// ------------------------------------------------------------------ SVG

namespace svg {

struct Series {
  std::string name;
  std::vector<double> x, y;
  std::vector<double> band;  // optional +- half-width around y
};

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline const char* colour(std::size_t i) {
  static const char* c[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  return c[i % 5];
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

inline void axes(std::ostream& os, const Frame& f, const std::string& title,
                 const std::string& xl, const std::string& yl) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::W << "\" height=\""
     << Frame::H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << Frame::W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
     << esc(title) << "</text>\n";
  os << "<line x1=\"" << Frame::L << "\" y1=\"" << Frame::H - Frame::B << "\" x2=\""
     << Frame::W - Frame::R << "\" y2=\"" << Frame::H - Frame::B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << Frame::L << "\" y1=\"" << Frame::T << "\" x2=\"" << Frame::L
     << "\" y2=\"" << Frame::H - Frame::B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << Frame::L - 6 << "\" y=\"" << f.py(yv) + 4
       << "\" text-anchor=\"end\">" << num(std::round(yv * 1000) / 1000) << "</text>\n";
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
    os << "<text x=\"" << f.px(xv) << "\" y=\"" << Frame::H - Frame::B + 16
       << "\" text-anchor=\"middle\">" << num(std::round(xv * 1000) / 1000) << "</text>\n";
  }
  os << "<text x=\"" << Frame::W / 2 << "\" y=\"" << Frame::H - 10
     << "\" text-anchor=\"middle\">" << esc(xl) << "</text>\n";
  os << "<text x=\"16\" y=\"" << Frame::H / 2 << "\" transform=\"rotate(-90 16 "
     << Frame::H / 2 << ")\" text-anchor=\"middle\">" << esc(yl) << "</text>\n";
}

inline Frame fit(double x0, double x1, double y0, double y1) {
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  return {x0, x1, y0 - pad, y1 + pad};
}

inline std::string line_chart(const std::string& title, const std::string& xl,
                              const std::string& yl, const std::vector<Series>& series) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double b = i < s.band.size() ? s.band[i] : 0.0;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - b);
      y1 = std::max(y1, s.y[i] + b);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  const Frame f = fit(x0, x1, y0, y1);
  std::ostringstream os;
  axes(os, f, title, xl, yl);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    if (!s.band.empty()) {
      os << "<polygon fill=\"" << colour(k) << "\" fill-opacity=\"0.2\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i)
        os << f.px(s.x[i]) << ',' << f.py(s.y[i] + s.band[i]) << ' ';
      for (std::size_t i = s.x.size(); i-- > 0;)
        os << f.px(s.x[i]) << ',' << f.py(s.y[i] - s.band[i]) << ' ';
      os << "\"/>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"" << colour(k) << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) os << f.px(s.x[i]) << ',' << f.py(s.y[i]) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << Frame::W - Frame::R - 4 << "\" y=\"" << Frame::T + 14 * (k + 1)
       << "\" text-anchor=\"end\" fill=\"" << colour(k) << "\">" << esc(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// Jittered points per group with a median tick.
inline std::string strip_chart(const std::string& title, const std::string& yl,
                               const std::vector<std::pair<std::string, std::vector<double>>>& groups) {
  double y0 = 1e300, y1 = -1e300;
  for (const auto& [n, v] : groups)
    for (double y : v) y0 = std::min(y0, y), y1 = std::max(y1, y);
  if (y0 > y1) y0 = 0, y1 = 1;
  const Frame f = fit(-0.5, double(groups.size()) - 0.5, y0, y1);
  std::ostringstream os;
  axes(os, f, title, "", yl);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& v = groups[g].second;
    for (std::size_t i = 0; i < v.size(); ++i) {
      // deterministic jitter
      const double j = (double((i * 7919) % 101) / 100.0 - 0.5) * 0.5;
      os << "<circle cx=\"" << f.px(double(g) + j) << "\" cy=\"" << f.py(v[i])
         << "\" r=\"2.5\" fill=\"" << colour(g) << "\" fill-opacity=\"0.6\"/>\n";
    }
    if (!v.empty()) {
      const double m = sample_median(v);
      os << "<line x1=\"" << f.px(double(g) - 0.35) << "\" x2=\"" << f.px(double(g) + 0.35)
         << "\" y1=\"" << f.py(m) << "\" y2=\"" << f.py(m) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    }
    os << "<text x=\"" << f.px(double(g)) << "\" y=\"" << Frame::H - Frame::B + 32
       << "\" text-anchor=\"middle\">" << esc(groups[g].first) << " (n=" << v.size()
       << ")</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace svg

// Chart for a CSV written by this library, chosen by its schema.
inline std::string render_svg(const CsvTable& t, int modality = 0) {
  if (t.schema == "context-curve") {
    svg::Series s{"mean score", t.numbers("radius_mm"), t.numbers("mean_score"),
                  t.numbers("sd_score")};
    const auto det = t.numbers("detected");
    const auto les = t.numbers("lesions");
    svg::Series d{"detected fraction", s.x, {}, {}};
    for (std::size_t i = 0; i < det.size(); ++i) d.y.push_back(les[i] > 0 ? det[i] / les[i] : 0);
    return svg::line_chart("Prediction score vs revealed context", "dilation radius (mm)",
                           "score", {s, d});
  }
  if (t.schema == "loss-history") {
    return svg::line_chart("Training loss", "epoch", "loss",
                           {{"loss", t.numbers("epoch"), t.numbers("loss"), {}}});
  }
  if (t.schema == "extrema-rows") {
    const int cc = t.column("category"), cm = t.column("modality"), cx = t.column("max");
    std::vector<std::pair<std::string, std::vector<double>>> groups;
    for (Category c : kCategories) groups.push_back({to_string(c), {}});
    for (const auto& r : t.rows) {
      if (std::stoi(r[std::size_t(cm)]) != modality) continue;
      const auto cat = parse_category(r[std::size_t(cc)]);
      groups[std::size_t(cat)].second.push_back(std::stod(r[std::size_t(cx)]));
    }
    return svg::strip_chart("Maximum saliency per category, modality " + std::to_string(modality),
                            "max saliency", groups);
  }
  throw error("no chart for CSV schema '" + t.schema + "'");
}

}  // namespace instxai
