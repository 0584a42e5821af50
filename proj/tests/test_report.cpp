#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace instxai;

TEST(Num, Formatting) {
  EXPECT_EQ(num(0.0), "0");
  EXPECT_EQ(num(-0.0), "0");
  EXPECT_EQ(num(1.5), "1.5");
  EXPECT_EQ(num(1.0 / 3.0), "0.3333333333");
  EXPECT_EQ(num(-2e-12), "-2e-12");
}

TEST(Csv, ContextRoundTrip) {
  ContextCurve c;
  for (int k = 0; k < 3; ++k) {
    ContextPoint p;
    p.k = k;
    p.radius_mm = k;
    p.mean_score = 0.1 * k;
    p.sd_score = 0.01;
    p.detected = k;
    p.lesions = 2;
    c.points.push_back(p);
  }
  std::ostringstream os;
  write_context_csv(os, c);
  std::istringstream is(os.str());
  const CsvTable t = read_csv(is);
  EXPECT_EQ(t.schema, "context-curve");
  EXPECT_EQ(t.version, 1);
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.numbers("mean_score"), (std::vector<double>{0, 0.1, 0.2}));
  EXPECT_THROW(t.column("nope"), error);
  const std::string svg = render_svg(t);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(Csv, MalformedInput) {
  std::istringstream a("k,v\n1,2\n");
  EXPECT_THROW(read_csv(a), error);
  std::istringstream b("# instxai x v1\na,b\n1\n");
  EXPECT_THROW(read_csv(b), error);
  std::istringstream c("# instxai unknown v1\na\n1\n");
  EXPECT_THROW(render_svg(read_csv(c)), error);
}

TEST(Csv, LossAndExtremaCharts) {
  std::ostringstream os;
  write_loss_csv(os, {1.0, 0.5, 0.25});
  std::istringstream is(os.str());
  EXPECT_NE(render_svg(read_csv(is)).find("Training loss"), std::string::npos);

  ExtremaTable et;
  ExtremaRow r;
  r.category = Category::TP;
  r.max = 0.3;
  et.rows.push_back(r);
  r.category = Category::TN;
  r.max = 0.01;
  et.rows.push_back(r);
  std::ostringstream o2;
  write_extrema_rows_csv(o2, et);
  std::istringstream i2(o2.str());
  const CsvTable t = read_csv(i2);
  EXPECT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][2], "TP");
  EXPECT_NE(render_svg(t).find("<svg"), std::string::npos);
}

TEST(Csv, KeyValueBytesStable) {
  std::ostringstream a, b;
  write_kv_csv(a, "sanity", {{"x", num(0.1)}, {"y", "2"}});
  write_kv_csv(b, "sanity", {{"x", num(0.1)}, {"y", "2"}});
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str(), "# instxai sanity v1\nkey,value\nx,0.1\ny,2\n");
}
