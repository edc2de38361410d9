#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bflow/svg.hpp"

using namespace bflow;

namespace {

std::string slurp(const std::string& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t count(const std::string& s, const std::string& what) {
  std::size_t n = 0;
  for (auto pos = s.find(what); pos != std::string::npos; pos = s.find(what, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST(Svg, LinePlotHasOnePolylinePerSeriesAndEscapesText) {
  const auto p = (std::filesystem::temp_directory_path() / "bflow_line.svg").string();
  svg::line_plot(p, "a < b & c", "x", "y", {{"one", {0, 1, 2}, {1, 2, 3}, true}, {"two", {0, 1}, {0, NAN}}});
  const auto s = slurp(p);
  EXPECT_EQ(s.rfind("<svg", 0), 0u);
  EXPECT_NE(s.find("</svg>"), std::string::npos);
  EXPECT_EQ(count(s, "<polyline"), 2u);
  EXPECT_EQ(count(s, "<circle"), 3u);
  EXPECT_NE(s.find("a &lt; b &amp; c"), std::string::npos);
  EXPECT_EQ(s.find("nan"), std::string::npos);
  std::filesystem::remove(p);
}

TEST(Svg, HeatmapDrawsEveryFiniteCell) {
  const auto p = (std::filesystem::temp_directory_path() / "bflow_heat.svg").string();
  std::vector<double> v{0, 1, 2, 3, 4, NAN};
  svg::heatmap(p, "h", "x", "y", v, 3, 2, 0, 1, 0, 1);
  const auto s = slurp(p);
  EXPECT_EQ(count(s, "fill='rgb("), 5u);
  EXPECT_NE(s.find("rgb(0,0,255)"), std::string::npos);
  EXPECT_NE(s.find("rgb(255,0,0)"), std::string::npos);
  std::filesystem::remove(p);
}

TEST(Svg, ShapeErrors) {
  EXPECT_THROW(svg::line_plot("/tmp/x.svg", "", "", "", {{"bad", {0, 1}, {0}}}), ShapeError);
  EXPECT_THROW(svg::heatmap("/tmp/x.svg", "", "", "", std::vector<double>(5), 3, 2, 0, 1, 0, 1), ShapeError);
}
