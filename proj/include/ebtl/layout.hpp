#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "ebtl/common.hpp"

namespace ebtl::envs {

enum class Dir : int { N = 0, E = 1, S = 2, W = 3 };

// Plain-text map, one character per cell.
//
// Legend:
//   '#'  wall (gridworld) / counter (overcooked)
//   '.'  walkable floor
//   '+'  door cell (gridworld only)
//   'O'  onion dispenser      'T'  tomato dispenser   'F' fish dispenser
//   'D'  dish dispenser       'P'  pot                'S' serving station
//
// Station characters pin a station to a cell; counters without a code stay
// plain and are eligible for randomized station placement at reset.
struct TextLayout {
  int width = 0;
  int height = 0;
  std::vector<char> cells;  // row-major

  char at(int x, int y) const { return cells[static_cast<std::size_t>(y) * width + x]; }
  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
};

inline TextLayout parse_layout(const std::string& text) {
  static const std::string legend = "#.+OTFDPS";
  TextLayout out;
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      if (!cur.empty()) lines.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  EBTL_REQUIRE(!lines.empty(), "parse_layout: empty map");
  out.height = static_cast<int>(lines.size());
  out.width = static_cast<int>(lines[0].size());
  for (const auto& line : lines) {
    EBTL_REQUIRE(static_cast<int>(line.size()) == out.width,
                 "parse_layout: ragged map; expected width ", out.width, ", got ", line.size());
    for (char c : line) {
      EBTL_REQUIRE(legend.find(c) != std::string::npos, "parse_layout: unknown cell character '",
                   std::string(1, c), "'");
      out.cells.push_back(c);
    }
  }
  return out;
}

inline TextLayout load_layout_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_layout_file: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_layout(text);
}

}  // namespace ebtl::envs
