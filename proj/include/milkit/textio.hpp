#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "milkit/error.hpp"

namespace milkit {

/// Locale-independent decimal with 17 significant digits (round-trips any double).
inline std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::general, 17);
  if (ec != std::errc()) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, ptr);
}

inline double parse_double(std::string_view text) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) text.remove_suffix(1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw FormatError("cannot parse number '" + std::string(text) + "'");
  }
  return value;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

/// Rows of comma-separated numbers, one row per line, 17 significant digits.
inline std::string format_csv(const std::vector<double>& values, std::size_t cols) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out += format_double(values[i]);
    out += ((i + 1) % cols == 0) ? '\n' : ',';
  }
  return out;
}

struct CsvTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

inline CsvTable parse_csv(std::string_view text) {
  CsvTable table;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    std::size_t count = 0;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      table.values.push_back(parse_double(line.substr(start, comma - start)));
      ++count;
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (table.rows == 0) table.cols = count;
    if (count != table.cols) throw FormatError("csv: ragged row " + std::to_string(table.rows + 1));
    ++table.rows;
  }
  return table;
}

/// Raw contents of an ASCII ("P2") greymap.
struct Greymap {
  std::size_t width = 0;
  std::size_t height = 0;
  int maxval = 255;
  std::vector<int> pixels;
};

inline std::string format_pgm(const Greymap& map) {
  std::string out = "P2\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n" +
                    std::to_string(map.maxval) + "\n";
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      if (c) out += ' ';
      out += std::to_string(map.pixels[r * map.width + c]);
    }
    out += '\n';
  }
  return out;
}

inline Greymap parse_pgm(std::string_view text) {
  // Tokenise, dropping '#' comments.
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    const char ch = text[i];
    if (ch == '#') {
      while (i < text.size() && text[i] != '\n') ++i;
    } else if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      ++i;
    } else {
      const std::size_t start = i;
      while (i < text.size() && text[i] != ' ' && text[i] != '\t' && text[i] != '\n' && text[i] != '\r' &&
             text[i] != '#')
        ++i;
      tokens.push_back(text.substr(start, i - start));
    }
  }
  auto to_int = [](std::string_view tok) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || v < 0) {
      throw FormatError("pgm: bad integer '" + std::string(tok) + "'");
    }
    return v;
  };
  if (tokens.size() < 4 || tokens[0] != "P2") throw FormatError("pgm: expected ASCII 'P2' header");
  Greymap map;
  map.width = static_cast<std::size_t>(to_int(tokens[1]));
  map.height = static_cast<std::size_t>(to_int(tokens[2]));
  map.maxval = static_cast<int>(to_int(tokens[3]));
  if (map.width == 0 || map.height == 0) throw FormatError("pgm: empty image");
  if (map.maxval != 255) throw FormatError("pgm: only maxval 255 is supported");
  if (tokens.size() != 4 + map.width * map.height) {
    throw FormatError("pgm: expected " + std::to_string(map.width * map.height) + " pixels, found " +
                      std::to_string(tokens.size() - 4));
  }
  map.pixels.reserve(map.width * map.height);
  for (std::size_t t = 4; t < tokens.size(); ++t) {
    const auto v = to_int(tokens[t]);
    if (v > map.maxval) throw FormatError("pgm: pixel exceeds maxval");
    map.pixels.push_back(static_cast<int>(v));
  }
  return map;
}

}  // namespace milkit
