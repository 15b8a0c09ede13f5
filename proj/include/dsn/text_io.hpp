#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace dsn {

/// Line-oriented reader that tracks 1-based line numbers for ParseError.
class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  /// Next line without its terminator; false at end of input.
  bool next(std::string& line);
  /// Next line, or ParseError("unexpected end of file: expected <what>").
  std::string expect(std::string_view what);
  /// Put the last line back; the following next() returns it again.
  void unread();

  std::size_t line_number() const noexcept { return line_; }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  std::istream& in_;
  std::size_t line_ = 0;
  std::string last_;
  bool pushed_back_ = false;
};

/// Shortest decimal that parses back to the same double.
std::string format_double(double v);
void append_double(std::string& out, double v);

/// Strict parses; return false on trailing garbage or overflow.
bool parse_double(std::string_view s, double& out);
bool parse_size(std::string_view s, std::size_t& out);
bool parse_int(std::string_view s, long long& out);

std::vector<std::string_view> split(std::string_view s, char sep);
/// Split on runs of spaces/tabs, dropping empty fields.
std::vector<std::string_view> split_ws(std::string_view s);
std::string_view trim(std::string_view s);

}  // namespace dsn
