#include "efm/core.hpp"

#include <array>
#include <charconv>
#include <istream>
#include <ostream>

namespace efm {

namespace {

constexpr std::array<std::string_view, 9> kFieldNames = {
    "observe_time_ns", "direction", "seq", "size_bytes", "spin",
    "l",               "q",         "r",   "t"};

template <typename Int>
Int parse_int(std::string_view text, std::size_t line_no, std::size_t field) {
  Int value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (text.empty() || ec != std::errc() || ptr != last) {
    throw ParseError(line_no, std::string(kFieldNames[field]),
                     "invalid integer '" + std::string(text) + "'");
  }
  return value;
}

bool parse_bit(std::string_view text, std::size_t line_no, std::size_t field) {
  if (text == "0") return false;
  if (text == "1") return true;
  throw ParseError(line_no, std::string(kFieldNames[field]),
                   "expected 0 or 1, got '" + std::string(text) + "'");
}

template <class Int>
void append_int(std::string& out, Int v) {
  char buf[24];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

}  // namespace

std::string_view to_string(Direction d) {
  return d == Direction::ClientToServer ? "C2S" : "S2C";
}

ParseError::ParseError(std::size_t line, std::string field,
                       const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ", field '" + field +
                         "': " + what),
      line_(line),
      field_(std::move(field)) {}

std::string encode_record(const TraceRecord& rec) {
  const auto& h = rec.header;
  std::string out;
  out.reserve(48);
  append_int(out, rec.observe_time.count());
  out += ',';
  out += to_string(rec.direction);
  out += ',';
  append_int(out, h.seq);
  out += ',';
  append_int(out, h.size_bytes);
  for (bool bit : {h.spin, h.l, h.q, h.r, h.t}) {
    out += ',';
    out += bit ? '1' : '0';
  }
  return out;
}

TraceRecord decode_record(std::string_view line, std::size_t line_no) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

  std::array<std::string_view, kFieldNames.size()> fields;
  std::size_t n = 0;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    const std::string_view piece = line.substr(
        start, comma == std::string_view::npos ? std::string_view::npos
                                               : comma - start);
    if (n == fields.size()) {
      throw ParseError(line_no, "t", "too many fields");
    }
    fields[n++] = piece;
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (n != fields.size()) {
    throw ParseError(line_no, std::string(kFieldNames[n]), "missing field");
  }

  TraceRecord rec;
  rec.observe_time = Nanos(parse_int<std::int64_t>(fields[0], line_no, 0));
  if (rec.observe_time.count() < 0) {
    throw ParseError(line_no, "observe_time_ns", "negative time");
  }
  if (fields[1] == "C2S") {
    rec.direction = Direction::ClientToServer;
  } else if (fields[1] == "S2C") {
    rec.direction = Direction::ServerToClient;
  } else {
    throw ParseError(line_no, "direction",
                     "expected C2S or S2C, got '" + std::string(fields[1]) + "'");
  }
  rec.header.seq = parse_int<std::uint64_t>(fields[2], line_no, 2);
  rec.header.size_bytes = parse_int<std::uint32_t>(fields[3], line_no, 3);
  rec.header.spin = parse_bit(fields[4], line_no, 4);
  rec.header.l = parse_bit(fields[5], line_no, 5);
  rec.header.q = parse_bit(fields[6], line_no, 6);
  rec.header.r = parse_bit(fields[7], line_no, 7);
  rec.header.t = parse_bit(fields[8], line_no, 8);
  return rec;
}

TraceWriter::TraceWriter(std::ostream& out) : out_(out) {
  out_ << kTraceHeader << '\n';
}

void TraceWriter::write(const TraceRecord& rec) {
  if (rec.observe_time < last_time_) {
    throw std::logic_error("trace records must be appended in time order");
  }
  last_time_ = rec.observe_time;
  out_ << encode_record(rec) << '\n';
  ++count_;
}

void read_trace(std::istream& in,
                const std::function<void(const TraceRecord&)>& sink) {
  std::string line;
  std::size_t line_no = 0;
  bool seen_header = false;
  Nanos last_time{0};
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!seen_header) {
      if (line != kTraceHeader) {
        throw ParseError(line_no, "header", "unexpected trace header '" + line + "'");
      }
      seen_header = true;
      continue;
    }
    TraceRecord rec = decode_record(line, line_no);
    if (rec.observe_time < last_time) {
      throw ParseError(line_no, "observe_time_ns", "time goes backwards");
    }
    last_time = rec.observe_time;
    sink(rec);
  }
}

std::vector<TraceRecord> read_trace(std::istream& in) {
  std::vector<TraceRecord> out;
  read_trace(in, [&](const TraceRecord& r) { out.push_back(r); });
  return out;
}

}  // namespace efm
