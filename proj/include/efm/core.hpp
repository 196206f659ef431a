#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace efm {

/// Simulation and trace time base. Integer nanoseconds since run start.
using Nanos = std::chrono::nanoseconds;

inline constexpr std::uint32_t kDefaultPacketSize = 1250;

enum class Direction : std::uint8_t { ClientToServer, ServerToClient };

inline constexpr Direction opposite(Direction d) {
  return d == Direction::ClientToServer ? Direction::ServerToClient
                                        : Direction::ClientToServer;
}

/// "C2S" / "S2C", the spelling used in trace files and CSV outputs.
std::string_view to_string(Direction d);

/// The observable measurement bits of one packet plus the simulator-internal
/// per-direction sequence number and size.
struct MarkedHeader {
  bool spin = false;
  bool l = false;
  bool q = false;
  bool r = false;
  bool t = false;
  std::uint64_t seq = 0;
  std::uint32_t size_bytes = kDefaultPacketSize;

  friend bool operator==(const MarkedHeader&, const MarkedHeader&) = default;
};

struct TraceRecord {
  Nanos observe_time{0};
  Direction direction = Direction::ClientToServer;
  MarkedHeader header;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

inline constexpr std::string_view kTraceHeader =
    "observe_time_ns,direction,seq,size_bytes,spin,l,q,r,t";

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, std::string field, const std::string& what);

  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

/// One record as a single line without a trailing newline, e.g.
/// "0,C2S,0,1250,0,0,0,0,0".
std::string encode_record(const TraceRecord& rec);

/// Inverse of encode_record. `line_no` is only used in error messages.
TraceRecord decode_record(std::string_view line, std::size_t line_no = 0);

/// Streams records to a trace file. Writes the column header on construction
/// and rejects records whose observe_time goes backwards.
class TraceWriter {
 public:
  explicit TraceWriter(std::ostream& out);

  void write(const TraceRecord& rec);
  std::size_t records_written() const { return count_; }

 private:
  std::ostream& out_;
  Nanos last_time_{0};
  std::size_t count_ = 0;
};

/// Reads a trace file record by record. The header line is required; blank
/// lines are skipped. Throws ParseError on malformed lines or on observe_time
/// going backwards.
void read_trace(std::istream& in,
                const std::function<void(const TraceRecord&)>& sink);

std::vector<TraceRecord> read_trace(std::istream& in);

}  // namespace efm
