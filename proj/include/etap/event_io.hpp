#pragma once

// EVT1 binary layout (little-endian):
//   header  : "EVT1" | u32 width | u32 height | u64 count
//   records : u64 t_us | f32 x | f32 y | i8 polarity | 7 pad bytes   (24 bytes)

#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include "etap/event_core.hpp"
#include "etap/io.hpp"

namespace etap {

inline constexpr std::size_t kEvt1HeaderBytes = 20;
inline constexpr std::size_t kEvt1RecordBytes = 24;

inline std::string encode_evt1(const EventStream& stream) {
  std::string out;
  out.reserve(kEvt1HeaderBytes + kEvt1RecordBytes * stream.size());
  out.append("EVT1", 4);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(stream.geometry().width));
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(stream.geometry().height));
  io::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(stream.size()));
  for (const Event& e : stream.events()) {
    io::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e.t_us));
    io::put_le<float>(out, e.x);
    io::put_le<float>(out, e.y);
    io::put_le<std::int8_t>(out, e.polarity);
    out.append(7, '\0');
  }
  return out;
}

inline EventStream decode_evt1(std::string_view data) {
  if (data.size() < kEvt1HeaderBytes || data.substr(0, 4) != "EVT1") {
    fail(ErrorCode::Format, "missing EVT1 magic");
  }
  const auto w = io::get_le<std::uint32_t>(data, 4);
  const auto h = io::get_le<std::uint32_t>(data, 8);
  const auto count = io::get_le<std::uint64_t>(data, 12);
  if (data.size() != kEvt1HeaderBytes + count * kEvt1RecordBytes) {
    fail(ErrorCode::Format, "EVT1 size does not match event count " + std::to_string(count));
  }
  std::vector<Event> events;
  events.reserve(count);
  std::size_t off = kEvt1HeaderBytes;
  for (std::uint64_t i = 0; i < count; ++i, off += kEvt1RecordBytes) {
    Event e;
    e.t_us = static_cast<std::int64_t>(io::get_le<std::uint64_t>(data, off));
    e.x = io::get_le<float>(data, off + 8);
    e.y = io::get_le<float>(data, off + 12);
    e.polarity = io::get_le<std::int8_t>(data, off + 16);
    events.push_back(e);
  }
  return EventStream(Geometry{static_cast<int>(w), static_cast<int>(h)}, std::move(events));
}

inline void write_evt1(const std::filesystem::path& path, const EventStream& stream) {
  io::write_atomic(path, encode_evt1(stream));
}

inline EventStream read_evt1(const std::filesystem::path& path) {
  return decode_evt1(io::read_text(path));
}

/// CSV interchange with header `t_us,x,y,p`. Geometry is not stored in CSV.
inline std::string encode_events_csv(const EventStream& stream) {
  std::string out = "t_us,x,y,p\n";
  for (const Event& e : stream.events()) {
    out += std::to_string(e.t_us) + "," + io::format_double(e.x) + "," + io::format_double(e.y) +
           "," + std::to_string(static_cast<int>(e.polarity)) + "\n";
  }
  return out;
}

inline EventStream decode_events_csv(std::string_view text, Geometry geometry) {
  const io::CsvTable table = io::parse_csv(text);
  const std::size_t ct = table.column("t_us"), cx = table.column("x"), cy = table.column("y"),
                    cp = table.column("p");
  std::vector<Event> events;
  events.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    events.push_back(Event{static_cast<float>(io::to_double(row[cx])),
                           static_cast<float>(io::to_double(row[cy])), io::to_int(row[ct]),
                           static_cast<std::int8_t>(io::to_int(row[cp]))});
  }
  return EventStream(geometry, std::move(events));
}

}  // namespace etap
