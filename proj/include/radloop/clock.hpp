#pragma once

#include <chrono>
#include <functional>
#include <string>

namespace radloop {

using TimePoint = std::chrono::system_clock::time_point;

/// Source of "now". Stores and the registry take one so simulations can run
/// on logical time and stay byte-reproducible.
using Clock = std::function<TimePoint()>;

Clock system_clock();

/// Clock that advances by `step` on every call, starting at `origin`.
Clock logical_clock(TimePoint origin, std::chrono::milliseconds step);

/// UTC, millisecond precision: 2024-01-31T12:00:00.000Z
std::string format_timestamp(TimePoint t);
TimePoint parse_timestamp(const std::string& text);

}  // namespace radloop
