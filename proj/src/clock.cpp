#include "radloop/clock.hpp"

#include <cstdio>
#include <ctime>
#include <memory>

#include "radloop/errors.hpp"

namespace radloop {

Clock system_clock() {
    return [] { return std::chrono::system_clock::now(); };
}

Clock logical_clock(TimePoint origin, std::chrono::milliseconds step) {
    auto next = std::make_shared<TimePoint>(origin);
    return [next, step] {
        const TimePoint now = *next;
        *next += step;
        return now;
    };
}

std::string format_timestamp(TimePoint t) {
    using namespace std::chrono;
    const auto ms = duration_cast<milliseconds>(t.time_since_epoch()).count();
    std::time_t secs = static_cast<std::time_t>(ms / 1000);
    long frac = static_cast<long>(ms % 1000);
    if (frac < 0) {
        frac += 1000;
        --secs;
    }
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03ldZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, frac);
    return buf;
}

TimePoint parse_timestamp(const std::string& text) {
    std::tm tm{};
    int ms = 0;
    if (std::sscanf(text.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d.%3dZ", &tm.tm_year, &tm.tm_mon, &tm.tm_mday, &tm.tm_hour,
                    &tm.tm_min, &tm.tm_sec, &ms) != 7) {
        throw InvalidInput("malformed timestamp '" + text + "'");
    }
    tm.tm_year -= 1900;
    tm.tm_mon -= 1;
    const std::time_t secs = timegm(&tm);
    return std::chrono::system_clock::from_time_t(secs) + std::chrono::milliseconds(ms);
}

}  // namespace radloop
