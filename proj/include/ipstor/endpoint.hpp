#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace ipstor {

struct Endpoint
{
    std::string host;
    std::uint16_t port = 0;

    std::string to_string() const;

    /// "host:port"; throws UsageError when malformed.
    static Endpoint parse(std::string_view text);

    /// Dotted IPv4 form of `host`, or 0.0.0.0 for names.
    std::array<std::uint8_t, 4> ipv4() const;

    auto operator<=>(const Endpoint&) const = default;
};

} // namespace ipstor
