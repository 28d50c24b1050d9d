#pragma once

#include "forge/nn.hpp"

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace forge {

class Fnv1a {
public:
    void update(const void * data, std::size_t size) {
        const auto * bytes = static_cast<const unsigned char *>(data);
        for (std::size_t i = 0; i < size; ++i) {
            state_ ^= bytes[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    void update(const Mat & m) {
        const std::int64_t shape[2] = {m.rows(), m.cols()};
        update(shape, sizeof(shape));
        update(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()));
    }

    std::uint64_t value() const { return state_; }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
        return buf;
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

// Digest of any object exposing visit(name, const Mat &).
template <class Visitable> std::string param_checksum(const Visitable & params) {
    Fnv1a h;
    params.visit([&](const std::string & name, const Mat & m) {
        h.update(name);
        h.update(m);
    });
    return h.hex();
}

} // namespace forge
