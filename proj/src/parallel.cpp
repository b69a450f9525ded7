#include "remap/parallel.hpp"

#include <cstdlib>
#include <string>

namespace remap {

std::size_t default_workers() {
    if (const char* env = std::getenv("REMAP_WORKERS"); env != nullptr && *env != '\0') {
        try {
            const long value = std::stol(env);
            if (value > 0) return static_cast<std::size_t>(value);
        } catch (const std::exception&) {
            // fall through to hardware default
        }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

}  // namespace remap
