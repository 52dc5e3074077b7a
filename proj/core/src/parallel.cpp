#include "safepde/parallel.hpp"

#include <cstdlib>
#include <string>

namespace safepde {

std::size_t worker_count() {
    if (const char* env = std::getenv("SAFEPDE_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n > 0) return static_cast<std::size_t>(n);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

}  // namespace safepde
