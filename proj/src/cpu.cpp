#include "entrust/detail/cpu.hpp"

#include <set>
#include <cstdio>

#if defined(__linux__)
#include <pthread.h>
#include <sched.h>
#endif

namespace entrust::detail {

bool pin_this_thread(unsigned cpu_index) noexcept {
#if defined(__linux__)
    cpu_set_t set;
    CPU_ZERO(&set);
    CPU_SET(cpu_index % CPU_SETSIZE, &set);
    return pthread_setaffinity_np(pthread_self(), sizeof(set), &set) == 0;
#else
    (void)cpu_index;
    return false;
#endif
}

unsigned physical_core_count() noexcept {
    unsigned logical = std::thread::hardware_concurrency();
    if (logical == 0) logical = 1;
#if defined(__linux__)
    std::set<std::pair<int, int>> cores;
    for (unsigned cpu = 0; cpu < logical; ++cpu) {
        char path[128];
        std::snprintf(path, sizeof path,
                      "/sys/devices/system/cpu/cpu%u/topology/core_id", cpu);
        std::FILE* f = std::fopen(path, "r");
        if (!f) return logical;
        int core = -1;
        if (std::fscanf(f, "%d", &core) != 1) core = static_cast<int>(cpu);
        std::fclose(f);
        std::snprintf(path, sizeof path,
                      "/sys/devices/system/cpu/cpu%u/topology/physical_package_id", cpu);
        int pkg = 0;
        if (std::FILE* g = std::fopen(path, "r")) {
            if (std::fscanf(g, "%d", &pkg) != 1) pkg = 0;
            std::fclose(g);
        }
        cores.emplace(pkg, core);
    }
    if (!cores.empty()) return static_cast<unsigned>(cores.size());
#endif
    return logical;
}

} // namespace entrust::detail
