#pragma once

// OpenBLAS picks its kernels from CPUID when the library loads and falls
// back to generic SSE3 code on CPUs it does not recognise, which is common
// under virtualisation. Executables call select_blas_kernels() first thing in
// main: if no core type is forced it picks one from the instruction set the
// CPU reports and re-executes itself once so the loader sees it.

#include <cstdlib>
#include <filesystem>

#if defined(__linux__)
#include <unistd.h>
#endif

namespace hsa_lab {

inline void select_blas_kernels([[maybe_unused]] char** argv) {
#if defined(__linux__) && (defined(__x86_64__) || defined(__i386__))
  if (std::getenv("OPENBLAS_CORETYPE") || std::getenv("HSA_LAB_BLAS_REEXEC")) return;
  const char* core = nullptr;
  if (__builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512bw") && __builtin_cpu_supports("avx512vl")) {
    core = "SkylakeX";
  } else if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
    core = "Haswell";
  }
  if (!core) return;
  setenv("OPENBLAS_CORETYPE", core, 1);
  setenv("HSA_LAB_BLAS_REEXEC", "1", 1);
  // exec the resolved path so the process keeps its own name
  std::error_code ec;
  const auto self = std::filesystem::read_symlink("/proc/self/exe", ec);
  execv(ec ? "/proc/self/exe" : self.c_str(), argv);  // only returns on failure; keep the default kernels
#endif
}

}  // namespace hsa_lab
