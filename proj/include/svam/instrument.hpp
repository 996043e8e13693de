#pragma once

#include <atomic>
#include <cstdint>

// Call counters and trajectory hashes used by tests and the shortcut-contract
// assertions (one denoiser pass per feature extraction, J policy passes per
// sampled chunk, shared z_S between student features and teacher videos).
namespace svam::instr {

inline std::atomic<uint64_t> g_denoiser_calls{0};
inline std::atomic<uint64_t> g_policy_calls{0};
inline thread_local uint64_t g_last_feature_zs_hash = 0;
inline thread_local uint64_t g_last_sample_zs_hash = 0;

inline uint64_t denoiser_calls() { return g_denoiser_calls.load(); }
inline uint64_t policy_calls() { return g_policy_calls.load(); }

inline void reset_counters() {
  g_denoiser_calls.store(0);
  g_policy_calls.store(0);
}

}  // namespace svam::instr
