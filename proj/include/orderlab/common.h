#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace orderlab {

enum class ErrorCode {
  kAlphabetExhausted,
  kTemplatePoolTooSmall,
  kTokenOutOfRange,
  kNonFiniteLoss,
  kCorruptCheckpoint,
  kMisalignedPrompts,
  kCorruptTensorFile,
  kEmptyGroup,
  kZeroVector,
  kDegenerateSpread,
  kSingleClass,
  kNonFiniteFeature,
  kEmptyEval,
  kEmptyResult,
  kTargetTooLarge,
  kMissingArtifact,
  kConfigInvalid,
  kInvalidArgument,
};

std::string_view error_name(ErrorCode code);

// Every failure surfaced by the library carries one of the codes above so the
// CLI can map it onto a machine-readable error object and an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const { return code_; }
  std::string_view name() const { return error_name(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

// splitmix64 finalizer; all sub-seeds in the project are derived through it.
uint64_t mix_seed(uint64_t x);
uint64_t derive_seed(uint64_t base, uint64_t tag);
uint64_t derive_seed(uint64_t base, std::string_view tag);

// 64-bit FNV-1a.
uint64_t fnv1a(const void* data, size_t size, uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(uint64_t v);
// Shortest text that parses back to the same double.
std::string format_double(double v);
std::vector<std::string> split_fields(std::string_view line, char sep = ',');

// Worker cap shared by every parallel loop. 0 means hardware concurrency.
void set_max_threads(int n);
int max_threads();

// Runs fn(i) for i in [0, n). Each index must only write its own output slot;
// results are then independent of scheduling.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace orderlab
