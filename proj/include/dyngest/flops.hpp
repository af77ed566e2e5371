#ifndef DYNGEST_FLOPS_HPP
#define DYNGEST_FLOPS_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace dyngest {

// Multiply-accumulate ledger. Ops record MACs into the thread-active counter
// under the current block label; totals are exact integer counts.
// Reported "GFLOPS" elsewhere use the 1 MAC = 2 FLOPs convention.
class FlopCounter {
public:
  void add(const std::string& label, std::uint64_t macs) {
    for (auto& e : entries_) {
      if (e.first == label) {
        e.second += macs;
        total_ += macs;
        return;
      }
    }
    entries_.emplace_back(label, macs);
    total_ += macs;
  }

  void reset() {
    entries_.clear();
    total_ = 0;
  }

  std::uint64_t total_macs() const { return total_; }
  const std::vector<std::pair<std::string, std::uint64_t>>& entries() const {
    return entries_;
  }

  std::uint64_t macs_for(const std::string& label) const {
    for (const auto& e : entries_)
      if (e.first == label) return e.second;
    return 0;
  }

private:
  std::vector<std::pair<std::string, std::uint64_t>> entries_;
  std::uint64_t total_ = 0;
};

namespace detail {
inline FlopCounter*& active_counter() {
  thread_local FlopCounter* c = nullptr;
  return c;
}
inline std::string& active_label() {
  thread_local std::string label = "unlabeled";
  return label;
}
}  // namespace detail

// Activates a counter for the lifetime of the scope.
class FlopScope {
public:
  explicit FlopScope(FlopCounter& c) : prev_(detail::active_counter()) {
    detail::active_counter() = &c;
  }
  ~FlopScope() { detail::active_counter() = prev_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

private:
  FlopCounter* prev_;
};

// Sets the block label ("extractor", "selector", "classifier") for recordings.
class FlopLabel {
public:
  explicit FlopLabel(std::string label) : prev_(detail::active_label()) {
    detail::active_label() = std::move(label);
  }
  ~FlopLabel() { detail::active_label() = prev_; }
  FlopLabel(const FlopLabel&) = delete;
  FlopLabel& operator=(const FlopLabel&) = delete;

private:
  std::string prev_;
};

inline void record_macs(std::uint64_t macs) {
  if (FlopCounter* c = detail::active_counter())
    c->add(detail::active_label(), macs);
}

}  // namespace dyngest

#endif  // DYNGEST_FLOPS_HPP
