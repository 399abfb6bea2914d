#pragma once

// Shared dataset record types and the line-delimited on-disk format:
//   label<TAB>space-separated token ids
// plus a JSON sidecar manifest written by the producing module.

#include <cstddef>
#include <string>
#include <vector>

namespace stratanet {

struct LabeledSeq {
  std::vector<int> tokens;
  int label = 0;
};

// Read-only split wrapper that counts every access. The data-free contract is
// enforced with it: student training must leave the train split's counter
// untouched.
class LoggedSplit {
 public:
  LoggedSplit() = default;
  explicit LoggedSplit(std::vector<LabeledSeq> data) : data_(std::move(data)) {}

  const std::vector<LabeledSeq>& view() const {
    ++accesses_;
    return data_;
  }
  std::size_t size() const { return data_.size(); }
  std::size_t access_count() const { return accesses_; }

 private:
  std::vector<LabeledSeq> data_;
  mutable std::size_t accesses_ = 0;
};

void save_labeled_seqs(const std::vector<LabeledSeq>& data, const std::string& path);
std::vector<LabeledSeq> load_labeled_seqs(const std::string& path);

}  // namespace stratanet
