#pragma once

#include <vector>

namespace stratanet {

// Rank-based AUROC (Mann-Whitney U with tie correction). Higher scores should
// indicate the positive class.
double auroc(const std::vector<double>& positives, const std::vector<double>& negatives);

double mean(const std::vector<double>& v);
double stddev(const std::vector<double>& v);  // population std

}  // namespace stratanet
