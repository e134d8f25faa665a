#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metaalign/rng.hpp"
#include "metaalign/tensor.hpp"

namespace metaalign::data {

enum class Domain { source, target };

std::string to_string(Domain d);
Domain parse_domain(const std::string& s);

/// Features with labels. Target-domain labels exist only for evaluation; the
/// training path sees target data through PairedBatch, which carries none.
struct Dataset {
  Tensor features;
  std::vector<int> labels;
  Domain domain = Domain::source;
  std::size_t num_classes = 2;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
};

struct DomainPair {
  Dataset source;
  Dataset target;
};

struct PairedBatch {
  Tensor src_features;
  std::vector<int> src_labels;
  Tensor tgt_features;
};

/// Two interleaving half circles, labels alternating 0/1 by index.
Dataset sample_two_moons(std::size_t n, double noise_std, std::uint64_t seed);

/// Source: two moons. Target: an independent two-moons draw rotated by
/// rotation_deg about the origin, then translated.
DomainPair gen_two_moons(std::size_t n_per_domain, double noise_std, double rotation_deg,
                         std::array<double, 2> translation, std::uint64_t seed);

/// K unit-variance Gaussian clusters with means drawn from N(0, class_sep^2 I);
/// the target adds mean_shift to every coordinate of every class mean.
DomainPair gen_gaussian_shift(std::size_t n, std::size_t num_classes, std::size_t dim,
                              double class_sep, double mean_shift, std::uint64_t seed);

/// Header `feature_0,...,feature_{d-1},label,domain`; every row must carry the
/// same domain. Labels must be < num_classes when it is given.
Dataset load_csv(const std::string& path, std::optional<std::size_t> num_classes = std::nullopt);
void write_csv(const std::string& path, const Dataset& dataset);

/// Per-column affine standardizer fitted on one dataset (the source).
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Dataset& dataset);
  Dataset apply(const Dataset& dataset) const;
};

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Seeded paired minibatches. An epoch is one pass over the larger domain;
/// the smaller domain reshuffles and continues when exhausted. Each step's
/// source and target batches have equal size; the last batch of an epoch may
/// be short.
class BatchStream {
 public:
  BatchStream(const Dataset& src, const Dataset& tgt, std::size_t batch_size, std::uint64_t seed,
              std::optional<std::size_t> epochs = std::nullopt);

  /// Empty once the requested number of epochs is exhausted.
  std::optional<PairedBatch> next();

  std::size_t batches_per_epoch() const;
  std::size_t epoch() const { return epoch_; }

 private:
  struct Cursor {
    std::vector<std::size_t> order;
    std::size_t pos = 0;
    Rng rng;

    explicit Cursor(std::size_t n, std::uint64_t seed);
    void reshuffle();
    std::size_t take();
  };

  Tensor src_features_;
  std::vector<int> src_labels_;
  Tensor tgt_features_;
  std::size_t batch_size_;
  std::optional<std::size_t> epochs_;
  Cursor src_;
  Cursor tgt_;
  bool source_leads_;
  std::size_t epoch_ = 0;
};

}  // namespace metaalign::data
