#include "metaalign/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "metaalign/errors.hpp"

namespace metaalign::data {

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw DataError("unknown domain '" + s + "' (expected source or target)");
}

Dataset sample_two_moons(std::size_t n, double noise_std, std::uint64_t seed) {
  if (n < 2) throw ContractError("two moons: need at least 2 points");
  if (!(noise_std >= 0.0)) throw ContractError("two moons: noise must be nonnegative");
  Rng rng(seed);
  std::vector<double> x(n * 2);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double t = rng.uniform(0.0, std::numbers::pi);
    double px, py;
    if (label == 0) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    x[2 * i] = px + noise_std * rng.normal();
    x[2 * i + 1] = py + noise_std * rng.normal();
    y[i] = label;
  }
  return Dataset{Tensor::matrix(n, 2, std::move(x)), std::move(y), Domain::source, 2};
}

DomainPair gen_two_moons(std::size_t n_per_domain, double noise_std, double rotation_deg,
                         std::array<double, 2> translation, std::uint64_t seed) {
  Dataset source = sample_two_moons(n_per_domain, noise_std, derive_seed(seed, 0));
  Dataset target = sample_two_moons(n_per_domain, noise_std, derive_seed(seed, 1));
  const double rad = rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  std::vector<double> x(target.features.values().begin(), target.features.values().end());
  for (std::size_t i = 0; i < n_per_domain; ++i) {
    const double px = x[2 * i], py = x[2 * i + 1];
    x[2 * i] = c * px - s * py + translation[0];
    x[2 * i + 1] = s * px + c * py + translation[1];
  }
  target.features = Tensor::matrix(n_per_domain, 2, std::move(x));
  target.domain = Domain::target;
  return {std::move(source), std::move(target)};
}

DomainPair gen_gaussian_shift(std::size_t n, std::size_t num_classes, std::size_t dim,
                              double class_sep, double mean_shift, std::uint64_t seed) {
  if (num_classes < 2) throw ContractError("gaussian shift: need at least 2 classes");
  if (dim < 1) throw ContractError("gaussian shift: dim must be positive");
  if (n < 1) throw ContractError("gaussian shift: n must be positive");
  Rng mean_rng(derive_seed(seed, 0));
  std::vector<double> means(num_classes * dim);
  for (auto& m : means) m = class_sep * mean_rng.normal();

  auto draw = [&](std::uint64_t stream, double shift, Domain domain) {
    Rng rng(derive_seed(seed, stream));
    std::vector<double> x(n * dim);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = i % num_classes;
      y[i] = static_cast<int>(k);
      for (std::size_t j = 0; j < dim; ++j) x[i * dim + j] = means[k * dim + j] + shift + rng.normal();
    }
    return Dataset{Tensor::matrix(n, dim, std::move(x)), std::move(y), domain, num_classes};
  };
  return {draw(1, 0.0, Domain::source), draw(2, mean_shift, Domain::target)};
}

// ---- CSV -------------------------------------------------------------------

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

Dataset load_csv(const std::string& path, std::optional<std::size_t> num_classes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file (missing header)");
  line = strip_cr(line);
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  const auto header = split(line);

  std::size_t d = 0;
  while (d < header.size() && header[d] == "feature_" + std::to_string(d)) ++d;
  if (d == 0) throw DataError(path + ": header must start with column feature_0");
  if (d >= header.size() || header[d] != "label") {
    throw DataError(path + ": header is missing column 'label' after feature_" + std::to_string(d - 1));
  }
  if (d + 1 >= header.size() || header[d + 1] != "domain") {
    throw DataError(path + ": header is missing column 'domain' after 'label'");
  }
  if (header.size() != d + 2) throw DataError(path + ": unexpected columns after 'domain'");

  std::vector<double> x;
  std::vector<int> y;
  std::optional<Domain> domain;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    line = strip_cr(line);
    if (line.empty()) continue;
    const std::string where = path + ": row " + std::to_string(row);
    const auto cells = split(line);
    if (cells.size() != d + 2) {
      throw DataError(where + ": expected " + std::to_string(d + 2) + " fields, got " +
                      std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < d; ++j) {
      const auto& c = cells[j];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || ptr != c.data() + c.size() || c.empty()) {
        throw DataError(where + ": malformed feature_" + std::to_string(j) + " value '" + c + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError(where + ": non-finite feature_" + std::to_string(j));
      }
      x.push_back(v);
    }
    const auto& lc = cells[d];
    long long label = -1;
    const auto [lp, lec] = std::from_chars(lc.data(), lc.data() + lc.size(), label);
    if (lec != std::errc() || lp != lc.data() + lc.size() || lc.empty()) {
      throw DataError(where + ": malformed label '" + lc + "'");
    }
    if (label < 0 || (num_classes && static_cast<std::size_t>(label) >= *num_classes) ||
        label > 1'000'000) {
      throw DataError(where + ": label " + lc + " out of range");
    }
    y.push_back(static_cast<int>(label));
    Domain dom;
    try {
      dom = parse_domain(cells[d + 1]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (domain && *domain != dom) {
      throw DataError(where + ": mixed domains in one file");
    }
    domain = dom;
    ++row;
  }
  if (y.empty()) throw DataError(path + ": no data rows");
  std::size_t k = num_classes.value_or(0);
  if (!num_classes) {
    for (int label : y) k = std::max(k, static_cast<std::size_t>(label) + 1);
    k = std::max<std::size_t>(k, 2);
  }
  const std::size_t n = y.size();
  return Dataset{Tensor::matrix(n, d, std::move(x)), std::move(y), *domain, k};
}

void write_csv(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset file: " + path);
  const std::size_t d = dataset.dim();
  for (std::size_t j = 0; j < d; ++j) out << "feature_" << j << ',';
  out << "label,domain\n";
  char buf[64];
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, dataset.features.at(i, j));
      out.write(buf, ptr - buf);
      out << ',';
    }
    out << dataset.labels[i] << ',' << to_string(dataset.domain) << '\n';
  }
  if (!out) throw DataError("failed writing dataset file: " + path);
}

// ---- standardization -------------------------------------------------------

Standardizer Standardizer::fit(const Dataset& dataset) {
  const std::size_t n = dataset.size(), d = dataset.dim();
  Standardizer s;
  s.mean.assign(d, 0.0);
  s.stddev.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += dataset.features.at(i, j);
  }
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double e = dataset.features.at(i, j) - s.mean[j];
      s.stddev[j] += e * e;
    }
  }
  for (auto& v : s.stddev) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12)) v = 1.0;
  }
  return s;
}

Dataset Standardizer::apply(const Dataset& dataset) const {
  const std::size_t n = dataset.size(), d = dataset.dim();
  if (d != mean.size()) throw DimensionError("standardizer fitted on a different feature width");
  std::vector<double> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = (dataset.features.at(i, j) - mean[j]) / stddev[j];
  }
  Dataset out = dataset;
  out.features = Tensor::matrix(n, d, std::move(x));
  return out;
}

// ---- batching --------------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.cols();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (auto r : rows) {
    const auto row = x.values().subspan(r * d, d);
    out.insert(out.end(), row.begin(), row.end());
  }
  return Tensor::matrix(rows.size(), d, std::move(out));
}

BatchStream::Cursor::Cursor(std::size_t n, std::uint64_t seed) : order(n), rng(seed) {
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  reshuffle();
}

void BatchStream::Cursor::reshuffle() {
  rng.shuffle(order);
  pos = 0;
}

std::size_t BatchStream::Cursor::take() {
  if (pos == order.size()) reshuffle();
  return order[pos++];
}

BatchStream::BatchStream(const Dataset& src, const Dataset& tgt, std::size_t batch_size,
                         std::uint64_t seed, std::optional<std::size_t> epochs)
    : src_features_(src.features),
      src_labels_(src.labels),
      tgt_features_(tgt.features),
      batch_size_(batch_size),
      epochs_(epochs),
      src_(src.size(), derive_seed(seed, 10)),
      tgt_(tgt.size(), derive_seed(seed, 11)),
      source_leads_(src.size() >= tgt.size()) {
  if (batch_size == 0) throw ContractError("batch size must be positive");
  if (batch_size > std::min(src.size(), tgt.size())) {
    throw ContractError("batch size " + std::to_string(batch_size) +
                        " exceeds the smaller domain (" +
                        std::to_string(std::min(src.size(), tgt.size())) + " samples)");
  }
  if (src.dim() != tgt.dim()) throw DimensionError("source and target feature widths differ");
}

std::size_t BatchStream::batches_per_epoch() const {
  const std::size_t n = source_leads_ ? src_.order.size() : tgt_.order.size();
  return (n + batch_size_ - 1) / batch_size_;
}

std::optional<PairedBatch> BatchStream::next() {
  if (epochs_ && epoch_ >= *epochs_) return std::nullopt;
  Cursor& lead = source_leads_ ? src_ : tgt_;
  Cursor& follow = source_leads_ ? tgt_ : src_;
  const std::size_t count = std::min(batch_size_, lead.order.size() - lead.pos);
  std::vector<std::size_t> lead_rows(count), follow_rows(count);
  for (std::size_t i = 0; i < count; ++i) lead_rows[i] = lead.order[lead.pos++];
  for (std::size_t i = 0; i < count; ++i) follow_rows[i] = follow.take();
  if (lead.pos == lead.order.size()) {
    lead.reshuffle();
    ++epoch_;
  }
  const auto& src_rows = source_leads_ ? lead_rows : follow_rows;
  const auto& tgt_rows = source_leads_ ? follow_rows : lead_rows;
  PairedBatch batch;
  batch.src_features = gather_rows(src_features_, src_rows);
  batch.src_labels.reserve(count);
  for (auto r : src_rows) batch.src_labels.push_back(src_labels_[r]);
  batch.tgt_features = gather_rows(tgt_features_, tgt_rows);
  return batch;
}

}  // namespace metaalign::data
