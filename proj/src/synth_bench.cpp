#include "synth_bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "exact.hpp"
#include "rng.hpp"

namespace slicemend {

namespace {

constexpr std::uint64_t kCorrectSalt = 0xc0cc;
constexpr std::uint64_t kLabelSalt = 0x1abe1;

[[noreturn]] void spec_fail(const std::string& msg) { fail(ErrorKind::kSpec, "population spec: " + msg); }

bool is_fraction(double f) { return f > 0.0 && f < 1.0; }

std::uint64_t rounded_count(double fraction, std::uint64_t n) {
  return static_cast<std::uint64_t>(std::llround(fraction * static_cast<double>(n)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Spec

void PopulationSpec::validate() const {
  if (schema.size() == 0) spec_fail("schema has no attributes");
  if (n_train == 0 || n_val == 0) spec_fail("n_train and n_val must be positive");
  if (labels.size() < 2) spec_fail("at least two labels are needed");
  if (std::set<std::string>(labels.begin(), labels.end()).size() != labels.size()) {
    spec_fail("labels must be unique");
  }
  if (!(base_error_rate >= 0.0 && base_error_rate < 1.0)) spec_fail("base_error_rate must be in [0,1)");
  if (!(surrogate.scale > 0.0)) spec_fail("surrogate.scale must be positive");
  if (!(surrogate.floor_rate >= 0.0 && surrogate.floor_rate < 1.0)) {
    spec_fail("surrogate.floor_rate must be in [0,1)");
  }
  if (!(surrogate.boost >= 0.0)) spec_fail("surrogate.boost must be non-negative");

  for (const auto& [attr, weights] : value_marginals) {
    auto index = schema.find(attr);
    if (!index) spec_fail("marginal for unknown attribute \"" + attr + "\"");
    for (const auto& [value, w] : weights) {
      if (!schema.value_code(*index, value)) {
        spec_fail("marginal for unknown value " + attr + "=" + value);
      }
      if (!(w >= 0.0) || !std::isfinite(w)) spec_fail("marginal weights must be finite and >= 0");
    }
  }

  std::set<Slice> seen;
  std::uint64_t forced_train = 0;
  std::uint64_t forced_val = 0;
  std::map<std::string, std::set<std::string>> injected_values;
  for (const auto& bug : injected_bugs) {
    const std::string key = bug.slice.key();
    try {
      validate_slice(bug.slice, schema);
    } catch (const Error& e) {
      spec_fail(e.what());
    }
    if (bug.slice.empty()) spec_fail("injected slice is empty");
    if (!seen.insert(bug.slice).second) spec_fail("slice " + key + " injected twice");
    if (!is_fraction(bug.train_fraction)) spec_fail(key + ": train_fraction must be in (0,1)");
    if (!(bug.error_rate > base_error_rate && bug.error_rate <= 1.0)) {
      spec_fail(key + ": error_rate must exceed base_error_rate and be <= 1");
    }
    if (bug.error_rate < surrogate.floor_rate) spec_fail(key + ": error_rate is below floor_rate");
    const std::uint64_t t = rounded_count(bug.train_fraction, n_train);
    const std::uint64_t v = rounded_count(bug.train_fraction, n_val);
    if (t == 0 || v == 0) {
      spec_fail(key + ": fraction " + format_shortest(bug.train_fraction) +
                " rounds to zero records");
    }
    forced_train += t;
    forced_val += v;
    for (const auto& c : bug.slice.conditions()) injected_values[c.attribute].insert(c.value);
  }
  if (forced_train > n_train || forced_val > n_val) {
    spec_fail("injected slices need more records than the population holds");
  }
  // Every attribute must keep at least one value with positive weight once
  // the injected values are removed from the background draw.
  for (std::size_t a = 0; a < schema.size(); ++a) {
    const Attribute& attr = schema.attribute(a);
    auto marg = value_marginals.find(attr.name);
    bool any = false;
    for (const auto& value : attr.values) {
      if (injected_values[attr.name].count(value)) continue;
      double w = 1.0;
      if (marg != value_marginals.end()) {
        auto it = marg->second.find(value);
        w = it == marg->second.end() ? 0.0 : it->second;
      }
      any = any || w > 0.0;
    }
    if (!any) spec_fail("attribute \"" + attr.name + "\" has no value left for background records");
  }
}

json PopulationSpec::to_json() const {
  json bugs = json::array();
  for (const auto& b : injected_bugs) {
    bugs.push_back({{"slice", b.slice.key()},
                    {"train_fraction", b.train_fraction},
                    {"error_rate", b.error_rate}});
  }
  return {{"format_version", kFormatVersion},
          {"schema", schema.to_json()},
          {"n_train", n_train},
          {"n_val", n_val},
          {"value_marginals", value_marginals},
          {"injected_bugs", bugs},
          {"base_error_rate", base_error_rate},
          {"labels", labels},
          {"seed", seed},
          {"surrogate",
           {{"floor_rate", surrogate.floor_rate},
            {"boost", surrogate.boost},
            {"scale", surrogate.scale}}}};
}

PopulationSpec PopulationSpec::from_json(const json& doc) {
  if (!doc.is_object()) spec_fail("expected a JSON object");
  if (doc.contains("format_version")) {
    require_format_version(doc.at("format_version").get<std::string>(), "population spec");
  }
  PopulationSpec s;
  try {
    if (!doc.contains("schema")) spec_fail("missing \"schema\"");
    s.schema = AttributeSchema::from_json(doc.at("schema"));
    s.n_train = doc.value("n_train", s.n_train);
    s.n_val = doc.value("n_val", s.n_val);
    s.value_marginals = doc.value("value_marginals", s.value_marginals);
    for (const auto& b : doc.value("injected_bugs", json::array())) {
      s.injected_bugs.push_back({Slice::parse(b.at("slice").get<std::string>()),
                                 b.at("train_fraction").get<double>(),
                                 b.at("error_rate").get<double>()});
    }
    s.base_error_rate = doc.value("base_error_rate", s.base_error_rate);
    s.labels = doc.value("labels", s.labels);
    s.seed = doc.value("seed", s.seed);
    if (doc.contains("surrogate")) {
      const json& g = doc.at("surrogate");
      s.surrogate.floor_rate = g.value("floor_rate", s.surrogate.floor_rate);
      s.surrogate.boost = g.value("boost", s.surrogate.boost);
      s.surrogate.scale = g.value("scale", s.surrogate.scale);
    }
  } catch (const json::exception& e) {
    spec_fail(e.what());
  }
  s.validate();
  return s;
}

PopulationSpec PopulationSpec::load(const std::string& path) {
  return from_json(parse_json_file(path));
}

// ---------------------------------------------------------------------------
// Surrogate

double SurrogateModel::curve(double boost_value, double fraction) const {
  const double e = base_rate + boost_value * std::exp(-fraction / scale);
  return std::clamp(std::max(floor_rate, e), 0.0, 1.0);
}

void SurrogateModel::assign_predictions(std::vector<PredictionRecord>& records,
                                        const AttributeSchema& schema) const {
  std::uint64_t train = 0;
  std::map<std::pair<std::string, std::string>, std::uint64_t> value_counts;
  std::map<Slice, std::uint64_t> slice_counts;
  for (const auto& r : records) {
    if (r.split != Split::kTrain) continue;
    ++train;
    for (const auto& [a, v] : r.attributes) ++value_counts[{a, v}];
    for (const auto& [s, b] : slice_boost) {
      if (s.matches(r.attributes)) ++slice_counts[s];
    }
  }
  auto fraction = [&](std::uint64_t count) {
    return train == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(train);
  };
  std::map<Slice, double> slice_error;
  for (const auto& [s, b] : slice_boost) slice_error[s] = curve(b, fraction(slice_counts[s]));

  for (auto& r : records) {
    double err = std::max(floor_rate, base_rate);
    if (boost > 0.0) {
      for (const auto& [a, v] : r.attributes) {
        if (v == kUnknownValue || !schema.find(a)) continue;
        err = std::max(err, curve(boost, fraction(value_counts[{a, v}])));
      }
    }
    for (const auto& [s, e] : slice_error) {
      if (s.matches(r.attributes)) err = std::max(err, e);
    }
    const bool correct = keyed_unit(seed, r.image_id, kCorrectSalt) >= err;
    if (correct) {
      r.prediction = r.label;
    } else {
      auto it = std::find(labels.begin(), labels.end(), r.label);
      const std::size_t i = it == labels.end() ? 0 : static_cast<std::size_t>(it - labels.begin());
      r.prediction = labels[(i + 1) % labels.size()];
      if (r.prediction == r.label) r.prediction = "not " + r.label;
    }
  }
}

json SurrogateModel::to_json() const {
  json boosts = json::array();
  for (const auto& [s, b] : slice_boost) boosts.push_back({{"slice", s.key()}, {"boost", b}});
  return {{"floor_rate", floor_rate}, {"base_rate", base_rate}, {"boost", boost},
          {"scale", scale},           {"seed", seed},           {"labels", labels},
          {"slice_boost", boosts}};
}

SurrogateModel SurrogateModel::from_json(const json& doc) {
  SurrogateModel m;
  try {
    m.floor_rate = doc.at("floor_rate").get<double>();
    m.base_rate = doc.at("base_rate").get<double>();
    m.boost = doc.at("boost").get<double>();
    m.scale = doc.at("scale").get<double>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.labels = doc.at("labels").get<std::vector<std::string>>();
    for (const auto& b : doc.at("slice_boost")) {
      m.slice_boost[Slice::parse(b.at("slice").get<std::string>())] = b.at("boost").get<double>();
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("surrogate model: ") + e.what());
  }
  if (!(m.scale > 0.0) || m.labels.size() < 2) {
    fail(ErrorKind::kParse, "surrogate model: scale must be positive and labels >= 2");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Population

namespace {

// Cumulative weights per attribute for background records, with every value
// used by an injected slice removed.
std::vector<std::vector<double>> background_cdfs(const PopulationSpec& spec) {
  std::map<std::string, std::set<std::string>> injected;
  for (const auto& b : spec.injected_bugs) {
    for (const auto& c : b.slice.conditions()) injected[c.attribute].insert(c.value);
  }
  std::vector<std::vector<double>> cdfs;
  for (std::size_t a = 0; a < spec.schema.size(); ++a) {
    const Attribute& attr = spec.schema.attribute(a);
    auto marg = spec.value_marginals.find(attr.name);
    std::vector<double> cdf;
    double total = 0;
    for (const auto& value : attr.values) {
      double w = 1.0;
      if (marg != spec.value_marginals.end()) {
        auto it = marg->second.find(value);
        w = it == marg->second.end() ? 0.0 : it->second;
      }
      if (injected[attr.name].count(value)) w = 0.0;
      total += w;
      cdf.push_back(total);
    }
    cdfs.push_back(std::move(cdf));
  }
  return cdfs;
}

void emit_split(const PopulationSpec& spec, Split split, std::uint64_t n,
                const std::vector<std::vector<double>>& cdfs, Rng& rng,
                std::vector<PredictionRecord>& out) {
  // Which injected slice (if any) each position is forced into.
  std::vector<int> forced(n, -1);
  std::uint64_t pos = 0;
  for (std::size_t b = 0; b < spec.injected_bugs.size(); ++b) {
    const std::uint64_t count = rounded_count(spec.injected_bugs[b].train_fraction, n);
    for (std::uint64_t k = 0; k < count; ++k) forced[pos++] = static_cast<int>(b);
  }
  rng.shuffle(forced);

  const char* prefix = split == Split::kTrain ? "train-" : "val-";
  for (std::uint64_t i = 0; i < n; ++i) {
    PredictionRecord r;
    char id[32];
    std::snprintf(id, sizeof(id), "%s%06llu", prefix, static_cast<unsigned long long>(i + 1));
    r.image_id = id;
    r.split = split;
    r.source_ref = "sim://" + r.image_id;
    const std::size_t li = static_cast<std::size_t>(keyed_unit(spec.seed, r.image_id, kLabelSalt) *
                                                    static_cast<double>(spec.labels.size()));
    r.label = spec.labels[std::min(li, spec.labels.size() - 1)];
    for (std::size_t a = 0; a < spec.schema.size(); ++a) {
      const Attribute& attr = spec.schema.attribute(a);
      r.attributes[attr.name] = attr.values[rng.categorical(cdfs[a])];
    }
    if (forced[i] >= 0) {
      for (const auto& c : spec.injected_bugs[static_cast<std::size_t>(forced[i])].slice.conditions()) {
        r.attributes[c.attribute] = c.value;
      }
    }
    out.push_back(std::move(r));
  }
}

}  // namespace

Population synthesize_population(const PopulationSpec& spec) {
  spec.validate();
  const auto cdfs = background_cdfs(spec);
  Rng rng(spec.seed);
  std::vector<PredictionRecord> records;
  records.reserve(spec.n_train + spec.n_val);
  emit_split(spec, Split::kTrain, spec.n_train, cdfs, rng, records);
  emit_split(spec, Split::kVal, spec.n_val, cdfs, rng, records);

  SurrogateModel model;
  model.floor_rate = spec.surrogate.floor_rate;
  model.base_rate = spec.base_error_rate;
  model.boost = spec.surrogate.boost;
  model.scale = spec.surrogate.scale;
  model.seed = spec.seed;
  model.labels = spec.labels;

  // Calibrate each injected slice so its error at the realised train
  // fraction is exactly the requested rate.
  json truth = json::array();
  for (const auto& bug : spec.injected_bugs) {
    std::uint64_t support = 0;
    for (const auto& r : records) {
      if (r.split == Split::kTrain && bug.slice.matches(r.attributes)) ++support;
    }
    const double f = static_cast<double>(support) / static_cast<double>(spec.n_train);
    model.slice_boost[bug.slice] = (bug.error_rate - spec.base_error_rate) * std::exp(f / model.scale);
    truth.push_back({{"slice", bug.slice.key()},
                     {"requested_train_fraction", bug.train_fraction},
                     {"train_support", support},
                     {"train_fraction", f},
                     {"error_rate", bug.error_rate}});
  }
  model.assign_predictions(records, spec.schema);

  Population pop{Dataset(spec.schema, std::move(records)), model, json()};
  for (auto& t : truth) {
    SliceStats s = slice_stats(pop.dataset, Slice::parse(t["slice"].get<std::string>()));
    t["val_support"] = s.val_support;
    t["val_correct"] = s.val_correct;
    t["val_accuracy"] = s.val_accuracy ? json(*s.val_accuracy) : json(nullptr);
  }
  pop.ground_truth = {{"format_version", kFormatVersion},
                      {"type", "simulation_ground_truth"},
                      {"injected_bugs", truth},
                      {"surrogate", model.to_json()},
                      {"spec", spec.to_json()}};
  return pop;
}

Dataset simulate_repair(const Dataset& ds, const AugmentationManifest& manifest,
                        const SurrogateModel& model) {
  std::vector<PredictionRecord> records(ds.records().begin(), ds.records().end());
  for (auto& r : synthetic_records(manifest)) records.push_back(std::move(r));
  model.assign_predictions(records, ds.schema());
  return Dataset(ds.schema(), std::move(records));
}

std::uint64_t slice_deficit(std::uint64_t support, std::uint64_t train_size, double rho) {
  const DecimalRatio r = DecimalRatio::from_double(rho);
  if (r.num >= r.den) fail(ErrorKind::kConfig, "rho must be below 1");
  // (support + k) * den >= num * (train + k)
  const Wide need = Wide{r.num} * train_size - Wide{support} * r.den;
  if (need <= 0) return 0;
  const Wide step = Wide{r.den} - r.num;
  return static_cast<std::uint64_t>((need + step - 1) / step);
}

}  // namespace slicemend
