#include "slice_miner.hpp"

#include <algorithm>
#include <bit>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "parallel.hpp"

namespace slicemend {

// ---------------------------------------------------------------------------
// Slice

Slice::Slice(std::vector<Condition> conditions) : conditions_(std::move(conditions)) {
  std::sort(conditions_.begin(), conditions_.end());
  for (std::size_t i = 1; i < conditions_.size(); ++i) {
    if (conditions_[i].attribute == conditions_[i - 1].attribute) {
      fail(ErrorKind::kSchema,
           "slice has more than one condition on \"" + conditions_[i].attribute + "\"");
    }
  }
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

}  // namespace

Slice Slice::parse(std::string_view expr) {
  std::vector<Condition> conditions;
  expr = trim(expr);
  while (!expr.empty()) {
    auto comma = expr.find(',');
    std::string_view part = trim(expr.substr(0, comma));
    auto eq = part.find('=');
    if (eq == std::string_view::npos || trim(part.substr(0, eq)).empty() ||
        trim(part.substr(eq + 1)).empty()) {
      fail(ErrorKind::kParse, "slice condition \"" + std::string(part) +
                                  "\" is not of the form attribute=value");
    }
    conditions.push_back(
        {std::string(trim(part.substr(0, eq))), std::string(trim(part.substr(eq + 1)))});
    if (comma == std::string_view::npos) break;
    expr.remove_prefix(comma + 1);
  }
  return Slice(std::move(conditions));
}

std::string Slice::key() const {
  std::string out;
  for (const auto& c : conditions_) {
    if (!out.empty()) out += ',';
    out += c.attribute;
    out += '=';
    out += c.value;
  }
  return out;
}

const Condition* Slice::find(std::string_view attribute) const {
  for (const auto& c : conditions_) {
    if (c.attribute == attribute) return &c;
  }
  return nullptr;
}

bool Slice::is_subset_of(const Slice& other) const {
  return std::includes(other.conditions_.begin(), other.conditions_.end(),
                       conditions_.begin(), conditions_.end());
}

bool Slice::matches(const std::map<std::string, std::string>& attributes) const {
  for (const auto& c : conditions_) {
    auto it = attributes.find(c.attribute);
    if (it == attributes.end() || it->second != c.value) return false;
  }
  return true;
}

void validate_slice(const Slice& slice, const AttributeSchema& schema) {
  for (const auto& c : slice.conditions()) {
    auto attr = schema.find(c.attribute);
    if (!attr) fail(ErrorKind::kSchema, "slice references unknown attribute \"" + c.attribute + "\"");
    auto code = schema.value_code(*attr, c.value);
    if (!code || *code == AttributeSchema::kUnknown) {
      fail(ErrorKind::kSchema, "slice references value \"" + c.value +
                                   "\" outside the value set of \"" + c.attribute + "\"");
    }
  }
}

// ---------------------------------------------------------------------------
// Stats and predicates

Accuracy split_accuracy(const Dataset& ds, Split split) {
  Accuracy acc;
  for (auto row : ds.split_rows(split)) acc.correct += ds.correct(row) ? 1 : 0;
  acc.total = ds.split_size(split);
  return acc;
}

SliceStats make_stats(Slice slice, std::uint64_t train_support, std::uint64_t val_support,
                      std::uint64_t val_correct, std::uint64_t train_size,
                      const Accuracy& overall_val) {
  SliceStats s;
  s.slice = std::move(slice);
  s.train_support = train_support;
  s.val_support = val_support;
  s.val_correct = val_correct;
  s.train_size = train_size;
  s.val_size = overall_val.total;
  s.train_fraction = train_size == 0 ? 0.0
                                     : static_cast<double>(train_support) /
                                           static_cast<double>(train_size);
  s.val_fraction = overall_val.total == 0 ? 0.0
                                          : static_cast<double>(val_support) /
                                                static_cast<double>(overall_val.total);
  if (val_support > 0) {
    s.val_accuracy = static_cast<double>(val_correct) / static_cast<double>(val_support);
    s.accuracy_gap = overall_val.value() - *s.val_accuracy;
  }
  return s;
}

SliceStats slice_stats(const Dataset& ds, const Slice& slice) {
  validate_slice(slice, ds.schema());
  const auto& schema = ds.schema();
  std::vector<std::pair<std::size_t, AttributeSchema::ValueCode>> conds;
  for (const auto& c : slice.conditions()) {
    auto attr = *schema.find(c.attribute);
    conds.emplace_back(attr, *schema.value_code(attr, c.value));
  }
  auto member = [&](std::uint32_t row) {
    for (const auto& [attr, code] : conds) {
      if (ds.code(row, attr) != code) return false;
    }
    return true;
  };
  std::uint64_t train_support = 0;
  for (auto row : ds.split_rows(Split::kTrain)) train_support += member(row) ? 1 : 0;
  std::uint64_t val_support = 0;
  std::uint64_t val_correct = 0;
  for (auto row : ds.split_rows(Split::kVal)) {
    if (!member(row)) continue;
    ++val_support;
    val_correct += ds.correct(row) ? 1 : 0;
  }
  return make_stats(slice, train_support, val_support, val_correct,
                    ds.split_size(Split::kTrain), split_accuracy(ds, Split::kVal));
}

void MinerConfig::validate() const {
  if (!(rho > 0.0 && rho < 1.0)) {
    fail(ErrorKind::kConfig, "rho must lie in (0, 1), got " + format_shortest(rho));
  }
  if (!(epsilon >= 0.0)) {
    fail(ErrorKind::kConfig, "epsilon must be >= 0, got " + format_shortest(epsilon));
  }
  if (max_depth < 1) fail(ErrorKind::kConfig, "max_depth must be >= 1");
  if (min_val_support < 1) fail(ErrorKind::kConfig, "min_val_support must be >= 1");
  DecimalRatio::from_double(rho);
  DecimalRatio::from_double(epsilon);
}

json MinerConfig::to_json() const {
  return {{"rho", rho},
          {"epsilon", epsilon},
          {"max_depth", max_depth},
          {"min_val_support", min_val_support},
          {"min_train_support", min_train_support},
          {"rarity_split", to_string(rarity_split)},
          {"top_k", top_k},
          {"max_candidates", max_candidates}};
}

MinerConfig MinerConfig::from_json(const json& obj) {
  MinerConfig cfg;
  if (obj.is_null()) return cfg;
  if (!obj.is_object()) fail(ErrorKind::kConfig, "miner config must be a JSON object");
  try {
    cfg.rho = obj.value("rho", cfg.rho);
    cfg.epsilon = obj.value("epsilon", cfg.epsilon);
    cfg.max_depth = obj.value("max_depth", cfg.max_depth);
    cfg.min_val_support = obj.value("min_val_support", cfg.min_val_support);
    cfg.min_train_support = obj.value("min_train_support", cfg.min_train_support);
    if (obj.contains("rarity_split")) {
      cfg.rarity_split = parse_split(obj.at("rarity_split").get<std::string>());
    }
    cfg.top_k = obj.value("top_k", cfg.top_k);
    cfg.max_candidates = obj.value("max_candidates", cfg.max_candidates);
    cfg.workers = obj.value("workers", cfg.workers);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("miner config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

const char* to_string(BugStatus status) {
  switch (status) {
    case BugStatus::kBug: return "bug";
    case BugStatus::kNotBug: return "not_bug";
    case BugStatus::kInconclusive: return "inconclusive";
  }
  return "?";
}

namespace {

struct Thresholds {
  DecimalRatio rho;
  DecimalRatio epsilon;
};

Thresholds thresholds(const MinerConfig& cfg) {
  return {DecimalRatio::from_double(cfg.rho), DecimalRatio::from_double(cfg.epsilon)};
}

// support / size < rho
bool rare_exact(std::uint64_t support, std::uint64_t size, const DecimalRatio& rho) {
  return static_cast<Wide>(support) * rho.den < static_cast<Wide>(rho.num) * size;
}

// correct / n < overall.correct / overall.total - eps, with n > 0.
bool below_exact(std::uint64_t correct, std::uint64_t n, const Accuracy& overall,
                 const DecimalRatio& eps) {
  const Wide N = overall.total;
  const Wide lhs = static_cast<Wide>(correct) * N * eps.den;
  const Wide rhs = (static_cast<Wide>(overall.correct) * eps.den -
                    static_cast<Wide>(eps.num) * N) *
                   static_cast<Wide>(n);
  return lhs < rhs;
}

BugStatus classify(std::uint64_t rarity_support, std::uint64_t rarity_size,
                   std::uint64_t val_support, std::uint64_t val_correct,
                   const Accuracy& overall, const MinerConfig& cfg, const Thresholds& t) {
  if (val_support < cfg.min_val_support) return BugStatus::kInconclusive;
  if (!rare_exact(rarity_support, rarity_size, t.rho)) return BugStatus::kNotBug;
  return below_exact(val_correct, val_support, overall, t.epsilon) ? BugStatus::kBug
                                                                   : BugStatus::kNotBug;
}

}  // namespace

bool is_rare(const SliceStats& stats, const MinerConfig& cfg) {
  return rare_exact(stats.support(cfg.rarity_split), stats.split_size(cfg.rarity_split),
                    DecimalRatio::from_double(cfg.rho));
}

BugStatus is_bug(const SliceStats& stats, const Accuracy& overall_val,
                 const MinerConfig& cfg) {
  return classify(stats.support(cfg.rarity_split), stats.split_size(cfg.rarity_split),
                  stats.val_support, stats.val_correct, overall_val, cfg, thresholds(cfg));
}

bool ranks_before(const SliceStats& a, const SliceStats& b) {
  // Larger gap == lower accuracy; compare a.correct/a.n against b.correct/b.n.
  const Wide lhs = static_cast<Wide>(a.val_correct) * b.val_support;
  const Wide rhs = static_cast<Wide>(b.val_correct) * a.val_support;
  if (lhs != rhs) return lhs < rhs;
  if (a.val_support != b.val_support) return a.val_support > b.val_support;
  return a.slice.key() < b.slice.key();
}

// ---------------------------------------------------------------------------
// Enumeration

namespace {

using Words = std::vector<std::uint64_t>;

struct Item {
  std::uint32_t attr_pos;  // position in name-sorted attribute order
  AttributeSchema::ValueCode code;
};

struct Candidate {
  std::vector<Item> items;
  std::size_t parent = 0;  // index of the parent node in the previous level
  std::size_t extension = 0;  // index into the level-1 item table
};

struct Evaluated {
  std::uint64_t train_support = 0;
  std::uint64_t val_support = 0;
  std::uint64_t val_correct = 0;
  Words train_bits;
  Words val_bits;
};

std::uint64_t popcount(const Words& w) {
  std::uint64_t n = 0;
  for (auto x : w) n += static_cast<std::uint64_t>(std::popcount(x));
  return n;
}

std::uint64_t popcount_and(const Words& a, const Words& b) {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    n += static_cast<std::uint64_t>(std::popcount(a[i] & b[i]));
  }
  return n;
}

Words and_words(const Words& a, const Words& b) {
  Words out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] & b[i];
  return out;
}

std::string pack_key(const std::vector<Item>& items) {
  std::string k;
  k.reserve(items.size() * 6);
  for (const auto& it : items) {
    k.append(reinterpret_cast<const char*>(&it.attr_pos), sizeof(it.attr_pos));
    k.append(reinterpret_cast<const char*>(&it.code), sizeof(it.code));
  }
  return k;
}

class Miner {
 public:
  Miner(const Dataset& ds, const MinerConfig& cfg)
      : ds_(ds), cfg_(cfg), t_(thresholds(cfg)) {
    const auto& schema = ds.schema();
    order_.resize(schema.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) {
      return schema.attribute(a).name < schema.attribute(b).name;
    });
    overall_ = split_accuracy(ds, Split::kVal);
    train_size_ = ds.split_size(Split::kTrain);
    build_items();
  }

  BugSliceReport run() {
    BugSliceReport report;
    report.config = cfg_;
    report.overall_val = overall_;
    report.train_size = train_size_;

    std::vector<Candidate> level;
    for (std::size_t i = 0; i < items_.size(); ++i) {
      level.push_back({{items_[i]}, 0, i});
    }
    std::vector<Evaluated> prev_eval;
    std::vector<Candidate> prev_level;
    std::size_t depth = 1;
    while (!level.empty()) {
      evaluated_ += level.size();
      if (evaluated_ > cfg_.max_candidates) {
        fail(ErrorKind::kBudget,
             "candidate count " + std::to_string(evaluated_) + " exceeds the budget of " +
                 std::to_string(cfg_.max_candidates) + " (" +
                 std::to_string(ds_.schema().size()) + " attributes, depth " +
                 std::to_string(depth) + " of max_depth " + std::to_string(cfg_.max_depth) +
                 ")");
      }
      const bool keep_bits = depth < cfg_.max_depth;
      std::vector<Evaluated> eval(level.size());
      parallel_for(level.size(), cfg_.workers, [&](std::size_t i) {
        const Candidate& c = level[i];
        Evaluated& e = eval[i];
        if (depth == 1) {
          e.train_bits = item_train_[c.extension];
          e.val_bits = item_val_[c.extension];
        } else {
          e.train_bits = and_words(prev_eval[c.parent].train_bits, item_train_[c.extension]);
          e.val_bits = and_words(prev_eval[c.parent].val_bits, item_val_[c.extension]);
        }
        e.train_support = popcount(e.train_bits);
        e.val_support = popcount(e.val_bits);
        e.val_correct = popcount_and(e.val_bits, val_correct_);
        if (!keep_bits || e.train_support < cfg_.min_train_support) {
          Words().swap(e.train_bits);
          Words().swap(e.val_bits);
        }
      });

      for (std::size_t i = 0; i < level.size(); ++i) record(level[i], eval[i]);

      if (!keep_bits) break;
      auto next = extend(level, eval);
      prev_level = std::move(level);
      prev_eval = std::move(eval);
      level = std::move(next);
      ++depth;
    }

    report.candidates_evaluated = evaluated_;
    finish(report);
    return report;
  }

 private:
  void build_items() {
    const auto& schema = ds_.schema();
    auto train_rows = ds_.split_rows(Split::kTrain);
    auto val_rows = ds_.split_rows(Split::kVal);
    // Row -> position within its split.
    std::vector<std::uint32_t> pos(ds_.size());
    for (std::size_t i = 0; i < train_rows.size(); ++i) pos[train_rows[i]] = static_cast<std::uint32_t>(i);
    for (std::size_t i = 0; i < val_rows.size(); ++i) pos[val_rows[i]] = static_cast<std::uint32_t>(i);
    const std::size_t train_words = (train_rows.size() + 63) / 64;
    const std::size_t val_words = (val_rows.size() + 63) / 64;

    val_correct_.assign(val_words, 0);
    for (std::size_t i = 0; i < val_rows.size(); ++i) {
      if (ds_.correct(val_rows[i])) val_correct_[i / 64] |= std::uint64_t{1} << (i % 64);
    }
    for (std::size_t p = 0; p < order_.size(); ++p) {
      const std::size_t attr = order_[p];
      const auto& values = schema.attribute(attr).values;
      // Values in name order too, so enumeration order is canonical.
      std::vector<AttributeSchema::ValueCode> codes(values.size());
      std::iota(codes.begin(), codes.end(), AttributeSchema::ValueCode{0});
      std::sort(codes.begin(), codes.end(),
                [&](auto a, auto b) { return values[a] < values[b]; });
      for (auto code : codes) {
        Words tb(train_words, 0);
        Words vb(val_words, 0);
        for (auto row : ds_.index_rows(attr, code, Split::kTrain)) {
          tb[pos[row] / 64] |= std::uint64_t{1} << (pos[row] % 64);
        }
        for (auto row : ds_.index_rows(attr, code, Split::kVal)) {
          vb[pos[row] / 64] |= std::uint64_t{1} << (pos[row] % 64);
        }
        items_.push_back({static_cast<std::uint32_t>(p), code});
        item_train_.push_back(std::move(tb));
        item_val_.push_back(std::move(vb));
      }
    }
  }

  // Prefix join: two survivors sharing all but their last item, with the last
  // items on different attributes, produce a candidate. Every immediate subset
  // of the candidate must also have survived.
  std::vector<Candidate> extend(const std::vector<Candidate>& level,
                                const std::vector<Evaluated>& eval) {
    std::vector<std::size_t> survivors;
    std::unordered_set<std::string> survivor_keys;
    for (std::size_t i = 0; i < level.size(); ++i) {
      if (eval[i].train_support >= cfg_.min_train_support) {
        survivors.push_back(i);
        survivor_keys.insert(pack_key(level[i].items));
      }
    }
    std::vector<Candidate> next;
    const std::size_t k = level.empty() ? 0 : level.front().items.size();
    for (std::size_t a = 0; a < survivors.size(); ++a) {
      const auto& left = level[survivors[a]].items;
      for (std::size_t b = a + 1; b < survivors.size(); ++b) {
        const auto& right = level[survivors[b]].items;
        if (!std::equal(left.begin(), left.end() - 1, right.begin(),
                        [](const Item& x, const Item& y) {
                          return x.attr_pos == y.attr_pos && x.code == y.code;
                        })) {
          break;  // survivors are in lexicographic order, so the prefix group ended
        }
        if (right.back().attr_pos <= left.back().attr_pos) continue;
        std::vector<Item> items = left;
        items.push_back(right.back());
        bool all_survive = true;
        for (std::size_t drop = 0; drop + 2 < items.size() && all_survive; ++drop) {
          std::vector<Item> sub;
          sub.reserve(k);
          for (std::size_t j = 0; j < items.size(); ++j) {
            if (j != drop) sub.push_back(items[j]);
          }
          all_survive = survivor_keys.count(pack_key(sub)) > 0;
        }
        if (!all_survive) continue;
        next.push_back({std::move(items), survivors[a], level[survivors[b]].extension});
      }
    }
    return next;
  }

  Slice to_slice(const std::vector<Item>& items) const {
    std::vector<Condition> conds;
    const auto& schema = ds_.schema();
    for (const auto& it : items) {
      const std::size_t attr = order_[it.attr_pos];
      conds.push_back({schema.attribute(attr).name, schema.value_name(attr, it.code)});
    }
    return Slice(std::move(conds));
  }

  void record(const Candidate& c, const Evaluated& e) {
    const bool train_rarity = cfg_.rarity_split == Split::kTrain;
    const std::uint64_t rsupport = train_rarity ? e.train_support : e.val_support;
    const std::uint64_t rsize = train_rarity ? train_size_ : overall_.total;
    BugStatus status =
        classify(rsupport, rsize, e.val_support, e.val_correct, overall_, cfg_, t_);
    if (status == BugStatus::kBug) {
      bugs_.push_back(make_stats(to_slice(c.items), e.train_support, e.val_support,
                                 e.val_correct, train_size_, overall_));
    } else if (status == BugStatus::kInconclusive && e.val_support > 0 &&
               rare_exact(rsupport, rsize, t_.rho) &&
               below_exact(e.val_correct, e.val_support, overall_, t_.epsilon)) {
      inconclusive_.push_back(make_stats(to_slice(c.items), e.train_support,
                                         e.val_support, e.val_correct, train_size_,
                                         overall_));
    }
  }

  void finish(BugSliceReport& report) {
    std::unordered_map<std::string, const SliceStats*> by_key;
    for (const auto& s : bugs_) by_key.emplace(s.slice.key(), &s);

    std::vector<SliceStats> kept;
    for (const auto& s : bugs_) {
      if (!dominated(s, by_key)) kept.push_back(s);
    }
    std::sort(kept.begin(), kept.end(), ranks_before);
    report.bug_count = kept.size();
    if (kept.size() > cfg_.top_k) kept.resize(cfg_.top_k);
    report.bugs = std::move(kept);

    std::sort(inconclusive_.begin(), inconclusive_.end(), ranks_before);
    if (inconclusive_.size() > cfg_.top_k) inconclusive_.resize(cfg_.top_k);
    report.inconclusive = std::move(inconclusive_);
  }

  // A slice is dominated when some strict sub-conjunction is itself a bug
  // whose val accuracy is no higher.
  static bool dominated(const SliceStats& s,
                        const std::unordered_map<std::string, const SliceStats*>& by_key) {
    const auto& conds = s.slice.conditions();
    const std::size_t d = conds.size();
    if (d < 2) return false;
    for (std::uint32_t mask = 1; mask + 1 < (1u << d); ++mask) {
      std::vector<Condition> sub;
      for (std::size_t j = 0; j < d; ++j) {
        if (mask & (1u << j)) sub.push_back(conds[j]);
      }
      auto it = by_key.find(Slice(std::move(sub)).key());
      if (it == by_key.end()) continue;
      const SliceStats& t = *it->second;
      if (static_cast<Wide>(t.val_correct) * s.val_support <=
          static_cast<Wide>(s.val_correct) * t.val_support) {
        return true;
      }
    }
    return false;
  }

  const Dataset& ds_;
  MinerConfig cfg_;
  Thresholds t_;
  std::vector<std::size_t> order_;
  Accuracy overall_;
  std::uint64_t train_size_ = 0;
  std::vector<Item> items_;
  std::vector<Words> item_train_;
  std::vector<Words> item_val_;
  Words val_correct_;
  std::uint64_t evaluated_ = 0;
  std::vector<SliceStats> bugs_;
  std::vector<SliceStats> inconclusive_;
};

}  // namespace

BugSliceReport mine_bug_slices(const Dataset& ds, const MinerConfig& cfg) {
  cfg.validate();
  if (ds.split_size(Split::kTrain) == 0 || ds.split_size(Split::kVal) == 0) {
    fail(ErrorKind::kDomain, "mining needs non-empty train and val splits");
  }
  return Miner(ds, cfg).run();
}

std::vector<RankedValue> rank_attributes_by_error(const Dataset& ds, const MinerConfig& cfg) {
  MinerConfig depth1 = cfg;
  depth1.max_depth = 1;
  depth1.top_k = SIZE_MAX;
  BugSliceReport report = mine_bug_slices(ds, depth1);
  std::vector<RankedValue> out;
  for (const auto& s : report.bugs) {
    const auto& c = s.slice.conditions().front();
    out.push_back({c.attribute, c.value, *s.val_accuracy, s.val_support, s.val_correct});
  }
  // ranks_before already orders by ascending accuracy, then support, then key.
  if (out.size() > cfg.top_k) out.resize(cfg.top_k);
  return out;
}

// ---------------------------------------------------------------------------
// JSON

json stats_to_json(const SliceStats& s) {
  json conds = json::array();
  for (const auto& c : s.slice.conditions()) {
    conds.push_back({{"attribute", c.attribute}, {"value", c.value}});
  }
  return {{"slice", s.slice.key()},
          {"conditions", conds},
          {"depth", s.slice.depth()},
          {"train_support", s.train_support},
          {"val_support", s.val_support},
          {"val_correct", s.val_correct},
          {"train_fraction", s.train_fraction},
          {"val_fraction", s.val_fraction},
          {"val_accuracy", s.val_accuracy ? json(*s.val_accuracy) : json(nullptr)},
          {"accuracy_gap", s.accuracy_gap ? json(*s.accuracy_gap) : json(nullptr)}};
}

json report_to_json(const BugSliceReport& r) {
  json bugs = json::array();
  for (const auto& s : r.bugs) bugs.push_back(stats_to_json(s));
  json inconclusive = json::array();
  for (const auto& s : r.inconclusive) inconclusive.push_back(stats_to_json(s));
  return {{"format_version", kFormatVersion},
          {"type", "bug_slice_report"},
          {"overall_val_accuracy", r.overall_val.value()},
          {"overall_val_correct", r.overall_val.correct},
          {"split_sizes", {{"train", r.train_size}, {"val", r.overall_val.total}}},
          {"config", r.config.to_json()},
          {"candidates_evaluated", r.candidates_evaluated},
          {"bug_count", r.bug_count},
          {"bugs", bugs},
          {"inconclusive", inconclusive}};
}

}  // namespace slicemend
