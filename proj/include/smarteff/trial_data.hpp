#pragma once

// Prototypical two-stage SMART data: domain types, CSV ingestion, design
// validation and the weight-and-replicate expansion.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "smarteff/errors.hpp"

namespace smarteff {

/// Contrast-coded embedded adaptive intervention (a1, a2NR), both in {-1, +1}.
struct AiLabel {
    int a1 = 1;
    int a2nr = 1;

    static AiLabel make(int a1, int a2nr) {
        if ((a1 != 1 && a1 != -1) || (a2nr != 1 && a2nr != -1))
            throw InputError("adaptive intervention codes must be -1 or 1");
        return AiLabel{a1, a2nr};
    }

    /// Zero-based position in the embedded-AI table: d = index() + 1.
    constexpr int index() const { return (a1 == 1 ? 0 : 2) + (a2nr == 1 ? 0 : 1); }

    static constexpr AiLabel from_index(int idx) {
        return AiLabel{idx < 2 ? 1 : -1, idx % 2 == 0 ? 1 : -1};
    }

    std::string str() const {
        return "(" + std::to_string(a1) + "," + std::to_string(a2nr) + ")";
    }

    friend constexpr bool operator==(const AiLabel&, const AiLabel&) = default;
};

/// The four embedded AIs in table order: d = 1..4.
inline constexpr std::array<AiLabel, 4> kEmbeddedAis{
    AiLabel{1, 1}, AiLabel{1, -1}, AiLabel{-1, 1}, AiLabel{-1, -1}};

/// Design randomization probabilities: p11 = P(A1 = 1), p21 = P(A2 = 1 | A1, R = 0).
struct RandProbs {
    double p11 = 0.5;
    double p21 = 0.5;
};

struct TrialRecord {
    std::string id;
    int a1 = 1;
    int r = 0;
    std::optional<int> a2;
    std::vector<double> x;    // baseline covariates
    std::vector<double> aux;  // post-baseline auxiliaries (weight models only)
    std::optional<double> y0; // baseline outcome (time 0)
    std::vector<double> y;    // outcomes at times 1..T

    bool responder() const { return r == 1; }

    /// Design cell 1..6 (table order), or 0 if the codes are inconsistent.
    int design_cell() const {
        if (a1 == 1) {
            if (r == 1) return 1;
            if (a2 == 1) return 2;
            if (a2 == -1) return 3;
        } else if (a1 == -1) {
            if (r == 1) return 4;
            if (a2 == 1) return 5;
            if (a2 == -1) return 6;
        }
        return 0;
    }
};

struct SmartDataset {
    std::vector<TrialRecord> records;
    int T = 1;
    int t_star = 0;  // 0 when unspecified (single-occasion data)
    bool has_baseline = false;
    std::vector<std::string> covariate_names;
    std::vector<std::string> aux_names;
    RandProbs rand_probs;

    std::size_t n() const { return records.size(); }

    std::size_t n_responders() const {
        return static_cast<std::size_t>(std::count_if(
            records.begin(), records.end(), [](const TrialRecord& r) { return r.responder(); }));
    }

    /// Index of a covariate by name; accepts the bare name or the "x_" column name.
    std::optional<std::size_t> covariate_index(std::string_view name) const {
        if (name.starts_with("x_")) name.remove_prefix(2);
        for (std::size_t k = 0; k < covariate_names.size(); ++k)
            if (covariate_names[k] == name) return k;
        return std::nullopt;
    }

    std::optional<std::size_t> aux_index(std::string_view name) const {
        if (name.starts_with("l_")) name.remove_prefix(2);
        for (std::size_t k = 0; k < aux_names.size(); ++k)
            if (aux_names[k] == name) return k;
        return std::nullopt;
    }
};

struct ReplicatedRow {
    std::size_t source_index = 0;
    std::string source_id;
    AiLabel ai;
    double weight = 0.0;  // filled by the weighting step
    std::vector<double> x;
    std::vector<double> y;
};

struct ValidationCheck {
    std::string name;
    bool passed = true;
    std::string message;
    std::vector<std::string> offending_ids;
};

struct ValidationReport {
    std::vector<ValidationCheck> checks;
    std::array<std::size_t, 6> cell_counts{};    // over raw records, sums to n
    std::array<std::size_t, 4> ai_row_counts{};  // over replicated rows, sums to n + n_responders

    bool passed() const {
        return std::all_of(checks.begin(), checks.end(),
                           [](const ValidationCheck& c) { return c.passed; });
    }

    const ValidationCheck* find(std::string_view name) const {
        for (const auto& c : checks)
            if (c.name == name) return &c;
        return nullptr;
    }

    std::vector<int> empty_cells() const {
        std::vector<int> out;
        for (int c = 0; c < 6; ++c)
            if (cell_counts[c] == 0) out.push_back(c + 1);
        return out;
    }
};

/// Column naming of the wide CSV layout.
struct CsvSchema {
    std::string id = "id";
    std::string a1 = "a1";
    std::string r = "r";
    std::string a2 = "a2";
    std::string covariate_prefix = "x_";
    std::string aux_prefix = "l_";
    std::string outcome_prefix = "y_";
};

/// All AIs a record's observed pathway is consistent with. Responders are
/// consistent with both AIs sharing their a1.
inline std::vector<AiLabel> consistent_ais(const TrialRecord& rec) {
    if (rec.responder()) return {AiLabel{rec.a1, 1}, AiLabel{rec.a1, -1}};
    return {AiLabel{rec.a1, rec.a2.value_or(1)}};
}

inline bool consistent_with(const TrialRecord& rec, const AiLabel& ai) {
    if (rec.a1 != ai.a1) return false;
    return rec.responder() || rec.a2 == ai.a2nr;
}

inline std::vector<ReplicatedRow> replicate(const SmartDataset& ds) {
    std::vector<ReplicatedRow> rows;
    rows.reserve(ds.n() + ds.n_responders());
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto& rec = ds.records[i];
        for (const auto& ai : consistent_ais(rec))
            rows.push_back(ReplicatedRow{i, rec.id, ai, 0.0, rec.x, rec.y});
    }
    return rows;
}

inline ValidationReport validate(const SmartDataset& ds) {
    ValidationReport rep;

    ValidationCheck consistency{"consistency", true, "", {}};
    ValidationCheck dims{"dimensions", true, "", {}};
    ValidationCheck finite{"finite_values", true, "", {}};
    ValidationCheck design{"design", true, "", {}};

    for (const auto& rec : ds.records) {
        const int cell = rec.design_cell();
        const bool codes_ok = (rec.a1 == 1 || rec.a1 == -1) && (rec.r == 0 || rec.r == 1) &&
                              (!rec.a2 || *rec.a2 == 1 || *rec.a2 == -1);
        if (!codes_ok || cell == 0 || (rec.responder() && rec.a2)) {
            consistency.passed = false;
            consistency.offending_ids.push_back(rec.id);
        } else {
            ++rep.cell_counts[cell - 1];
            for (const auto& ai : consistent_ais(rec)) ++rep.ai_row_counts[ai.index()];
        }
        if (rec.x.size() != ds.covariate_names.size() || rec.aux.size() != ds.aux_names.size() ||
            rec.y.size() != static_cast<std::size_t>(ds.T) || rec.y0.has_value() != ds.has_baseline) {
            dims.passed = false;
            dims.offending_ids.push_back(rec.id);
        }
        auto all_finite = [](const std::vector<double>& v) {
            return std::all_of(v.begin(), v.end(), [](double d) { return std::isfinite(d); });
        };
        if (!all_finite(rec.x) || !all_finite(rec.aux) || !all_finite(rec.y) ||
            (rec.y0 && !std::isfinite(*rec.y0))) {
            finite.passed = false;
            finite.offending_ids.push_back(rec.id);
        }
    }
    if (!consistency.passed)
        consistency.message = "responders must have no second-stage code; non-responders need one";

    ValidationCheck positivity{"positivity", true, "", {}};
    for (int c = 0; c < 6; ++c) {
        if (rep.cell_counts[c] == 0) {
            positivity.passed = false;
            positivity.message += (positivity.message.empty() ? "empty design cell(s): " : ", ");
            positivity.message += std::to_string(c + 1);
        }
    }

    const auto& p = ds.rand_probs;
    if (!(p.p11 > 0.0 && p.p11 < 1.0 && p.p21 > 0.0 && p.p21 < 1.0)) {
        design.passed = false;
        design.message = "randomization probabilities must lie in (0, 1)";
    } else if (ds.T < 1 || ds.t_star < 0 || (ds.T >= 2 && ds.t_star >= ds.T)) {
        design.passed = false;
        design.message = "need T >= 1 and 1 <= t_star < T";
    }

    rep.checks = {positivity, consistency, dims, finite, design};
    return rep;
}

/// Copy of the dataset keeping only the final outcome occasion.
inline SmartDataset final_occasion_only(const SmartDataset& ds) {
    SmartDataset out = ds;
    out.T = 1;
    out.t_star = 0;
    out.has_baseline = false;
    for (auto& rec : out.records) {
        rec.y0.reset();
        if (!rec.y.empty()) rec.y = {rec.y.back()};
    }
    return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::optional<double> parse_double(std::string_view s) {
    s = trim(s);
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::optional<int> parse_code(std::string_view s) {
    auto v = parse_double(s);
    if (!v || std::floor(*v) != *v) return std::nullopt;
    return static_cast<int>(*v);
}

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace detail

/// Parses the wide CSV layout `id,a1,r,a2,x_<name>...,[l_<name>...],[y_0,]y_1..y_T`.
/// `T` = 0 infers the number of occasions from the header; `t_star` = -1
/// defaults to 1 when T >= 2.
inline SmartDataset load_dataset(std::istream& in, const CsvSchema& schema = {}, int T = 0,
                                 int t_star = -1, RandProbs probs = {}) {
    std::string line;
    if (!std::getline(in, line)) throw InputError("empty input: header row required");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
    const auto header = detail::split_csv_line(line);

    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t k = 0; k < header.size(); ++k) {
        std::string name(detail::trim(header[k]));
        if (!col.emplace(name, k).second) throw InputError("duplicate column '" + name + "'");
    }
    auto require = [&](const std::string& name) {
        auto it = col.find(name);
        if (it == col.end()) throw InputError("missing required column '" + name + "'");
        return it->second;
    };
    const std::size_t c_id = require(schema.id);
    const std::size_t c_a1 = require(schema.a1);
    const std::size_t c_r = require(schema.r);
    const std::size_t c_a2 = require(schema.a2);

    SmartDataset ds;
    ds.rand_probs = probs;
    std::vector<std::size_t> c_x, c_l;
    std::vector<std::pair<int, std::size_t>> c_y;
    for (std::size_t k = 0; k < header.size(); ++k) {
        const std::string name(detail::trim(header[k]));
        if (name.starts_with(schema.covariate_prefix)) {
            ds.covariate_names.push_back(name.substr(schema.covariate_prefix.size()));
            c_x.push_back(k);
        } else if (name.starts_with(schema.aux_prefix)) {
            ds.aux_names.push_back(name.substr(schema.aux_prefix.size()));
            c_l.push_back(k);
        } else if (name.starts_with(schema.outcome_prefix)) {
            auto t = detail::parse_code(name.substr(schema.outcome_prefix.size()));
            if (!t || *t < 0) throw InputError("outcome column '" + name + "' must be y_<t>");
            c_y.emplace_back(*t, k);
        }
    }
    std::sort(c_y.begin(), c_y.end());
    std::optional<std::size_t> c_y0;
    if (!c_y.empty() && c_y.front().first == 0) {
        c_y0 = c_y.front().second;
        c_y.erase(c_y.begin());
        ds.has_baseline = true;
    }
    if (c_y.empty()) throw InputError("missing required column '" + schema.outcome_prefix + "1'");
    for (std::size_t k = 0; k < c_y.size(); ++k)
        if (c_y[k].first != static_cast<int>(k) + 1)
            throw InputError("missing required column '" + schema.outcome_prefix +
                             std::to_string(k + 1) + "'");
    const int found_T = static_cast<int>(c_y.size());
    if (T > 0 && T != found_T)
        throw InputError("expected " + std::to_string(T) + " outcome columns, found " +
                         std::to_string(found_T));
    ds.T = found_T;
    ds.t_star = t_star >= 0 ? t_star : (ds.T >= 2 ? 1 : 0);
    if (ds.T >= 2 && (ds.t_star < 1 || ds.t_star >= ds.T))
        throw InputError("t_star must satisfy 1 <= t_star < T");

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split_csv_line(line);
        const std::string where = " (line " + std::to_string(line_no) + ")";
        if (f.size() != header.size())
            throw InputError("expected " + std::to_string(header.size()) + " fields, found " +
                             std::to_string(f.size()) + where);
        TrialRecord rec;
        rec.id = std::string(detail::trim(f[c_id]));
        auto a1 = detail::parse_code(f[c_a1]);
        if (!a1 || (*a1 != 1 && *a1 != -1)) throw InputError("a1 must be -1 or 1" + where);
        auto r = detail::parse_code(f[c_r]);
        if (!r || (*r != 0 && *r != 1)) throw InputError("r must be 0 or 1" + where);
        rec.a1 = *a1;
        rec.r = *r;
        const auto a2_text = detail::trim(f[c_a2]);
        if (!a2_text.empty()) {
            if (rec.r == 1) throw InputError("responder has a second-stage assignment" + where);
            auto a2 = detail::parse_code(a2_text);
            if (!a2 || (*a2 != 1 && *a2 != -1)) throw InputError("a2 must be -1 or 1" + where);
            rec.a2 = *a2;
        } else if (rec.r == 0) {
            throw InputError("non-responder missing second-stage assignment" + where);
        }
        auto numeric = [&](std::size_t k, const char* what) {
            const auto text = detail::trim(f[k]);
            if (text.empty())
                throw InputError(std::string("missing ") + what + "; imputation out of scope (column '" +
                                 std::string(detail::trim(header[k])) + "')" + where);
            auto v = detail::parse_double(text);
            if (!v) throw InputError(std::string("non-numeric ") + what + " '" + std::string(text) + "'" + where);
            return *v;
        };
        for (auto k : c_x) rec.x.push_back(numeric(k, "covariate"));
        for (auto k : c_l) rec.aux.push_back(numeric(k, "auxiliary"));
        if (c_y0) rec.y0 = numeric(*c_y0, "outcome");
        for (const auto& [t, k] : c_y) rec.y.push_back(numeric(k, "outcome"));
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

inline SmartDataset load_dataset_from_string(const std::string& text, int T = 0, int t_star = -1,
                                             RandProbs probs = {}) {
    std::istringstream in(text);
    return load_dataset(in, CsvSchema{}, T, t_star, probs);
}

/// Writes the dataset in the layout `load_dataset` reads. Doubles use the
/// shortest round-trip representation.
inline void write_dataset(std::ostream& out, const SmartDataset& ds, const CsvSchema& schema = {}) {
    out << schema.id << ',' << schema.a1 << ',' << schema.r << ',' << schema.a2;
    for (const auto& n : ds.covariate_names) out << ',' << schema.covariate_prefix << n;
    for (const auto& n : ds.aux_names) out << ',' << schema.aux_prefix << n;
    if (ds.has_baseline) out << ',' << schema.outcome_prefix << 0;
    for (int t = 1; t <= ds.T; ++t) out << ',' << schema.outcome_prefix << t;
    out << '\n';
    for (const auto& rec : ds.records) {
        out << detail::csv_escape(rec.id) << ',' << rec.a1 << ',' << rec.r << ',';
        if (rec.a2) out << *rec.a2;
        for (double v : rec.x) out << ',' << detail::format_double(v);
        for (double v : rec.aux) out << ',' << detail::format_double(v);
        if (rec.y0) out << ',' << detail::format_double(*rec.y0);
        for (double v : rec.y) out << ',' << detail::format_double(v);
        out << '\n';
    }
}

}  // namespace smarteff
