// cli.hpp: command-line front end for flat key/value configs, CSV and JSON
// outputs, and the spectrum / scan / fit / compare / tuneout commands.
//
// Everything here is deterministic: identical config bytes, flags and input
// files give byte-identical outputs.

#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dicke/analysis.hpp"

namespace dicke::cli {

inline constexpr const char* tool_name = "dicke";
inline constexpr const char* tool_version = "1.0.0";

// ---------------------------------------------------------------------------
// Config

enum class Kind { real, integer, boolean, text, list };

struct KeySpec {
    Kind kind;
    std::string fallback; // empty means unset
};

// Every accepted key with its default. Units are part of the key names.
inline const std::map<std::string, KeySpec>& config_keys() {
    static const std::map<std::string, KeySpec> keys = {
        {"trap.omega_x_khz", {Kind::real, "149"}},
        {"trap.omega_y_khz", {Kind::real, "93"}},
        {"trap.omega_z_khz", {Kind::real, "243"}},
        {"coupling.g_x_khz", {Kind::real, "18"}},
        {"coupling.g_y_khz", {Kind::real, "17.5"}},
        {"field.b0_gauss", {Kind::real, ""}},
        {"field.b_y_gauss_per_um", {Kind::real, ""}},
        {"model.F", {Kind::real, "4"}},
        {"model.n_max", {Kind::integer, "5"}},
        {"zeeman.delta_khz", {Kind::real, "300"}},
        {"zeeman.offset_khz", {Kind::real, "0"}},
        {"thermal.mean_n_x", {Kind::real, "0.5"}},
        {"thermal.mean_n_y", {Kind::real, "0.5"}},
        {"thermal.mean_n_z", {Kind::real, "0.5"}},
        {"emission.eta_x", {Kind::real, "0.1"}},
        {"emission.eta_y", {Kind::real, "0.15"}},
        {"emission.eta_z", {Kind::real, ""}},
        {"spectrum.f_min_khz", {Kind::real, "-400"}},
        {"spectrum.f_max_khz", {Kind::real, "400"}},
        {"spectrum.step_khz", {Kind::real, "0.5"}},
        {"spectrum.linewidth_khz", {Kind::real, "2"}},
        {"spectrum.carrier", {Kind::boolean, "true"}},
        {"scan.delta_start_khz", {Kind::real, "0"}},
        {"scan.delta_stop_khz", {Kind::real, "330"}},
        {"scan.delta_step_khz", {Kind::real, "5"}},
        {"scan.delta_list_khz", {Kind::list, ""}},
        {"noise.fraction", {Kind::real, "0"}},
        {"noise.carrier_guard_khz", {Kind::real, "15"}},
        {"noise.seed", {Kind::integer, "1"}},
        {"peaks.min_height_fraction", {Kind::real, "0.001"}},
        {"peaks.min_separation_khz", {Kind::real, "3"}},
        {"fit.dressing", {Kind::text, "simplified"}},
        {"fit.guess_omega_x_khz", {Kind::real, "145"}},
        {"fit.guess_omega_y_khz", {Kind::real, "95"}},
        {"fit.guess_omega_z_khz", {Kind::real, "228"}},
        {"fit.guess_g_over_omega", {Kind::real, "0.15"}},
        {"fit.calibrate_zeeman", {Kind::boolean, "true"}},
        {"fit.trap_window_lo_khz", {Kind::real, "250"}},
        {"fit.trap_window_hi_khz", {Kind::real, "330"}},
        {"fit.zeeman_min_khz", {Kind::real, "270"}},
        {"fit.max_passes", {Kind::integer, "20"}},
        {"compare.gate_khz", {Kind::real, "10"}},
        {"compare.threshold_khz", {Kind::real, "2"}},
        {"tuneout.slope_hz_per_uw", {Kind::real, "-120"}},
        {"tuneout.intercept_khz", {Kind::real, "35"}},
        {"tuneout.p_max_uw", {Kind::real, "100"}},
        {"tuneout.points", {Kind::integer, "11"}},
        {"tuneout.sigma_khz", {Kind::real, "0.4"}},
        {"tuneout.max_power_uw", {Kind::real, "100"}},
        {"tuneout.exclude_above_max", {Kind::boolean, "true"}},
        {"constants.hbar", {Kind::real, "1.054571817e-34"}},
        {"constants.mu_b_j_per_gauss", {Kind::real, "9.2740100783e-28"}},
        {"constants.mass_kg", {Kind::real, "2.20695e-25"}},
        {"constants.g_f", {Kind::real, "0.25"}},
    };
    return keys;
}

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::string format_g(double v, int digits) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v == 0 ? 0.0 : v);
    return buf;
}

inline double parse_real(const std::string& text, const std::string& what) {
    double v = 0;
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v))
        throw ValidationError(what + ": not a finite number: '" + text + "'");
    return v;
}

inline std::int64_t parse_integer(const std::string& text, const std::string& what) {
    std::int64_t v = 0;
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ValidationError(what + ": not an integer: '" + text + "'");
    return v;
}

inline std::uint64_t parse_unsigned(const std::string& text, const std::string& what) {
    std::uint64_t v = 0;
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ValidationError(what + ": not an unsigned integer: '" + text + "'");
    return v;
}

inline bool parse_bool(const std::string& text, const std::string& what) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ValidationError(what + ": not a boolean: '" + text + "'");
}

inline std::vector<double> parse_list(const std::string& text, const std::string& what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_real(item, what));
    }
    return out;
}

// Normalized spelling of a value so that the hash ignores formatting.
inline std::string canonical_value(const std::string& key, const KeySpec& spec, const std::string& raw) {
    if (raw.empty()) return {};
    switch (spec.kind) {
    case Kind::real: return format_g(parse_real(raw, key), 17);
    case Kind::integer:
        return key == "noise.seed" ? std::to_string(parse_unsigned(raw, key)) : std::to_string(parse_integer(raw, key));
    case Kind::boolean: return parse_bool(raw, key) ? "true" : "false";
    case Kind::text: return raw;
    case Kind::list: {
        std::string out;
        for (double v : parse_list(raw, key)) out += (out.empty() ? "" : ",") + format_g(v, 17);
        return out;
    }
    }
    return raw;
}

// Flat "section.key = value" text. '#' starts a comment; blank lines are
// ignored; unknown or repeated keys are errors.
class Config {
public:
    Config() = default;

    static Config parse(std::string_view text) {
        Config c;
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            const auto nl = text.find('\n', pos);
            std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
            pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
            ++line_no;
            if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
            const std::string content = trim(line);
            if (content.empty()) continue;
            const auto eq = content.find('=');
            if (eq == std::string::npos)
                throw ValidationError("config line " + std::to_string(line_no) + ": expected 'key = value'");
            c.set(trim(content.substr(0, eq)), trim(content.substr(eq + 1)), line_no);
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read config file '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    void set(const std::string& key, const std::string& value, std::size_t line_no = 0) {
        const auto& keys = config_keys();
        const auto it = keys.find(key);
        const std::string where = line_no ? "config line " + std::to_string(line_no) + ": " : "config: ";
        if (it == keys.end()) throw ValidationError(where + "unknown key '" + key + "'");
        if (values_.count(key)) throw ValidationError(where + "duplicate key '" + key + "'");
        canonical_value(key, it->second, value); // validates the spelling
        values_[key] = value;
    }

    void override_value(const std::string& key, const std::string& value) {
        values_.erase(key);
        set(key, value);
    }

    std::string raw(const std::string& key) const {
        const auto& keys = config_keys();
        const auto it = keys.find(key);
        if (it == keys.end()) throw std::logic_error("config: unregistered key " + key);
        const auto v = values_.find(key);
        return v != values_.end() ? v->second : it->second.fallback;
    }
    bool has(const std::string& key) const { return !raw(key).empty(); }
    double real(const std::string& key) const { return parse_real(raw(key), key); }
    std::optional<double> optional_real(const std::string& key) const {
        return has(key) ? std::optional<double>(real(key)) : std::nullopt;
    }
    std::int64_t integer(const std::string& key) const { return parse_integer(raw(key), key); }
    std::uint64_t unsigned_integer(const std::string& key) const { return parse_unsigned(raw(key), key); }
    bool boolean(const std::string& key) const { return parse_bool(raw(key), key); }
    std::vector<double> list(const std::string& key) const { return parse_list(raw(key), key); }

    // Sorted, defaults-resolved, normalized "key=value" lines.
    std::string canonical() const {
        std::string out;
        for (const auto& [key, spec] : config_keys())
            out += key + "=" + canonical_value(key, spec, raw(key)) + "\n";
        return out;
    }

    // FNV-1a 64 of canonical(), as 16 hex digits.
    std::string hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char ch : canonical()) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

private:
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed views of a config

inline PhysicalConstants constants_from(const Config& c) {
    PhysicalConstants k;
    k.hbar = c.real("constants.hbar");
    k.mu_B = c.real("constants.mu_b_j_per_gauss");
    k.mass = c.real("constants.mass_kg");
    k.g_F = c.real("constants.g_f");
    k.validate();
    return k;
}

// Model parameters; delta comes from zeeman.delta_khz unless field.b0_gauss is
// set, and g_y from field.b_y_gauss_per_um when that is set.
inline ModelParams params_from(const Config& c) {
    ModelParams p;
    p.F = Spin::from_value(c.real("model.F"));
    const auto n_max = c.integer("model.n_max");
    require(n_max >= 2 && n_max <= 40, "model.n_max must be in [2, 40]");
    p.n_max = static_cast<int>(n_max);
    p.omega_x = khz_to_rad(c.real("trap.omega_x_khz"));
    p.omega_y = khz_to_rad(c.real("trap.omega_y_khz"));
    p.omega_z = khz_to_rad(c.real("trap.omega_z_khz"));
    p.g_x = khz_to_rad(c.real("coupling.g_x_khz"));
    p.g_y = khz_to_rad(c.real("coupling.g_y_khz"));
    p.delta = khz_to_rad(c.real("zeeman.delta_khz"));
    const PhysicalConstants k = constants_from(c);
    if (const auto b0 = c.optional_real("field.b0_gauss")) {
        p.delta = zeeman_splitting(*b0, k);
        p.B_0 = *b0;
    }
    if (const auto by = c.optional_real("field.b_y_gauss_per_um")) {
        require(p.omega_y > 0, "field.b_y_gauss_per_um needs trap.omega_y_khz > 0");
        p.b_y = *by * 1e6;
        p.g_y = std::abs(coupling_from_gradient(*p.b_y, p.omega_y, p.F, k));
    }
    p.validate();
    return p;
}

inline SpectrumConfig spectrum_from(const Config& c, bool no_carrier = false) {
    SpectrumConfig s;
    s.thermal.mean_n_x = c.real("thermal.mean_n_x");
    s.thermal.mean_n_y = c.real("thermal.mean_n_y");
    s.thermal.mean_n_z = c.real("thermal.mean_n_z");
    require(s.thermal.mean_n_x >= 0 && s.thermal.mean_n_y >= 0 && s.thermal.mean_n_z >= 0,
            "thermal.mean_n_* must be >= 0");
    s.eta_x = c.real("emission.eta_x");
    s.eta_y = c.real("emission.eta_y");
    s.eta_z = c.optional_real("emission.eta_z");
    require(s.eta_x >= 0 && s.eta_y >= 0 && (!s.eta_z || *s.eta_z >= 0), "emission.eta_* must be >= 0");
    const double lo = c.real("spectrum.f_min_khz"), hi = c.real("spectrum.f_max_khz");
    const double step = c.real("spectrum.step_khz");
    require(hi > lo && step > 0, "spectrum grid needs f_max_khz > f_min_khz and step_khz > 0");
    require((hi - lo) / step <= 1e6, "spectrum grid has more than 1e6 points");
    s.grid = make_grid(lo, hi, step);
    s.linewidth_khz = c.real("spectrum.linewidth_khz");
    require(s.linewidth_khz > 0, "spectrum.linewidth_khz must be > 0");
    s.include_carrier = c.boolean("spectrum.carrier") && !no_carrier;
    return s;
}

// Delta values (rad/s): the explicit list if given, else start..stop by step.
inline std::vector<double> deltas_from(const Config& c) {
    std::vector<double> khz;
    if (c.has("scan.delta_list_khz")) {
        khz = c.list("scan.delta_list_khz");
    } else {
        const double a = c.real("scan.delta_start_khz"), b = c.real("scan.delta_stop_khz");
        const double step = c.real("scan.delta_step_khz");
        require(step > 0 && b >= a, "scan range needs delta_stop_khz >= delta_start_khz and delta_step_khz > 0");
        const auto n = static_cast<long>(std::floor((b - a) / step + 1e-9));
        require(n < 100000, "scan range has too many points");
        for (long k = 0; k <= n; ++k) khz.push_back(a + static_cast<double>(k) * step);
    }
    require(!khz.empty(), "delta list is empty");
    std::vector<double> out;
    for (double d : khz) {
        require(d >= 0, "delta values must be >= 0");
        out.push_back(khz_to_rad(d));
    }
    return out;
}

inline Dressing dressing_from(const std::string& name) {
    if (name == "none") return Dressing::none;
    if (name == "simplified") return Dressing::simplified;
    if (name == "full") return Dressing::full;
    if (name == "forward") return Dressing::forward;
    throw ValidationError("fit.dressing must be one of none, simplified, full, forward; got '" + name + "'");
}

inline std::string dressing_name(Dressing d) {
    switch (d) {
    case Dressing::none: return "none";
    case Dressing::simplified: return "simplified";
    case Dressing::full: return "full";
    case Dressing::forward: return "forward";
    }
    return "?";
}

inline CalibrationOptions calibration_from(const Config& c) {
    CalibrationOptions o;
    o.dressing = dressing_from(c.raw("fit.dressing"));
    o.F = Spin::from_value(c.real("model.F"));
    o.n_max = static_cast<int>(c.integer("model.n_max"));
    o.guess_omega_x = khz_to_rad(c.real("fit.guess_omega_x_khz"));
    o.guess_omega_y = khz_to_rad(c.real("fit.guess_omega_y_khz"));
    o.guess_omega_z = khz_to_rad(c.real("fit.guess_omega_z_khz"));
    o.guess_g_over_omega = c.real("fit.guess_g_over_omega");
    o.calibrate_zeeman = c.boolean("fit.calibrate_zeeman");
    o.traps.delta_lo = khz_to_rad(c.real("fit.trap_window_lo_khz"));
    o.traps.delta_hi = khz_to_rad(c.real("fit.trap_window_hi_khz"));
    o.zeeman.delta_min = khz_to_rad(c.real("fit.zeeman_min_khz"));
    o.max_passes = static_cast<int>(c.integer("fit.max_passes"));
    require(o.guess_omega_x > 0 && o.guess_omega_y > 0 && o.guess_g_over_omega > 0, "fit guesses must be > 0");
    require(o.traps.delta_hi > o.traps.delta_lo, "fit.trap_window_hi_khz must exceed fit.trap_window_lo_khz");
    require(o.max_passes >= 1, "fit.max_passes must be >= 1");
    o.measurement = spectrum_from(c);
    return o;
}

// ---------------------------------------------------------------------------
// Output

using Json = nlohmann::ordered_json;

namespace detail {

inline void emit_string(std::string& out, const std::string& s) {
    out += Json(s).dump();
}

inline void emit(std::string& out, const Json& j, int indent) {
    const std::string pad(static_cast<std::size_t>(indent + 2), ' ');
    const std::string close(static_cast<std::size_t>(indent), ' ');
    switch (j.type()) {
    case Json::value_t::object: {
        if (j.empty()) {
            out += "{}";
            return;
        }
        out += "{\n";
        bool first = true;
        for (const auto& [k, v] : j.items()) {
            if (!first) out += ",\n";
            first = false;
            out += pad;
            emit_string(out, k);
            out += ": ";
            emit(out, v, indent + 2);
        }
        out += "\n" + close + "}";
        return;
    }
    case Json::value_t::array: {
        if (j.empty()) {
            out += "[]";
            return;
        }
        out += "[\n";
        for (std::size_t k = 0; k < j.size(); ++k) {
            if (k) out += ",\n";
            out += pad;
            emit(out, j[k], indent + 2);
        }
        out += "\n" + close + "]";
        return;
    }
    case Json::value_t::number_float: {
        const double v = j.get<double>();
        out += std::isfinite(v) ? format_g(v, 17) : "null";
        return;
    }
    default: out += j.dump();
    }
}

} // namespace detail

// Pretty JSON with insertion-ordered keys and floats at 17 significant digits.
inline std::string dump_json(const Json& j) {
    std::string out;
    detail::emit(out, j, 0);
    out += "\n";
    return out;
}

inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json measured_khz(const Measured& m) {
    return Json{{"value", number_or_null(rad_to_khz(m.value))}, {"sigma", number_or_null(rad_to_khz(m.sigma))}};
}

inline Json measured_plain(const Measured& m) {
    return Json{{"value", number_or_null(m.value)}, {"sigma", number_or_null(m.sigma)}};
}

struct Envelope {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::optional<std::string> timestamp;
    Json payload = Json::object();

    Json to_json() const {
        Json j;
        j["tool"] = tool_name;
        j["version"] = tool_version;
        j["config_hash"] = config_hash;
        j["seed"] = seed;
        if (timestamp) j["timestamp"] = *timestamp;
        j["payload"] = payload;
        return j;
    }

    std::string dump() const { return dump_json(to_json()); }

    static Envelope parse(const std::string& text) {
        Json j;
        try {
            j = Json::parse(text);
        } catch (const Json::exception& e) {
            throw IoError(std::string("malformed result envelope: ") + e.what());
        }
        Envelope e;
        try {
            e.config_hash = j.at("config_hash").get<std::string>();
            e.seed = j.at("seed").get<std::uint64_t>();
            if (j.contains("timestamp")) e.timestamp = j.at("timestamp").get<std::string>();
            e.payload = j.at("payload");
        } catch (const Json::exception& ex) {
            throw IoError(std::string("incomplete result envelope: ") + ex.what());
        }
        return e;
    }
};

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << content;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Comma-separated rows with a mandatory header.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

inline CsvTable parse_csv(const std::string& text, const std::vector<std::string>& expected_header,
                          const std::string& what) {
    CsvTable t;
    std::stringstream ss(text);
    std::string line;
    std::size_t line_no = 0;
    auto split = [](const std::string& l) {
        std::vector<std::string> cells;
        std::stringstream ls(l);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(trim(cell));
        if (!l.empty() && l.back() == ',') cells.emplace_back();
        return cells;
    };
    while (std::getline(ss, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        if (t.header.empty()) {
            t.header = split(line);
            if (t.header != expected_header) {
                std::string want;
                for (const auto& h : expected_header) want += (want.empty() ? "" : ",") + h;
                throw IoError(what + ": expected header '" + want + "'");
            }
            continue;
        }
        const auto cells = split(line);
        if (cells.size() != t.header.size())
            throw IoError(what + " line " + std::to_string(line_no) + ": expected " +
                          std::to_string(t.header.size()) + " columns");
        std::vector<double> row;
        for (const auto& cell : cells) {
            try {
                row.push_back(parse_real(cell, what + " line " + std::to_string(line_no)));
            } catch (const ValidationError& e) {
                throw IoError(e.what());
            }
        }
        t.rows.push_back(std::move(row));
    }
    if (t.header.empty()) throw IoError(what + ": empty file");
    return t;
}

inline std::string csv_line(std::initializer_list<double> values) {
    std::string out;
    for (double v : values) {
        if (!out.empty()) out += ',';
        out += format_g(v, 9);
    }
    return out + "\n";
}

// ---------------------------------------------------------------------------
// Commands

struct RunContext {
    Config config;
    std::filesystem::path out_dir = ".";
    std::uint64_t seed = 1;
    int threads = 1;
    bool no_carrier = false;
    bool timestamp = false;
    std::ostream* log = &std::cout;
};

inline Envelope make_envelope(const RunContext& ctx) {
    Envelope e;
    e.config_hash = ctx.config.hash();
    e.seed = ctx.seed;
    if (ctx.timestamp) {
        const auto now = std::chrono::system_clock::now();
        const std::time_t t = std::chrono::system_clock::to_time_t(now);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
        e.timestamp = std::string(buf);
    }
    return e;
}

// Independent stream per spectrum index so that noise does not depend on the
// evaluation order.
inline std::uint64_t stream_seed(std::uint64_t seed, std::size_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline void apply_noise(Spectrum& s, const Config& c, std::uint64_t seed, std::size_t index) {
    const double frac = c.real("noise.fraction");
    require(frac >= 0, "noise.fraction must be >= 0");
    if (frac == 0) return;
    add_noise(s, frac * sideband_reference(s, c.real("noise.carrier_guard_khz")), stream_seed(seed, index));
}

inline std::string spectrum_csv(const Spectrum& s) {
    std::string out = "freq_khz,psd\n";
    for (std::size_t k = 0; k < s.size(); ++k) out += csv_line({s.freq_khz[k], s.psd[k]});
    return out;
}

inline PeakSearch peak_search_from(const Config& c) {
    PeakSearch q;
    q.min_height_fraction = c.real("peaks.min_height_fraction");
    q.min_separation_khz = c.real("peaks.min_separation_khz");
    require(q.min_height_fraction > 0 && q.min_height_fraction <= 1, "peaks.min_height_fraction must be in (0, 1]");
    require(q.min_separation_khz > 0, "peaks.min_separation_khz must be > 0");
    return q;
}

inline Json peaks_json(const PeakList& peaks) {
    Json arr = Json::array();
    for (const auto& p : peaks)
        arr.push_back(Json{{"center_khz", p.center_khz},
                           {"center_err_khz", number_or_null(p.center_err_khz)},
                           {"height", p.height},
                           {"width_khz", p.width_khz}});
    return arr;
}

// spectrum.csv plus spectrum.json (peak list and metadata).
inline int cmd_spectrum(const RunContext& ctx) {
    const Config& c = ctx.config;
    ModelParams p = params_from(c);
    p.delta = std::max(0.0, p.delta + khz_to_rad(c.real("zeeman.offset_khz")));
    const SpectrumConfig sc = spectrum_from(c, ctx.no_carrier);
    Spectrum s = synthesize(p, sc);
    apply_noise(s, c, ctx.seed, 0);
    write_file(ctx.out_dir / "spectrum.csv", spectrum_csv(s));

    Envelope env = make_envelope(ctx);
    env.payload["delta_khz"] = rad_to_khz(p.delta);
    env.payload["points"] = s.size();
    env.payload["integral"] = integrate(s);
    env.payload["peaks"] = peaks_json(find_peaks(s, peak_search_from(c)));
    write_file(ctx.out_dir / "spectrum.json", env.dump());
    *ctx.log << "wrote " << (ctx.out_dir / "spectrum.csv").string() << " (" << s.size() << " points)\n";
    return 0;
}

// scan.csv (long format), peaks.csv and scan.json.
inline int cmd_scan(const RunContext& ctx) {
    const Config& c = ctx.config;
    const ModelParams p = params_from(c);
    const SpectrumConfig sc = spectrum_from(c, ctx.no_carrier);
    ScanOptions so;
    so.delta_offset = khz_to_rad(c.real("zeeman.offset_khz"));
    so.threads = ctx.threads;
    so.constants = constants_from(c);
    DeltaScan scan = scan_delta(p, deltas_from(c), sc, so);
    for (std::size_t k = 0; k < scan.size(); ++k) apply_noise(scan.spectra[k], c, ctx.seed, k);

    const PeakSearch q = peak_search_from(c);
    std::vector<PeakList> peaks(scan.size());
    parallel_for(scan.size(), ctx.threads, [&](std::size_t k) { peaks[k] = find_peaks(scan.spectra[k], q); });

    std::string map = "delta_khz,freq_khz,psd\n";
    std::string pk = "delta_khz,center_khz,center_err_khz,height,width_khz\n";
    std::size_t n_peaks = 0;
    for (std::size_t k = 0; k < scan.size(); ++k) {
        const double d = rad_to_khz(scan.deltas[k]);
        const Spectrum& s = scan.spectra[k];
        for (std::size_t i = 0; i < s.size(); ++i) map += csv_line({d, s.freq_khz[i], s.psd[i]});
        for (const auto& x : peaks[k]) pk += csv_line({d, x.center_khz, x.center_err_khz, x.height, x.width_khz});
        n_peaks += peaks[k].size();
    }
    write_file(ctx.out_dir / "scan.csv", map);
    write_file(ctx.out_dir / "peaks.csv", pk);

    Envelope env = make_envelope(ctx);
    env.payload["deltas"] = scan.size();
    env.payload["grid_points"] = scan.spectra.front().size();
    env.payload["delta_offset_khz"] = c.real("zeeman.offset_khz");
    env.payload["peaks"] = n_peaks;
    write_file(ctx.out_dir / "scan.json", env.dump());
    *ctx.log << "wrote " << (ctx.out_dir / "scan.csv").string() << " (" << scan.size() << " spectra)\n";
    return 0;
}

// Rebuilds a DeltaScan from the long-format CSV. Field labels come from the
// nominal Zeeman scale of the configured constants.
inline DeltaScan read_scan(const std::string& text, const Config& c) {
    const CsvTable t = parse_csv(text, {"delta_khz", "freq_khz", "psd"}, "scan file");
    if (t.rows.empty()) throw IoError("scan file: no data rows");
    DeltaScan scan;
    scan.nominal_scale = zeeman_splitting(1.0, constants_from(c));
    require(scan.nominal_scale > 0, "constants.g_f must be > 0 to label scan points by field");
    const double linewidth = c.real("spectrum.linewidth_khz");
    for (const auto& row : t.rows) {
        const double d = khz_to_rad(row[0]);
        if (scan.deltas.empty() || d != scan.deltas.back()) {
            if (!scan.deltas.empty() && d < scan.deltas.back())
                throw IoError("scan file: delta_khz must be ascending");
            scan.deltas.push_back(d);
            scan.spectra.push_back(Spectrum{{}, {}, linewidth});
        }
        scan.spectra.back().freq_khz.push_back(row[1]);
        scan.spectra.back().psd.push_back(row[2]);
    }
    for (const auto& s : scan.spectra) {
        if (s.freq_khz != scan.spectra.front().freq_khz)
            throw IoError("scan file: all spectra must share one frequency grid");
        if (s.size() < 3 || !std::is_sorted(s.freq_khz.begin(), s.freq_khz.end()) ||
            std::adjacent_find(s.freq_khz.begin(), s.freq_khz.end()) != s.freq_khz.end())
            throw IoError("scan file: frequency grid must be strictly ascending with at least 3 points");
    }
    scan.b_field.resize(scan.size());
    for (std::size_t k = 0; k < scan.size(); ++k) scan.b_field[k] = scan.deltas[k] / scan.nominal_scale;
    scan.params = params_from(c);
    return scan;
}

inline Json calibration_json(const CalibrationResult& r) {
    Json p;
    p["dressing"] = dressing_name(r.dressing);
    p["passes"] = r.passes;
    p["omega_x_khz"] = measured_khz(r.omega_x);
    p["omega_y_khz"] = measured_khz(r.omega_y);
    p["omega_z_khz"] = measured_khz(r.omega_z);
    p["zeeman_calibrated"] = r.zeeman_calibrated;
    p["zeeman_scale_khz_per_gauss"] = measured_khz(r.zeeman_scale);
    p["zeeman_offset_khz"] = measured_khz(r.zeeman_offset);
    p["g_x_khz"] = measured_khz(r.g_x);
    p["g_y_khz"] = measured_khz(r.g_y);
    p["g_over_omega_x"] = measured_plain(r.g_over_omega_x());
    p["g_over_omega_y"] = measured_plain(r.g_over_omega_y());
    p["Omega_over_omega_x"] = measured_plain(r.Omega_over_omega_x());
    p["Omega_over_omega_y"] = measured_plain(r.Omega_over_omega_y());
    return p;
}

// calibration.json from a scan file.
inline int cmd_fit(const RunContext& ctx, const std::string& scan_path) {
    const DeltaScan scan = read_scan(read_file(scan_path), ctx.config);
    const CalibrationResult r = calibrate(scan, calibration_from(ctx.config));
    Envelope env = make_envelope(ctx);
    env.payload = calibration_json(r);
    write_file(ctx.out_dir / "calibration.json", env.dump());
    char line[256];
    std::snprintf(line, sizeof line, "g_y/omega_y = %.4f(%.4f), g_x/omega_x = %.4f(%.4f)\n",
                  r.g_over_omega_y().value, r.g_over_omega_y().sigma, r.g_over_omega_x().value,
                  r.g_over_omega_x().sigma);
    *ctx.log << line;
    return 0;
}

inline const std::array<const char*, compared_transitions>& transition_names() {
    static const std::array<const char*, compared_transitions> names = {"E1-E0", "E2-E0", "E3-E0", "E2-E1"};
    return names;
}

// compare.csv (per delta and transition) and compare.json (summary).
inline int cmd_compare(const RunContext& ctx) {
    const Config& c = ctx.config;
    CompareOptions o;
    o.gate_khz = c.real("compare.gate_khz");
    o.threads = ctx.threads;
    require(o.gate_khz > 0, "compare.gate_khz must be > 0");
    const CompareReport rep = compare_models(params_from(c), deltas_from(c), spectrum_from(c), o);

    std::string csv = "delta_khz,transition,line_khz,ridge_khz,deviation_khz\n";
    for (const auto& row : rep.rows)
        for (int t = 0; t < compared_transitions; ++t)
            csv += csv_line({rad_to_khz(row.delta), static_cast<double>(t), row.line_khz[t], row.ridge_khz[t],
                             row.deviation_khz[t]});
    write_file(ctx.out_dir / "compare.csv", csv);

    const double threshold = c.real("compare.threshold_khz");
    Envelope env = make_envelope(ctx);
    Json per = Json::object();
    for (int t = 0; t < compared_transitions; ++t) per[transition_names()[t]] = rep.max_deviation_khz[t];
    env.payload["deltas"] = rep.rows.size();
    env.payload["transitions"] = Json(transition_names());
    env.payload["max_deviation_khz"] = rep.max_deviation;
    env.payload["max_deviation_per_transition_khz"] = per;
    env.payload["unmatched"] = rep.unmatched;
    env.payload["threshold_khz"] = threshold;
    env.payload["within_threshold"] = rep.unmatched == 0 && rep.max_deviation <= threshold;
    write_file(ctx.out_dir / "compare.json", env.dump());
    *ctx.log << "max deviation " << format_g(rep.max_deviation, 6) << " kHz, unmatched " << rep.unmatched << "\n";
    return 0;
}

inline std::vector<TuneoutPoint> read_tuneout_points(const std::string& text) {
    const CsvTable t = parse_csv(text, {"power_uw", "omega_khz", "omega_err_khz"}, "tune-out file");
    std::vector<TuneoutPoint> pts;
    for (const auto& r : t.rows) pts.push_back({r[0], r[1], r[2]});
    return pts;
}

// tuneout.json; with no points file the data are synthesized from the config
// and also written to tuneout_points.csv.
inline int cmd_tuneout(const RunContext& ctx, const std::optional<std::string>& points_path) {
    const Config& c = ctx.config;
    std::vector<TuneoutPoint> pts;
    if (points_path) {
        pts = read_tuneout_points(read_file(*points_path));
    } else {
        TuneoutSynthesis ts;
        ts.slope_khz_per_uw = c.real("tuneout.slope_hz_per_uw") * 1e-3;
        ts.intercept_khz = c.real("tuneout.intercept_khz");
        ts.p_max_uw = c.real("tuneout.p_max_uw");
        ts.points = static_cast<int>(c.integer("tuneout.points"));
        ts.sigma_khz = c.real("tuneout.sigma_khz");
        pts = synthesize_tuneout(ts, ctx.seed);
        std::string csv = "power_uw,omega_khz,omega_err_khz\n";
        for (const auto& p : pts) csv += csv_line({p.power_uw, p.omega_khz, p.omega_err_khz});
        write_file(ctx.out_dir / "tuneout_points.csv", csv);
    }
    const double cap = c.boolean("tuneout.exclude_above_max") ? c.real("tuneout.max_power_uw")
                                                               : std::numeric_limits<double>::infinity();
    const TuneoutFit f = fit_tuneout(pts, cap);
    Envelope env = make_envelope(ctx);
    env.payload["source"] = points_path ? "file" : "synthetic";
    env.payload["slope_hz_per_uw"] = Json{{"value", f.line.slope * 1e3}, {"sigma", f.line.slope_err * 1e3}};
    env.payload["intercept_khz"] = Json{{"value", f.line.intercept}, {"sigma", f.line.intercept_err}};
    env.payload["covariance_hz_khz_per_uw"] = f.line.covariance * 1e3;
    env.payload["chi2"] = f.line.chi2;
    env.payload["dof"] = f.line.dof;
    env.payload["used"] = f.used;
    env.payload["excluded"] = f.excluded;
    write_file(ctx.out_dir / "tuneout.json", env.dump());
    *ctx.log << "slope " << format_g(f.line.slope * 1e3, 6) << " +- " << format_g(f.line.slope_err * 1e3, 3)
             << " Hz/uW\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Entry point

inline constexpr int exit_ok = 0;
inline constexpr int exit_validation = 2;
inline constexpr int exit_fit = 3;
inline constexpr int exit_io = 4;

inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Spin-motion Dicke model spectra, scans and calibration fits"};
    app.set_version_flag("--version", std::string(tool_version));
    app.require_subcommand(1);
    std::string config_path, out_dir = ".";
    std::optional<std::uint64_t> seed;
    int threads = 1;
    bool no_carrier = false, timestamp = false;
    app.add_option("--config", config_path, "Config file (section.key = value)");
    app.add_option("--out", out_dir, "Output directory");
    app.add_option("--seed", seed, "Noise seed (overrides noise.seed)");
    app.add_option("--threads", threads, "Worker threads for scans")->check(CLI::Range(1, 256));
    app.add_flag("--no-carrier", no_carrier, "Drop the carrier from rendered spectra");
    app.add_flag("--timestamp", timestamp, "Record the wall-clock time in JSON outputs");

    auto* spectrum = app.add_subcommand("spectrum", "Spectrum at zeeman.delta_khz");
    auto* scan = app.add_subcommand("scan", "Spectra over the delta grid, with peak lists");
    auto* fit = app.add_subcommand("fit", "Calibrate trap frequencies, Zeeman map and couplings from a scan");
    std::string scan_file;
    fit->add_option("scan", scan_file, "scan.csv written by 'scan'")->required();
    auto* compare = app.add_subcommand("compare", "Four-level lines against full-model peak ridges");
    auto* tuneout = app.add_subcommand("tuneout", "Linear fit of Rabi splitting against tune-out power");
    std::string points_file;
    tuneout->add_option("points", points_file, "power_uw,omega_khz,omega_err_khz file (synthetic if omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_validation;
    }

    try {
        RunContext ctx;
        ctx.config = config_path.empty() ? Config{} : Config::load(config_path);
        if (seed) ctx.config.override_value("noise.seed", std::to_string(*seed));
        ctx.seed = ctx.config.unsigned_integer("noise.seed");
        ctx.out_dir = out_dir;
        ctx.threads = threads;
        ctx.no_carrier = no_carrier;
        ctx.timestamp = timestamp;
        ctx.log = &out;
        if (*spectrum) return cmd_spectrum(ctx);
        if (*scan) return cmd_scan(ctx);
        if (*fit) return cmd_fit(ctx, scan_file);
        if (*compare) return cmd_compare(ctx);
        if (*tuneout) return cmd_tuneout(ctx, points_file.empty() ? std::nullopt : std::optional(points_file));
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << "\n";
        return exit_validation;
    } catch (const FitError& e) {
        err << "fit error: " << e.what() << "\n";
        return exit_fit;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << "\n";
        return exit_io;
    }
    return exit_validation;
}

} // namespace dicke::cli
