#include "dfps/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dfps {

namespace fs = std::filesystem;

Json config_to_json(const DfpsConfig& cfg) {
    Json j;
    j["n"] = cfg.dims.n;
    j["m1"] = cfg.dims.m1;
    j["m2"] = cfg.dims.m2;
    j["N"] = cfg.N;
    j["M"] = cfg.M;
    j["B"] = cfg.B;
    j["P"] = cfg.P;
    j["eps_tol"] = cfg.eps_tol;
    j["N_A"] = cfg.N_A;
    j["N_B"] = cfg.N_B;
    j["N_C"] = cfg.N_C;
    j["warmstart"] = cfg.warmstart;
    j["T"] = cfg.T;
    j["seed"] = cfg.seed;
    j["scenario_seed"] = cfg.scenario_seed;
    j["variant"] = static_cast<int>(cfg.variant);
    j["minibatch_envs"] = cfg.minibatch_envs;
    j["sgd_envs"] = cfg.sgd_envs;
    j["eval_envs"] = cfg.eval_envs;
    j["eval_paths"] = cfg.eval_paths;
    j["explore_std"] = cfg.explore_std;
    j["terminal_weight"] = cfg.terminal_weight;
    j["eta"] = cfg.eta;
    j["rho_u_init"] = cfg.rho_u_init;
    j["rho_x_init"] = cfg.rho_x_init;
    return j;
}

DfpsConfig config_from_json(const Json& j) {
    DfpsConfig cfg;
    auto get = [&j](const char* key, auto fallback) {
        using T = decltype(fallback);
        return j.contains(key) ? j.at(key).get<T>() : fallback;
    };
    cfg.dims.n = get("n", cfg.dims.n);
    cfg.dims.m1 = get("m1", cfg.dims.m1);
    cfg.dims.m2 = get("m2", cfg.dims.m2);
    cfg.N = get("N", cfg.N);
    cfg.M = get("M", cfg.M);
    cfg.B = get("B", cfg.B);
    cfg.P = get("P", cfg.P);
    cfg.eps_tol = get("eps_tol", cfg.eps_tol);
    cfg.N_A = get("N_A", cfg.N_A);
    cfg.N_B = get("N_B", cfg.N_B);
    cfg.N_C = get("N_C", cfg.N_C);
    cfg.warmstart = get("warmstart", cfg.warmstart);
    cfg.T = get("T", cfg.T);
    cfg.seed = get("seed", cfg.seed);
    cfg.scenario_seed = get("scenario_seed", cfg.scenario_seed);
    cfg.variant = static_cast<Variant>(get("variant", static_cast<int>(cfg.variant)));
    cfg.minibatch_envs = get("minibatch_envs", cfg.minibatch_envs);
    cfg.sgd_envs = get("sgd_envs", cfg.sgd_envs);
    cfg.eval_envs = get("eval_envs", cfg.eval_envs);
    cfg.eval_paths = get("eval_paths", cfg.eval_paths);
    cfg.explore_std = get("explore_std", cfg.explore_std);
    cfg.terminal_weight = get("terminal_weight", cfg.terminal_weight);
    cfg.eta = get("eta", cfg.eta);
    cfg.rho_u_init = get("rho_u_init", cfg.rho_u_init);
    cfg.rho_x_init = get("rho_x_init", cfg.rho_x_init);
    return cfg;
}

Json record_to_json(const DiagnosticsRecord& rec) {
    Json j;
    j["stage"] = rec.stage;
    j["picard_iter"] = rec.picard_iter;
    j["J1"] = rec.J1;
    j["J2"] = rec.J2;
    j["follower_residual"] = rec.follower_residual;
    j["leader_residual"] = rec.leader_residual;
    j["delta_T"] = rec.delta_T;
    j["V_u1"] = rec.V_u1;
    j["V_x1"] = rec.V_x1;
    j["V_u2"] = rec.V_u2;
    j["V_x2"] = rec.V_x2;
    j["rho_u1"] = rec.rho_u1;
    j["rho_x1"] = rec.rho_x1;
    j["rho_u2"] = rec.rho_u2;
    j["rho_x2"] = rec.rho_x2;
    j["picard_error"] = std::isfinite(rec.picard_error) ? Json(rec.picard_error)
                                                        : Json(nullptr);
    j["dual_step_taken"] = rec.dual_step_taken;
    j["train_V_u"] = rec.train_V_u;
    j["train_V_x"] = rec.train_V_x;
    j["eps_opt_u"] = rec.eps_opt_u;
    j["eps_net_u"] = rec.eps_net_u;
    j["eps_opt_x"] = rec.eps_opt_x;
    j["eps_net_x"] = rec.eps_net_x;
    return j;
}

Json final_metrics_to_json(const FinalMetrics& fm) {
    Json j;
    j["J1"] = fm.J1;
    j["J2"] = fm.J2;
    j["follower_residual"] = fm.follower_residual;
    j["leader_residual"] = fm.leader_residual;
    j["delta_T"] = fm.delta_T;
    j["V_u1"] = fm.V_u1;
    j["V_x1"] = fm.V_x1;
    j["V_u2"] = fm.V_u2;
    j["V_x2"] = fm.V_x2;
    return j;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}

namespace {
std::string csv_escape(const std::string& field) {
    bool needs_quote = field.find_first_of(",\"\r\n") != std::string::npos;
    if (!needs_quote) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

std::string format_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}
}  // namespace

void CsvWriter::add_row(const std::vector<std::string>& row) { rows_.push_back(row); }

void CsvWriter::add_row(const std::vector<double>& row) {
    std::vector<std::string> r;
    r.reserve(row.size());
    for (double v : row) r.push_back(format_double(v));
    rows_.push_back(std::move(r));
}

void CsvWriter::write(const std::string& path) const {
    std::ostringstream out;
    for (size_t i = 0; i < header_.size(); ++i) {
        if (i) out << ',';
        out << csv_escape(header_[i]);
    }
    out << "\r\n";
    for (const auto& row : rows_) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) out << ',';
            out << csv_escape(row[i]);
        }
        out << "\r\n";
    }
    write_text_file(path, out.str());
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::string text = read_text_file(path);
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    for (size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"') {
            in_quotes = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            if (!field.empty() || !row.empty()) {
                row.push_back(std::move(field));
                field.clear();
                rows.push_back(std::move(row));
                row.clear();
            }
        } else if (c != '\r') {
            field += c;
        }
    }
    if (!field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

struct AxisTicks {
    std::vector<double> values;
};

AxisTicks nice_ticks(double lo, double hi, int target = 5) {
    AxisTicks t;
    if (!(hi > lo)) hi = lo + 1.0;
    double span = hi - lo;
    double raw = span / target;
    double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (mag * m >= raw) {
            step = mag * m;
            break;
        }
    }
    double start = std::ceil(lo / step) * step;
    for (double v = start; v <= hi + 1e-12 * span; v += step) t.values.push_back(v);
    return t;
}

std::string fmt_tick(double v) {
    std::ostringstream ss;
    ss.precision(4);
    ss << v;
    return ss.str();
}

const char* kSeriesColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                               "#ff7f0e", "#8c564b"};

}  // namespace

void write_svg_chart(const std::string& path, const SvgChartSpec& spec) {
    const int W = 640, H = 420;
    const int ml = 70, mr = 20, mt = 40, mb = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : spec.series) {
        for (size_t i = 0; i < s.x.size(); ++i) {
            double y = s.y[i];
            if (spec.log_y && y <= 0) continue;
            double yy = spec.log_y ? std::log10(y) : y;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, yy);
            ymax = std::max(ymax, yy);
        }
    }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
    }
    if (ymin > ymax) {
        ymin = 0;
        ymax = 1;
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double x) {
        return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr);
    };
    auto py = [&](double y) {
        double yy = spec.log_y ? std::log10(y) : y;
        return H - mb - (yy - ymin) / (ymax - ymin) * (H - mt - mb);
    };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
        << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"15\">" << spec.title
        << "</text>\n";

    // Axes.
    svg << "<line x1=\"" << ml << "\" y1=\"" << (H - mb) << "\" x2=\"" << (W - mr)
        << "\" y2=\"" << (H - mb) << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << (H - mb) << "\" stroke=\"black\"/>\n";

    AxisTicks xt = nice_ticks(xmin, xmax);
    for (double v : xt.values) {
        double x = px(v);
        svg << "<line x1=\"" << x << "\" y1=\"" << (H - mb) << "\" x2=\"" << x
            << "\" y2=\"" << (H - mb + 4) << "\" stroke=\"black\"/>\n";
        svg << "<text x=\"" << x << "\" y=\"" << (H - mb + 18)
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
               "font-size=\"11\">"
            << fmt_tick(v) << "</text>\n";
    }
    AxisTicks yt = nice_ticks(ymin, ymax);
    for (double v : yt.values) {
        double y = H - mb - (v - ymin) / (ymax - ymin) * (H - mt - mb);
        svg << "<line x1=\"" << (ml - 4) << "\" y1=\"" << y << "\" x2=\"" << ml
            << "\" y2=\"" << y << "\" stroke=\"black\"/>\n";
        std::string label = spec.log_y ? ("1e" + fmt_tick(v)) : fmt_tick(v);
        svg << "<text x=\"" << (ml - 8) << "\" y=\"" << (y + 4)
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
            << label << "</text>\n";
    }
    svg << "<text x=\"" << (ml + (W - ml - mr) / 2) << "\" y=\"" << (H - 12)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
        << spec.x_label << "</text>\n";
    svg << "<text x=\"16\" y=\"" << (mt + (H - mt - mb) / 2)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
        << "transform=\"rotate(-90 16 " << (mt + (H - mt - mb) / 2) << ")\">"
        << spec.y_label << "</text>\n";

    int ci = 0;
    for (const auto& s : spec.series) {
        std::ostringstream pts;
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (spec.log_y && s.y[i] <= 0) continue;
            pts << px(s.x[i]) << "," << py(s.y[i]) << " ";
        }
        const char* color = kSeriesColors[ci % 6];
        svg << "<polyline fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"1.5\" points=\"" << pts.str() << "\"/>\n";
        svg << "<text x=\"" << (W - mr - 6) << "\" y=\"" << (mt + 16 * ci + 12)
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
            << "fill=\"" << color << "\">" << s.label << "</text>\n";
        ++ci;
    }
    svg << "</svg>\n";
    write_text_file(path, svg.str());
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) throw std::runtime_error("cannot create directory " + path);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f.good()) throw std::runtime_error("cannot open " + tmp);
        f << content;
    }
    fs::rename(tmp, path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_json_file(const std::string& path, const Json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

}  // namespace dfps
