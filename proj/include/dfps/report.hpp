#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfps/dfps.hpp"

namespace dfps {

using Json = nlohmann::json;

Json config_to_json(const DfpsConfig& cfg);
DfpsConfig config_from_json(const Json& j);

Json record_to_json(const DiagnosticsRecord& rec);
Json final_metrics_to_json(const FinalMetrics& fm);

/// RFC-4180 CSV writer: comma separator, CRLF line endings, quoting only
/// where required.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header);
    void add_row(const std::vector<std::string>& row);
    void add_row(const std::vector<double>& row);
    void write(const std::string& path) const;
    int rows() const { return static_cast<int>(rows_.size()); }

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

/// Minimal CSV reader for regenerating plots (handles quoted fields).
std::vector<std::vector<std::string>> read_csv(const std::string& path);

/// Self-contained polyline SVG chart.
struct SvgSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

struct SvgChartSpec {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_y = false;
    std::vector<SvgSeries> series;
};

void write_svg_chart(const std::string& path, const SvgChartSpec& spec);

/// Create the directory (and parents); write text atomically via a
/// temp-file rename.
void ensure_dir(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

/// report.json serialization with stable key order and trailing newline.
void write_json_file(const std::string& path, const Json& j);

}  // namespace dfps
