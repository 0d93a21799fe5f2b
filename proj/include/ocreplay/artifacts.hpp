#pragma once

#include <string>
#include <vector>

#include "ocreplay/continual.hpp"
#include "ocreplay/matrix.hpp"

namespace ocreplay::artifacts {

// All CSV files start with a "# schema=1" comment line and format floating
// point fields with %.17g so identical runs produce identical bytes.
std::string format_double(double v);

void write_metrics_csv(const std::string& path,
                       const std::vector<continual::MetricsRecord>& records);
void write_openset_csv(const std::string& path,
                       const std::vector<continual::OpensetRow>& rows);
void write_omega_curve_csv(const std::string& path,
                           const std::vector<continual::OmegaCurvePoint>& pts);
void write_confusion_csv(const std::string& path, const Matrix& confusion);

// Binary PGM: "P5 <w> <h> 255" header followed by w*h gray bytes.
void write_pgm(const std::string& path, const double* pixels,
               std::size_t width, std::size_t height);

struct MetricsTable {
  std::vector<std::string> header;           // column names
  std::vector<std::vector<double>> rows;
};
MetricsTable read_metrics_csv(const std::string& path);

}  // namespace ocreplay::artifacts
