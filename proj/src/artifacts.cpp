#include "ocreplay/artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ocreplay::artifacts {

namespace {

std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_metrics_csv(const std::string& path,
                       const std::vector<continual::MetricsRecord>& records) {
  std::ofstream out = open_out(path);
  out << "# schema=1\n";
  out << "t,classes_seen,alpha_base,alpha_new,alpha_all,"
         "gamma_base,gamma_new,gamma_all,"
         "gamma_base_px,gamma_new_px,gamma_all_px,kl_all\n";
  for (const auto& r : records) {
    out << r.t << ',' << r.classes_seen << ',' << format_double(r.alpha_base)
        << ',' << format_double(r.alpha_new) << ','
        << format_double(r.alpha_all) << ',' << format_double(r.gamma_base)
        << ',' << format_double(r.gamma_new) << ','
        << format_double(r.gamma_all) << ',' << format_double(r.gamma_base_px)
        << ',' << format_double(r.gamma_new_px) << ','
        << format_double(r.gamma_all_px) << ',' << format_double(r.kl_all)
        << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_openset_csv(const std::string& path,
                       const std::vector<continual::OpensetRow>& rows) {
  std::ofstream out = open_out(path);
  out << "# schema=1\n";
  out << "criterion,dataset,threshold,percent_flagged\n";
  for (const auto& r : rows)
    out << r.criterion << ',' << r.dataset << ','
        << format_double(r.threshold) << ',' << format_double(r.percent_flagged)
        << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_omega_curve_csv(const std::string& path,
                           const std::vector<continual::OmegaCurvePoint>& pts) {
  std::ofstream out = open_out(path);
  out << "# schema=1\n";
  out << "omega,dataset,fraction_flagged\n";
  for (const auto& p : pts)
    out << format_double(p.omega) << ',' << p.dataset << ','
        << format_double(p.fraction_flagged) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_confusion_csv(const std::string& path, const Matrix& confusion) {
  std::ofstream out = open_out(path);
  out << "# schema=1\n";
  out << "true_class";
  for (std::size_t j = 0; j < confusion.cols; ++j) out << ",pred_" << j;
  out << '\n';
  for (std::size_t i = 0; i < confusion.rows; ++i) {
    out << i;
    for (std::size_t j = 0; j < confusion.cols; ++j)
      out << ',' << static_cast<long long>(confusion(i, j));
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_pgm(const std::string& path, const double* pixels,
               std::size_t width, std::size_t height) {
  std::ofstream out = open_out(path, true);
  out << "P5\n" << width << " " << height << "\n255\n";
  for (std::size_t i = 0; i < width * height; ++i) {
    const double v = std::clamp(pixels[i], 0.0, 1.0);
    out.put(static_cast<char>(
        static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

MetricsTable read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  MetricsTable table;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string field;
    if (table.header.empty()) {
      while (std::getline(ss, field, ',')) table.header.push_back(field);
      continue;
    }
    std::vector<double> row;
    while (std::getline(ss, field, ',')) row.push_back(std::stod(field));
    if (row.size() != table.header.size())
      throw std::runtime_error("ragged csv row in " + path);
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace ocreplay::artifacts
