#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentflow/classify/train.hpp"
#include "latentflow/core/error.hpp"
#include "latentflow/core/tensor.hpp"

namespace latentflow {

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(p, mode | std::ios::trunc);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + '"';
}

}  // namespace detail

/// Shortest decimal form that reads back to the same double.
inline std::string format_number(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  for (int prec = 6; prec <= 17; ++prec) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    if (std::stod(os.str()) == v) return os.str();
  }
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// A CSV table with a fixed header; cells are strings or numbers.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  CsvTable& row() {
    rows_.emplace_back();
    return *this;
  }
  CsvTable& cell(const std::string& s) {
    rows_.back().push_back(s);
    return *this;
  }
  CsvTable& cell(double v) { return cell(format_number(v)); }
  CsvTable& cell(std::size_t v) { return cell(std::to_string(v)); }

  std::size_t size() const { return rows_.size(); }

  void write(const std::filesystem::path& path) const {
    auto out = detail::open_out(path);
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << detail::csv_field(cells[i]);
      out << '\n';
    };
    line(header_);
    for (const auto& r : rows_) {
      if (r.size() != header_.size()) throw Error("csv '" + path.string() + "': row width differs from header");
      line(r);
    }
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json j{{"epoch", r.epoch},
                           {"phase", r.phase},
                           {"perturbation", r.perturbation},
                           {"lr", r.lr},
                           {"train_acc", r.train_acc},
                           {"train_loss", r.train_loss}};
  j["test_acc"] = r.test_acc ? nlohmann::ordered_json(*r.test_acc) : nlohmann::ordered_json(nullptr);
  j["test_loss"] = r.test_loss ? nlohmann::ordered_json(*r.test_loss) : nlohmann::ordered_json(nullptr);
  j["grad_check_error"] = r.grad_check_error;
  j["grad_check_passed"] = r.grad_check_passed;
  j["attack_skipped_steps"] = r.attack_skipped_steps;
  return j;
}

/// One JSON object per epoch, one per line.
inline void write_history_jsonl(const std::filesystem::path& path, const TrainingHistory& h) {
  auto out = detail::open_out(path);
  for (const auto& r : h.epochs) out << to_json(r).dump() << '\n';
}

/// Binary PGM (P5) of a grid of equally sized gray images in [0,1].
/// `cells` is row-major over the grid; each cell holds height·width pixels.
template <class T>
void write_pgm_grid(const std::filesystem::path& path, const std::vector<std::vector<T>>& cells, std::size_t grid_rows,
                    std::size_t grid_cols, std::size_t height, std::size_t width, std::size_t pad = 1) {
  if (cells.size() != grid_rows * grid_cols) throw ShapeError("pgm grid: cell count does not match the grid");
  const std::size_t H = grid_rows * (height + pad) + pad, W = grid_cols * (width + pad) + pad;
  std::vector<unsigned char> img(H * W, 0);
  for (std::size_t gr = 0; gr < grid_rows; ++gr) {
    for (std::size_t gc = 0; gc < grid_cols; ++gc) {
      const auto& c = cells[gr * grid_cols + gc];
      if (c.size() != height * width) throw ShapeError("pgm grid: cell size does not match height x width");
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          const double v = std::clamp(static_cast<double>(c[y * width + x]), 0.0, 1.0);
          img[(pad + gr * (height + pad) + y) * W + pad + gc * (width + pad) + x] =
              static_cast<unsigned char>(std::lround(v * 255));
        }
      }
    }
  }
  auto out = detail::open_out(path, std::ios::binary);
  out << "P5\n" << W << ' ' << H << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

}  // namespace latentflow
