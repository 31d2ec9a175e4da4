#pragma once

// File formats:
//   dataset.csv          domain,identity,camera,f_0..f_{d-1}   (one row per sample)
//   round_records.csv    round,f_score,n_outliers,n_clusters,map,rank1
//   act_records.csv      round,model,map,rank1,f_score,n_outliers
//   selection_trace.csv  round,epoch,iter,parity,n_selected,threshold_loss
// Reals are written with 17 significant digits so they parse back bit-exactly.

#include "act/adapt.hpp"
#include "act/coteach.hpp"
#include "act/datasynth.hpp"

#include "json.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace act {

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_for_write(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StageError("cannot open " + path + " for writing");
  return os;
}

inline void write_dataset_csv(std::ostream& os, const FeatureSet& source, const FeatureSet& target) {
  require(source.dim() == target.dim(), "dataset: source and target widths differ");
  os << "domain,identity,camera";
  for (int c = 0; c < source.dim(); ++c) os << ",f_" << c;
  os << '\n';
  for (const FeatureSet* set : {&source, &target}) {
    for (std::size_t i = 0; i < set->size(); ++i) {
      os << to_string(set->domain) << ',' << set->identities[i] << ',' << set->cameras[i];
      for (Eigen::Index c = 0; c < set->features.cols(); ++c)
        os << ',' << format_real(set->features(static_cast<Eigen::Index>(i), c));
      os << '\n';
    }
  }
}

inline std::pair<FeatureSet, FeatureSet> read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("dataset: empty file");
  int dim = 0;
  {
    std::stringstream header(line);
    std::string cell;
    std::vector<std::string> cols;
    while (std::getline(header, cell, ',')) cols.push_back(cell);
    require(cols.size() >= 4 && cols[0] == "domain" && cols[1] == "identity" && cols[2] == "camera",
            "dataset: header must start with domain,identity,camera");
    dim = static_cast<int>(cols.size()) - 3;
  }
  std::vector<std::vector<double>> rows[2];
  FeatureSet sets[2];
  sets[0].domain = Domain::source;
  sets[1].domain = Domain::target;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    require(static_cast<int>(cells.size()) == dim + 3, "dataset: wrong column count on line " + std::to_string(line_no));
    int which = -1;
    if (cells[0] == "source") which = 0;
    if (cells[0] == "target") which = 1;
    require(which >= 0, "dataset: unknown domain '" + cells[0] + "' on line " + std::to_string(line_no));
    sets[which].identities.push_back(std::stoi(cells[1]));
    sets[which].cameras.push_back(std::stoi(cells[2]));
    std::vector<double> f(static_cast<std::size_t>(dim));
    for (int c = 0; c < dim; ++c) f[static_cast<std::size_t>(c)] = std::strtod(cells[static_cast<std::size_t>(c + 3)].c_str(), nullptr);
    rows[which].push_back(std::move(f));
  }
  for (int w = 0; w < 2; ++w) {
    sets[w].features.resize(static_cast<Eigen::Index>(rows[w].size()), dim);
    for (std::size_t r = 0; r < rows[w].size(); ++r)
      for (int c = 0; c < dim; ++c) sets[w].features(static_cast<Eigen::Index>(r), c) = rows[w][r][static_cast<std::size_t>(c)];
    sets[w].validate();
  }
  require(sets[0].size() > 0 && sets[1].size() > 0, "dataset: both domains need samples");
  return {std::move(sets[0]), std::move(sets[1])};
}

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"n_identities_source", c.n_identities_source},
          {"n_identities_target", c.n_identities_target},
          {"samples_per_identity", c.samples_per_identity},
          {"dim", c.dim},
          {"n_cameras", c.n_cameras},
          {"shift_scale", c.shift_scale},
          {"corrupt_frac", c.corrupt_frac},
          {"noise_sigma", c.noise_sigma},
          {"radius", c.radius},
          {"corrupt_sigma", c.corrupt_sigma},
          {"corrupt_rank", c.corrupt_rank},
          {"seed", c.seed}};
}

inline void write_round_records_csv(std::ostream& os, const std::vector<RoundRecord>& records) {
  os << "round,f_score,n_outliers,n_clusters,map,rank1\n";
  for (const auto& r : records)
    os << r.round << ',' << format_real(r.f_score) << ',' << r.n_outliers << ',' << r.n_clusters << ','
       << format_real(r.map) << ',' << format_real(r.rank1) << '\n';
}

inline void write_act_records_csv(std::ostream& os, const std::vector<ModelRoundRecord>& records) {
  os << "round,model,map,rank1,f_score,n_outliers\n";
  for (const auto& r : records)
    os << r.round << ',' << r.model << ',' << format_real(r.map) << ',' << format_real(r.rank1) << ','
       << format_real(r.f_score) << ',' << r.n_outliers << '\n';
}

inline void write_selection_trace_csv(std::ostream& os, const std::vector<SelectionEvent>& trace) {
  os << "round,epoch,iter,parity,n_selected,threshold_loss\n";
  for (const auto& e : trace)
    os << e.round << ',' << e.epoch << ',' << e.iter << ',' << e.parity << ',' << e.n_selected << ','
       << format_real(e.threshold_loss) << '\n';
}

}  // namespace act
