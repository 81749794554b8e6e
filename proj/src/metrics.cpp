#include "diffil/metrics.hpp"

#include <cinttypes>
#include <cstdio>
#include <sstream>

namespace diffil {

std::string metrics_row_csv(const MetricsRow& r) {
  char buf[1024];
  std::snprintf(buf, sizeof(buf),
                "%" PRId64
                ",%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,"
                "%.17g,%.17g,%.17g,%" PRId64 ",%.3f",
                r.iteration, r.disc_f, r.disc_s, r.gp, r.unified_disc, r.gen_f, r.gen_s, r.unified_gen,
                r.recon, r.fcon, r.label_seq, r.label_frame, r.sac_critic, r.sac_actor, r.lambda_ent,
                r.reward_mean, r.eval_return_mean, r.eval_return_std, r.env_steps, r.wall_clock_s);
  return buf;
}

MetricsRow metrics_row_parse(const std::string& line) {
  MetricsRow r;
  std::istringstream is(line);
  std::string cell;
  auto next = [&]() -> std::string {
    if (!std::getline(is, cell, ',')) throw data_error("metrics row has too few columns: " + line);
    return cell;
  };
  r.iteration = std::stoll(next());
  r.disc_f = std::stod(next());
  r.disc_s = std::stod(next());
  r.gp = std::stod(next());
  r.unified_disc = std::stod(next());
  r.gen_f = std::stod(next());
  r.gen_s = std::stod(next());
  r.unified_gen = std::stod(next());
  r.recon = std::stod(next());
  r.fcon = std::stod(next());
  r.label_seq = std::stod(next());
  r.label_frame = std::stod(next());
  r.sac_critic = std::stod(next());
  r.sac_actor = std::stod(next());
  r.lambda_ent = std::stod(next());
  r.reward_mean = std::stod(next());
  r.eval_return_mean = std::stod(next());
  r.eval_return_std = std::stod(next());
  r.env_steps = std::stoll(next());
  r.wall_clock_s = std::stod(next());
  return r;
}

std::vector<MetricsRow> load_metrics(const std::filesystem::path& csv) {
  std::ifstream f(csv);
  if (!f) throw data_error("no metrics log at " + csv.string());
  std::string line;
  if (!std::getline(f, line)) throw data_error("metrics log is empty: " + csv.string());
  std::vector<MetricsRow> rows;
  while (std::getline(f, line))
    if (!line.empty()) rows.push_back(metrics_row_parse(line));
  return rows;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& csv, bool append) {
  const bool exists = std::filesystem::exists(csv);
  out_.open(csv, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw data_error("cannot open metrics log " + csv.string());
  if (!append || !exists) out_ << metrics_header() << "\n";
}

void MetricsWriter::write(const MetricsRow& row) {
  out_ << metrics_row_csv(row) << "\n";
  out_.flush();
}

}  // namespace diffil
