#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "diffil/errors.hpp"

namespace diffil {

// One row of the append-only training log.
struct MetricsRow {
  int64_t iteration = 0;
  double disc_f = 0, disc_s = 0, gp = 0, unified_disc = 0;
  double gen_f = 0, gen_s = 0, unified_gen = 0;
  double recon = 0, fcon = 0;
  double label_seq = 0, label_frame = 0;
  double sac_critic = 0, sac_actor = 0, lambda_ent = 0;
  double reward_mean = 0;
  double eval_return_mean = 0, eval_return_std = 0;
  int64_t env_steps = 0;
  double wall_clock_s = 0;
};

inline const char* metrics_header() {
  return "iteration,disc_f,disc_s,gp,unified_disc,gen_f,gen_s,unified_gen,recon,fcon,"
         "label_seq,label_frame,sac_critic,sac_actor,lambda_ent,reward_mean,"
         "eval_return_mean,eval_return_std,env_steps,wall_clock_s";
}

std::string metrics_row_csv(const MetricsRow& r);
MetricsRow metrics_row_parse(const std::string& line);
std::vector<MetricsRow> load_metrics(const std::filesystem::path& csv);

class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& csv, bool append = false);
  void write(const MetricsRow& row);

 private:
  std::ofstream out_;
};

}  // namespace diffil
