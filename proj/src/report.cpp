#include "tmx/report.hpp"

#include <json.hpp>
#include <sstream>

namespace tmx {

using ordered_json = nlohmann::ordered_json;

std::string run_report_to_json(const RunReport& r) {
  ordered_json j;
  j["fingerprint"] = r.fingerprint;
  j["seed"] = r.seed;
  auto traj = ordered_json::array();
  for (const auto& p : r.trajectory)
    traj.push_back({{"step", p.step}, {"logloss", p.logloss}, {"auc", p.auc}});
  j["trajectory"] = traj;
  j["epoch_train_loss"] = r.epoch_train_loss;
  j["final_logloss"] = r.final_logloss;
  j["final_auc"] = r.final_auc;
  j["ceiling_auc"] = r.ceiling_auc;
  j["params_embedding"] = r.params_embedding;
  j["params_dense"] = r.params_dense;
  j["params_activated"] = r.params_activated;
  j["flops_per_batch"] = r.flops_per_batch;
  j["rejected_steps"] = r.rejected_steps;
  j["aborted"] = r.aborted;
  j["abort_reason"] = r.abort_reason;
  return j.dump(2);
}

RunReport run_report_from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text);
  RunReport r;
  r.fingerprint = j.value("fingerprint", "");
  r.seed = j.value("seed", uint64_t{0});
  if (j.contains("trajectory"))
    for (const auto& p : j["trajectory"]) {
      EvalPoint e;
      e.step = p.value("step", 0);
      e.logloss = p.value("logloss", 0.0);
      e.auc = p.value("auc", 0.0);
      r.trajectory.push_back(e);
    }
  r.epoch_train_loss = j.value("epoch_train_loss", std::vector<double>{});
  r.final_logloss = j.value("final_logloss", 0.0);
  r.final_auc = j.value("final_auc", 0.0);
  r.ceiling_auc = j.value("ceiling_auc", 0.0);
  r.params_embedding = j.value("params_embedding", int64_t{0});
  r.params_dense = j.value("params_dense", int64_t{0});
  r.params_activated = j.value("params_activated", int64_t{0});
  r.flops_per_batch = j.value("flops_per_batch", 0.0);
  r.rejected_steps = j.value("rejected_steps", 0);
  r.aborted = j.value("aborted", false);
  r.abort_reason = j.value("abort_reason", "");
  return r;
}

std::string render_reports(const std::vector<std::string>& names,
                           const std::vector<RunReport>& reports) {
  std::ostringstream os;
  os << "run                              AUC    logloss   ceiling   params(dense)  "
        "activated   GFLOPs/batch\n";
  for (size_t i = 0; i < reports.size(); ++i) {
    const RunReport& r = reports[i];
    char line[192];
    snprintf(line, sizeof(line), "%-30s %6.4f   %7.4f   %7.4f   %12lld   %9lld   %10.3f\n",
             (i < names.size() ? names[i] : "run").c_str(), r.final_auc,
             r.final_logloss, r.ceiling_auc,
             static_cast<long long>(r.params_dense),
             static_cast<long long>(r.params_activated),
             r.flops_per_batch / 1e9);
    os << line;
    if (r.aborted) os << "  aborted: " << r.abort_reason << "\n";
  }
  return os.str();
}

}  // namespace tmx
