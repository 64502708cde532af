#pragma once

#include "tmx/train.hpp"

namespace tmx {

std::string run_report_to_json(const RunReport& r);
RunReport run_report_from_json(const std::string& text);

// Side-by-side text table over several run reports.
std::string render_reports(const std::vector<std::string>& names,
                           const std::vector<RunReport>& reports);

}  // namespace tmx
