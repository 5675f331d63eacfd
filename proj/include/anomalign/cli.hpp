#pragma once

#include <string>
#include <vector>

namespace anomalign {

/// Batch CLI entry point (commands: synthesize, align, finetune, evaluate).
/// Returns the process exit code: 0 success, 1 validation, 2 runtime failure.
int run_cli(const std::vector<std::string>& args);

} // namespace anomalign
