#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "lwnet/evaluator.hpp"

namespace lwnet::cli {

/// Runs one `lwnet` subcommand: train, predict, eval, adapt, compare,
/// report or synth. Returns 0 on success, 1 on a runtime error and the
/// parser's code on bad flags; diagnostics go to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

/// `key=value` lines, one per field.
std::string format_eval_report(const EvalReport& r);
std::string format_bootstrap_report(const BootstrapReport& r);

}  // namespace lwnet::cli
