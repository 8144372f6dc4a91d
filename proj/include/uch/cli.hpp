#pragma once

// Command-line front end: synth, train, encode, eval, gradcheck.

#include <iosfwd>
#include <string>
#include <vector>

namespace uch::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // gradcheck mismatch, unexpected internal error
inline constexpr int kExitInvalid = 2;  // bad flags, bad input files, contract violations
inline constexpr int kExitDivergence = 3;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace uch::cli
